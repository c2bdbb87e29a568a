"""Keyframe set management: covisibility scoring, culling, the covisible
graph, and replay selection for map optimization."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .geometry import Pose
from .mapper import CellLossGrid


@dataclass
class Keyframe:
    frame: object
    pose: Pose
    cell_losses: CellLossGrid
    id: int

    def __post_init__(self):
        if not self.pose.rotation_valid(tol=1e-6):
            raise ContractViolation(f"keyframe {self.id} pose rotation is not orthonormal")


def covisibility_score(kf_new: Keyframe, kf_old: Keyframe, stride: int = 4) -> float:
    """Fraction of kf_new's valid-depth pixels that project inside kf_old.

    Every stride-th pixel with valid depth is back-projected through its
    depth, mapped through the relative pose, and projected into kf_old; a
    pixel counts when it lands within the image bounds with positive depth.
    Occlusion is deliberately ignored. With stride=1 this is exactly the
    per-pixel definition (the arithmetic below is elementwise so it matches
    a scalar loop bit for bit).
    """
    intr = kf_new.frame.intrinsics
    if (np.array_equal(kf_old.pose.rotation, kf_new.pose.rotation)
            and np.array_equal(kf_old.pose.translation, kf_new.pose.translation)):
        # identical poses: the relative transform is the identity exactly;
        # inverse-compose would smear roundoff over the boundary pixels
        rel = Pose.identity()
    else:
        rel = kf_old.pose.inverse().compose(kf_new.pose)
    rows = np.arange(0, intr.height, stride)
    cols = np.arange(0, intr.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    d = kf_new.frame.depth[rr, cc]
    valid = d > 0
    total = int(valid.sum())
    if total == 0:
        warnings.warn(f"keyframe {kf_new.id} has no valid depth; covisibility set to 0")
        return 0.0
    rr = rr[valid].astype(np.float64)
    cc = cc[valid].astype(np.float64)
    d = d[valid].astype(np.float64)

    x = (cc - intr.cx) / intr.fx * d
    y = (rr - intr.cy) / intr.fy * d
    r = rel.rotation
    t = rel.translation
    px = r[0, 0] * x + r[0, 1] * y + r[0, 2] * d + t[0]
    py = r[1, 0] * x + r[1, 1] * y + r[1, 2] * d + t[1]
    pz = r[2, 0] * x + r[2, 1] * y + r[2, 2] * d + t[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * px / pz + intr.cx
        v = intr.fy * py / pz + intr.cy
    inside = (pz > 0) & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    return float(inside.sum()) / total


@dataclass
class InsertResult:
    culled: bool
    edges: dict[int, float] = field(default_factory=dict)
    max_score: float = 0.0


class KeyframeStore:
    """Single-writer keyframe set plus the covisible graph.

    Culled keyframes never enter the store, the graph, or replay sets.
    Edges are symmetric and only exist for scores strictly above σ_covis.
    """

    def __init__(self, covis_stride: int = 4):
        self.keyframes: dict[int, Keyframe] = {}
        self.edges: dict[int, dict[int, float]] = {}
        self.covis_stride = covis_stride

    def __len__(self) -> int:
        return len(self.keyframes)

    def __contains__(self, kf_id: int) -> bool:
        return kf_id in self.keyframes

    def ordered(self) -> list[Keyframe]:
        return [self.keyframes[i] for i in sorted(self.keyframes)]

    def latest(self) -> Keyframe:
        if not self.keyframes:
            raise ContractViolation("empty keyframe store")
        return self.keyframes[max(self.keyframes)]

    def adjacent(self, kf_id: int) -> set[int]:
        return set(self.edges.get(kf_id, {}))

    def insert(self, kf_new: Keyframe, sigma_cull: float, sigma_covis: float) -> InsertResult:
        """Cull kf_new if it overlaps an existing keyframe too much, else
        insert it with covisibility edges."""
        if kf_new.id in self.keyframes:
            raise ContractViolation(f"duplicate keyframe id {kf_new.id}")
        scores = {}
        for kf_id, kf in self.keyframes.items():
            scores[kf_id] = covisibility_score(kf_new, kf, stride=self.covis_stride)
        max_score = max(scores.values(), default=0.0)
        if max_score > sigma_cull:
            return InsertResult(culled=True, max_score=max_score)
        edges = {kf_id: s for kf_id, s in scores.items() if s > sigma_covis}
        self.keyframes[kf_new.id] = kf_new
        self.edges[kf_new.id] = dict(edges)
        for kf_id, s in edges.items():
            self.edges[kf_id][kf_new.id] = s
        return InsertResult(culled=False, edges=edges, max_score=max_score)

    def select_replay(self, kf_new: Keyframe, n_rep: int, rng: np.random.Generator) -> list[Keyframe]:
        """kf_new first, plus up to n_rep stored keyframes not adjacent to it."""
        if kf_new.id not in self.keyframes:
            raise ContractViolation("replay selection requires kf_new to be inserted")
        blocked = self.adjacent(kf_new.id) | {kf_new.id}
        eligible = sorted(i for i in self.keyframes if i not in blocked)
        if len(eligible) > n_rep:
            chosen = rng.choice(len(eligible), size=n_rep, replace=False)
            eligible = [eligible[i] for i in sorted(chosen)]
        return [kf_new] + [self.keyframes[i] for i in eligible]

    def dump_jsonl(self, path) -> None:
        lines = []
        for kf in self.ordered():
            lines.append(json.dumps({
                "id": kf.id,
                "pose": [float(v) for v in kf.pose.matrix().reshape(-1)],
                "edges": sorted([int(j), float(s)] for j, s in self.edges[kf.id].items()),
            }))
        Path(path).write_text("\n".join(lines) + "\n")
