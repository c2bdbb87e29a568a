"""Per-frame pipeline: track, decide keyframe, refine pose, update the map,
finetune the tracker. Enforces the alternation contract (exactly one phase
mutates one parameter group at a time) with checksums at phase boundaries.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, DatasetError
from .geometry import Pose
from .keyframes import Keyframe, KeyframeStore
from .mapper import CellLossGrid, LossWeights, optimize_map, optimize_pose
from .optim import Adam
from .scene_mlp import ImplicitMap
from .tracker import FeatureExtractor, finetune_extractor, track

PHASES = ("tracking", "pose_opt", "map_opt", "finetune")


@dataclass
class SystemConfig:
    """All knobs in one place; the numeric defaults are the operating point
    the system is tuned for (desk-scale scenes, meters)."""

    scene_bounds: tuple = (((-2.0, -2.0, 0.0), (2.0, 2.0, 3.0)))
    far: float = 8.0
    near: float = 0.05
    b: int = 1024
    s_p: int = 144
    tr: float = 0.10
    n_rep: int = 10
    sigma_cull: float = 0.5
    sigma_covis: float = 0.3
    k_corr: int = 200
    n_kf: int = 10
    lr_mlp: float = 0.005
    lr_pose: float = 0.005
    pose_decay: float = 0.7
    pose_decay_every: int = 10
    lr_conv: float = 0.0001
    kf_translation: float = 0.10
    kf_rotation_deg: float = 10.0
    n_map_iters: int = 60
    n_pose_iters: int = 50
    n_init_iters: int = 120
    pose_align_rounds: int = 12
    pose_align_rays: int = 1500
    pose_align_samples: int = 30
    loss_weights: LossWeights = field(default_factory=LossWeights)
    finetune_w_p: float = 1.0
    finetune_iters: int = 5
    finetune_rays: int = 256
    rho_lost: float = 0.05
    covis_stride: int = 4
    pos_freqs: int = 10
    dir_freqs: int = 4
    mesh_resolution: float = 0.05
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        data = dict(data)
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            data["loss_weights"] = LossWeights(**data["loss_weights"])
        if "scene_bounds" in data:
            lo, hi = data["scene_bounds"]
            data["scene_bounds"] = (tuple(lo), tuple(hi))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _digest(chunks) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def checksum_map(scene_map: ImplicitMap) -> str:
    named = scene_map.named_parameters()
    return _digest(named[k].data.tobytes() for k in sorted(named))


def checksum_poses(store: KeyframeStore) -> str:
    return _digest(kf.pose.matrix().tobytes() for kf in store.ordered())


def checksum_outconv(extractor: FeatureExtractor) -> str:
    return _digest(p.data.tobytes() for p in extractor.trainable_parameters())


def checksum_trunk(extractor: FeatureExtractor) -> str:
    return extractor.trunk_checksum().hex()


# What each phase is allowed to mutate. Everything else must hold still.
PHASE_ALLOWED = {
    "tracking": frozenset(),
    "pose_opt": frozenset(),
    "map_opt": frozenset({"map"}),
    "finetune": frozenset({"outconv"}),
}


class PhaseMonitor:
    """Checksums the parameter groups at phase boundaries and records any
    mutation a phase was not entitled to make."""

    GROUPS = ("map", "poses", "outconv", "trunk")

    def __init__(self):
        self.last: dict[str, str] | None = None
        self.violations: list[tuple[int, str, str]] = []
        self.checks = 0

    def _snapshot(self, state: "SystemState") -> dict[str, str]:
        return {
            "map": checksum_map(state.map),
            "poses": checksum_poses(state.store),
            "outconv": checksum_outconv(state.extractor),
            "trunk": checksum_trunk(state.extractor),
        }

    def rebase(self, state: "SystemState") -> None:
        """Absorb a legitimate structural change (keyframe insertion)."""
        self.last = self._snapshot(state)

    def check(self, state: "SystemState", phase: str, frame_index: int) -> None:
        current = self._snapshot(state)
        self.checks += 1
        if self.last is not None:
            allowed = PHASE_ALLOWED[phase]
            for group in self.GROUPS:
                if current[group] != self.last[group] and group not in allowed:
                    self.violations.append((frame_index, phase, group))
        self.last = current


@dataclass
class SystemState:
    map: ImplicitMap
    store: KeyframeStore
    extractor: FeatureExtractor
    last_pose: Pose
    trajectory: list
    phase: str
    rng: np.random.Generator
    map_optimizer: Adam
    conv_optimizer: Adam
    monitor: PhaseMonitor
    next_kf_id: int = 1
    frame_index: int = 0
    keyframe_events: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ContractViolation(f"unknown phase {phase}")
        self.phase = phase


def initialize(first_frame, cfg: SystemConfig) -> SystemState:
    """Keyframe 0 at the identity, map bootstrapped on it."""
    if not first_frame.valid_depth.any():
        raise DatasetError("first frame has no valid depth; cannot initialize")
    scene_map = ImplicitMap(cfg.scene_bounds, pos_freqs=cfg.pos_freqs,
                            dir_freqs=cfg.dir_freqs, seed=cfg.seed)
    extractor = FeatureExtractor(seed=cfg.seed + 1)
    store = KeyframeStore(covis_stride=cfg.covis_stride)
    rng = np.random.default_rng(cfg.seed + 2)

    kf0 = Keyframe(frame=first_frame, pose=Pose.identity(), cell_losses=CellLossGrid(), id=0)
    store.insert(kf0, cfg.sigma_cull, cfg.sigma_covis)

    state = SystemState(
        map=scene_map,
        store=store,
        extractor=extractor,
        last_pose=Pose.identity(),
        trajectory=[(first_frame.timestamp, Pose.identity())],
        phase="map_opt",
        rng=rng,
        map_optimizer=Adam(scene_map.parameters(), lr=cfg.lr_mlp),
        conv_optimizer=Adam(extractor.trainable_parameters(), lr=cfg.lr_conv),
        monitor=PhaseMonitor(),
    )
    state.monitor.rebase(state)
    result = optimize_map(scene_map, [kf0], cfg, rng, optimizer=state.map_optimizer,
                          n_iters=cfg.n_init_iters,
                          loss_log=_loss_logger(state, 0))
    state.monitor.check(state, "map_opt", 0)
    state.keyframe_events.append({"frame": 0, "kf_id": 0, "culled": False,
                                  "map_loss": result.final_loss})
    return state


def _loss_logger(state: SystemState, frame_index: int):
    def log(it, l_p, l_fs, l_tr, total):
        state.loss_rows.append((frame_index, it, l_p, l_fs, l_tr, total))
    return log


def process_frame(state: SystemState, frame, cfg: SystemConfig) -> SystemState:
    """Advance the system by one frame (Fig-2-style pipeline step)."""
    state.frame_index += 1
    idx = state.frame_index
    ref_kf = state.store.latest()

    state.set_phase("tracking")
    tracked = track(state.extractor, frame, ref_kf, cfg, fallback_pose=state.last_pose)
    state.monitor.check(state, "tracking", idx)

    motion_t = tracked.pose.translation_to(ref_kf.pose)
    motion_r = tracked.pose.rotation_angle_to(ref_kf.pose)
    is_keyframe = tracked.lost or motion_t > cfg.kf_translation or motion_r > cfg.kf_rotation_deg

    if is_keyframe:
        candidate = Keyframe(frame=frame, pose=tracked.pose, cell_losses=CellLossGrid(),
                             id=state.next_kf_id)
        state.next_kf_id += 1

        state.set_phase("pose_opt")
        pose_result = optimize_pose(state.map, candidate, cfg, state.rng)
        state.monitor.check(state, "pose_opt", idx)

        if pose_result.failed:
            # keep the tracker's (possibly fallback) pose, skip the keyframe
            state.trajectory.append((frame.timestamp, tracked.pose))
            state.last_pose = tracked.pose
            return state
        candidate.pose = pose_result.pose

        insert = state.store.insert(candidate, cfg.sigma_cull, cfg.sigma_covis)
        state.monitor.rebase(state)
        if insert.culled:
            # spend the culled frame's observations once, then drop it
            others = state.store.ordered()
            if len(others) > cfg.n_rep:
                pick = state.rng.choice(len(others), size=cfg.n_rep, replace=False)
                others = [others[i] for i in sorted(pick)]
            replay = [candidate] + others
        else:
            replay = state.store.select_replay(candidate, cfg.n_rep, state.rng)

        state.set_phase("map_opt")
        map_result = optimize_map(state.map, replay, cfg, state.rng,
                                  optimizer=state.map_optimizer,
                                  loss_log=_loss_logger(state, idx))
        state.monitor.check(state, "map_opt", idx)
        state.keyframe_events.append({"frame": idx, "kf_id": candidate.id,
                                      "culled": insert.culled,
                                      "map_loss": map_result.final_loss})
        recorded = pose_result.pose
    else:
        recorded = tracked.pose
        if len(state.store) >= cfg.n_kf:
            state.set_phase("finetune")
            finetune_extractor(state.extractor, state.map, state.store, cfg,
                               state.rng, optimizer=state.conv_optimizer)
            state.monitor.check(state, "finetune", idx)

    state.trajectory.append((frame.timestamp, recorded))
    state.last_pose = recorded
    return state


@dataclass
class SlamResult:
    state: SystemState
    config: SystemConfig

    @property
    def trajectory(self):
        return self.state.trajectory

    @property
    def violations(self):
        return self.state.monitor.violations


def run_slam(frames, cfg: SystemConfig, progress=None) -> SlamResult:
    """Run the full pipeline over an iterable of frames."""
    state = None
    for i, frame in enumerate(frames):
        if state is None:
            state = initialize(frame, cfg)
        else:
            state = process_frame(state, frame, cfg)
        if progress is not None:
            progress(i, state)
    if state is None:
        raise DatasetError("no frames in sequence")
    return SlamResult(state=state, config=cfg)
