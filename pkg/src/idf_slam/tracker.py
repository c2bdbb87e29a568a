"""Feature-based neural tracking: convolutional per-pixel features,
ratio-weighted kNN correspondences under a per-cell cap, weighted Procrustes
pose solve, and online finetuning of the extractor's last layer against the
frozen map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import renderer
from .autodiff import Tensor
from .errors import ContractViolation, TrackerLost
from .geometry import Pose, backproject
from .mapper import depth_loss, photometric_loss
from .optim import Adam

MATCH_STRIDE = 2
SELECT_GRID = 4
HEAD_INIT_SCALE = 0.1


def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 zero-padded convolution keeping H×W; w is (k, k, Cin, Cout)."""
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    h, wdt = x.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * wdt, k * k * x.shape[2])
    out = cols @ w.reshape(k * k * x.shape[2], -1) + b
    return out.reshape(h, wdt, -1)


class FeatureExtractor:
    """Small fully convolutional net: 7×7 and 3×3 trunk convs (frozen after
    seeding) and a trainable 1×1 outconv producing F-dim per-pixel features,
    L2-normalized per pixel. No striding or pooling, so spatial dims are
    preserved."""

    F = 32
    C1 = 16
    C2 = 32

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.layer1_w = uniform((7, 7, 3, self.C1), 7 * 7 * 3)
        self.layer1_b = uniform((self.C1,), 7 * 7 * 3)
        self.layer2_w = uniform((3, 3, self.C1, self.C2), 3 * 3 * self.C1)
        self.layer2_b = uniform((self.C2,), 3 * 3 * self.C1)
        # The unit normalization in head() makes the outconv scale invisible
        # to matching, but it sets how far a fixed-lr Adam step moves feature
        # *directions*. A small init keeps online finetuning able to reshape
        # the embedding within a few hundred steps at lr_conv.
        self.outconv_w = Tensor(HEAD_INIT_SCALE * uniform((self.C2, self.F), self.C2),
                                requires_grad=True, name="outconv.weight")
        self.outconv_b = Tensor(HEAD_INIT_SCALE * uniform((self.F,), self.C2),
                                requires_grad=True, name="outconv.bias")
        self._trunk_cache: dict[int, np.ndarray] = {}

    def trainable_parameters(self) -> list[Tensor]:
        return [self.outconv_w, self.outconv_b]

    def trunk_checksum(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.layer1_w, self.layer1_b, self.layer2_w, self.layer2_b):
            h.update(arr.tobytes())
        return h.digest()

    def trunk(self, image: np.ndarray, cache_key: int | None = None) -> np.ndarray:
        """Frozen trunk activation (H, W, C2); cached per keyframe id."""
        if cache_key is not None and cache_key in self._trunk_cache:
            return self._trunk_cache[cache_key]
        x = np.asarray(image, dtype=np.float64)
        h1 = np.maximum(_conv2d(x, self.layer1_w, self.layer1_b), 0.0)
        h2 = np.maximum(_conv2d(h1, self.layer2_w, self.layer2_b), 0.0)
        if cache_key is not None:
            self._trunk_cache[cache_key] = h2
        return h2

    def head(self, trunk_vals: np.ndarray) -> Tensor:
        """Outconv + per-pixel L2 normalization over (N, C2) trunk samples.

        Runs on the tape, so finetuning gradients reach outconv; wrap in
        no_grad for plain tracking.
        """
        x = ad.as_tensor(trunk_vals.astype(ad.default_dtype()))
        f = x @ self.outconv_w + self.outconv_b
        norm_sq = (f * f).sum(axis=-1, keepdims=True)
        return f * (norm_sq + 1e-12) ** -0.5

    def extract(self, image: np.ndarray, cache_key: int | None = None) -> np.ndarray:
        """Full-resolution (H, W, F) normalized feature map, tape-free."""
        t = self.trunk(image, cache_key)
        h, w = t.shape[:2]
        with ad.no_grad():
            f = self.head(t.reshape(h * w, self.C2))
        return f.data.reshape(h, w, self.F)


def extract_features(extractor: FeatureExtractor, image: np.ndarray) -> np.ndarray:
    if np.asarray(image).min() < 0 or np.asarray(image).max() > 1:
        raise ContractViolation("image values must lie in [0,1]")
    return extractor.extract(image)


@dataclass
class CorrespondenceSet:
    """Matched 3-D point pairs with confidences.

    ``weights`` is a Tensor on the finetuning path (gradients flow back into
    the features) and may be read via ``.data`` everywhere else.
    """

    p_c: np.ndarray
    p_r: np.ndarray
    weights: Tensor
    source_cells: np.ndarray
    pixels_c: np.ndarray
    pixels_r: np.ndarray


def _lattice(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    rr, cc = np.meshgrid(np.arange(0, height, MATCH_STRIDE),
                         np.arange(0, width, MATCH_STRIDE), indexing="ij")
    return rr.ravel(), cc.ravel()


def match_lattice(
    feat_c: Tensor,
    pix_c: tuple[np.ndarray, np.ndarray],
    feat_r: Tensor,
    pix_r: tuple[np.ndarray, np.ndarray],
    depth_c: np.ndarray,
    depth_r: np.ndarray,
    intr,
    k_corr: int,
) -> CorrespondenceSet:
    """Core matcher over pre-gathered lattice features (unit-normalized).

    Candidate weight is the Lowe ratio 1 − d1/d2 over feature-space
    distances; selection is greedy by weight under a floor(K/16) cap per
    4×4 image cell of the current frame.
    """
    if k_corr < 16:
        raise ContractViolation("K must be at least 16 (one per 4x4 cell)")
    rows_c, cols_c = pix_c
    rows_r, cols_r = pix_r
    n_c = rows_c.size
    if n_c == 0 or rows_r.size < 2:
        raise TrackerLost("not enough valid-depth pixels to match")

    # unit features: squared distance = 2 - 2 cos
    dist_sq = ad.relu(2.0 - (feat_c @ ad.transpose(feat_r)) * 2.0)
    d2_np = dist_sq.data
    nn2 = np.argpartition(d2_np, 1, axis=1)[:, :2]
    first_closer = d2_np[np.arange(n_c), nn2[:, 0]] <= d2_np[np.arange(n_c), nn2[:, 1]]
    i1 = np.where(first_closer, nn2[:, 0], nn2[:, 1])
    i2 = np.where(first_closer, nn2[:, 1], nn2[:, 0])

    rows_idx = np.arange(n_c)
    d1 = ad.sqrt(dist_sq[(rows_idx, i1)])
    d2 = ad.sqrt(dist_sq[(rows_idx, i2)])
    ambiguous = d2.data <= 1e-12
    d2_safe = ad.where(ambiguous, np.ones_like(d2.data), d2)
    w_all = ad.where(ambiguous, np.zeros_like(d2.data), 1.0 - d1 / d2_safe)

    cap = k_corr // (SELECT_GRID * SELECT_GRID)
    rb = (np.arange(SELECT_GRID + 1) * intr.height) // SELECT_GRID
    cb = (np.arange(SELECT_GRID + 1) * intr.width) // SELECT_GRID
    ci = np.searchsorted(rb, rows_c, side="right") - 1
    cj = np.searchsorted(cb, cols_c, side="right") - 1
    cells = np.clip(ci, 0, SELECT_GRID - 1) * SELECT_GRID + np.clip(cj, 0, SELECT_GRID - 1)

    order = np.argsort(-w_all.data, kind="stable")
    cell_counts = np.zeros(SELECT_GRID * SELECT_GRID, dtype=np.int64)
    selected = []
    for idx in order:
        c = cells[idx]
        if cell_counts[c] >= cap:
            continue
        cell_counts[c] += 1
        selected.append(idx)
        if len(selected) >= k_corr:
            break
    if len(selected) < 3:
        raise TrackerLost(f"only {len(selected)} correspondences")
    sel = np.array(selected)

    w = w_all[sel]
    p_c = backproject(rows_c[sel], cols_c[sel], depth_c[sel], intr)
    ref_sel = i1[sel]
    p_r = backproject(rows_r[ref_sel], cols_r[ref_sel], depth_r[ref_sel], intr)
    return CorrespondenceSet(
        p_c=p_c,
        p_r=p_r,
        weights=w,
        source_cells=cells[sel],
        pixels_c=np.stack([rows_c[sel], cols_c[sel]], axis=1),
        pixels_r=np.stack([rows_r[ref_sel], cols_r[ref_sel]], axis=1),
    )


def find_correspondences(feat_c: np.ndarray, feat_r: np.ndarray, depth_c: np.ndarray,
                         depth_r: np.ndarray, intr, k_corr: int) -> CorrespondenceSet:
    """Match full (H, W, F) feature maps over the stride-2 lattice.

    Both frames use the same lattice, so two identical frames match every
    pixel to itself.
    """
    rr, cc = _lattice(intr.height, intr.width)
    val_c = depth_c[rr, cc] > 0
    val_r = depth_r[rr, cc] > 0
    fc = ad.as_tensor(feat_c[rr[val_c], cc[val_c]])
    fr = ad.as_tensor(feat_r[rr[val_r], cc[val_r]])
    return match_lattice(
        fc, (rr[val_c], cc[val_c]),
        fr, (rr[val_r], cc[val_r]),
        depth_c[rr, cc][val_c], depth_r[rr, cc][val_r], intr, k_corr,
    )


# -- weighted Procrustes ------------------------------------------------------------


def rigid_from_weighted_points(p_c: np.ndarray, p_r: np.ndarray, w: np.ndarray) -> Pose:
    """Closed-form weighted least-squares rigid transform (reference-from-current).

    Minimizes Σ w ‖p_r − (R p_c + t)‖² via SVD of the weighted cross-covariance.
    """
    p_c = np.asarray(p_c, dtype=np.float64)
    p_r = np.asarray(p_r, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if p_c.shape[0] < 3:
        raise TrackerLost("need at least 3 correspondences")
    sw = w.sum()
    if sw <= 0:
        raise TrackerLost("correspondence weights sum to zero")
    mu_c = w @ p_c / sw
    mu_r = w @ p_r / sw
    m = ((p_r - mu_r) * w[:, None]).T @ (p_c - mu_c)
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-10 * max(s[0], 1e-300):
        raise TrackerLost("degenerate correspondence geometry")
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return Pose(r, mu_r - r @ mu_c)


def weighted_procrustes(corr: CorrespondenceSet) -> Pose:
    return rigid_from_weighted_points(corr.p_c, corr.p_r, corr.weights.data)


def weighted_procrustes_t(p_c: np.ndarray, p_r: np.ndarray, w: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable route: gradients flow through the weights into the
    rotation and translation. Returns (R, t) tensors, reference-from-current."""
    dtype = ad.default_dtype()
    pc_t = ad.as_tensor(p_c.astype(dtype))
    pr_t = ad.as_tensor(p_r.astype(dtype))
    sw = w.sum()
    wn = ad.reshape(w / sw, (-1, 1))
    mu_c = (wn * pc_t).sum(axis=0)
    mu_r = (wn * pr_t).sum(axis=0)
    m = ad.transpose(wn * (pr_t - mu_r)) @ (pc_t - mu_c)
    r = ad.rotation_from_covariance(m)
    t = mu_r - r @ mu_c
    return r, t


def correspondence_loss(p_c: np.ndarray, p_r: np.ndarray, w, r, t) -> Tensor:
    """Mean weighted 3-D residual ‖p_r − (R p_c + t)‖, normalized by |C|."""
    pred = ad.as_tensor(p_c.astype(ad.default_dtype())) @ ad.transpose(ad.as_tensor(r)) + t
    diff = ad.as_tensor(p_r.astype(ad.default_dtype())) - pred
    dist = ad.sqrt((diff * diff).sum(axis=-1))
    return (ad.as_tensor(w) * dist).sum() * (1.0 / p_c.shape[0])


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    order = np.argsort(values)
    v = values[order]
    cw = np.cumsum(weights[order])
    if cw[-1] <= 0:
        return float("inf")
    return float(v[np.searchsorted(cw, 0.5 * cw[-1])])


# -- tracking ------------------------------------------------------------------------


@dataclass
class TrackResult:
    pose: Pose
    lost: bool
    residual: float
    n_correspondences: int = 0
    relative: Pose | None = None
    correspondences: CorrespondenceSet | None = None


def track(extractor: FeatureExtractor, frame_c, kf_r, cfg, fallback_pose: Pose) -> TrackResult:
    """Estimate frame_c's world pose against reference keyframe kf_r.

    Lost when correspondences fail, the solve degenerates, or the weighted
    median post-solve residual exceeds ρ_lost; the fallback (previous) pose
    is returned in that case.
    """
    intr = frame_c.intrinsics
    try:
        with ad.no_grad():
            trunk_c = extractor.trunk(frame_c.rgb)
            trunk_r = extractor.trunk(kf_r.frame.rgb, cache_key=kf_r.id)
            rr, cc = _lattice(intr.height, intr.width)
            val_c = frame_c.depth[rr, cc] > 0
            val_r = kf_r.frame.depth[rr, cc] > 0
            if not val_c.any() or not val_r.any():
                raise TrackerLost("no valid depth on the matching lattice")
            fc = extractor.head(trunk_c[rr[val_c], cc[val_c]])
            fr = extractor.head(trunk_r[rr[val_r], cc[val_r]])
            corr = match_lattice(
                fc, (rr[val_c], cc[val_c]), fr, (rr[val_r], cc[val_r]),
                frame_c.depth[rr, cc][val_c], kf_r.frame.depth[rr, cc][val_r],
                intr, cfg.k_corr,
            )
        rel = weighted_procrustes(corr)
    except TrackerLost:
        return TrackResult(pose=fallback_pose, lost=True, residual=float("inf"))

    dists = np.linalg.norm(corr.p_r - rel.transform(corr.p_c), axis=1)
    residual = weighted_median(dists, corr.weights.data)
    lost = residual > cfg.rho_lost
    pose = fallback_pose if lost else kf_r.pose.compose(rel)
    return TrackResult(pose=pose, lost=lost, residual=residual,
                       n_correspondences=corr.p_c.shape[0], relative=rel,
                       correspondences=corr)


# -- finetuning ----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    iterations_run: int = 0
    iterations_skipped: int = 0
    losses: list = field(default_factory=list)


def finetune_extractor(extractor: FeatureExtractor, scene_map, store, cfg,
                       rng: np.random.Generator, optimizer: Adam | None = None,
                       n_iters: int | None = None) -> FinetuneResult:
    """One finetuning round: descend w_p·L_p + w_d·L_d + w_r·L_r on outconv only.

    Gated on the store holding at least N_kf keyframes. Each iteration draws
    a random consecutive keyframe pair, runs the differentiable track path
    (features → ratio weights → weighted Procrustes → world pose), renders
    sampled pixels of the later keyframe through the frozen map at that pose,
    and steps Adam at lr_conv. Tracking failure skips the iteration.
    """
    result = FinetuneResult()
    kfs = store.ordered()
    if len(kfs) < cfg.n_kf:
        return result
    if optimizer is None:
        optimizer = Adam(extractor.trainable_parameters(), lr=cfg.lr_conv)
    iters = cfg.finetune_iters if n_iters is None else n_iters
    weights = cfg.loss_weights

    for _ in range(iters):
        i = int(rng.integers(0, len(kfs) - 1))
        kf_r, kf_c = kfs[i], kfs[i + 1]
        intr = kf_c.frame.intrinsics
        try:
            trunk_c = extractor.trunk(kf_c.frame.rgb, cache_key=kf_c.id)
            trunk_r = extractor.trunk(kf_r.frame.rgb, cache_key=kf_r.id)
            rr, cc = _lattice(intr.height, intr.width)
            val_c = kf_c.frame.depth[rr, cc] > 0
            val_r = kf_r.frame.depth[rr, cc] > 0
            fc = extractor.head(trunk_c[rr[val_c], cc[val_c]])
            fr = extractor.head(trunk_r[rr[val_r], cc[val_r]])
            corr = match_lattice(
                fc, (rr[val_c], cc[val_c]), fr, (rr[val_r], cc[val_r]),
                kf_c.frame.depth[rr, cc][val_c], kf_r.frame.depth[rr, cc][val_r],
                intr, cfg.k_corr,
            )
            r_rel, t_rel = weighted_procrustes_t(corr.p_c, corr.p_r, corr.weights)
        except TrackerLost:
            result.iterations_skipped += 1
            continue

        dtype = ad.default_dtype()
        r_ref = kf_r.pose.rotation.astype(dtype)
        t_ref = kf_r.pose.translation.astype(dtype)
        r_world = ad.as_tensor(r_ref) @ r_rel
        t_world = ad.as_tensor(r_ref) @ t_rel + ad.as_tensor(t_ref)

        vr, vc = np.nonzero(kf_c.frame.depth > 0)
        take_n = min(cfg.finetune_rays, vr.size)
        pick = rng.choice(vr.size, size=take_n, replace=False)
        rows, cols = vr[pick], vc[pick]
        dirs_cam = renderer.pixel_directions(rows, cols, intr).astype(dtype)
        dirs = ad.as_tensor(dirs_cam) @ ad.transpose(r_world)
        origins = ad.as_tensor(np.zeros((take_n, 3), dtype=dtype)) + t_world
        measured_rgb = kf_c.frame.rgb[rows, cols]
        measured_depth = (kf_c.frame.depth[rows, cols]
                          * renderer.pixel_ray_scale(rows, cols, intr))
        depths, _, _ = renderer.sample_batch(measured_depth, cfg.s_p, cfg.tr,
                                             cfg.near, cfg.far, rng)

        out = renderer.render_rays(scene_map, origins, dirs, depths, cfg.tr)
        l_p = photometric_loss(out.rgb, measured_rgb)
        l_d = depth_loss(out.depth, measured_depth)
        l_r = correspondence_loss(corr.p_c, corr.p_r, corr.weights, r_rel, t_rel)
        loss = l_p * cfg.finetune_w_p + l_d * weights.w_d + l_r * weights.w_r
        if not np.isfinite(loss.data):
            result.iterations_skipped += 1
            continue

        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
        result.iterations_run += 1
        result.losses.append(float(loss.data))
    return result


def dump_correspondences(path, corr: CorrespondenceSet) -> None:
    """Debug CSV: one row per correspondence (pixels and weight)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_c", "col_c", "row_r", "col_r", "weight"])
        for pc, pr, w in zip(corr.pixels_c, corr.pixels_r, corr.weights.data):
            writer.writerow([int(pc[0]), int(pc[1]), int(pr[0]), int(pr[1]), float(w)])
