"""Map and pose optimization: rendering losses, active pixel sampling,
MLP weight updates over replayed keyframes, and keyframe pose refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import renderer
from .autodiff import Tensor
from .errors import ContractViolation
from .geometry import Pose, apply_increment, apply_increment_t, exp_so3
from .optim import Adam

GRID = 8
ACTIVE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss term weights. w_fs/w_tr/w_p drive mapping and pose refinement;
    w_d/w_r belong to tracker finetuning."""

    w_fs: float = 1.0
    w_tr: float = 6.0
    w_p: float = 0.1
    w_d: float = 1.0
    w_r: float = 1.0

    def __post_init__(self):
        for name in ("w_fs", "w_tr", "w_p", "w_d", "w_r"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be strictly positive")


def grid_bounds(extent: int) -> np.ndarray:
    """Integer cell boundaries splitting ``extent`` pixels into GRID slabs."""
    return (np.arange(GRID + 1) * extent) // GRID


def cell_of(rows, cols, height: int, width: int) -> np.ndarray:
    """Flat 8x8 cell index of each pixel, consistent with grid_bounds."""
    rb = grid_bounds(height)
    cb = grid_bounds(width)
    ci = np.searchsorted(rb, np.asarray(rows), side="right") - 1
    cj = np.searchsorted(cb, np.asarray(cols), side="right") - 1
    ci = np.clip(ci, 0, GRID - 1)
    cj = np.clip(cj, 0, GRID - 1)
    return ci * GRID + cj


@dataclass
class CellLossGrid:
    """Per-cell mean loss over an 8x8 image partition."""

    losses: np.ndarray = field(default_factory=lambda: np.zeros((GRID, GRID)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros((GRID, GRID), dtype=np.int64))

    def update(self, rows, cols, per_pixel_loss, height: int, width: int) -> None:
        """Refresh touched cells with the mean of the new per-pixel losses."""
        cells = cell_of(rows, cols, height, width)
        sums = np.zeros(GRID * GRID)
        hits = np.zeros(GRID * GRID, dtype=np.int64)
        np.add.at(sums, cells, np.asarray(per_pixel_loss, dtype=np.float64))
        np.add.at(hits, cells, 1)
        touched = hits > 0
        flat = self.losses.reshape(-1)
        flat[touched] = sums[touched] / hits[touched]
        cnt = self.counts.reshape(-1)
        cnt[touched] = hits[touched]


def active_sample_pixels(
    grid: CellLossGrid,
    budget: int,
    invert: bool,
    rng: np.random.Generator,
    height: int,
    width: int,
) -> np.ndarray:
    """Draw ``budget`` pixels allocated across the 8x8 grid by cell loss.

    Allocation: n_c = max(1, round(budget * score_c / sum(scores))) with
    score = loss (invert=False) or 1/(loss + eps) (invert=True). Rounding
    residual is settled one pixel at a time: additions cycle through cells in
    descending score order, removals cycle ascending and skip cells already
    at the floor of one, so the allocation stays monotone in score and sums
    to the budget exactly. Returns an (budget, 2) int array of (row, col).
    """
    if budget < GRID * GRID:
        raise ContractViolation(f"budget {budget} below the one-per-cell floor of {GRID * GRID}")
    loss = grid.losses.reshape(-1).astype(np.float64)
    scores = 1.0 / (loss + ACTIVE_EPS) if invert else loss.copy()
    total = scores.sum()
    if total <= 0:
        scores = np.ones_like(scores)
        total = scores.sum()
    alloc = np.maximum(1, np.rint(budget * scores / total).astype(np.int64))
    residual = budget - int(alloc.sum())
    # stable sorts keep equal-score cells in index order
    desc = np.argsort(-scores, kind="stable")
    if residual > 0:
        i = 0
        while residual > 0:
            alloc[desc[i % len(desc)]] += 1
            residual -= 1
            i += 1
    elif residual < 0:
        asc = desc[::-1]
        i = 0
        while residual < 0:
            c = asc[i % len(asc)]
            if alloc[c] > 1:
                alloc[c] -= 1
                residual += 1
            i += 1

    rb = grid_bounds(height)
    cb = grid_bounds(width)
    out = np.empty((budget, 2), dtype=np.int64)
    pos = 0
    for cell in range(GRID * GRID):
        n = int(alloc[cell])
        ci, cj = divmod(cell, GRID)
        out[pos:pos + n, 0] = rng.integers(rb[ci], rb[ci + 1], size=n)
        out[pos:pos + n, 1] = rng.integers(cb[cj], cb[cj + 1], size=n)
        pos += n
    return out


# -- losses ----------------------------------------------------------------------


def photometric_loss(rendered_rgb, measured_rgb) -> Tensor:
    """Mean per-pixel Euclidean color error over the batch."""
    rendered_rgb = ad.as_tensor(rendered_rgb)
    measured = np.asarray(measured_rgb, dtype=rendered_rgb.dtype)
    if rendered_rgb.shape[0] == 0:
        raise ContractViolation("photometric loss over an empty batch")
    if measured.shape != rendered_rgb.shape:
        raise ContractViolation("rendered/measured batches differ in shape")
    diff = rendered_rgb - ad.as_tensor(measured)
    return ad.sqrt((diff * diff).sum(axis=-1)).mean()


def depth_loss(rendered_depth, measured_depth, valid_mask=None) -> Tensor:
    """Mean absolute depth error; invalid (mask False) rays contribute 0."""
    rendered_depth = ad.as_tensor(rendered_depth)
    measured = np.asarray(measured_depth, dtype=rendered_depth.dtype)
    err = ad.absolute(rendered_depth - ad.as_tensor(measured))
    if valid_mask is None:
        return err.mean()
    valid_mask = np.asarray(valid_mask, dtype=bool)
    n = max(int(valid_mask.sum()), 1)
    return (err * valid_mask.astype(rendered_depth.dtype)).sum() * (1.0 / n)


def geometric_loss(predicted_sdf, sdf_targets, region_labels, tr: float,
                   weights: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Free-space plus truncation supervision over a (B, S) sample block.

    Each term is the per-ray mean of |prediction − target| over that ray's
    subset, averaged over all B rays; a ray with an empty subset contributes
    0 while still counting in the denominator. Returns (total, L_fs, L_tr).
    """
    sdf = ad.as_tensor(predicted_sdf)
    b = sdf.shape[0]
    labels = np.asarray(region_labels)
    targets = np.asarray(sdf_targets, dtype=sdf.dtype)

    free = (labels == renderer.FREE_SPACE)
    trunc = (labels == renderer.TRUNCATION)
    free_f = free.astype(sdf.dtype)
    trunc_f = trunc.astype(sdf.dtype)
    n_free = np.maximum(free.sum(axis=1), 1).astype(sdf.dtype)
    n_trunc = np.maximum(trunc.sum(axis=1), 1).astype(sdf.dtype)

    fs_err = ad.absolute(sdf - tr) * ad.as_tensor(free_f)
    l_fs = (fs_err.sum(axis=1) / ad.as_tensor(n_free)).sum() * (1.0 / b)
    tr_err = ad.absolute(sdf - ad.as_tensor(targets)) * ad.as_tensor(trunc_f)
    l_tr = (tr_err.sum(axis=1) / ad.as_tensor(n_trunc)).sum() * (1.0 / b)
    total = l_fs * weights.w_fs + l_tr * weights.w_tr
    return total, l_fs, l_tr


def per_ray_losses(rendered: renderer.RenderedRays, measured_rgb, sdf_targets,
                   region_labels, tr: float, weights: LossWeights) -> np.ndarray:
    """Scalar per-ray loss (geometric + weighted photometric), tape-free.

    Feeds the CellLossGrid refresh; mirrors the batch loss definitions
    ray by ray.
    """
    sdf = rendered.sdf.data
    labels = np.asarray(region_labels)
    targets = np.asarray(sdf_targets)
    free = labels == renderer.FREE_SPACE
    trunc = labels == renderer.TRUNCATION
    n_free = np.maximum(free.sum(axis=1), 1)
    n_trunc = np.maximum(trunc.sum(axis=1), 1)
    l_fs = (np.abs(sdf - tr) * free).sum(axis=1) / n_free
    l_tr = (np.abs(sdf - targets) * trunc).sum(axis=1) / n_trunc
    l_p = np.linalg.norm(rendered.rgb.data - np.asarray(measured_rgb), axis=-1)
    return weights.w_fs * l_fs + weights.w_tr * l_tr + weights.w_p * l_p


# -- ray assembly ------------------------------------------------------------------


def rays_for_pixels(frame, pose: Pose, pixels: np.ndarray):
    """Constant ray arrays for (N, 2) integer pixels of a posed frame.

    The returned measured depth is distance along the ray (z-depth times the
    pixel's ray scale), matching the sample/render convention.
    """
    rows = pixels[:, 0]
    cols = pixels[:, 1]
    dirs_cam = renderer.pixel_directions(rows, cols, frame.intrinsics)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    rgb = frame.rgb[rows, cols]
    depth = frame.depth[rows, cols] * renderer.pixel_ray_scale(rows, cols, frame.intrinsics)
    return origins, dirs, dirs_cam, rgb, depth


# -- the two optimizations ----------------------------------------------------------


@dataclass
class MapOptResult:
    iterations: int
    initial_loss: float
    final_loss: float
    trace: list
    aborted: int = 0


def optimize_map(scene_map, replay_set, cfg, rng: np.random.Generator,
                 optimizer: Adam | None = None, n_iters: int | None = None,
                 loss_log=None) -> MapOptResult:
    """Descend L_g + w_p·L_p on the MLP weights over the replayed keyframes.

    Each iteration splits the pixel budget evenly across the replay set,
    draws pixels by active sampling from each keyframe's loss grid, renders
    one combined batch, and takes a single Adam step on the map parameters.
    Poses are never touched; each keyframe's loss grid is refreshed from the
    latest per-pixel losses. A persistent optimizer may be passed in so Adam
    moments survive across keyframe events.
    """
    if not replay_set:
        raise ContractViolation("empty replay set")
    for kf in replay_set:
        if kf.pose is None:
            raise ContractViolation(f"keyframe {kf.id} has no pose")
    if optimizer is None:
        optimizer = Adam(scene_map.parameters(), lr=cfg.lr_mlp)
    iters = cfg.n_map_iters if n_iters is None else n_iters
    weights = cfg.loss_weights

    n_kf = len(replay_set)
    share = cfg.b // n_kf
    extra = cfg.b - share * n_kf
    trace = []
    aborted = 0
    initial = final = float("nan")
    for it in range(iters):
        batches = []
        for j, kf in enumerate(replay_set):
            budget = share + (1 if j < extra else 0)
            pixels = active_sample_pixels(kf.cell_losses, budget, False, rng,
                                          kf.frame.intrinsics.height, kf.frame.intrinsics.width)
            origins, dirs, _, rgb, depth = rays_for_pixels(kf.frame, kf.pose, pixels)
            depths, targets, labels = renderer.sample_batch(depth, cfg.s_p, cfg.tr, cfg.near, cfg.far, rng)
            batches.append((kf, pixels, origins, dirs, rgb, targets, labels, depths))

        origins = np.concatenate([b[2] for b in batches])
        dirs = np.concatenate([b[3] for b in batches])
        rgb = np.concatenate([b[4] for b in batches])
        targets = np.concatenate([b[5] for b in batches])
        labels = np.concatenate([b[6] for b in batches])
        depths = np.concatenate([b[7] for b in batches])

        out = renderer.render_rays(scene_map, origins, dirs, depths, cfg.tr)
        l_g, l_fs, l_tr = geometric_loss(out.sdf, targets, labels, cfg.tr, weights)
        l_p = photometric_loss(out.rgb, rgb)
        loss = l_g + l_p * weights.w_p

        if not np.isfinite(loss.data):
            aborted += 1
            trace.append((it, float("nan"), float("nan"), float("nan"), float("nan")))
            continue
        if it == 0:
            initial = float(loss.data)
        final = float(loss.data)
        trace.append((it, float(l_p.data), float(l_fs.data), float(l_tr.data), final))
        if loss_log is not None:
            loss_log(it, float(l_p.data), float(l_fs.data), float(l_tr.data), final)

        per_ray = per_ray_losses(out, rgb, targets, labels, cfg.tr, weights)
        pos = 0
        for kf, pixels, *_ in batches:
            n = pixels.shape[0]
            kf.cell_losses.update(pixels[:, 0], pixels[:, 1], per_ray[pos:pos + n],
                                  kf.frame.intrinsics.height, kf.frame.intrinsics.width)
            pos += n

        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
    return MapOptResult(iterations=iters, initial_loss=initial, final_loss=final,
                        trace=trace, aborted=aborted)


@dataclass
class PoseOptResult:
    pose: Pose
    best_loss: float
    failed: bool
    trace: list


def map_surface_normals(scene_map, points: np.ndarray, eps: float = 1e-2
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Unit SDF gradients at world points by central differences.

    Returns (normals, raw gradient magnitudes); the magnitude is ~1 near
    trained surfaces and collapses wherever the map is unconstrained, so
    callers can use it as a confidence mask.
    """
    view = np.zeros_like(points, dtype=np.float32)
    view[:, 2] = 1.0
    grad = np.zeros_like(points, dtype=np.float64)
    for k in range(3):
        hi = points.copy()
        hi[:, k] += eps
        lo = points.copy()
        lo[:, k] -= eps
        s_hi, _ = scene_map.query_np(hi.astype(np.float32), view)
        s_lo, _ = scene_map.query_np(lo.astype(np.float32), view)
        grad[:, k] = (np.asarray(s_hi, np.float64) - np.asarray(s_lo, np.float64)) / (2 * eps)
    mag = np.linalg.norm(grad, axis=1)
    return grad / np.maximum(mag[:, None], 1e-8), mag


# Surface search window along each ray, relative to the measured depth.
ALIGN_BACK = 0.38
ALIGN_FWD = 0.14
# Per-solve trust region: a single linearized step never moves further than this.
ALIGN_MAX_T = 0.03
ALIGN_MAX_R = np.deg2rad(2.0)
# Median along-ray offset below which the pose already agrees with the map
# and alignment would only chase the map's own reconstruction bias.
ALIGN_ENGAGE = 0.01


def align_to_map(scene_map, frame, base: Pose, cfg) -> Pose:
    """Closed-form alignment of a depth frame to the frozen map.

    Point-to-plane refinement against the map's zero crossings: a dense pixel
    grid is cast through the current pose estimate, the first positive-to-
    negative SDF transition along each ray marks the map surface, and a
    robust least-squares solve (residuals projected on map normals, Cauchy
    weights on a shrinking scale, trust-region-capped steps) updates the
    pose. Wrong-surface grabs are soaked up by the robust weights rather
    than a hard along-ray gate, which would discard exactly the oblique
    rays that pin translation parallel to the dominant planes.
    """
    height, width = frame.depth.shape
    stride = max(1, int(np.ceil(np.sqrt(height * width / max(cfg.pose_align_rays, 1)))))
    rr, cc = np.meshgrid(np.arange(0, height, stride),
                         np.arange(0, width, stride), indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    keep = frame.depth[rr, cc] > 0
    rr, cc = rr[keep], cc[keep]
    if rr.size < 50:
        return base
    dirs_cam = renderer.pixel_directions(rr, cc, frame.intrinsics)
    md = frame.depth[rr, cc] * renderer.pixel_ray_scale(rr, cc, frame.intrinsics)
    n_samp = cfg.pose_align_samples
    frac = np.linspace(0.0, 1.0, n_samp)
    samp = (md[:, None] - ALIGN_BACK) + frac[None, :] * (ALIGN_BACK + ALIGN_FWD)
    samp = np.maximum(samp, cfg.near + 1e-3)

    cur = base
    scales = np.geomspace(0.08, 0.02, max(cfg.pose_align_rounds, 1))
    for round_i, scale in enumerate(scales):
        dirs_w = dirs_cam @ cur.rotation.T
        origins = np.tile(cur.translation, (rr.size, 1))
        pts = origins[:, None, :] + dirs_w[:, None, :] * samp[:, :, None]
        view = np.repeat(dirs_w, n_samp, axis=0).astype(np.float32)
        sdf, _ = scene_map.query_np(pts.reshape(-1, 3).astype(np.float32), view)
        s = np.asarray(sdf, np.float64).reshape(rr.size, n_samp)

        cross = (s[:, :-1] > 0) & (s[:, 1:] <= 0)
        has = cross.any(axis=1)
        idx = np.argmax(cross, axis=1)
        lane = np.arange(rr.size)
        s0, s1 = s[lane, idx], s[lane, idx + 1]
        d0, d1 = samp[lane, idx], samp[lane, idx + 1]
        t = np.where(s0 - s1 > 1e-12, s0 / np.maximum(s0 - s1, 1e-12), 0.0)
        d_surf = np.where(has, d0 + t * (d1 - d0), 0.0)
        ok = has & (d_surf > cfg.near)
        if ok.sum() < 50:
            break
        if round_i == 0 and np.median(np.abs(d_surf[ok] - md[ok])) < ALIGN_ENGAGE:
            break
        x = origins[ok] + dirs_w[ok] * d_surf[ok, None]
        y = origins[ok] + dirs_w[ok] * md[ok, None]
        normals, mag = map_surface_normals(scene_map, x)
        trusted = mag > 0.2
        if trusted.sum() < 50:
            break
        x, y, normals = x[trusted], y[trusted], normals[trusted]

        centroid = y.mean(axis=0)
        moved = 0.0
        for _ in range(4):
            resid = np.einsum("ij,ij->i", normals, y - x)
            w = 1.0 / (1.0 + (resid / scale) ** 2)
            jac = np.concatenate([np.cross(y - centroid, normals), normals], axis=1)
            h = (jac * w[:, None]).T @ jac
            g = (jac * w[:, None]).T @ resid
            h += np.eye(6) * (1e-8 * np.trace(h) / 6 + 1e-12)
            xi = np.linalg.solve(h, -g)
            cap = min(1.0, ALIGN_MAX_R / max(np.linalg.norm(xi[:3]), 1e-12),
                      ALIGN_MAX_T / max(np.linalg.norm(xi[3:]), 1e-12))
            xi *= cap
            r_inc = exp_so3(xi[:3])
            y = (y - centroid) @ r_inc.T + centroid + xi[3:]
            cur = Pose(r_inc @ cur.rotation,
                       r_inc @ (cur.translation - centroid) + centroid + xi[3:])
            moved += np.linalg.norm(xi[3:]) + np.linalg.norm(xi[:3])
        if moved < 1e-5:
            break
    return cur


def optimize_pose(scene_map, kf, cfg, rng: np.random.Generator,
                  n_iters: int | None = None) -> PoseOptResult:
    """Refine a keyframe pose against the frozen map (inverse rendering).

    Two stages share one fixed ray batch drawn by inverted active sampling
    (well-mapped regions are the trustworthy ones when the pose is in
    question). First a closed-form point-to-plane alignment hops the
    estimate into the narrow loss basin around the true pose; rendering
    losses are nearly flat more than a few centimeters out, so gradient
    steps alone cannot cross that plateau. Then a 6-vector increment
    (axis-angle + translation) left-multiplying the aligned pose descends
    L_g + w_p·L_p by Adam at lr_pose with the 0.7-every-10 step decay.
    The lowest-loss pose wins, with the untouched initial pose always in
    the running; a non-finite loss aborts and flags failure. The map is
    read-only throughout.
    """
    iters = cfg.n_pose_iters if n_iters is None else n_iters
    weights = cfg.loss_weights
    base = kf.pose
    frame = kf.frame
    intr = frame.intrinsics

    # one fixed batch for the whole refinement: resampling every iteration
    # buries the shallow basin around the optimum under sampling noise
    pixels = active_sample_pixels(kf.cell_losses, cfg.b, True, rng, intr.height, intr.width)
    rows, cols = pixels[:, 0], pixels[:, 1]
    dirs_cam = renderer.pixel_directions(rows, cols, intr)
    measured_rgb = frame.rgb[rows, cols]
    measured_depth = frame.depth[rows, cols] * renderer.pixel_ray_scale(rows, cols, intr)
    depths, targets, labels = renderer.sample_batch(measured_depth, cfg.s_p, cfg.tr,
                                                    cfg.near, cfg.far, rng)

    def batch_loss_at(pose: Pose) -> float:
        with ad.no_grad():
            dirs = dirs_cam @ pose.rotation.T
            origins = np.broadcast_to(pose.translation, dirs.shape)
            out = renderer.render_rays(scene_map, origins, dirs, depths, cfg.tr)
            l_g, _, _ = geometric_loss(out.sdf, targets, labels, cfg.tr, weights)
            total = l_g + photometric_loss(out.rgb, measured_rgb) * weights.w_p
        return float(total.data)

    initial_loss = batch_loss_at(base)
    if not np.isfinite(initial_loss):
        return PoseOptResult(pose=base, best_loss=float("inf"), failed=True, trace=[])
    best_loss = initial_loss
    best_pose = base

    anchor = align_to_map(scene_map, frame, base, cfg) if cfg.pose_align_rounds > 0 else base

    delta = Tensor(np.zeros(6), requires_grad=True, name="pose_increment")
    opt = Adam([delta], lr=cfg.lr_pose, decay_factor=cfg.pose_decay,
               decay_every=cfg.pose_decay_every)

    trace = [(-1, initial_loss)]
    for it in range(iters):
        r_t, t_t = apply_increment_t(delta, anchor)
        dirs = ad.as_tensor(dirs_cam.astype(delta.dtype)) @ ad.transpose(r_t)
        origins = ad.as_tensor(np.zeros((pixels.shape[0], 3), dtype=delta.dtype)) + t_t

        out = renderer.render_rays(scene_map, origins, dirs, depths, cfg.tr)
        l_g, _, _ = geometric_loss(out.sdf, targets, labels, cfg.tr, weights)
        loss = l_g + photometric_loss(out.rgb, measured_rgb) * weights.w_p

        if not np.isfinite(loss.data):
            return PoseOptResult(pose=base, best_loss=float("inf"), failed=True, trace=trace)
        value = float(loss.data)
        trace.append((it, value))
        if value < best_loss:
            best_loss = value
            best_pose = apply_increment(delta.data.copy(), anchor)

        opt.zero_grad()
        ad.backward(loss)
        opt.step()
    return PoseOptResult(pose=best_pose, best_loss=best_loss, failed=False, trace=trace)
