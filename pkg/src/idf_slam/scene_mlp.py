"""The map itself: one MLP regressing truncated SDF and color.

Positional-encoded 3-D position goes through 8 ReLU layers of width 256
(with the encoding re-injected at layer 4); an SDF head reads the trunk
directly, and a color head reads the trunk concatenated with the encoded
view direction, so geometry is view-independent while color is not.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation


class PositionalEncoding:
    """NeRF-style sinusoidal encoding.

    Maps each input component x to (x,) + (sin(2^k π x), cos(2^k π x)) for
    k = 0..L−1, laid out as [x | sin(2^0 π x), cos(2^0 π x) | sin(2^1 π x),
    cos(2^1 π x) | ...] with full input-width blocks.
    """

    def __init__(self, num_freqs: int, include_input: bool = True):
        self.num_freqs = num_freqs
        self.include_input = include_input
        self.freqs = (2.0 ** np.arange(num_freqs)) * np.pi

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_freqs + (1 if self.include_input else 0))

    def encode(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise ContractViolation("positional encoding requires finite inputs")
        parts = [x] if self.include_input else []
        for f in self.freqs:
            scaled = x * float(f)
            parts.append(ad.sin(scaled))
            parts.append(ad.cos(scaled))
        return ad.concatenate(parts, axis=-1)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, name: str, params: dict) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
    params[f"{name}.bias"] = Tensor(b, requires_grad=True, name=f"{name}.bias")


class ImplicitMap:
    """MLP scene map: (position, view direction) → (T-SDF meters, RGB in [0,1]).

    World positions are normalized into [−1,1]^3 via ``scene_bounds`` (a
    (min_xyz, max_xyz) box) before encoding. Layer names are stable for
    checkpointing: "hidden.0" … "hidden.7", "sdf_head", "color_head".
    """

    HIDDEN_WIDTH = 256
    HIDDEN_DEPTH = 8
    SKIP_LAYER = 4

    def __init__(
        self,
        scene_bounds,
        pos_freqs: int = 10,
        dir_freqs: int = 4,
        seed: int = 0,
        hidden_width: int | None = None,
    ):
        lo, hi = scene_bounds
        self.bounds_min = np.asarray(lo, dtype=np.float64).reshape(3)
        self.bounds_max = np.asarray(hi, dtype=np.float64).reshape(3)
        if np.any(self.bounds_max <= self.bounds_min):
            raise ContractViolation("scene bounds must have positive extent")
        self.pos_enc = PositionalEncoding(pos_freqs)
        self.dir_enc = PositionalEncoding(dir_freqs)
        width = hidden_width if hidden_width is not None else self.HIDDEN_WIDTH
        self.width = width
        enc_p = self.pos_enc.output_dim(3)
        enc_d = self.dir_enc.output_dim(3)

        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        in_dim = enc_p
        for i in range(self.HIDDEN_DEPTH):
            if i == self.SKIP_LAYER:
                in_dim += enc_p
            _init_linear(rng, in_dim, width, f"hidden.{i}", self.params)
            in_dim = width
        _init_linear(rng, width, 1, "sdf_head", self.params)
        _init_linear(rng, width + enc_d, 3, "color_head", self.params)

    @property
    def scene_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bounds_min, self.bounds_max

    # -- parameter plumbing ----------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            if name not in state:
                raise ContractViolation(f"checkpoint is missing tensor {name}")
            if state[name].shape != tensor.shape:
                raise ContractViolation(
                    f"checkpoint tensor {name} has shape {state[name].shape}, expected {tensor.shape}")
            tensor.data = state[name].astype(tensor.data.dtype)

    # -- forward -----------------------------------------------------------------

    def normalize(self, p) -> Tensor:
        p = ad.as_tensor(p)
        center = (self.bounds_min + self.bounds_max) / 2.0
        half = (self.bounds_max - self.bounds_min) / 2.0
        return (p - center.astype(p.dtype)) * (1.0 / half).astype(p.dtype)

    def query(self, p, d) -> tuple[Tensor, Tensor]:
        """Evaluate the map at world points ``p`` with unit view directions ``d``.

        Accepts (3,) or (N, 3); returns (sdf, rgb) with matching leading shape.
        Pure and deterministic; differentiable w.r.t. parameters, p, and d.
        """
        p = ad.as_tensor(p)
        d = ad.as_tensor(d)
        single = p.data.ndim == 1
        if single:
            p = ad.reshape(p, (1, 3))
            d = ad.reshape(d, (1, 3))
        if p.shape[-1] != 3 or d.shape != p.shape:
            raise ContractViolation(f"expected matching (N,3) inputs, got {p.shape} and {d.shape}")
        if not (np.all(np.isfinite(p.data)) and np.all(np.isfinite(d.data))):
            raise ContractViolation("query requires finite inputs")
        norms = np.linalg.norm(d.data, axis=-1)
        tol = 1e-6 if d.dtype == np.float64 else 2e-6
        if np.abs(norms - 1.0).max() > tol:
            raise ContractViolation("view directions must be unit length")

        enc_p = self.pos_enc.encode(self.normalize(p))
        enc_d = self.dir_enc.encode(d)
        h = enc_p
        for i in range(self.HIDDEN_DEPTH):
            if i == self.SKIP_LAYER:
                h = ad.concatenate([h, enc_p], axis=-1)
            h = ad.relu(h @ self.params[f"hidden.{i}.weight"] + self.params[f"hidden.{i}.bias"])
        sdf = h @ self.params["sdf_head.weight"] + self.params["sdf_head.bias"]
        color_in = ad.concatenate([h, enc_d], axis=-1)
        rgb = ad.sigmoid(color_in @ self.params["color_head.weight"] + self.params["color_head.bias"])
        sdf = ad.reshape(sdf, (p.shape[0],))
        if single:
            return sdf[0], rgb[0]
        return sdf, rgb

    def query_np(self, p: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tape-free query for evaluation and meshing."""
        with ad.no_grad():
            sdf, rgb = self.query(p, d)
        return sdf.data, rgb.data

    def sdf_grid(self, xs: np.ndarray, ys: np.ndarray, zs: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Sample the SDF on a regular grid, chunked to bound memory."""
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        fixed_dir = np.zeros_like(grid)
        fixed_dir[:, 2] = 1.0
        out = np.empty(grid.shape[0], dtype=np.float64)
        for start in range(0, grid.shape[0], chunk):
            stop = min(start + chunk, grid.shape[0])
            sdf, _ = self.query_np(grid[start:stop], fixed_dir[start:stop])
            out[start:stop] = sdf
        return out.reshape(len(xs), len(ys), len(zs))
