"""Low-resolution, depth-truncated selector that scores the high-resolution grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, gelu
from .vit import ViTParams, bilinear_matrix, resize_grid, vit_forward

MAP_HEAD_KEYS = ("map_head.fc1.weight", "map_head.fc1.bias",
                 "map_head.fc2.weight", "map_head.fc2.bias")


@dataclass
class SelectorConfig:
    low_res: int = 32
    low_depth: int = 2
    map_hidden: int = 64
    high_grid: int = 8
    patch_size: int = 8

    def __post_init__(self):
        if self.low_res % self.patch_size:
            raise ValueError(f"low_res {self.low_res} not divisible by patch size {self.patch_size}")

    @property
    def low_grid(self) -> int:
        return self.low_res // self.patch_size

    @property
    def block(self) -> int:
        """Side of the score block each low-res token emits."""
        return math.ceil(self.high_grid / self.low_grid)


@dataclass
class SelectorOutput:
    map: Tensor        # (..., N_high, N_high) raw scores
    cls: Tensor        # (..., D)
    registers: Tensor  # (..., G, D)


def downsample(image: np.ndarray, low_res: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of ``(..., R, R, C)`` to ``low_res``."""
    image = np.asarray(image)
    R = image.shape[-2]
    if low_res > R:
        raise ValueError(f"low_res {low_res} exceeds input side {R}")
    if low_res == R:
        return image.copy()
    m = bilinear_matrix(R, low_res, np.float64)
    x = np.moveaxis(image.astype(np.float64), -1, -3)  # (..., C, R, R)
    out = m @ x @ m.T
    return np.moveaxis(out, -3, -1).astype(image.dtype)


def init_map_head(params: ViTParams, config: SelectorConfig, rng: np.random.Generator,
                  std: float = 0.02) -> None:
    """Fresh small-random map head with zero biases, added to ``params`` in place."""
    D = params["cls_token"].shape[-1]
    dtype = params["cls_token"].dtype
    q2 = config.block ** 2
    params["map_head.fc1.weight"] = Tensor((rng.standard_normal((D, config.map_hidden)) / math.sqrt(D))
                                           .astype(dtype), requires_grad=True)
    params["map_head.fc1.bias"] = Tensor(np.zeros(config.map_hidden, dtype), requires_grad=True)
    params["map_head.fc2.weight"] = Tensor((rng.standard_normal((config.map_hidden, q2)) * std)
                                           .astype(dtype), requires_grad=True)
    params["map_head.fc2.bias"] = Tensor(np.zeros(q2, dtype), requires_grad=True)


def map_head(patch_tokens: Tensor, params: ViTParams, config: SelectorConfig) -> Tensor:
    """Per-token two-layer FFN emitting a ``q x q`` score block per low-res patch.

    Blocks tile an ``(N_low*q)^2`` grid row-major; when that is not ``N_high``
    the grid is bilinearly resized.
    """
    n_low, q = config.low_grid, config.block
    *lead, T, _ = patch_tokens.shape
    if T != n_low * n_low:
        raise ShapeError(f"map head expects {n_low * n_low} patch tokens, got {T}")
    h = gelu(patch_tokens @ params["map_head.fc1.weight"] + params["map_head.fc1.bias"])
    s = h @ params["map_head.fc2.weight"] + params["map_head.fc2.bias"]
    nl = len(lead)
    s = s.reshape(*lead, n_low, n_low, q, q).transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3)
    side = n_low * q
    s = s.reshape(*lead, side, side)
    if side != config.high_grid:
        s = resize_grid(s.reshape(*lead, side, side, 1), config.high_grid)
        s = s.reshape(*lead, config.high_grid, config.high_grid)
    return s


def selector_forward(image_high: np.ndarray, params: ViTParams, config: SelectorConfig) -> SelectorOutput:
    """downsample -> embed -> first ``low_depth`` blocks -> map head on patch tokens."""
    low = downsample(image_high, config.low_res).astype(params["cls_token"].dtype)
    trace = vit_forward(params, image=low, depth_limit=config.low_depth)
    z = trace.final_tokens
    G = params["reg_tokens"].shape[0]
    return SelectorOutput(map=map_head(z[..., 1 + G:, :], params, config),
                          cls=z[..., 0, :], registers=z[..., 1:1 + G, :])


def top_k_select(score_map, k: int) -> np.ndarray:
    """Linear indices of the ``k`` highest scores, ascending.

    Ties go to the lower row-major index. Accepts ``(N, N)`` or batched
    ``(..., N, N)`` maps (``Tensor`` or array); returns ``(..., k)``.
    """
    scores = score_map.data if isinstance(score_map, Tensor) else np.asarray(score_map)
    flat = scores.reshape(*scores.shape[:-2], -1)
    n = flat.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    order = np.argsort(-flat, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)
