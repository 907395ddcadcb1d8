"""Vision transformer with class + register tokens and depth-truncated forward passes.

Layout conventions: images are ``(R, R, C)`` (batched: ``(B, R, R, C)``);
patches are ordered row-major, top-left first, and a grid coordinate
``(row, col)`` linearizes to ``row * N + col``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, broadcast_to, concat, gelu, layer_norm, softmax

LAYER_KEYS = (
    "norm1.weight", "norm1.bias",
    "attn.qkv.weight", "attn.qkv.bias",
    "attn.proj.weight", "attn.proj.bias",
    "norm2.weight", "norm2.bias",
    "mlp.fc1.weight", "mlp.fc1.bias",
    "mlp.fc2.weight", "mlp.fc2.bias",
)


@dataclass
class ViTConfig:
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    patch_size: int = 8
    num_registers: int = 4
    ffn_ratio: float = 4.0
    image_channels: int = 1
    image_size: int = 64

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.patch_size < 1 or self.num_registers < 0:
            raise ValueError("patch_size must be >= 1 and num_registers >= 0")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_ratio * self.embed_dim))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def seq_len(self) -> int:
        return 1 + self.num_registers + self.num_patches

    def with_(self, **changes) -> ViTConfig:
        d = asdict(self)
        d.update(changes)
        return ViTConfig(**d)


@dataclass
class ViTParams:
    """Named parameter table of one transformer plus the config it was built for."""

    config: ViTConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def layer(self, index: int) -> dict[str, Tensor]:
        prefix = f"blocks.{index}."
        return {k: self.tensors[prefix + k] for k in LAYER_KEYS}

    @property
    def num_layers(self) -> int:
        return sum(1 for k in self.tensors if k.endswith(".norm1.weight"))

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def named(self) -> list[tuple[str, Tensor]]:
        return [(k, self.tensors[k]) for k in sorted(self.tensors)]

    def requires_grad_(self, flag: bool) -> ViTParams:
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def clone(self) -> ViTParams:
        return ViTParams(copy.deepcopy(self.config),
                         {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                          for k, v in self.tensors.items()})


def init_params(config: ViTConfig, rng: np.random.Generator, dtype=np.float32,
                std: float = 0.02) -> ViTParams:
    D, N, G = config.embed_dim, config.grid_side, config.num_registers
    hidden = config.ffn_hidden

    def normal(*shape, scale=std):
        return Tensor(np.clip(rng.standard_normal(shape), -2, 2).astype(dtype) * dtype(scale),
                      requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    t = {
        "patch_embed.weight": normal(config.patch_dim, D, scale=1.0 / math.sqrt(config.patch_dim)),
        "patch_embed.bias": const(0.0, D),
        "pos_embed": normal(N, N, D),
        "cls_token": normal(D),
        "reg_tokens": normal(G, D),
    }
    for layer in range(config.num_layers):
        p = f"blocks.{layer}."
        t[p + "norm1.weight"] = const(1.0, D)
        t[p + "norm1.bias"] = const(0.0, D)
        t[p + "attn.qkv.weight"] = normal(D, 3 * D, scale=1.0 / math.sqrt(D))
        t[p + "attn.qkv.bias"] = const(0.0, 3 * D)
        t[p + "attn.proj.weight"] = normal(D, D, scale=1.0 / math.sqrt(D))
        t[p + "attn.proj.bias"] = const(0.0, D)
        t[p + "norm2.weight"] = const(1.0, D)
        t[p + "norm2.bias"] = const(0.0, D)
        t[p + "mlp.fc1.weight"] = normal(D, hidden, scale=1.0 / math.sqrt(D))
        t[p + "mlp.fc1.bias"] = const(0.0, hidden)
        t[p + "mlp.fc2.weight"] = normal(hidden, D, scale=1.0 / math.sqrt(hidden))
        t[p + "mlp.fc2.bias"] = const(0.0, D)
    return ViTParams(config, t)


@dataclass(frozen=True)
class ForwardTrace:
    final_tokens: Tensor
    attention_logits: tuple[Tensor, ...]


# -- patches -------------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., R, R, C)`` -> ``(..., N*N, P*P*C)`` in row-major patch order."""
    image = np.asarray(image)
    *lead, R, R2, C = image.shape
    if R != R2:
        raise ShapeError(f"image must be square, got {R}x{R2}")
    if R % patch_size:
        raise ShapeError(f"image side {R} not divisible by patch size {patch_size}")
    N, P = R // patch_size, patch_size
    x = image.reshape(*lead, N, P, N, P, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, N * N, P * P * C)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, NN, _ = patches.shape
    N, P, C = int(round(math.sqrt(NN))), patch_size, channels
    nl = len(lead)
    x = patches.reshape(*lead, N, N, P, P, C)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, N * P, N * P, C)


def coords_to_linear(coords, grid_side: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if np.any(c < 0) or np.any(c >= grid_side):
        raise IndexError(f"grid coordinate outside [0, {grid_side})")
    return c[:, 0] * grid_side + c[:, 1]


def linear_to_coords(index, grid_side: int) -> list[tuple[int, int]]:
    return [(int(i) // grid_side, int(i) % grid_side) for i in np.asarray(index).reshape(-1)]


def check_positions(index, grid_side: int) -> np.ndarray:
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= grid_side * grid_side):
        raise IndexError(f"position outside [0, {grid_side * grid_side})")
    return idx


def embed(patches, params: ViTParams, positions) -> Tensor:
    """Project patches to tokens and add the positional embedding at ``positions``.

    ``patches`` is ``(..., k, P*P*C)``; ``positions`` holds the row-major linear
    grid index of each patch, shape ``(..., k)``.
    """
    N = params["pos_embed"].shape[0]
    idx = check_positions(positions, N)
    w = params["patch_embed.weight"]
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=w.dtype))
    pos = params["pos_embed"].reshape(N * N, -1)[idx]
    return x @ w + params["patch_embed.bias"] + pos


def global_tokens(params: ViTParams, batch_shape: tuple[int, ...] = ()) -> Tensor:
    """``[cls, reg_1..reg_G]`` as ``(*batch, 1+G, D)``."""
    D = params["cls_token"].shape[0]
    g = concat([params["cls_token"].reshape(1, D), params["reg_tokens"]], axis=0)
    if batch_shape:
        g = broadcast_to(g, tuple(batch_shape) + g.shape)
    return g


# -- blocks --------------------------------------------------------------------

def attention_layer(tokens: Tensor, lp: dict[str, Tensor], num_heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm block: ``x + attn(norm1(x))`` then ``+ ffn(norm2(.))``.

    Returns the block output and the pre-softmax logits ``QK^T / sqrt(d_head)``
    with shape ``(..., H, T, T)``.
    """
    *lead, T, D = tokens.shape
    H, dh = num_heads, D // num_heads
    h = layer_norm(tokens, lp["norm1.weight"], lp["norm1.bias"])
    qkv = h @ lp["attn.qkv.weight"] + lp["attn.qkv.bias"]
    nl = len(lead)
    qkv = qkv.reshape(*lead, T, 3, H, dh).transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = softmax(logits, axis=-1)
    ctx = (attn @ v).swapaxes(-3, -2).reshape(*lead, T, D)
    x = tokens + ctx @ lp["attn.proj.weight"] + lp["attn.proj.bias"]
    h = layer_norm(x, lp["norm2.weight"], lp["norm2.bias"])
    h = gelu(h @ lp["mlp.fc1.weight"] + lp["mlp.fc1.bias"])
    x = x + h @ lp["mlp.fc2.weight"] + lp["mlp.fc2.bias"]
    return x, logits


def embed_image(image: np.ndarray, params: ViTParams) -> Tensor:
    """Full-grid token sequence ``(..., 1+G+N^2, D)`` for an image at the params' grid."""
    cfg = params.config
    N = params["pos_embed"].shape[0]
    P = cfg.patch_size
    image = np.asarray(image)
    if image.shape[-2] != N * P:
        raise ShapeError(f"image side {image.shape[-2]} does not match grid {N} x patch {P}")
    patches = patchify(image, P)
    lead = patches.shape[:-2]
    pat = embed(patches, params, np.arange(N * N))
    return concat([global_tokens(params, lead), pat], axis=-2)


def vit_forward(params: ViTParams, image: np.ndarray | None = None, tokens: Tensor | None = None,
                depth_limit: int | None = None) -> ForwardTrace:
    """Run the first ``depth_limit`` blocks over an image or a prepared token sequence."""
    L = params.num_layers
    depth = L if depth_limit is None else depth_limit
    if not 0 <= depth <= L:
        raise ValueError(f"depth_limit {depth} outside [0, {L}]")
    if (image is None) == (tokens is None):
        raise ValueError("pass exactly one of image or tokens")
    x = embed_image(image, params) if tokens is None else tokens
    logits = []
    for layer in range(depth):
        x, lg = attention_layer(x, params.layer(layer), params.config.num_heads)
        logits.append(lg)
    return ForwardTrace(x, tuple(logits))


# -- resampling ------------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` corner-aligned linear interpolation weights along one axis."""
    if n_in == n_out:
        return np.eye(n_in, dtype=dtype)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1:
        m[0, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def resize_grid(grid: Tensor, n_out: int) -> Tensor:
    """Bilinearly resize the two grid axes of ``(..., N, N, D)`` to ``n_out``."""
    n_in = grid.shape[-3]
    if n_in == n_out:
        return grid
    m = Tensor(bilinear_matrix(n_in, n_out, grid.dtype))
    # rows: (n_out, n_in) @ (..., n_in, N*D)
    *lead, _, N, D = grid.shape
    x = m @ grid.reshape(*lead, n_in, N * D)
    x = x.reshape(*lead, n_out, N, D).swapaxes(-3, -2)  # (..., N, n_out, D)
    x = m @ x.reshape(*lead, N, n_out * D)
    return x.reshape(*lead, n_out, n_out, D).swapaxes(-3, -2)


def interpolate_pos_grid(grid: Tensor, n_out: int) -> Tensor:
    n_in = grid.shape[0]
    if n_in < 2 or n_out < 2:
        raise ValueError("positional grids must have side >= 2")
    if n_in == n_out:
        return Tensor(grid.data.copy(), requires_grad=grid.requires_grad)
    out = resize_grid(grid.detach(), n_out)
    return Tensor(out.data, requires_grad=grid.requires_grad)
