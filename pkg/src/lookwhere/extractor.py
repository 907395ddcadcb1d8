"""Full-depth extractor over the selected high-res patches, and sparse-to-dense interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat
from .vit import ViTParams, embed, global_tokens, patchify, vit_forward

CONDITIONING = ("cls+reg", "none")


@dataclass
class SparseLatents:
    cls: Tensor            # (..., D)
    registers: Tensor      # (..., G, D)
    patch_tokens: Tensor   # (..., k, D)
    positions: np.ndarray  # (..., k) linear indices, strictly increasing


@dataclass
class DenseLatents:
    cls: Tensor
    registers: Tensor
    grid: Tensor           # (..., N_high^2, D), row-major


@dataclass
class InterpConfig:
    neighbors: int = 5
    pow: float = 1.0
    epsilon: float = 1e-8


def tokenize_selected(image_high: np.ndarray, positions, params: ViTParams) -> Tensor:
    """Embed only the patches at ``positions`` (``(..., k)`` linear indices)."""
    positions = np.asarray(positions, dtype=np.int64)
    srt = np.sort(positions, axis=-1)
    if np.any(srt[..., 1:] == srt[..., :-1]):
        raise ValueError("duplicate positions")
    patches = patchify(image_high, params.config.patch_size)
    picked = np.take_along_axis(patches, positions[..., None], axis=-2)
    return embed(picked.astype(params["cls_token"].dtype), params, positions)


def extractor_forward(sparse_tokens: Tensor, selector_cls: Tensor | None, selector_registers: Tensor | None,
                      params: ViTParams, positions, conditioning: str = "cls+reg") -> SparseLatents:
    """Run ``[cls, registers, patches]`` (length ``1+G+k``) through every extractor block.

    With ``conditioning="none"`` the extractor's own learnable cls/register
    tokens replace the selector hand-off.
    """
    if conditioning not in CONDITIONING:
        raise ValueError(f"conditioning must be one of {CONDITIONING}")
    lead = sparse_tokens.shape[:-2]
    D = sparse_tokens.shape[-1]
    G = params["reg_tokens"].shape[0]
    if conditioning == "none":
        glob = global_tokens(params, lead)
    else:
        if selector_cls.shape != lead + (D,) or selector_registers.shape != lead + (G, D):
            raise ValueError("selector global tokens do not match the sparse token batch")
        glob = concat([selector_cls.reshape(*lead, 1, D), selector_registers], axis=-2)
    seq = concat([glob, sparse_tokens], axis=-2)
    z = vit_forward(params, tokens=seq).final_tokens
    return SparseLatents(cls=z[..., 0, :], registers=z[..., 1:1 + G, :],
                         patch_tokens=z[..., 1 + G:, :], positions=np.asarray(positions))


def idw_weights(positions, grid_side: int, cfg: InterpConfig) -> np.ndarray:
    """``(..., N^2, k)`` inverse-distance weights from visible positions to every cell.

    Each row keeps its ``cfg.neighbors`` nearest visible positions (ties to the
    earlier visible token), weights ``1 / d**pow`` normalized to sum 1. A cell
    within ``epsilon`` of a visible token copies it.
    """
    positions = np.asarray(positions, dtype=np.int64)
    k = positions.shape[-1]
    if cfg.neighbors > k:
        raise ValueError(f"neighbors={cfg.neighbors} exceeds visible tokens k={k}")
    if k < 1:
        raise ValueError("need at least one visible token")
    cells = np.arange(grid_side * grid_side)
    cr, cc = cells // grid_side, cells % grid_side
    pr, pc = positions // grid_side, positions % grid_side
    dr = cr[:, None] - pr[..., None, :]
    dc = cc[:, None] - pc[..., None, :]
    dist = np.sqrt((dr * dr + dc * dc).astype(np.float64))  # (..., N^2, k)
    nearest = np.argsort(dist, axis=-1, kind="stable")[..., :cfg.neighbors]
    dn = np.take_along_axis(dist, nearest, axis=-1)
    snap = dn < cfg.epsilon
    w = np.where(snap, 0.0, 1.0 / np.maximum(dn, cfg.epsilon) ** cfg.pow)
    has_snap = snap.any(axis=-1, keepdims=True)
    w = np.where(has_snap, snap.astype(np.float64), w)
    w = w / w.sum(axis=-1, keepdims=True)
    out = np.zeros(dist.shape, dtype=np.float64)
    np.put_along_axis(out, nearest, w, axis=-1)
    return out


def interpolate_sparse(sparse: SparseLatents, grid_side: int, cfg: InterpConfig | None = None) -> DenseLatents:
    cfg = cfg or InterpConfig()
    w = idw_weights(sparse.positions, grid_side, cfg).astype(sparse.patch_tokens.dtype)
    grid = Tensor(w) @ sparse.patch_tokens
    return DenseLatents(cls=sparse.cls, registers=sparse.registers, grid=grid)

