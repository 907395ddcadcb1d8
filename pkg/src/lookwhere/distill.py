"""Teacher targets (class token, patch tokens, aggregated attention map) and the what-where loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .extractor import DenseLatents
from .tensor import Tensor, kl_divergence, mse, no_grad, softmax
from .vit import ForwardTrace, ViTParams, vit_forward

QUERY_TYPES = ("cls", "reg", "pat")
LAYER_SETS = ("first_half", "last_half", "last_third", "last_only", "all_layers")


@dataclass(frozen=True)
class AggregationSpec:
    query_set: frozenset = frozenset({"pat"})
    layer_set: str = "last_only"

    def __post_init__(self):
        qs = frozenset(self.query_set)
        object.__setattr__(self, "query_set", qs)
        if not qs or not qs <= set(QUERY_TYPES):
            raise ValueError(f"query_set must be a non-empty subset of {QUERY_TYPES}")
        if self.layer_set not in LAYER_SETS:
            raise ValueError(f"layer_set must be one of {LAYER_SETS}")

    @classmethod
    def parse(cls, text: str) -> AggregationSpec:
        """``"pat@last_only"`` or ``"cls+reg@all_layers"``."""
        queries, _, layers = text.partition("@")
        return cls(frozenset(q.strip() for q in queries.split("+")), layers.strip() or "last_only")

    def __str__(self) -> str:
        return "+".join(q for q in QUERY_TYPES if q in self.query_set) + "@" + self.layer_set


def all_aggregation_specs() -> list[AggregationSpec]:
    """The 7 query subsets crossed with the 5 layer sets."""
    subsets = [frozenset(c) for r in (1, 2, 3) for c in combinations(QUERY_TYPES, r)]
    return [AggregationSpec(q, l) for q in subsets for l in LAYER_SETS]


def select_layers(layer_set: str, num_layers: int) -> list[int]:
    L = num_layers
    half = max(1, L // 2)
    third = max(1, L // 3)
    return {
        "first_half": list(range(half)),
        "last_half": list(range(L - half, L)),
        "last_third": list(range(L - third, L)),
        "last_only": [L - 1],
        "all_layers": list(range(L)),
    }[layer_set]


@dataclass
class TeacherTargets:
    cls: np.ndarray            # (..., D)
    patch_tokens: np.ndarray   # (..., N^2, D)
    attention_map: np.ndarray  # (..., N, N), sums to 1


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_pat: float = 1.0
    lambda_map: float = 0.1

    def __post_init__(self):
        ws = (self.lambda_cls, self.lambda_pat, self.lambda_map)
        if min(ws) < 0 or max(ws) == 0:
            raise ValueError("loss weights must be nonnegative and not all zero")


def aggregate_logits(trace: ForwardTrace, spec: AggregationSpec, num_registers: int) -> np.ndarray:
    """Averaged pre-softmax logits over patch-key columns, shape ``(..., N^2)``.

    Rows of each query type are averaged first, then types are averaged with
    equal weight, then heads and layers.
    """
    G = num_registers
    if "reg" in spec.query_set and G == 0:
        raise ValueError("query_set selects registers but the model has none")
    L = len(trace.attention_logits)
    if L == 0:
        raise ValueError("trace has no attention layers")
    layers = select_layers(spec.layer_set, L)
    rows = {"cls": slice(0, 1), "reg": slice(1, 1 + G), "pat": slice(1 + G, None)}
    acc = None
    for layer in layers:
        lg = trace.attention_logits[layer].data  # (..., H, T, T)
        keys = lg[..., 1 + G:]
        per_type = [keys[..., rows[q], :].mean(axis=-2) for q in QUERY_TYPES if q in spec.query_set]
        m = np.mean(per_type, axis=0).mean(axis=-2)  # average types, then heads
        acc = m if acc is None else acc + m
    return acc / len(layers)


def aggregate_attention(trace: ForwardTrace, spec: AggregationSpec, num_registers: int) -> np.ndarray:
    """Teacher attention map ``(..., N, N)``: aggregated logits, one softmax over all cells."""
    agg = aggregate_logits(trace, spec, num_registers).astype(np.float64)
    z = agg - agg.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    n = int(round(np.sqrt(p.shape[-1])))
    return p.reshape(*p.shape[:-1], n, n)


def teacher_targets(image_high: np.ndarray, teacher: ViTParams, spec: AggregationSpec | None = None) -> TeacherTargets:
    """Full-depth frozen teacher pass. Nothing here records gradients."""
    spec = spec or AggregationSpec()
    G = teacher.config.num_registers
    with no_grad():
        image = np.asarray(image_high, dtype=teacher["cls_token"].dtype)
        trace = vit_forward(teacher, image=image)
        z = trace.final_tokens.data
        amap = aggregate_attention(trace, spec, G)
    return TeacherTargets(cls=z[..., 0, :].copy(), patch_tokens=z[..., 1 + G:, :].copy(), attention_map=amap)


@dataclass
class LossRecord:
    total: Tensor
    cls: Tensor
    pat: Tensor
    map: Tensor
    extras: dict = field(default_factory=dict)

    def values(self) -> tuple[float, float, float, float]:
        return self.total.item(), self.cls.item(), self.pat.item(), self.map.item()


def map_loss(selector_map_raw: Tensor, teacher_map, kind: str = "kl", reverse: bool = False) -> Tensor:
    """Attention distillation loss between the teacher map and ``softmax(raw scores)``.

    ``kind="kl"`` uses KL(teacher || student) unless ``reverse``; ``kind="mse"``
    compares the two distributions directly.
    """
    lead = selector_map_raw.shape[:-2]
    flat = selector_map_raw.reshape(*lead, -1).astype(np.float64)
    student = softmax(flat, axis=-1)
    target = Tensor(np.asarray(teacher_map, dtype=np.float64).reshape(student.shape))
    if kind == "mse":
        return mse(student, target)
    if kind != "kl":
        raise ValueError(f"unknown map loss {kind!r}")
    return kl_divergence(student, target) if reverse else kl_divergence(target, student)


def compute_losses(dense: DenseLatents, selector_map_raw: Tensor, targets: TeacherTargets,
                   weights: LossWeights | None = None, map_kind: str = "kl",
                   reverse_kl: bool = False) -> LossRecord:
    w = weights or LossWeights()
    dtype = dense.grid.dtype
    l_cls = mse(dense.cls, Tensor(np.asarray(targets.cls, dtype=dtype)))
    l_pat = mse(dense.grid, Tensor(np.asarray(targets.patch_tokens, dtype=dtype)))
    l_map = map_loss(selector_map_raw, targets.attention_map, map_kind, reverse_kl)
    l_map = l_map.astype(dtype)
    total = l_cls * w.lambda_cls + l_pat * w.lambda_pat + l_map * w.lambda_map
    return LossRecord(total, l_cls, l_pat, l_map)
