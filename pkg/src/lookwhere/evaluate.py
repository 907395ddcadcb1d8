"""kNN probes, linear probing, analytic FLOP accounting and metric reports."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamW
from .selector import SelectorConfig
from .tensor import Tensor, cross_entropy
from .vit import ViTConfig

log = logging.getLogger(__name__)


# -- kNN ---------------------------------------------------------------------------------

@dataclass
class EmbeddingBank:
    keys: np.ndarray
    labels: np.ndarray
    kind: str = "class-token"

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.keys.ndim != 2 or len(self.keys) < 1:
            raise ValueError("bank needs at least one key")
        if len(self.labels) != len(self.keys):
            raise ValueError("label count does not match key count")
        if self.kind not in ("class-token", "patch-token"):
            raise ValueError(f"unknown bank kind {self.kind!r}")


def pairwise_distances(queries: np.ndarray, keys: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        kn = k / np.maximum(np.linalg.norm(k, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ kn.T
    if metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    d2 = (q * q).sum(1)[:, None] + (k * k).sum(1)[None, :] - 2.0 * q @ k.T
    return np.sqrt(np.maximum(d2, 0.0))


def majority_vote(neighbor_labels: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Most frequent label per row; ties go to the smallest class id."""
    nl = np.asarray(neighbor_labels, dtype=np.int64)
    c = int(nl.max()) + 1 if num_classes is None else num_classes
    counts = np.zeros((nl.shape[0], c), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(nl.shape[0]), nl.shape[1]), nl.reshape(-1)), 1)
    return counts.argmax(axis=1)


def knn_predict(bank: EmbeddingBank, queries: np.ndarray, neighbors: int, exclude_index: bool = False,
                metric: str = "euclidean", chunk: int = 1024) -> np.ndarray:
    """Labels by majority over the ``neighbors`` nearest keys (distance ties to the lower key index).

    With ``exclude_index`` query ``i`` is key ``i`` and never votes for itself.
    """
    M = len(bank.keys)
    limit = M - 1 if exclude_index else M
    if neighbors > limit or neighbors < 1:
        raise ValueError(f"neighbors={neighbors} must be in [1, {limit}]")
    out = []
    num_classes = int(bank.labels.max()) + 1
    for s in range(0, len(queries), chunk):
        d = pairwise_distances(queries[s:s + chunk], bank.keys, metric)
        if exclude_index:
            rows = np.arange(d.shape[0])
            d[rows, rows + s] = np.inf
        idx = np.argsort(d, axis=1, kind="stable")[:, :neighbors]
        out.append(majority_vote(bank.labels[idx], num_classes))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def knn_classify(bank: EmbeddingBank, queries: np.ndarray | None = None, query_labels: np.ndarray | None = None,
                 neighbors: int = 3, leave_one_out: bool = True, metric: str = "euclidean") -> float:
    """Top-1 kNN accuracy; leave-one-out evaluates the bank against itself."""
    if leave_one_out:
        if len(bank.keys) < 2:
            raise ValueError("leave-one-out needs at least two keys")
        pred = knn_predict(bank, bank.keys, neighbors, exclude_index=True, metric=metric)
        return float(np.mean(pred == bank.labels))
    if queries is None or query_labels is None:
        raise ValueError("queries and query_labels are required without leave-one-out")
    pred = knn_predict(bank, np.asarray(queries), neighbors, metric=metric)
    return float(np.mean(pred == np.asarray(query_labels)))


def knn_segment(bank: EmbeddingBank, query_tokens: np.ndarray, query_labels: np.ndarray,
                neighbors: int = 20, metric: str = "euclidean") -> float:
    """Per-patch top-1 accuracy by majority over the ``neighbors`` nearest train patch tokens."""
    pred = knn_predict(bank, np.asarray(query_tokens), neighbors, metric=metric)
    return float(np.mean(pred == np.asarray(query_labels)))


# -- linear probe ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0
    standardize: bool = True


def linear_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None,
                 test_features: np.ndarray | None = None, test_labels: np.ndarray | None = None) -> float:
    """Full-batch multinomial logistic regression; accuracy on the test split if given, else train."""
    cfg = config or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        warnings.warn("linear probe on single-class data; reporting accuracy 1.0", RuntimeWarning)
        return 1.0
    mu, sd = (x.mean(0), x.std(0) + 1e-8) if cfg.standardize else (0.0, 1.0)
    xs = (x - mu) / sd
    C = int(y.max()) + 1
    rng = np.random.default_rng(cfg.seed)
    w = Tensor(rng.standard_normal((x.shape[1], C)) * 0.01, requires_grad=True)
    b = Tensor(np.zeros(C), requires_grad=True)
    opt = AdamW([w, b], lr=cfg.lr, weight_decay=cfg.weight_decay)
    xt = Tensor(xs)
    for _ in range(cfg.steps):
        loss = cross_entropy(xt @ w + b, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    if test_features is None:
        ex, ey = xs, y
    else:
        ex, ey = (np.asarray(test_features, dtype=np.float64) - mu) / sd, np.asarray(test_labels)
    pred = (ex @ w.data + b.data).argmax(1)
    return float(np.mean(pred == ey))


def least_squares_probe(features: np.ndarray, labels: np.ndarray, test_features=None, test_labels=None,
                        ridge: float = 1e-6) -> float:
    """Closed-form one-hot least-squares classifier (reference for the linear probe)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    xa = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(int(y.max()) + 1)[y]
    w = np.linalg.solve(xa.T @ xa + ridge * np.eye(xa.shape[1]), xa.T @ onehot)
    if test_features is None:
        ex, ey = xa, y
    else:
        tf = np.asarray(test_features, dtype=np.float64)
        ex, ey = np.hstack([tf, np.ones((len(tf), 1))]), np.asarray(test_labels)
    return float(np.mean((ex @ w).argmax(1) == ey))


# -- FLOPs ------------------------------------------------------------------------------------

@dataclass
class CostReport:
    """Analytic compute of one forward pass.

    One multiply-accumulate counts as one FLOP; softmax, norms and GELU are
    not counted.
    """

    flops_attention: float
    flops_ffn: float
    flops_embed: float
    flops_head: float
    tokens_per_layer: list[int]
    peak_activation_values: int
    parts: dict = field(default_factory=dict)

    @property
    def flops_total(self) -> float:
        return self.flops_attention + self.flops_ffn + self.flops_embed + self.flops_head

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(self.flops_attention + other.flops_attention, self.flops_ffn + other.flops_ffn,
                          self.flops_embed + other.flops_embed, self.flops_head + other.flops_head,
                          self.tokens_per_layer + other.tokens_per_layer,
                          max(self.peak_activation_values, other.peak_activation_values))


def attention_flops(T: int, D: int) -> tuple[float, float]:
    """(projection term ``4*T*D^2``, logits + weighted-sum term ``2*T^2*D``)."""
    return 4.0 * T * D * D, 2.0 * T * T * D


def count_flops(config: ViTConfig, tokens_per_layer: list[int], embedded_patches: int | None = None,
                head_outputs: int = 0) -> CostReport:
    """Per-layer attention and FFN cost for the given token counts, plus embedding and head."""
    D, hidden, H = config.embed_dim, config.ffn_hidden, config.num_heads
    attn = ffn = 0.0
    peak = 0
    for T in tokens_per_layer:
        proj, mix = attention_flops(T, D)
        attn += proj + mix
        ffn += 2.0 * T * D * hidden
        peak = max(peak, H * T * T + T * max(3 * D, hidden))
    n_emb = config.num_patches if embedded_patches is None else embedded_patches
    embed = float(n_emb) * config.patch_dim * D
    head = float(D) * head_outputs
    return CostReport(attn, ffn, embed, head, list(tokens_per_layer), peak)


def vit_cost(config: ViTConfig, head_outputs: int = 0) -> CostReport:
    return count_flops(config, [config.seq_len] * config.num_layers, head_outputs=head_outputs)


def lookwhere_cost(config: ViTConfig, selector: SelectorConfig, k: int, map_hidden: int | None = None,
                   head_outputs: int = 0) -> CostReport:
    """Selector over the low-res grid plus extractor over ``1+G+k`` tokens at every layer."""
    G = config.num_registers
    n_low = selector.low_grid ** 2
    sel = count_flops(config, [1 + G + n_low] * selector.low_depth, embedded_patches=n_low)
    hid = selector.map_hidden if map_hidden is None else map_hidden
    sel.flops_head = float(n_low) * (config.embed_dim * hid + hid * selector.block ** 2)
    ext = count_flops(config, [1 + G + k] * config.num_layers, embedded_patches=k, head_outputs=head_outputs)
    total = sel + ext
    total.parts = {"selector": sel, "extractor": ext}
    return total


# -- reports -------------------------------------------------------------------------------------

def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def to_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
