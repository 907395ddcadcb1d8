"""Teacher training, what-where pretraining, extractor-only finetuning and the random-selector ablation."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .distill import AggregationSpec, LossRecord, LossWeights, TeacherTargets, compute_losses, teacher_targets
from .extractor import InterpConfig, SparseLatents, extractor_forward, interpolate_sparse, tokenize_selected
from .optim import AdamW, warmup_cosine
from .selector import SelectorConfig, SelectorOutput, init_map_head, selector_forward, top_k_select
from .tensor import Tensor, cross_entropy, no_grad
from .vit import ViTConfig, ViTParams, init_params, interpolate_pos_grid, vit_forward


# -- configs -------------------------------------------------------------------------

@dataclass
class TeacherConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    seed: int = 0
    readout: str = "mean"


@dataclass
class PretrainConfig:
    epochs: int = 15
    batch_size: int = 32
    k_min: int = 4
    k_max: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    seed: int = 0
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    interp: InterpConfig = field(default_factory=InterpConfig)
    conditioning: str = "cls+reg"
    map_loss: str = "kl"
    augment: bool = False

    def validate(self, num_patches: int) -> None:
        if not 1 <= self.k_min <= self.k_max <= num_patches:
            raise ValueError(f"need 1 <= k_min <= k_max <= {num_patches}, got [{self.k_min}, {self.k_max}]")


@dataclass
class FinetuneConfig:
    epochs: int = 6
    batch_size: int = 32
    head: str = "cls"
    fixed_k: int | None = 6
    k_min: int = 1
    k_max: int = 64
    selection: str = "selector"
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.1
    lr_floor: float = 0.01
    seed: int = 0
    interp: InterpConfig = field(default_factory=InterpConfig)
    conditioning: str = "cls+reg"

    def __post_init__(self):
        if self.head not in ("cls", "patch"):
            raise ValueError("head must be 'cls' (classification) or 'patch' (segmentation)")
        if self.selection not in ("selector", "random"):
            raise ValueError("selection must be 'selector' or 'random'")


@dataclass
class LookWhere:
    """Selector + extractor pair; the selector table also holds the map head."""

    selector: ViTParams
    extractor: ViTParams
    selector_config: SelectorConfig

    @property
    def high_grid(self) -> int:
        return self.extractor.config.grid_side

    def parameters(self) -> list[Tensor]:
        return self.selector.parameters() + self.extractor.parameters()


class Teacher:
    """Frozen teacher; counts how many times targets were requested."""

    def __init__(self, params: ViTParams, spec: AggregationSpec | None = None):
        self.params = params.clone().requires_grad_(False)
        self.spec = spec or AggregationSpec()
        self.calls = 0

    def targets(self, images: np.ndarray, batch_size: int = 64) -> TeacherTargets:
        self.calls += 1
        parts = [teacher_targets(images[i:i + batch_size], self.params, self.spec)
                 for i in range(0, len(images), batch_size)]
        return TeacherTargets(np.concatenate([p.cls for p in parts]),
                              np.concatenate([p.patch_tokens for p in parts]),
                              np.concatenate([p.attention_map for p in parts]))


def _log(line: str, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    if stream is not False:
        print(line, file=stream, flush=True)


def augment_flip_crop(images: np.ndarray, rng: np.random.Generator, max_shift: int = 4) -> np.ndarray:
    """Random horizontal flip and a zero-padded random translation."""
    out = images.copy()
    flip = rng.random(len(images)) < 0.5
    out[flip] = out[flip, :, ::-1]
    R = images.shape[1]
    padded = np.pad(out, ((0, 0), (max_shift, max_shift), (max_shift, max_shift), (0, 0)))
    shifts = rng.integers(0, 2 * max_shift + 1, size=(len(images), 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = padded[i, dy:dy + R, dx:dx + R]
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# -- teacher --------------------------------------------------------------------------

def init_linear_head(dim: int, classes: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    return {"head.weight": Tensor((rng.standard_normal((dim, classes)) * 0.02).astype(dtype), requires_grad=True),
            "head.bias": Tensor(np.zeros(classes, dtype), requires_grad=True)}


def teacher_logits(params: ViTParams, head: dict[str, Tensor], images: np.ndarray,
                   readout: str = "mean") -> Tensor:
    z = vit_forward(params, image=images).final_tokens
    G = params.config.num_registers
    if readout == "cls":
        feat = z[:, 0, :]
    elif readout == "mean":
        feat = z[:, 1 + G:, :].mean(axis=1)
    elif readout == "patch":
        feat = z[:, 1 + G:, :]
    else:
        raise ValueError(f"unknown teacher readout {readout!r}")
    return feat @ head["head.weight"] + head["head.bias"]


def train_teacher(images: np.ndarray, labels: np.ndarray, vit_config: ViTConfig, num_classes: int,
                  config: TeacherConfig, log=None) -> tuple[ViTParams, dict[str, Tensor], float]:
    """Supervised training of the tiny teacher (mean patch-token readout by default); returns params, head, train accuracy."""
    rng = np.random.default_rng(config.seed)
    params = init_params(vit_config, rng)
    head = init_linear_head(vit_config.embed_dim, num_classes, rng)
    opt = AdamW(params.parameters() + list(head.values()), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for idx in batches(len(images), config.batch_size, rng):
            logits = teacher_logits(params, head, images[idx], config.readout)
            target = labels[idx] if logits.ndim == 2 else np.repeat(labels[idx][:, None], logits.shape[1], 1)
            loss = cross_entropy(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step(warmup_cosine(step, total, config.lr, config.warmup_frac))
            losses.append(loss.item())
            step += 1
        _log(f"teacher epoch {epoch} loss {np.mean(losses):.5f}", log)
    acc = teacher_accuracy(params, head, images, labels, readout=config.readout)
    return params, head, acc


def teacher_accuracy(params: ViTParams, head: dict[str, Tensor], images: np.ndarray, labels: np.ndarray,
                     batch_size: int = 128, readout: str = "mean") -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = teacher_logits(params, head, images[i:i + batch_size], readout).data
            if logits.ndim == 3:
                logits = logits.mean(axis=1)
            pred = logits.argmax(-1)
            correct += int((pred == labels[i:i + batch_size]).sum())
    return correct / len(images)


# -- initialization -------------------------------------------------------------------

def init_from_teacher(teacher: ViTParams, selector_config: SelectorConfig,
                      rng: np.random.Generator) -> LookWhere:
    """Copy the teacher into both students.

    The extractor receives every teacher tensor. The selector receives the
    embedding tables and the first ``low_depth`` blocks, with its positional
    grid resampled to the low-res grid, plus a fresh map head.
    """
    L = teacher.num_layers
    if selector_config.low_depth > L:
        raise ValueError(f"selector depth {selector_config.low_depth} exceeds teacher depth {L}")
    if selector_config.high_grid != teacher.config.grid_side:
        raise ValueError("selector high_grid must match the teacher grid")
    extractor = teacher.clone().requires_grad_(True)
    low_cfg = teacher.config.with_(num_layers=selector_config.low_depth, image_size=selector_config.low_res)
    tensors = {}
    for name, t in teacher.tensors.items():
        if name.startswith("blocks."):
            if int(name.split(".")[1]) >= selector_config.low_depth:
                continue
        tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    tensors["pos_embed"] = interpolate_pos_grid(Tensor(teacher["pos_embed"].data), selector_config.low_grid)
    tensors["pos_embed"].requires_grad = True
    selector = ViTParams(low_cfg, tensors)
    init_map_head(selector, selector_config, rng)
    return LookWhere(selector, extractor, selector_config)


# -- selection + inference ------------------------------------------------------------

def sample_k(rng: np.random.Generator, k_min: int, k_max: int) -> int:
    return int(rng.integers(k_min, k_max + 1))


def random_selector_baseline(k: int, grid_side: int, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """``k`` distinct uniform positions, ascending; ``(batch, k)`` when batched."""
    n = grid_side * grid_side
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if batch is None:
        return np.sort(rng.permutation(n)[:k])
    return np.sort(np.argsort(rng.random((batch, n)), axis=-1)[:, :k], axis=-1)


def select_positions(sel: SelectorOutput, k: int, selection: str, grid_side: int,
                     rng: np.random.Generator | None) -> np.ndarray:
    if selection == "selector":
        return top_k_select(sel.map, k)
    return random_selector_baseline(k, grid_side, rng, batch=sel.map.shape[0])


def lookwhere_forward(images: np.ndarray, model: LookWhere, k: int, selection: str = "selector",
                      rng: np.random.Generator | None = None, conditioning: str = "cls+reg",
                      freeze_selector: bool = False) -> tuple[SelectorOutput, SparseLatents]:
    """Selector -> top-k (or random) -> extractor over ``1+G+k`` tokens."""
    if freeze_selector:
        with no_grad():
            sel = selector_forward(images, model.selector, model.selector_config)
        sel = SelectorOutput(sel.map.detach(), sel.cls.detach(), sel.registers.detach())
    else:
        sel = selector_forward(images, model.selector, model.selector_config)
    pos = select_positions(sel, k, selection, model.high_grid, rng)
    toks = tokenize_selected(images, pos, model.extractor)
    sparse = extractor_forward(toks, sel.cls, sel.registers, model.extractor, pos, conditioning)
    return sel, sparse


def effective_interp(cfg: InterpConfig, k: int) -> InterpConfig:
    """Clamp the neighbour count to the number of visible tokens."""
    if cfg.neighbors <= k:
        return cfg
    return InterpConfig(neighbors=k, pow=cfg.pow, epsilon=cfg.epsilon)


# -- pretraining -------------------------------------------------------------------------

def pretrain_step(images: np.ndarray, model: LookWhere, config: PretrainConfig, rng: np.random.Generator,
                  optimizer: AdamW, targets: TeacherTargets, lr: float | None = None,
                  k: int | None = None) -> LossRecord:
    """One joint selector + extractor update on a batch with precomputed teacher targets."""
    k = sample_k(rng, config.k_min, config.k_max) if k is None else k
    sel, sparse = lookwhere_forward(images, model, k, conditioning=config.conditioning)
    dense = interpolate_sparse(sparse, model.high_grid, effective_interp(config.interp, k))
    rec = compute_losses(dense, sel.map, targets, config.weights, map_kind=config.map_loss)
    optimizer.zero_grad()
    rec.total.backward()
    optimizer.step(lr)
    rec.extras["k"] = k
    return rec


def _subset_targets(t: TeacherTargets, idx) -> TeacherTargets:
    return TeacherTargets(t.cls[idx], t.patch_tokens[idx], t.attention_map[idx])


def pretrain(images: np.ndarray, teacher: Teacher, model: LookWhere, config: PretrainConfig,
             log=None) -> tuple[list[dict], AdamW]:
    """What-where distillation; returns per-epoch mean losses and the optimizer."""
    config.validate(model.high_grid ** 2)
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    cached = None if config.augment else teacher.targets(images)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = config.epochs * steps_per_epoch
    history, step = [], 0
    for epoch in range(config.epochs):
        rows = []
        for j, idx in enumerate(batches(len(images), config.batch_size, rng)):
            batch = images[idx]
            if config.augment:
                batch = augment_flip_crop(batch, rng)
                targets = teacher.targets(batch)
            else:
                targets = _subset_targets(cached, idx)
            lr = warmup_cosine(step, total, config.lr, config.warmup_frac)
            rec = pretrain_step(batch, model, config, rng, opt, targets, lr=lr)
            vals = rec.values()
            rows.append(vals)
            _log(f"epoch {epoch} step {j} {vals[0]:.6f} {vals[1]:.6f} {vals[2]:.6f} {vals[3]:.6f}", log)
            step += 1
        m = np.mean(rows, axis=0)
        history.append({"epoch": epoch, "total": m[0], "cls": m[1], "pat": m[2], "map": m[3]})
    return history, opt


def map_kl(images: np.ndarray, teacher: Teacher, model: LookWhere, batch_size: int = 64) -> float:
    """Mean KL(teacher map || softmax(selector map)) over ``images``."""
    from .distill import map_loss

    targets = teacher.targets(images)
    vals = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            sel = selector_forward(images[i:i + batch_size], model.selector, model.selector_config)
            vals.append(map_loss(sel.map, targets.attention_map[i:i + batch_size]).item() * len(sel.map.data))
    return float(np.sum(vals) / len(images))


# -- finetuning ----------------------------------------------------------------------------

def task_logits(sparse: SparseLatents, head: dict[str, Tensor], kind: str, grid_side: int,
                interp: InterpConfig) -> Tensor:
    if kind == "cls":
        return sparse.cls @ head["head.weight"] + head["head.bias"]
    k = sparse.positions.shape[-1]
    dense = interpolate_sparse(sparse, grid_side, effective_interp(interp, k))
    return dense.grid @ head["head.weight"] + head["head.bias"]


def finetune_step(images: np.ndarray, labels: np.ndarray, model: LookWhere, head: dict[str, Tensor],
                  config: FinetuneConfig, rng: np.random.Generator, optimizer: AdamW,
                  lr: float | None = None, k: int | None = None) -> float:
    """Cross-entropy update of extractor + head; the selector runs without gradients."""
    if k is None:
        k = config.fixed_k if config.fixed_k is not None else sample_k(rng, config.k_min, config.k_max)
    _, sparse = lookwhere_forward(images, model, k, config.selection, rng, config.conditioning,
                                  freeze_selector=True)
    logits = task_logits(sparse, head, config.head, model.high_grid, config.interp)
    loss = cross_entropy(logits, labels)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return loss.item()


def finetune(images: np.ndarray, labels: np.ndarray, model: LookWhere, num_classes: int,
             config: FinetuneConfig, log=None) -> tuple[dict[str, Tensor], list[float]]:
    """Train a linear head plus the extractor; labels are per-image or per-patch (flattened)."""
    rng = np.random.default_rng(config.seed)
    model.selector.requires_grad_(False)
    head = init_linear_head(model.extractor.config.embed_dim, num_classes, rng)
    opt = AdamW(model.extractor.parameters() + list(head.values()), lr=config.lr,
                weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)
    total = config.epochs * steps_per_epoch
    history, step = [], 0
    for epoch in range(config.epochs):
        losses = []
        for idx in batches(len(images), config.batch_size, rng):
            lr = warmup_cosine(step, total, config.lr, config.warmup_frac, config.lr_floor)
            losses.append(finetune_step(images[idx], labels[idx], model, head, config, rng, opt, lr=lr))
            step += 1
        history.append(float(np.mean(losses)))
        _log(f"finetune epoch {epoch} loss {history[-1]:.5f}", log)
    return head, history


def predict(images: np.ndarray, model: LookWhere, head: dict[str, Tensor], k: int, kind: str = "cls",
            selection: str = "selector", rng: np.random.Generator | None = None,
            conditioning: str = "cls+reg", interp: InterpConfig | None = None,
            batch_size: int = 128) -> np.ndarray:
    interp = interp or InterpConfig()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, sparse = lookwhere_forward(images[i:i + batch_size], model, k, selection, rng, conditioning)
            out.append(task_logits(sparse, head, kind, model.high_grid, interp).data.argmax(-1))
    return np.concatenate(out)


def accuracy(images: np.ndarray, labels: np.ndarray, model: LookWhere, head: dict[str, Tensor], k: int,
             **kw) -> float:
    return float(np.mean(predict(images, model, head, k, **kw) == labels))
