"""End-to-end stages shared by the CLI and the acceptance suite, plus checkpoint conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Checkpoint, SyntheticDataset, gen_synthetic
from .evaluate import EmbeddingBank, knn_classify, linear_probe, lookwhere_cost, vit_cost
from .extractor import InterpConfig, interpolate_sparse
from .selector import selector_forward
from .tensor import Tensor, no_grad
from .train import (LookWhere, Teacher, accuracy, effective_interp, finetune, init_from_teacher, lookwhere_forward,
                    map_kl, pretrain, train_teacher)
from .vit import ViTParams

TRAIN_OFFSET, TEST_OFFSET = 1, 2


def datasets(cfg: RunConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    train = gen_synthetic(cfg.data_spec(TRAIN_OFFSET), cfg.int("data", "train_count"))
    test = gen_synthetic(cfg.data_spec(TEST_OFFSET), cfg.int("data", "test_count"))
    return train, test


# -- checkpoint conversion ----------------------------------------------------------------

def _table(prefix: str, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": np.asarray(v.data, dtype=np.float32) for k, v in tensors.items()}


def _untable(ckpt: Checkpoint, prefix: str, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k[len(prefix):]: Tensor(v.copy(), requires_grad=requires_grad)
            for k, v in ckpt.tensors.items() if k.startswith(prefix)}


def teacher_checkpoint(cfg: RunConfig, params: ViTParams, head: dict[str, Tensor], train_acc: float) -> Checkpoint:
    tensors = _table("teacher.", params.tensors)
    tensors.update(_table("teacher_head.", head))
    return Checkpoint(config={"kind": "teacher", "run": cfg.to_dict(), "train_accuracy": round(train_acc, 6)},
                      tensors=tensors)


def load_teacher(ckpt: Checkpoint) -> tuple[ViTParams, dict[str, Tensor]]:
    if ckpt.config.get("kind") != "teacher":
        raise ValueError(f"expected a teacher checkpoint, found kind={ckpt.config.get('kind')!r}")
    cfg = RunConfig.from_dict(ckpt.config["run"])
    return ViTParams(cfg.vit_config(), _untable(ckpt, "teacher.", False)), _untable(ckpt, "teacher_head.", False)


def model_checkpoint(cfg: RunConfig, model: LookWhere, kind: str, head: dict[str, Tensor] | None = None,
                     rng_state: dict | None = None, history: list | None = None) -> Checkpoint:
    tensors = _table("selector.", model.selector.tensors)
    tensors.update(_table("extractor.", model.extractor.tensors))
    if head is not None:
        tensors.update(_table("head.", head))
    meta = {"kind": kind, "run": cfg.to_dict()}
    if history is not None:
        meta["history"] = history
    return Checkpoint(config=meta, tensors=tensors, rng_state=rng_state)


def load_model(ckpt: Checkpoint) -> tuple[RunConfig, LookWhere, dict[str, Tensor] | None]:
    kind = ckpt.config.get("kind")
    if kind not in ("pretrained", "finetuned"):
        raise ValueError(f"expected a selector/extractor checkpoint, found kind={kind!r}")
    cfg = RunConfig.from_dict(ckpt.config["run"])
    vc, sc = cfg.vit_config(), cfg.selector_config()
    selector = ViTParams(vc.with_(num_layers=sc.low_depth, image_size=sc.low_res), _untable(ckpt, "selector."))
    extractor = ViTParams(vc, _untable(ckpt, "extractor."))
    head = _untable(ckpt, "head.") or None
    return cfg, LookWhere(selector, extractor, sc), head


# -- stages ----------------------------------------------------------------------------------

def stage_teacher(cfg: RunConfig, log=None) -> tuple[ViTParams, dict[str, Tensor], float]:
    train, _ = datasets(cfg)
    return train_teacher(train.images, train.labels, cfg.vit_config(), cfg.int("data", "num_classes"),
                         cfg.teacher_config(), log=log)


@dataclass
class PretrainResult:
    model: LookWhere
    history: list[dict]
    kl_before: float
    kl_after: float
    teacher: Teacher


def stage_pretrain(cfg: RunConfig, teacher_params: ViTParams, log=None) -> PretrainResult:
    train, test = datasets(cfg)
    pc = cfg.pretrain_config()
    teacher = Teacher(teacher_params, pc.aggregation)
    model = init_from_teacher(teacher.params, cfg.selector_config(), np.random.default_rng(cfg.seed))
    kl_before = map_kl(test.images, teacher, model)
    history, _ = pretrain(train.images, teacher, model, pc, log=log)
    kl_after = map_kl(test.images, teacher, model)
    return PretrainResult(model, history, kl_before, kl_after, teacher)


def finetune_labels(cfg: RunConfig, ds: SyntheticDataset) -> tuple[np.ndarray, int]:
    if cfg.get("train", "finetune_head") == "patch":
        return ds.patch_labels.reshape(len(ds), -1), cfg.int("data", "num_classes") + 1
    return ds.labels, cfg.int("data", "num_classes")


def stage_finetune(cfg: RunConfig, model: LookWhere, log=None, **overrides) -> dict[str, Tensor]:
    train, _ = datasets(cfg)
    fc = cfg.finetune_config()
    for k, v in overrides.items():
        setattr(fc, k, v)
    labels, classes = finetune_labels(cfg, train)
    head, _ = finetune(train.images, labels, model, classes, fc, log=log)
    return head


def class_tokens(images: np.ndarray, model: LookWhere, k: int, selection: str = "selector",
                 rng=None, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, sparse = lookwhere_forward(images[i:i + batch_size], model, k, selection, rng)
            out.append(sparse.cls.data)
    return np.concatenate(out)


def patch_tokens(images: np.ndarray, model: LookWhere, k: int, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            _, sparse = lookwhere_forward(images[i:i + batch_size], model, k)
            dense = interpolate_sparse(sparse, model.high_grid, effective_interp(InterpConfig(), k))
            out.append(dense.grid.data)
    return np.concatenate(out)


def evaluate_model(cfg: RunConfig, model: LookWhere, head: dict[str, Tensor] | None) -> list[dict]:
    """Metric rows: task accuracy per k and selection, kNN and linear probes, FLOPs."""
    train, test = datasets(cfg)
    kind = cfg.get("train", "finetune_head")
    rows = []
    vc, sc = cfg.vit_config(), cfg.selector_config()
    for k in cfg.eval_ks():
        cost = lookwhere_cost(vc, sc, k)
        for selection in ("selector", "random"):
            rng = np.random.default_rng(cfg.seed + 17)
            row = {"k": k, "selection": selection}
            if head is not None:
                labels = test.labels if kind == "cls" else test.patch_labels.reshape(len(test), -1)
                row["accuracy"] = accuracy(test.images, labels, model, head, k, kind=kind,
                                           selection=selection, rng=rng)
            feats = class_tokens(test.images, model, k, selection, np.random.default_rng(cfg.seed + 17))
            bank = EmbeddingBank(feats, test.labels, "class-token")
            nn = cfg.int("eval", "knn_neighbors")
            row["knn_accuracy"] = knn_classify(bank, neighbors=min(nn, len(test) - 1),
                                               metric=cfg.get("eval", "metric"))
            tr_feats = class_tokens(train.images, model, k, selection, np.random.default_rng(cfg.seed + 18))
            row["linear_probe_accuracy"] = linear_probe(tr_feats, train.labels, test_features=feats,
                                                        test_labels=test.labels)
            row["gflops"] = cost.flops_total / 1e9
            row["tokens_per_layer"] = 1 + vc.num_registers + k
            rows.append(row)
    full = vit_cost(vc)
    rows.append({"k": vc.num_patches, "selection": "teacher-full", "gflops": full.flops_total / 1e9,
                 "tokens_per_layer": vc.seq_len})
    keys = []
    for r in rows:
        keys += [c for c in r if c not in keys]
    return [{c: r.get(c, "") for c in keys} for r in rows]


def selector_map(image: np.ndarray, model: LookWhere) -> np.ndarray:
    with no_grad():
        out = selector_forward(image[None], model.selector, model.selector_config)
    return out.map.data[0]
