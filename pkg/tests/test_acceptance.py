"""Acceptance criteria 1-8, one pass/fail line each.

The end-to-end criteria (5-8) share one three-seed run of the default desk
config: teacher -> pretrain -> finetune (trained selector and random
selector) -> evaluate. Run standalone with ``python tests/test_acceptance.py``.
"""

import sys
import time

import numpy as np
import pytest

from lookwhere import pipeline
from lookwhere.config import RunConfig
from lookwhere.data import encode_checkpoint
from lookwhere.distill import LossWeights, aggregate_attention, all_aggregation_specs, compute_losses, \
    teacher_targets
from lookwhere.evaluate import EmbeddingBank, knn_predict, lookwhere_cost, vit_cost
from lookwhere.extractor import InterpConfig, SparseLatents, extractor_forward, idw_weights, interpolate_sparse, \
    tokenize_selected
from lookwhere.selector import init_map_head, map_head, top_k_select
from lookwhere.tensor import Tensor, finite_diff_grad, max_rel_error
from lookwhere.train import LookWhere, accuracy, init_from_teacher, lookwhere_forward
from lookwhere.vit import ForwardTrace, ViTConfig, ViTParams, attention_layer, init_params

import oracles
import test_tensor
from conftest import ACCEPTANCE, TINY, TINY_SELECTOR, check_grad, tiny_params

SEEDS = (0, 1, 2)
K_TEN_PERCENT = 6  # 6 of 64 patches


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    assert ok, detail


# -- 1: gradients ------------------------------------------------------------------------

def composite_loss(seed):
    """Selector -> top-k -> extractor -> interpolation -> all three losses, float64."""
    rng = np.random.default_rng(seed)
    teacher = tiny_params(seed)
    model = init_from_teacher(teacher, TINY_SELECTOR, rng)
    for p in model.parameters():  # move off the teacher so the losses are not zero
        p.data += rng.standard_normal(p.shape) * 0.1
    img = rng.standard_normal((2, 8, 8, 1))
    targets = teacher_targets(img, teacher)
    k = 5
    names = [("selector", "map_head.fc2.weight"), ("selector", "blocks.0.attn.qkv.bias"),
             ("selector", "reg_tokens"), ("extractor", "blocks.1.mlp.fc1.bias"),
             ("extractor", "blocks.0.norm1.weight"), ("extractor", "patch_embed.bias")]

    def loss_for(which, name):
        def f(t):
            sel = model.selector.clone() if which == "selector" else model.selector
            ext = model.extractor.clone() if which == "extractor" else model.extractor
            (sel if which == "selector" else ext)[name] = t
            m = LookWhere(sel, ext, TINY_SELECTOR)
            s, sparse = lookwhere_forward(img, m, k)
            dense = interpolate_sparse(sparse, 4, InterpConfig(neighbors=3))
            return compute_losses(dense, s.map, targets, LossWeights()).total
        return f

    return [(loss_for(w, n), getattr(model, w)[n]) for w, n in names], model, img


# Central differences at h=1e-5 carry rounding noise near eps*|f|/h ~ 1e-10, so a
# gradient that is exactly zero (key biases under softmax) reads as 1e-10 noise.
# Relative errors are taken against max(|a|, |b|, FD_FLOOR).
FD_FLOOR = 1e-5


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for f in test_tensor.UNARY.values():
            worst = max(worst, check_grad_floor(f, [Tensor(rng.standard_normal((3, 4)) + 0.05)]))
        for f in test_tensor.BINARY.values():
            worst = max(worst, check_grad_floor(f, [Tensor(rng.standard_normal((3, 4))) for _ in range(2)]))
        p = tiny_params(seed)
        x = Tensor(rng.standard_normal((5, TINY.embed_dim)))
        w = rng.standard_normal((5, TINY.embed_dim))
        worst = max(worst, check_grad_floor(lambda x: (attention_layer(x, p.layer(0), TINY.num_heads)[0] * w).sum(), [x]))
        low = init_params(TINY.with_(num_layers=1, image_size=4), rng, dtype=np.float64, std=0.3)
        init_map_head(low, TINY_SELECTOR, rng, std=0.3)
        tok = Tensor(rng.standard_normal((4, TINY.embed_dim)))
        wm = rng.standard_normal((4, 4))
        worst = max(worst, check_grad_floor(lambda t: (map_head(t, low, TINY_SELECTOR) * wm).sum(), [tok]))
        pos = np.sort(rng.permutation(16)[:5])
        sp = Tensor(rng.standard_normal((5, 3)))
        wg = rng.standard_normal((16, 3))
        worst = max(worst, check_grad_floor(
            lambda t: (interpolate_sparse(SparseLatents(None, None, t, pos), 4, InterpConfig(3)).grid * wg).sum(),
            [sp]))
        fns, _, _ = composite_loss(seed)
        for f, param in fns:
            x0 = Tensor(param.data.copy(), requires_grad=True)
            f(x0).backward()
            num = finite_diff_grad(f, x0, 1e-5)
            worst = max(worst, max_rel_error(x0.grad, num, floor=FD_FLOOR))
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-4 and elapsed < 120,
           f"max rel err {worst:.2e} (< 1e-4) over 20 seeds, {elapsed:.1f}s (< 120s)")


def check_grad_floor(f, inputs):
    return check_grad(f, inputs, floor=FD_FLOOR)


# -- 2: FLOPs ----------------------------------------------------------------------------

def test_criterion_2_flops_and_token_counts():
    vit_b = ViTConfig(embed_dim=768, num_layers=12, num_heads=12, patch_size=14, num_registers=0,
                      image_size=224, image_channels=3)
    vit_s = vit_b.with_(embed_dim=384, num_heads=6)
    b = vit_cost(vit_b).flops_total / 1e9
    s = vit_cost(vit_s).flops_total / 1e9
    cfg, sel = ViTConfig(), RunConfig.load().selector_config()
    tokens_ok = all(lookwhere_cost(cfg, sel, k).parts["extractor"].tokens_per_layer
                    == [1 + cfg.num_registers + k] * cfg.num_layers for k in range(1, 65))
    ok = abs(b - 23.6) / 23.6 <= 0.15 and abs(s - 6.2) / 6.2 <= 0.15 and vit_b.seq_len == 257 and tokens_ok
    record(2, ok, f"ViT-B {b:.2f} GFLOPs vs 23.6, ViT-S {s:.2f} vs 6.2 (+-15%); tokens 1+G+k at every layer: {tokens_ok}")


# -- 3: oracles ----------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst_agg = worst_idw = 0.0
    for spec in all_aggregation_specs():
        for _ in range(100):
            L, H, G = (int(v) for v in rng.integers(1, 5, 3))
            n = int(rng.integers(1, 4))
            T = 1 + G + n * n
            tr = ForwardTrace(Tensor(np.zeros((T, 2))),
                              tuple(Tensor(rng.standard_normal((H, T, T))) for _ in range(L)))
            got = aggregate_attention(tr, spec, G).reshape(-1)
            ref = oracles.aggregate_map([t.data for t in tr.attention_logits], spec.query_set, spec.layer_set, G)
            worst_agg = max(worst_agg, float(np.max(np.abs(got - ref))))
    for _ in range(100):
        n = int(rng.integers(2, 7))
        k = int(rng.integers(1, n * n + 1))
        pos = np.sort(rng.permutation(n * n)[:k])
        nb = int(rng.integers(1, k + 1))
        power = float(rng.choice([0.5, 1.0, 2.0]))
        toks = rng.standard_normal((k, 3))
        got = idw_weights(pos, n, InterpConfig(nb, power)) @ toks
        worst_idw = max(worst_idw, float(np.max(np.abs(got - oracles.idw_dense(toks, pos, n, nb, power)))))
    topk_ok = True
    for i in range(100):
        n = int(rng.integers(1, 7))
        m = rng.integers(0, 3, (n, n)).astype(float) if i % 2 else rng.standard_normal((n, n))
        k = int(rng.integers(1, n * n + 1))
        topk_ok &= list(top_k_select(m, k)) == oracles.top_k(m, k)
    knn_ok = True
    for i in range(100):
        m, d = int(rng.integers(2, 15)), int(rng.integers(1, 5))
        keys = rng.integers(-2, 3, (m, d)).astype(float) if i % 2 else rng.standard_normal((m, d))
        labels = rng.integers(0, 3, m)
        q = rng.standard_normal((5, d))
        nb = int(rng.integers(1, m))
        bank = EmbeddingBank(keys, labels)
        knn_ok &= list(knn_predict(bank, q, nb)) == list(oracles.knn_labels(keys, labels, q, nb))
        knn_ok &= list(knn_predict(bank, keys, nb, exclude_index=True)) == \
            list(oracles.knn_labels(keys, labels, keys, nb, exclude_self=True))
    ok = worst_agg < 1e-9 and worst_idw < 1e-9 and topk_ok and knn_ok
    record(3, ok, f"aggregation 35 specs x100 max|d| {worst_agg:.1e}; interpolation x100 max|d| {worst_idw:.1e}; "
                  f"top-k x100 exact {topk_ok}; kNN x100 exact {knn_ok}")


# -- 4: self-consistency ----------------------------------------------------------------------

def self_consistency_losses(teacher: ViTParams, images):
    targets = teacher_targets(images, teacher)
    N2 = teacher.config.num_patches
    pos = np.tile(np.arange(N2), (len(images), 1))
    ext = teacher.clone()
    sparse = extractor_forward(tokenize_selected(images, pos, ext), None, None, ext, pos, conditioning="none")
    dense = interpolate_sparse(sparse, teacher.config.grid_side, InterpConfig())
    zero_map = Tensor(np.zeros((len(images), teacher.config.grid_side, teacher.config.grid_side)))
    rec = compute_losses(dense, zero_map, targets)
    return rec.cls.item(), rec.pat.item()


def test_criterion_4_self_consistency():
    cfg = RunConfig.load()
    images = pipeline.datasets(cfg)[1].images[:16]
    worst = 0.0
    for seed in range(3):
        teacher = init_params(cfg.vit_config(), np.random.default_rng(seed), dtype=np.float64)
        worst = max(worst, *self_consistency_losses(teacher, images.astype(np.float64)))
    record(4, worst < 1e-9, f"max(l_cls, l_pat) = {worst:.2e} (< 1e-9) at k=N^2, conditioning none")


# -- 5-8: three-seed desk run -------------------------------------------------------------------

def snapshot(params: ViTParams):
    return {k: v.data.tobytes() for k, v in params.tensors.items()}


def copy_model(m: LookWhere) -> LookWhere:
    return LookWhere(m.selector.clone(), m.extractor.clone(), m.selector_config)


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        cfg = RunConfig.load(seed=seed)
        _, test = pipeline.datasets(cfg)
        teacher, _, teacher_acc = pipeline.stage_teacher(cfg, log=False)
        teacher_before = snapshot(teacher)
        pre = pipeline.stage_pretrain(cfg, teacher, log=False)
        teacher_frozen = snapshot(teacher) == teacher_before and snapshot(pre.teacher.params) == teacher_before

        sel_model = copy_model(pre.model)
        sel_before = snapshot(sel_model.selector)
        head = pipeline.stage_finetune(cfg, sel_model, log=False)
        selector_frozen = snapshot(sel_model.selector) == sel_before
        acc_sel = accuracy(test.images, test.labels, sel_model, head, K_TEN_PERCENT)

        rnd_model = copy_model(pre.model)
        rnd_head = pipeline.stage_finetune(cfg, rnd_model, log=False, selection="random")
        acc_rnd = accuracy(test.images, test.labels, rnd_model, rnd_head, K_TEN_PERCENT, selection="random",
                           rng=np.random.default_rng(seed + 100))
        runs.append(dict(seed=seed, cfg=cfg, pre=pre, test=test, teacher_acc=teacher_acc, acc_sel=acc_sel,
                         acc_rnd=acc_rnd, teacher_frozen=teacher_frozen, selector_frozen=selector_frozen))
    return runs, time.perf_counter() - t0


def test_criterion_5_selector_beats_random(desk_run):
    runs, elapsed = desk_run
    gaps = [r["acc_sel"] - r["acc_rnd"] for r in runs]
    per = ", ".join(f"seed {r['seed']}: {r['acc_sel']:.3f} vs {r['acc_rnd']:.3f}" for r in runs)
    gap = float(np.mean(gaps))
    record(5, gap >= 0.10 and elapsed < 900,
           f"mean gap {100 * gap:.1f} points (>= 10) at k={K_TEN_PERCENT}/64 [{per}]; 3-seed run {elapsed / 60:.1f} min (< 15)")


def test_criterion_6_where_learning(desk_run):
    runs, _ = desk_run
    reds = [1 - r["pre"].kl_after / r["pre"].kl_before for r in runs]
    per = ", ".join(f"seed {r['seed']}: {r['pre'].kl_before:.3f} -> {r['pre'].kl_after:.3f} ({100 * d:.0f}%)"
                    for r, d in zip(runs, reds))
    record(6, min(reds) >= 0.60, f"held-out map KL reduction per seed [{per}] (each >= 60%)")


def test_criterion_7_flexible_k(desk_run):
    runs, _ = desk_run
    r = runs[0]
    model = copy_model(r["pre"].model)
    head = pipeline.stage_finetune(r["cfg"], model, log=False, fixed_k=None, k_min=1, k_max=64)
    accs = {}
    for k in (1, 16, 32, 64):
        accs[k] = accuracy(r["test"].images, r["test"].labels, model, head, k)
    ok = accs[64] >= accs[1]
    record(7, ok, "varied-k model accuracy " + ", ".join(f"k={k}: {a:.3f}" for k, a in accs.items())
           + " (k=64 >= k=1)")


def tiny_cfg(seed):
    return RunConfig.load(overrides=[
        "data.image_side=32", "data.train_count=48", "data.test_count=16", "model.embed_dim=16",
        "model.num_layers=2", "model.num_heads=2", "model.num_registers=2", "selector.low_res=16",
        "selector.low_depth=1", "selector.map_hidden=8", "train.teacher_epochs=1", "train.epochs=2",
        "train.k_min=2", "train.k_max=8", "train.finetune_epochs=1"], seed=seed)


def checkpoint_bytes(seed):
    cfg = tiny_cfg(seed)
    teacher, head, acc = pipeline.stage_teacher(cfg, log=False)
    pre = pipeline.stage_pretrain(cfg, teacher, log=False)
    t_bytes = encode_checkpoint(pipeline.teacher_checkpoint(cfg, teacher, head, acc))
    p_bytes = encode_checkpoint(pipeline.model_checkpoint(cfg, pre.model, "pretrained"))
    ft_head = pipeline.stage_finetune(cfg, pre.model, log=False)
    f_bytes = encode_checkpoint(pipeline.model_checkpoint(cfg, pre.model, "finetuned", head=ft_head))
    return t_bytes, p_bytes, f_bytes


def test_criterion_8_frozen_contracts(desk_run):
    runs, _ = desk_run
    teacher_ok = all(r["teacher_frozen"] for r in runs)
    selector_ok = all(r["selector_frozen"] for r in runs)
    a, b, c = checkpoint_bytes(7), checkpoint_bytes(7), checkpoint_bytes(8)
    det_ok = a == b and a[0] != c[0]
    record(8, teacher_ok and selector_ok and det_ok,
           f"teacher bitwise frozen in pretraining: {teacher_ok}; selector bitwise frozen in finetuning: {selector_ok}; "
           f"same-seed teacher/pretrain/finetune checkpoints identical: {det_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
