import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lookwhere.extractor import InterpConfig, SparseLatents, extractor_forward, idw_weights, interpolate_sparse, \
    tokenize_selected
from lookwhere.tensor import Tensor
from lookwhere.vit import embed_image, vit_forward

import oracles
from conftest import TINY, check_grad, tiny_params


def sparse(rng, positions, D=3):
    k = len(positions)
    return SparseLatents(Tensor(rng.standard_normal(D)), Tensor(rng.standard_normal((1, D))),
                         Tensor(rng.standard_normal((k, D))), np.asarray(positions))


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000), st.sampled_from([1.0, 2.0, 0.5]))
def test_interpolation_matches_brute_force(n, seed, power):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n * n + 1))
    pos = np.sort(rng.permutation(n * n)[:k])
    nb = int(rng.integers(1, k + 1))
    s = sparse(rng, pos)
    got = interpolate_sparse(s, n, InterpConfig(neighbors=nb, pow=power)).grid.data
    ref = oracles.idw_dense(s.patch_tokens.data, pos, n, nb, power)
    assert np.max(np.abs(got - ref)) < 1e-9


def test_visible_cells_copy_their_token():
    rng = np.random.default_rng(0)
    s = sparse(rng, [0, 5, 10])
    grid = interpolate_sparse(s, 4, InterpConfig(neighbors=3)).grid.data
    np.testing.assert_allclose(grid[[0, 5, 10]], s.patch_tokens.data)


def test_weights_rows_sum_to_one():
    w = idw_weights(np.array([[1, 7, 12], [0, 2, 3]]), 4, InterpConfig(neighbors=2))
    assert w.shape == (2, 16, 3)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert np.all((w > 0).sum(-1) <= 2)


def test_neighbors_exceeding_k_is_an_error():
    with pytest.raises(ValueError):
        idw_weights(np.array([1, 2]), 4, InterpConfig(neighbors=3))


def test_interpolation_gradient_flows_to_tokens():
    rng = np.random.default_rng(3)
    s = sparse(rng, [2, 9, 14])
    w = rng.standard_normal((16, 3))

    def f(t):
        return (interpolate_sparse(SparseLatents(s.cls, s.registers, t, s.positions), 4,
                                   InterpConfig(neighbors=2)).grid * w).sum()
    assert check_grad(f, [Tensor(s.patch_tokens.data.copy())]) < 1e-6


def test_tokenize_rejects_duplicates():
    p = tiny_params(0)
    with pytest.raises(ValueError):
        tokenize_selected(np.zeros((8, 8, 1)), [1, 1], p)


def test_sequence_length_is_1_plus_G_plus_k():
    p = tiny_params(0)
    img = np.random.default_rng(0).standard_normal((2, 8, 8, 1))
    for k in (1, 5, 16):
        pos = np.tile(np.arange(k), (2, 1))
        toks = tokenize_selected(img, pos, p)
        cls = Tensor(np.zeros((2, TINY.embed_dim)))
        reg = Tensor(np.zeros((2, TINY.num_registers, TINY.embed_dim)))
        out = extractor_forward(toks, cls, reg, p, pos)
        assert out.patch_tokens.shape == (2, k, TINY.embed_dim)
        tr = vit_forward(p, tokens=Tensor(np.zeros((2, 1 + TINY.num_registers + k, TINY.embed_dim))))
        assert all(lg.shape[-1] == 1 + TINY.num_registers + k for lg in tr.attention_logits)


def test_all_positions_without_conditioning_equals_full_forward():
    p = tiny_params(4)
    img = np.random.default_rng(1).standard_normal((8, 8, 1))
    pos = np.arange(16)
    out = extractor_forward(tokenize_selected(img, pos, p), None, None, p, pos, conditioning="none")
    full = vit_forward(p, image=img).final_tokens.data
    np.testing.assert_allclose(out.cls.data, full[0], atol=1e-12)
    np.testing.assert_allclose(out.patch_tokens.data, full[1 + TINY.num_registers:], atol=1e-12)
    np.testing.assert_allclose(tokenize_selected(img, pos, p).data,
                               embed_image(img, p).data[1 + TINY.num_registers:], atol=1e-12)


def test_mismatched_global_tokens():
    p = tiny_params(0)
    toks = tokenize_selected(np.zeros((2, 8, 8, 1)), np.tile([0, 1], (2, 1)), p)
    with pytest.raises(ValueError):
        extractor_forward(toks, Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 2, 8))), p, [0, 1])
    with pytest.raises(ValueError):
        extractor_forward(toks, None, None, p, [0, 1], conditioning="bogus")
