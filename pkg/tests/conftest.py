import numpy as np
import pytest

from lookwhere.selector import SelectorConfig
from lookwhere.tensor import Tensor, finite_diff_grad, max_rel_error
from lookwhere.vit import ViTConfig, init_params

TINY = ViTConfig(embed_dim=8, num_layers=2, num_heads=2, patch_size=2, num_registers=2,
                 ffn_ratio=2.0, image_channels=1, image_size=8)
TINY_SELECTOR = SelectorConfig(low_res=4, low_depth=1, map_hidden=6, high_grid=4, patch_size=2)


def tiny_params(seed=0, config=TINY, std=0.3):
    """float64 parameters with a larger init so gradients are not vanishingly small."""
    return init_params(config, np.random.default_rng(seed), dtype=np.float64, std=std)


def check_grad(f, inputs, h=1e-5, floor=1e-6):
    """Max relative error between autodiff and central differences over every input."""
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    f(*inputs).backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        def fi(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return f(*args)
        num = finite_diff_grad(fi, x, h)
        worst = max(worst, max_rel_error(x.grad, num, floor=floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# acceptance results, filled by test_acceptance.py and echoed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
