import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffslam.autodiff import Tape, Tensor, backward, numerical_grad

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_check(fn, *arrays, eps=1e-6):
    """Analytic and central-difference gradients of scalar ``fn(*tensors)``
    w.r.t. each array; returns the worst relative error."""
    leaves = [Tensor(np.array(a, float), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        backward(out, tape)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [Tensor(np.array(a, float)) for a in arrays]
            args[i] = Tensor(x)
            return float(fn(*args).data)

        num = numerical_grad(f, np.array(arrays[i], float), eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
