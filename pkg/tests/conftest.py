import numpy as np
import pytest

from dualmark import autodiff as ad
from dualmark.autodiff import Tensor


def numerical_grad(f, tensor: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f() w.r.t. tensor.data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error with an absolute floor of 1 for tiny gradients."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(build, tensors, tol: float = 1e-4):
    """Assert analytic grads of scalar build() match finite differences.

    build() must recompute the graph from the tensors' current .data.
    """
    for t in tensors:
        t.zero_grad()
    loss = build()
    ad.backward(loss)

    def f():
        with ad.no_grad():
            return float(build().data)

    for t in tensors:
        num = numerical_grad(f, t)
        assert t.grad is not None, "no gradient reached a requires_grad tensor"
        err = max_rel_err(t.grad, num)
        assert err <= tol, f"gradient mismatch: rel err {err:.2e} > {tol}"


@pytest.fixture
def rng():
    return ad.RngStream(20240817)
