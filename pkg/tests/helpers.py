"""Shared oracles for the test suite.

The finite-difference gradient here is the independent check the analytic
backward passes are validated against; it never calls into the tape.
"""

from __future__ import annotations

import numpy as np

from selftrain import tensor as T


def finite_difference_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued ``f`` w.r.t. every entry of ``arr``.

    ``f`` takes the perturbed array and returns a python float. ``arr`` must
    be float64 for the quoted tolerances to be meaningful.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_op_gradient(op, shapes, seed=0, h=1e-5, tol=1e-5, scale=1.0):
    """Gradient of sum(op(*inputs)) against central differences, per input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) * scale for s in shapes]
    tensors = [T.Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = op(*tensors)
    T.backward(out.sum())
    for i, (arr, tens) in enumerate(zip(arrays, tensors)):
        def f(a, i=i):
            with T.no_grad():
                args = [T.Tensor(x, dtype=np.float64) for x in arrays]
                args[i] = T.Tensor(a, dtype=np.float64)
                return op(*args).sum().item()

        numeric = finite_difference_gradient(f, arr.copy(), h=h)
        err = relative_error(tens.grad, numeric)
        assert err < tol, f"input {i}: relative error {err:.2e} >= {tol}"
