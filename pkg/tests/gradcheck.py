"""Central finite-difference gradient checking at 64-bit."""

from __future__ import annotations

import numpy as np

import emp.tensor as t
from emp.tensor import Tensor


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. the array x,
    perturbing x in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor: gradients at
    or below ``floor`` are compared absolutely (central differences bottom
    out near 1e-11, so a pure ratio is meaningless for true zeros such as
    attention key biases)."""
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / scale))


def check_gradients(make_loss, arrays: dict[str, np.ndarray], tol: float = 1e-6,
                    h: float = 1e-5, floor: float = 1e-3) -> float:
    """Compare analytic and numeric gradients for every named input array.

    ``make_loss`` receives {name: Tensor} (requires_grad on all) and must
    return a scalar Tensor rebuilt from the current array contents.
    """
    tensors = {name: Tensor(arr, requires_grad=True, dtype=np.float64)
               for name, arr in arrays.items()}
    loss = make_loss(tensors)
    t.backward(loss)
    worst = 0.0
    for name, tensor in tensors.items():
        def f():
            fresh = {n: Tensor(tt.data, requires_grad=False, dtype=np.float64)
                     for n, tt in tensors.items()}
            return float(make_loss(fresh).data)

        numeric = finite_difference(f, tensor.data, h=h)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        err = relative_error(analytic, numeric, floor=floor)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e} >= {tol:g}"
        worst = max(worst, err)
    return worst
