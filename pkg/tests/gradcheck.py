"""Central finite-difference oracle shared by the gradient tests."""

from __future__ import annotations

import numpy as np

from peftqa import autodiff as ad


def numeric_grad(fn, arrays, index, eps=1e-6):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays -> float."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + eps
        up = fn(base)
        target[i] = old - eps
        down = fn(base)
        target[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(build, arrays, eps=1e-6):
    """Max relative error over inputs between autodiff and finite differences.

    ``build`` takes Tensors and returns a scalar Tensor.
    """
    with ad.precision(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = build(*tensors)
        ad.backward(loss)

        def fn(arrs):
            with ad.no_grad():
                return build(*[ad.Tensor(a) for a in arrs]).item()

        errs = [rel_err(t.grad, numeric_grad(fn, arrays, i, eps)) for i, t in enumerate(tensors)]
    return max(errs)
