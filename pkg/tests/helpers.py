"""Shared test utilities: finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from vqsplit import autodiff as ad
from vqsplit.autodiff import Tape, Tensor


def finite_difference_grad(fn, arrays: list[np.ndarray], wrt: int,
                           h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn w.r.t. arrays[wrt].

    fn maps a list of float64 ndarrays to a python float and must not mutate
    its inputs. Independent of the autodiff path it is used to check.
    """
    base = [a.copy() for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(base)
        flat[i] = orig - h
        f_minus = fn(base)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def autodiff_grads(build_loss, arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Run build_loss on parameter tensors under a tape; return their grads."""
    tensors = [ad.parameter(a.copy()) for a in arrays]
    with Tape() as tape:
        loss = build_loss(tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def cast_module_f64(module) -> None:
    """Re-cast every parameter of an nn.Module to float64 in place."""
    for p in module.params().values():
        p.data = p.data.astype(np.float64)


def check_param_gradients(loss_fn, params: list[Tensor],
                          rel_tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare tape gradients of module parameters against central differences.

    loss_fn() must rebuild the scalar loss from the params' current values
    and be ND-smooth in them (no discrete flips within +-h).
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    grads = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2 * h)
        num = np.abs(g.reshape(-1) - fd)
        den = np.maximum(np.abs(fd), np.abs(g.reshape(-1)))
        rel = num / np.maximum(den, 1e-8)
        rel[num < 1e-9] = 0.0
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst < rel_tol, f"param gradient mismatch: worst rel err {worst:.3e} >= {rel_tol}"
    return worst


def check_gradients(build_loss, arrays: list[np.ndarray],
                    rel_tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare autodiff gradients against central finite differences.

    build_loss maps a list of Tensors to a scalar Tensor. Returns the worst
    relative error seen; asserts it is below rel_tol.
    """
    grads = autodiff_grads(build_loss, arrays)

    def scalar_fn(arrs: list[np.ndarray]) -> float:
        tensors = [Tensor(a.copy()) for a in arrs]
        return float(build_loss(tensors).data)

    worst = 0.0
    for i, a in enumerate(arrays):
        fd = finite_difference_grad(scalar_fn, arrays, i, h=h)
        num = np.abs(grads[i] - fd)
        den = np.maximum(np.abs(fd), np.abs(grads[i]))
        rel = num / np.maximum(den, 1e-8)
        # absolute slack where both grads are ~0
        rel[num < 1e-9] = 0.0
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst < rel_tol, f"gradient mismatch: worst rel err {worst:.3e} >= {rel_tol}"
    return worst
