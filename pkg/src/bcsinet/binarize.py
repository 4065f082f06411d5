"""Scaled weight binarization and its straight-through gradient."""

import enum

import numpy as np


class GateVariant(enum.Enum):
    """Surrogate derivative of sign(x) inside the gate |x| < 1.

    INDICATOR passes the gradient unchanged (derivative 1); AS_PRINTED uses
    derivative x. Both are zero for |x| >= 1.
    """

    INDICATOR = "indicator"
    AS_PRINTED = "as_printed"


def sign(x):
    """Elementwise sign with sign(0) = +1, returned as int8."""
    negative = np.asarray(x) < 0
    return (1 - 2 * negative.view(np.int8)).astype(np.int8, copy=False)


def binarize(W):
    """Closest scaled sign matrix to ``W`` in the Frobenius norm.

    Returns ``(B, alpha)`` with ``B = sign(W)`` (int8, entries +-1) and
    ``alpha = ||W||_1 / (m n)``, the mean absolute value, which together
    minimize ``||w - alpha b||^2`` over sign vectors b and alpha >= 0.
    """
    W = np.asarray(W)
    if W.size == 0:
        raise ValueError("cannot binarize an empty matrix")
    if not np.all(np.isfinite(W)):
        raise ValueError("cannot binarize a matrix with non-finite entries")
    alpha = float(np.abs(W).mean(dtype=np.float64))
    return sign(W), alpha


def sign_gate_grad(x, variant=GateVariant.INDICATOR):
    x = np.asarray(x)
    inside = np.abs(x) < 1
    if variant is GateVariant.INDICATOR:
        return inside.astype(x.dtype if x.dtype.kind == "f" else np.float64)
    if variant is GateVariant.AS_PRINTED:
        return np.where(inside, x, 0).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    raise ValueError(f"unknown gate variant {variant!r}")


def ste_weight_grad(grad_Wb, W, alpha, variant=GateVariant.INDICATOR):
    """Map dC/dW_b onto the real-valued weights: dC/dW_b * (1/(mn) + alpha * dsign/dW).

    The cross terms of d(alpha)/dW are dropped, so the map is elementwise.
    """
    grad_Wb = np.asarray(grad_Wb)
    W = np.asarray(W)
    if grad_Wb.shape != W.shape:
        raise ValueError(f"gradient shape {grad_Wb.shape} does not match weight shape {W.shape}")
    local = 1.0 / W.size + alpha * sign_gate_grad(W, variant)
    return (grad_Wb * local).astype(W.dtype if W.dtype.kind == "f" else np.float64)
