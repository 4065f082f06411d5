"""Fused elementwise kernels for the engine (single pass, no temporaries).

Image tensors are viewed as (N, C, S) with S = H * W; vectors as (N, C, 1).
Per-channel reductions accumulate in float64.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def leaky_forward(x, slope):
    y = np.empty_like(x)
    xf = x.ravel()
    yf = y.ravel()
    for i in range(xf.size):
        v = xf[i]
        yf[i] = v if v >= 0 else v * slope
    return y


@_jit
def leaky_backward(y, dy, slope):
    """Gradient through a leaky ReLU given its output (same sign as its input)."""
    dx = np.empty_like(dy)
    yf = y.ravel()
    df = dy.ravel()
    xf = dx.ravel()
    for i in range(df.size):
        xf[i] = df[i] if yf[i] >= 0 else df[i] * slope
    return dx


@_jit
def channel_moments(x):
    """Per-channel mean and biased variance of x (N, C, S), two-pass."""
    n, c, s = x.shape
    count = n * s
    mean = np.zeros(c)
    var = np.zeros(c)
    for k in range(c):
        acc = 0.0
        for i in range(n):
            for j in range(s):
                acc += x[i, k, j]
        mu = acc / count
        acc = 0.0
        for i in range(n):
            for j in range(s):
                d = x[i, k, j] - mu
                acc += d * d
        mean[k] = mu
        var[k] = acc / count
    return mean, var


@_jit
def channel_affine(x, scale, shift):
    """y[:, k, :] = x[:, k, :] * scale[k] + shift[k]."""
    n, c, s = x.shape
    y = np.empty_like(x)
    for i in range(n):
        for k in range(c):
            a = scale[k]
            b = shift[k]
            for j in range(s):
                y[i, k, j] = x[i, k, j] * a + b
    return y


@_jit
def bn_train_forward(x, mean, inv, gamma, beta):
    """Returns (y, xhat) with xhat = (x - mean) * inv and y = xhat * gamma + beta."""
    n, c, s = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    for i in range(n):
        for k in range(c):
            mu = mean[k]
            iv = inv[k]
            g = gamma[k]
            b = beta[k]
            for j in range(s):
                h = (x[i, k, j] - mu) * iv
                xhat[i, k, j] = h
                y[i, k, j] = h * g + b
    return y, xhat


@_jit
def bn_backward(dy, xhat, inv, gamma):
    """Returns (dx, dgamma, dbeta) for training-mode batch normalization."""
    n, c, s = dy.shape
    count = n * s
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for k in range(c):
        sg = 0.0
        sb = 0.0
        for i in range(n):
            for j in range(s):
                sb += dy[i, k, j]
                sg += dy[i, k, j] * xhat[i, k, j]
        dgamma[k] = sg
        dbeta[k] = sb
    dx = np.empty_like(dy)
    for i in range(n):
        for k in range(c):
            a = gamma[k] * inv[k]
            mb = dbeta[k] / count
            mg = dgamma[k] / count
            for j in range(s):
                dx[i, k, j] = a * (dy[i, k, j] - mb - xhat[i, k, j] * mg)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# 3x3 convolution on zero-padded inputs
# ---------------------------------------------------------------------------

@_jit
def correlate3x3(xp, w, y):
    """y[s, q] += sum_c sum_ij w[q, c, i, j] * xp[s, c, r + i, k + j].

    ``xp`` is (N, C, H + 2, W + 2) with a one-pixel zero border, ``y`` is
    (N, O, H, W). All nine taps are summed before touching ``y`` so each
    output row is loaded and stored once per input channel.
    """
    n, c, hp, wp = xp.shape
    o = w.shape[0]
    h = hp - 2
    wd = wp - 2
    for s in range(n):
        for q in range(o):
            yq = y[s, q]
            for ci in range(c):
                a00 = w[q, ci, 0, 0]; a01 = w[q, ci, 0, 1]; a02 = w[q, ci, 0, 2]
                a10 = w[q, ci, 1, 0]; a11 = w[q, ci, 1, 1]; a12 = w[q, ci, 1, 2]
                a20 = w[q, ci, 2, 0]; a21 = w[q, ci, 2, 1]; a22 = w[q, ci, 2, 2]
                xc = xp[s, ci]
                for r in range(h):
                    x0 = xc[r]
                    x1 = xc[r + 1]
                    x2 = xc[r + 2]
                    yr = yq[r]
                    for k in range(wd):
                        yr[k] += (a00 * x0[k] + a01 * x0[k + 1] + a02 * x0[k + 2]
                                  + a10 * x1[k] + a11 * x1[k + 1] + a12 * x1[k + 2]
                                  + a20 * x2[k] + a21 * x2[k + 1] + a22 * x2[k + 2])


# reassociation lets the per-row dot products vectorize; the loop order is fixed,
# so results are still reproducible run to run
@numba.njit(cache=True, nogil=True, fastmath={"reassoc", "contract", "nsz"})
def conv3x3_weight_grad(xp, dy):
    """dw[q, c, i, j] = sum_{s, r, k} dy[s, q, r, k] * xp[s, c, r + i, k + j] (float64)."""
    n, c, hp, wp = xp.shape
    o = dy.shape[1]
    h = hp - 2
    wd = wp - 2
    dw = np.zeros((o, c, 3, 3))
    zero = np.float32(0)  # widened by type unification for float64 inputs
    for q in range(o):
        for ci in range(c):
            t00 = 0.0; t01 = 0.0; t02 = 0.0
            t10 = 0.0; t11 = 0.0; t12 = 0.0
            t20 = 0.0; t21 = 0.0; t22 = 0.0
            for s in range(n):
                xc = xp[s, ci]
                dq = dy[s, q]
                for r in range(h):
                    x0 = xc[r]
                    x1 = xc[r + 1]
                    x2 = xc[r + 2]
                    d = dq[r]
                    u00 = zero; u01 = zero; u02 = zero
                    u10 = zero; u11 = zero; u12 = zero
                    u20 = zero; u21 = zero; u22 = zero
                    for k in range(wd):
                        dk = d[k]
                        u00 += dk * x0[k]; u01 += dk * x0[k + 1]; u02 += dk * x0[k + 2]
                        u10 += dk * x1[k]; u11 += dk * x1[k + 1]; u12 += dk * x1[k + 2]
                        u20 += dk * x2[k]; u21 += dk * x2[k + 1]; u22 += dk * x2[k + 2]
                    t00 += u00; t01 += u01; t02 += u02
                    t10 += u10; t11 += u11; t12 += u12
                    t20 += u20; t21 += u21; t22 += u22
            dw[q, ci, 0, 0] = t00; dw[q, ci, 0, 1] = t01; dw[q, ci, 0, 2] = t02
            dw[q, ci, 1, 0] = t10; dw[q, ci, 1, 1] = t11; dw[q, ci, 1, 2] = t12
            dw[q, ci, 2, 0] = t20; dw[q, ci, 2, 1] = t21; dw[q, ci, 2, 2] = t22
    return dw


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@_jit
def adam_update(p, g, m, v, lr_t, beta1, beta2, c2, eps):
    """In-place Adam: m, v moment updates then p -= lr_t * m / (sqrt(v / c2) + eps).

    ``lr_t`` already carries the first-moment bias correction lr / (1 - beta1^t).
    """
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mi = beta1 * mf[i] + (1 - beta1) * gi
        vi = beta2 * vf[i] + (1 - beta2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] = pf[i] - lr_t * mi / (np.sqrt(vi / c2) + eps)
