"""Array layers with explicit forward/backward passes.

Everything the velocity model needs, written directly against numpy so the
gradients are exact by construction: same-padded 3x3 convolution (patch
GEMM), depthwise temporal convolution, SiLU, feature-wise affine
modulation, dense layers, and the fixed sinusoidal encoding. Each
``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the cache.

Activations for the convolutional trunk are channels-last ``(T, H, W, C)``:
patch extraction then reduces to nine contiguous block copies, which is
what keeps a pure-numpy training loop fast enough on one core. Convolution
weights keep the conventional ``(C_out, C_in, 3, 3)`` storage; the
channels-last weight matrix is materialized per call (it is tiny).
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ModelError

_tls = threading.local()


def _workspace(tag: str, shape: tuple[int, ...]) -> np.ndarray:
    """Per-thread scratch buffers; patch tensors dominate the working set."""
    pool = getattr(_tls, "pool", None)
    if pool is None:
        pool = _tls.pool = {}
    buf = pool.get(tag)
    if buf is None or buf.shape != shape:
        buf = pool[tag] = np.empty(shape)
    return buf


def _pad_hw(x: np.ndarray) -> np.ndarray:
    t, h, w, c = x.shape
    xp = np.zeros((t, h + 2, w + 2, c))
    xp[:, 1 : h + 1, 1 : w + 1] = x
    return xp


def _patches_from(xp: np.ndarray, tag: str) -> np.ndarray:
    t, hp, wp, cin = xp.shape
    h, wd = hp - 2, wp - 2
    patches = _workspace(tag, (t, h, wd, 9, cin))
    for di in range(3):
        for dj in range(3):
            patches[:, :, :, di * 3 + dj] = xp[:, di : di + h, dj : dj + wd]
    return patches


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution over (H, W), applied per frame.

    x: (T, H, W, Cin); w: (Cout, Cin, 3, 3); b: (Cout,). The cache keeps
    only the padded input; patch tensors live in scratch space and are
    rebuilt on the backward pass (cheaper than holding them per layer).
    """
    t, h, wd, cin = x.shape
    cout = w.shape[0]
    xp = _pad_hw(x)
    pmat = _patches_from(xp, "patch_fwd").reshape(t * h * wd, 9 * cin)
    wmat = w.transpose(2, 3, 1, 0).reshape(9 * cin, cout)  # [di, dj, cin] -> cout
    y = pmat @ wmat + b
    return y.reshape(t, h, wd, cout), (xp, wmat, x.shape)


def conv2d_backward(g: np.ndarray, cache):
    """Returns (dx, dw, db) for conv2d_forward."""
    xp, wmat, x_shape = cache
    t, h, wd, cin = x_shape
    cout = g.shape[-1]
    gf = g.reshape(t * h * wd, cout)
    pmat = _patches_from(xp, "patch_bwd").reshape(t * h * wd, 9 * cin)
    dwmat = pmat.T @ gf  # (9*Cin, Cout)
    dw = dwmat.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = gf.sum(axis=0)
    dpatch = gf @ wmat.T
    dpatch = dpatch.reshape(t, h, wd, 9, cin)
    dxp = np.zeros((t, h + 2, wd + 2, cin))
    for di in range(3):
        for dj in range(3):
            dxp[:, di : di + h, dj : dj + wd] += dpatch[:, :, :, di * 3 + dj]
    return dxp[:, 1 : h + 1, 1 : wd + 1], dw, db


def tconv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Depthwise temporal convolution, kernel 3, zero-padded in time.

    x: (T, H, W, C); w: (C, 3); b: (C,).
    """
    t = x.shape[0]
    xp = np.concatenate([np.zeros_like(x[:1]), x, np.zeros_like(x[:1])], axis=0)
    y = (
        w[:, 0] * xp[0:t]
        + w[:, 1] * xp[1 : t + 1]
        + w[:, 2] * xp[2 : t + 2]
        + b
    )
    return y, (xp, x.shape)


def tconv_backward(g: np.ndarray, w: np.ndarray, cache):
    xp, x_shape = cache
    t = x_shape[0]
    dw = np.stack(
        [
            np.einsum("thwc,thwc->c", g, xp[0:t]),
            np.einsum("thwc,thwc->c", g, xp[1 : t + 1]),
            np.einsum("thwc,thwc->c", g, xp[2 : t + 2]),
        ],
        axis=1,
    )
    db = g.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    dxp[0:t] += w[:, 0] * g
    dxp[1 : t + 1] += w[:, 1] * g
    dxp[2 : t + 2] += w[:, 2] * g
    return dxp[1 : t + 1], dw, db


def silu_forward(x: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_backward(g: np.ndarray, cache):
    x, sig = cache
    return g * sig * (1.0 + x * (1.0 - sig))


def film_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """y = x * (1 + scale_c) + shift_c per channel of a (T, H, W, C) map."""
    y = x * (1.0 + scale) + shift
    return y, (x, scale)


def film_backward(g: np.ndarray, cache):
    x, scale = cache
    dx = g * (1.0 + scale)
    dscale = np.einsum("thwc,thwc->c", g, x)
    dshift = g.sum(axis=(0, 1, 2))
    return dx, dscale, dshift


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b for a 1-d input vector."""
    return x @ w + b, x


def linear_backward(g: np.ndarray, w: np.ndarray, cache):
    x = cache
    return g @ w.T, np.outer(x, g), g.copy()


def sinusoidal_encoding(position: float, dim: int) -> np.ndarray:
    """Fixed interleaved sin/cos code; position 0 encodes to (0, 1, 0, 1, ...)."""
    if dim < 2 or dim % 2 != 0:
        raise ModelError(f"sinusoidal encoding dimension must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = float(position) * freqs
    enc = np.empty(dim)
    enc[0::2] = np.sin(angles)
    enc[1::2] = np.cos(angles)
    return enc
