"""Zero-padded 2D cross-correlation layers with hand-written adjoints.

Data layout is channels-last with a leading batch axis: (F, H, W, C).
Kernels are (C_out, C_in, kh, kw) with odd kh, kw; outputs keep the spatial
size ("same" padding). The adjoint identities are exercised by tests:

    <conv(x, K), v> == <x, conv_adjoint_input(v, K)>
    <conv(x, K), v> == <K, conv_grad_kernel(x, v)>  (bias handled separately)
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Zero-pad spatially and return sliding patches (F, H, W, C, kh, kw)."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win  # (F, H, W, C, kh, kw)


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-size cross-correlation: (F, H, W, Cin) -> (F, H, W, Cout)."""
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[-1] != c_in:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {c_in}")
    win = _patches(x, kh, kw)
    out = np.einsum("fhwckl,ockl->fhwo", win, kernel, optimize=True)
    if bias is not None:
        out = out + bias
    return out


def conv_adjoint_input(v: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of conv_forward in its input: (F, H, W, Cout) -> (F, H, W, Cin).

    Equals a same-size cross-correlation of v with the kernel flipped
    spatially and transposed in its channel axes.
    """
    kt = np.flip(kernel, axis=(2, 3)).transpose(1, 0, 2, 3)  # (Cin, Cout, kh, kw)
    return conv_forward(v, np.ascontiguousarray(kt))


def conv_grad_kernel(x: np.ndarray, v: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Adjoint of conv_forward in its kernel: returns (Cout, Cin, kh, kw)."""
    win = _patches(x, kh, kw)
    return np.einsum("fhwckl,fhwo->ockl", win, v, optimize=True)


def conv_grad_bias(v: np.ndarray) -> np.ndarray:
    """Adjoint of the bias add: sums the cotangent over batch and space."""
    return v.sum(axis=(0, 1, 2))


def softplus(z: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + exp(z))."""
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (= derivative of softplus)."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def conv_operator_sigma(
    kernel: np.ndarray, u: np.ndarray, n_iters: int
) -> tuple[float, np.ndarray]:
    """Estimate the spectral norm of the zero-padded conv operator.

    Power iteration on the actual (bias-free) operator at the spatial shape
    of the persistent vector ``u`` (shape (H, W, Cin), treated as one batch
    entry). Returns (sigma_estimate, updated_u); sigma is 0 for the zero
    operator and the iterate is left untouched in that case.
    """
    floor = 1e-12
    u_cur = u[None]  # (1, H, W, Cin)
    history = []
    for _ in range(n_iters):
        v = conv_forward(u_cur, kernel)
        nv = float(np.linalg.norm(v))
        if nv < floor:
            return 0.0, u
        v /= nv
        w = conv_adjoint_input(v, kernel)
        sigma = float(np.linalg.norm(w))
        if sigma < floor:
            return 0.0, u
        history.append(sigma)
        u_cur = w / sigma
    sigma = history[-1]
    # Aitken extrapolation of the geometric tail; the raw estimate approaches
    # the true norm from below, so the correction tightens the normalization.
    if len(history) >= 3:
        d1 = history[-2] - history[-3]
        d2 = history[-1] - history[-2]
        if d1 > 0 and 0 < d2 < d1:
            r = d2 / d1
            sigma = min(sigma + d2 * r / (1.0 - r), 1.5 * sigma)
    return sigma, u_cur[0]


def dense_conv_matrix(kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Materialize the zero-padded conv operator as a dense matrix.

    Maps (h*w*Cin,) -> (h*w*Cout,) for diagnostic SVD checks on small shapes.
    """
    c_out, c_in, _, _ = kernel.shape
    n_in = h * w * c_in
    cols = []
    for j in range(n_in):
        e = np.zeros(n_in)
        e[j] = 1.0
        out = conv_forward(e.reshape(1, h, w, c_in), kernel)
        cols.append(out.ravel())
    return np.stack(cols, axis=1)
