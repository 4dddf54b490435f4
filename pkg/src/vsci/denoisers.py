"""Denoising operators with value, input-VJP, and parameter-VJP.

Four kinds: identity, scale_shift, tv (anisotropic, per frame), and the
trainable conv_residual family D(x) = x + gamma * r(x), where r is a small
stack of zero-padded 3x3 conv layers with softplus between them, applied to
each frame independently (weights shared across frames, so one parameter set
serves any number of frames). The residual form makes the Lipschitz constant
of D - I directly controllable through gamma and per-layer spectral norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .conv import (
    conv_adjoint_input,
    conv_forward,
    conv_grad_bias,
    conv_grad_kernel,
    conv_operator_sigma,
    sigmoid,
    softplus,
)
from .errors import ShapeMismatchError, UnsupportedDenoiserOpError


def _as_frames(x: np.ndarray) -> np.ndarray:
    """(H, W, B) cube -> (B, H, W, 1) batch of single-channel frames."""
    return np.ascontiguousarray(x.transpose(2, 0, 1))[..., None]


def _as_cube(f: np.ndarray) -> np.ndarray:
    """(B, H, W, 1) -> (H, W, B)."""
    return np.ascontiguousarray(f[..., 0].transpose(1, 2, 0))


class Denoiser:
    """Base class; subclasses implement denoise() and, if trainable, VJPs."""

    kind = "abstract"
    trainable = False

    def denoise(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp_input(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise UnsupportedDenoiserOpError(f"{self.kind} denoiser has no input VJP")

    def grad_params(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise UnsupportedDenoiserOpError(f"{self.kind} denoiser has no parameters")

    @staticmethod
    def _check(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeMismatchError(f"expected (H, W, B) cube, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("denoiser input contains non-finite values")
        return x


class IdentityDenoiser(Denoiser):
    kind = "identity"

    def denoise(self, x):
        return self._check(x)

    def vjp_input(self, x, v):
        return np.asarray(v, dtype=np.float64)


@dataclass
class ScaleShiftDenoiser(Denoiser):
    """D(x) = a*x + b; useful for analytic fixed-point tests."""

    a: float
    b: float = 0.0
    kind = "scale_shift"

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("scale_shift parameters must be finite")

    def denoise(self, x):
        return self.a * self._check(x) + self.b

    def vjp_input(self, x, v):
        return self.a * np.asarray(v, dtype=np.float64)


def _tv_grad(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences per frame on an (H, W, B) stack; zero at the far edge."""
    gx = np.zeros_like(z)
    gy = np.zeros_like(z)
    gx[:, :-1] = z[:, 1:] - z[:, :-1]
    gy[:-1] = z[1:] - z[:-1]
    return gx, gy


def _tv_grad_adjoint(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1] -= py[:-1]
    out[1:] += py[:-1]
    return out


def tv_denoise(x: np.ndarray, lam: float, iters: int) -> np.ndarray:
    """Anisotropic TV proximal step, approximately argmin_z 1/2||z-x||^2 + lam*TV(z).

    Solved per frame (no temporal coupling) by projected gradient ascent on
    the box-constrained dual; iters is a fixed iteration count. lam = 0
    returns x unchanged.
    """
    if lam < 0:
        raise ValueError("tv strength must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if lam == 0.0 or iters < 1:
        return x.copy()
    tau = 0.125  # 1 / ||grad^T grad|| for 2D forward differences
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    for _ in range(iters):
        z = x - _tv_grad_adjoint(px, py)
        gx, gy = _tv_grad(z)
        px = np.clip(px + tau * gx, -lam, lam)
        py = np.clip(py + tau * gy, -lam, lam)
    return x - _tv_grad_adjoint(px, py)


def tv_energy(z: np.ndarray, x: np.ndarray, lam: float) -> float:
    """Objective 1/2||z-x||^2 + lam * TV_aniso(z) for diagnostics and tests."""
    gx, gy = _tv_grad(np.asarray(z, dtype=np.float64))
    return 0.5 * float(np.sum((z - x) ** 2)) + lam * float(np.abs(gx).sum() + np.abs(gy).sum())


@dataclass
class TvDenoiser(Denoiser):
    lam: float
    iters: int = 30
    kind = "tv"

    def __post_init__(self):
        if self.lam < 0 or self.iters < 1:
            raise ValueError("tv denoiser needs lam >= 0 and iters >= 1")

    def denoise(self, x):
        return tv_denoise(self._check(x), self.lam, self.iters)


@dataclass
class ConvDenoiserParams:
    """Weights for the conv_residual denoiser.

    kernels[l] is (C_out, C_in, k, k); biases[l] is (C_out,). The first layer
    takes 1 channel, the last produces 1. sn_u holds one persistent power-
    iteration vector per layer, shaped (sn_h, sn_w, C_in); it is state, not a
    trainable parameter, and is excluded from the flat theta vector.
    """

    kernels: list
    biases: list
    gamma: float
    sn_u: list = field(default_factory=list)
    sn_shape: tuple = (16, 16)
    sn_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if len(self.kernels) != len(self.biases) or not self.kernels:
            raise ValueError("kernels and biases must be equal-length, nonempty lists")
        if self.kernels[0].shape[1] != 1 or self.kernels[-1].shape[0] != 1:
            raise ValueError("residual stack must map 1 channel -> 1 channel")
        for a, b in zip(self.kernels[:-1], self.kernels[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("channel chain mismatch between consecutive layers")
        if not self.sn_u:
            rng = np.random.default_rng(self.sn_seed)
            h, w = self.sn_shape
            self.sn_u = [rng.standard_normal((h, w, k.shape[1])) for k in self.kernels]

    @property
    def n_layers(self) -> int:
        return len(self.kernels)

    def n_params(self) -> int:
        return sum(k.size + b.size for k, b in zip(self.kernels, self.biases))

    def flatten(self) -> np.ndarray:
        parts = []
        for k, b in zip(self.kernels, self.biases):
            parts.append(k.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def unflatten(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params():
            raise ShapeMismatchError(
                f"theta has {theta.size} entries, architecture needs {self.n_params()}"
            )
        pos = 0
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            self.kernels[i] = theta[pos : pos + k.size].reshape(k.shape).copy()
            pos += k.size
            self.biases[i] = theta[pos : pos + b.size].reshape(b.shape).copy()
            pos += b.size


def spectral_normalize(params: ConvDenoiserParams, n_iters: int) -> ConvDenoiserParams:
    """Scale each conv layer so its estimated operator norm is <= 1.

    Runs power iteration on the actual zero-padded conv operator at the
    persistent probe shape, updating sn_u in place, then multiplies the
    kernel by min(1, 1/sigma). Deterministic given sn_u. Not thread-safe
    with respect to a shared params object.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    for i, kernel in enumerate(params.kernels):
        sigma, u = conv_operator_sigma(kernel, params.sn_u[i], n_iters)
        params.sn_u[i] = u
        if sigma > 1.0:
            params.kernels[i] = kernel / sigma
    return params


@dataclass
class ConvResidualDenoiser(Denoiser):
    params: ConvDenoiserParams
    kind = "conv_residual"
    trainable = True

    def _residual_forward(self, frames: np.ndarray):
        """Forward through the conv stack, caching activations for VJPs."""
        acts = [frames]  # input to each layer
        preacts = []
        h = frames
        last = self.params.n_layers - 1
        for l, (k, b) in enumerate(zip(self.params.kernels, self.params.biases)):
            z = conv_forward(h, k, b)
            if l < last:
                preacts.append(z)
                h = softplus(z)
                acts.append(h)
            else:
                h = z
        return h, acts, preacts

    def denoise(self, x):
        x = self._check(x)
        r, _, _ = self._residual_forward(_as_frames(x))
        return x + self.params.gamma * _as_cube(r)

    def vjp_input(self, x, v):
        x = self._check(x)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeMismatchError(f"cotangent {v.shape} vs input {x.shape}")
        _, _, preacts = self._residual_forward(_as_frames(x))
        w = _as_frames(v)
        for l in range(self.params.n_layers - 1, -1, -1):
            w = conv_adjoint_input(w, self.params.kernels[l])
            if l > 0:
                w = w * sigmoid(preacts[l - 1])
        return v + self.params.gamma * _as_cube(w)

    def grad_params(self, x, v):
        x = self._check(x)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeMismatchError(f"cotangent {v.shape} vs input {x.shape}")
        _, acts, preacts = self._residual_forward(_as_frames(x))
        n = self.params.n_layers
        grads_k = [None] * n
        grads_b = [None] * n
        w = _as_frames(v)
        for l in range(n - 1, -1, -1):
            k = self.params.kernels[l]
            grads_k[l] = conv_grad_kernel(acts[l], w, k.shape[2], k.shape[3])
            grads_b[l] = conv_grad_bias(w)
            if l > 0:
                w = conv_adjoint_input(w, k)
                w = w * sigmoid(preacts[l - 1])
        parts = []
        for gk, gb in zip(grads_k, grads_b):
            parts.append(gk.ravel())
            parts.append(gb.ravel())
        return self.params.gamma * np.concatenate(parts)

    # parameter-vector plumbing used by the training loop
    def n_params(self) -> int:
        return self.params.n_params()

    def get_theta(self) -> np.ndarray:
        return self.params.flatten()

    def set_theta(self, theta: np.ndarray) -> None:
        self.params.unflatten(theta)

    def spectral_normalize(self, n_iters: int) -> None:
        spectral_normalize(self.params, n_iters)


def _blur_minus_delta(k: int = 3) -> np.ndarray:
    f = np.full((k, k), 1.0 / (k * k))
    f[k // 2, k // 2] -= 1.0
    return f


def make_conv_residual(
    seed: int,
    channels: int = 8,
    n_layers: int = 3,
    kernel: int = 3,
    gamma: float = 0.1,
    init: str = "smooth",
    noise_scale: float = 0.02,
    sn_shape: tuple = (16, 16),
    zero_last: bool = False,
) -> ConvResidualDenoiser:
    """Build a conv_residual denoiser.

    init="smooth" wires antisymmetric channel pairs so the stack starts out
    as an exact local-smoothing filter (softplus(u) - softplus(-u) == u),
    which keeps the residual contractive from the first iteration; a small
    seeded perturbation breaks the symmetry so every parameter matters.
    init="zero" gives the exact identity denoiser; init="random" is plain
    scaled Gaussian init. zero_last=True zeroes the final combine layer so
    the denoiser starts as the exact identity while keeping pre-wired
    feature pairs; the canonical starting point for training runs.
    """
    if init == "smooth" and (channels % 2 or n_layers < 2):
        raise ValueError("smooth init needs even channels and >= 2 layers")
    rng = np.random.default_rng(seed)
    shapes = []
    chain = [1] + [channels] * (n_layers - 1) + [1]
    for l in range(n_layers):
        shapes.append((chain[l + 1], chain[l], kernel, kernel))
    kernels = [np.zeros(s) for s in shapes]
    biases = [np.zeros(s[0]) for s in shapes]

    if init == "random":
        for i, s in enumerate(shapes):
            kernels[i] = rng.standard_normal(s) * noise_scale
    elif init == "smooth":
        c = kernel // 2
        base = [_blur_minus_delta(kernel)]
        shift_x = np.zeros((kernel, kernel))
        shift_x[c, c + 1 if kernel > 1 else c] = 0.5
        shift_x[c, c] -= 0.5
        shift_y = np.zeros((kernel, kernel))
        shift_y[c + 1 if kernel > 1 else c, c] = 0.5
        shift_y[c, c] -= 0.5
        base += [shift_x, shift_y]
        npairs = channels // 2
        filters = [base[i % len(base)] for i in range(npairs)]
        # layer 0: +/- filter pairs
        for i, f in enumerate(filters):
            kernels[0][2 * i, 0] = f
            kernels[0][2 * i + 1, 0] = -f
        # middle layers: pair-preserving antisymmetric pass-through
        for l in range(1, n_layers - 1):
            for i in range(npairs):
                kernels[l][2 * i, 2 * i, c, c] = 1.0
                kernels[l][2 * i, 2 * i + 1, c, c] = -1.0
                kernels[l][2 * i + 1, 2 * i, c, c] = -1.0
                kernels[l][2 * i + 1, 2 * i + 1, c, c] = 1.0
        # last layer: antisymmetric combine, weighted toward the blur pair
        weights = [1.0] + [0.3] * (npairs - 1)
        for i, wgt in enumerate(weights):
            kernels[-1][0, 2 * i, c, c] = wgt
            kernels[-1][0, 2 * i + 1, c, c] = -wgt
        for i in range(n_layers):
            kernels[i] = kernels[i] + rng.standard_normal(shapes[i]) * noise_scale
    elif init != "zero":
        raise ValueError(f"unknown init {init!r}")

    if zero_last:
        kernels[-1] = np.zeros(shapes[-1])

    params = ConvDenoiserParams(
        kernels=kernels, biases=biases, gamma=gamma, sn_shape=sn_shape, sn_seed=seed
    )
    return ConvResidualDenoiser(params)


def estimate_residual_lipschitz(
    d: Denoiser, seed: int, n_pairs: int, shape: tuple
) -> float:
    """Sampled lower bound on the Lipschitz constant of D - I.

    Maximum of ||(D-I)(x) - (D-I)(x')|| / ||x - x'|| over n_pairs random
    pairs drawn uniformly from [0, 1]^shape.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_pairs):
        x = rng.random(shape)
        xp = rng.random(shape)
        dx = np.linalg.norm(x - xp)
        if dx == 0:
            continue
        rx = d.denoise(x) - x
        rxp = d.denoise(xp) - xp
        best = max(best, float(np.linalg.norm(rx - rxp) / dx))
    return best


def save_denoiser(prefix: str, d: ConvResidualDenoiser) -> None:
    """Write <prefix>.vsci (flat theta) and <prefix>.meta (architecture)."""
    p = d.params
    tensorio.write_tensor(prefix + ".vsci", p.flatten())
    meta = {
        "kind": "conv_residual",
        "n_layers": p.n_layers,
        "channels": p.kernels[0].shape[0],
        "kernel": p.kernels[0].shape[2],
        "gamma": repr(p.gamma),
        "sn_h": p.sn_shape[0],
        "sn_w": p.sn_shape[1],
        "sn_seed": p.sn_seed,
    }
    tensorio.write_kv(prefix + ".meta", meta)


def load_denoiser(prefix: str) -> ConvResidualDenoiser:
    meta = tensorio.read_kv(prefix + ".meta")
    if meta.get("kind") != "conv_residual":
        raise ValueError(f"{prefix}.meta: not a conv_residual checkpoint")
    d = make_conv_residual(
        seed=int(meta["sn_seed"]),
        channels=int(meta["channels"]),
        n_layers=int(meta["n_layers"]),
        kernel=int(meta["kernel"]),
        gamma=float(meta["gamma"]),
        init="zero",
        sn_shape=(int(meta["sn_h"]), int(meta["sn_w"])),
    )
    d.set_theta(tensorio.read_tensor(prefix + ".vsci"))
    return d
