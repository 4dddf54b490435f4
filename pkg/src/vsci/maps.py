"""Concrete iteration maps f(x; y, masks) whose fixed points are reconstructions.

DeGapMap:  f(x) = D(x + Phi^T (Phi Phi^T)^{-1} (y - Phi x))   (denoise the
           Euclidean projection onto the measurement-consistent set)
DeRnnMap:  f(x) = x + gamma * cell(x, Phi^T y, Phi^T (y - Phi x)) with a
           small gated convolutional cell
plus classical plug-and-play baselines (GAP with per-iteration TV strength,
ADMM with a pluggable denoiser) used for stability comparisons.

Maps are immutable after construction; apply/vjp calls are pure.
"""

from __future__ import annotations

import time
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
from .denoisers import Denoiser, _as_cube, _as_frames, tv_denoise
from .errors import ShapeMismatchError
from .fixed_point import FixedPointConfig, IterationTrace, SolveResult, _EPS, _trace_psnr
from .sci import (
    Measurement,
    SensingMask,
    adjoint,
    forward,
    gap_project,
    init_estimate,
    project_null,
)


def _meas_data(y) -> np.ndarray:
    return y.data if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)


@dataclass
class DeGapMap:
    """Projection-then-denoise iteration map."""

    denoiser: Denoiser
    mask: SensingMask
    y: Measurement

    def __post_init__(self):
        if _meas_data(self.y).shape != self.mask.q_diag.shape:
            raise ShapeMismatchError("measurement does not match mask")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.denoiser.denoise(gap_project(self.mask, self.y, x))

    def vjp_input(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = gap_project(self.mask, self.y, x)
        return project_null(self.mask, self.denoiser.vjp_input(u, v))

    def grad_params(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = gap_project(self.mask, self.y, x)
        return self.denoiser.grad_params(u, v)


@dataclass
class GatedConvCell:
    """Gated convolutional refinement over (x, Phi^T y, Phi^T(y - Phi x)).

    hidden = softplus(conv(u))        u: 3 input channels per frame
    gate   = sigmoid(conv(hidden))
    cand   = tanh(conv(hidden))
    out    = gate * cand              one channel per frame

    With all-zero parameters the candidate branch vanishes, so the enclosing
    residual map is exactly the identity.
    """

    k_in: np.ndarray
    b_in: np.ndarray
    k_gate: np.ndarray
    b_gate: np.ndarray
    k_cand: np.ndarray
    b_cand: np.ndarray
    gamma: float = 0.1
    sn_u: list = field(default_factory=list)
    sn_shape: tuple = (16, 16)
    sn_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        for arr in (self.k_in, self.b_in, self.k_gate, self.b_gate, self.k_cand, self.b_cand):
            if not np.isfinite(arr).all():
                raise ValueError("cell parameters must be finite")
        if not self.sn_u:
            rng = np.random.default_rng(self.sn_seed)
            h, w = self.sn_shape
            self.sn_u = [
                rng.standard_normal((h, w, k.shape[1]))
                for k in (self.k_in, self.k_gate, self.k_cand)
            ]

    def _kernels(self):
        return [self.k_in, self.k_gate, self.k_cand]

    def _forward(self, u: np.ndarray):
        z_h = conv_forward(u, self.k_in, self.b_in)
        h = softplus(z_h)
        z_g = conv_forward(h, self.k_gate, self.b_gate)
        g = sigmoid(z_g)
        z_c = conv_forward(h, self.k_cand, self.b_cand)
        c = np.tanh(z_c)
        return g * c, (u, z_h, h, g, c)

    def _backward(self, cache, cot):
        """Cotangents w.r.t. the stacked input channels and all parameters."""
        u, z_h, h, g, c = cache
        dg = cot * c
        dc = cot * g
        dz_g = dg * g * (1.0 - g)
        dz_c = dc * (1.0 - c * c)
        dh = conv_adjoint_input(dz_g, self.k_gate) + conv_adjoint_input(dz_c, self.k_cand)
        dz_h = dh * sigmoid(z_h)
        du = conv_adjoint_input(dz_h, self.k_in)
        grads = {
            "k_in": conv_grad_kernel(u, dz_h, self.k_in.shape[2], self.k_in.shape[3]),
            "b_in": conv_grad_bias(dz_h),
            "k_gate": conv_grad_kernel(h, dz_g, self.k_gate.shape[2], self.k_gate.shape[3]),
            "b_gate": conv_grad_bias(dz_g),
            "k_cand": conv_grad_kernel(h, dz_c, self.k_cand.shape[2], self.k_cand.shape[3]),
            "b_cand": conv_grad_bias(dz_c),
        }
        return du, grads

    def n_params(self) -> int:
        return sum(a.size for a in (self.k_in, self.b_in, self.k_gate, self.b_gate, self.k_cand, self.b_cand))

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for a in (self.k_in, self.b_in, self.k_gate, self.b_gate, self.k_cand, self.b_cand)]
        )

    def unflatten(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params():
            raise ShapeMismatchError(
                f"theta has {theta.size} entries, cell needs {self.n_params()}"
            )
        pos = 0
        for name in ("k_in", "b_in", "k_gate", "b_gate", "k_cand", "b_cand"):
            cur = getattr(self, name)
            setattr(self, name, theta[pos : pos + cur.size].reshape(cur.shape).copy())
            pos += cur.size

    def spectral_normalize(self, n_iters: int) -> None:
        for i, name in enumerate(("k_in", "k_gate", "k_cand")):
            kernel = getattr(self, name)
            sig, u = conv_operator_sigma(kernel, self.sn_u[i], n_iters)
            self.sn_u[i] = u
            if sig > 1.0:
                setattr(self, name, kernel / sig)


def make_gated_cell(
    seed: int, channels: int = 8, kernel: int = 3, gamma: float = 0.1,
    init_scale: float = 0.0, sn_shape: tuple = (16, 16),
) -> GatedConvCell:
    """Build a gated cell; init_scale 0 gives the exact identity map."""
    rng = np.random.default_rng(seed)

    def w(shape):
        if init_scale == 0.0:
            return np.zeros(shape)
        return rng.standard_normal(shape) * init_scale

    return GatedConvCell(
        k_in=w((channels, 3, kernel, kernel)),
        b_in=w((channels,)),
        k_gate=w((1, channels, kernel, kernel)),
        b_gate=w((1,)),
        k_cand=w((1, channels, kernel, kernel)),
        b_cand=w((1,)),
        gamma=gamma,
        sn_shape=sn_shape,
        sn_seed=seed,
    )


@dataclass
class DeRnnMap:
    """Recurrent refinement map f(x) = x + gamma * cell(x, Phi^T y, Phi^T(y - Phi x))."""

    cell: GatedConvCell
    mask: SensingMask
    y: Measurement

    def __post_init__(self):
        if _meas_data(self.y).shape != self.mask.q_diag.shape:
            raise ShapeMismatchError("measurement does not match mask")
        self._phi_t_y = adjoint(self.mask, self.y)

    def _inputs(self, x: np.ndarray) -> np.ndarray:
        res = adjoint(self.mask, _meas_data(self.y) - forward(self.mask, x).data)
        # (B, H, W, 3): current estimate, backprojected data, backprojected residual
        return np.concatenate(
            [_as_frames(x), _as_frames(self._phi_t_y), _as_frames(res)], axis=3
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.cell.gamma == 0.0:
            return np.asarray(x, dtype=np.float64).copy()
        out, _ = self.cell._forward(self._inputs(x))
        return x + self.cell.gamma * _as_cube(out)

    def vjp_input(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.cell.gamma == 0.0:
            return v.copy()
        _, cache = self.cell._forward(self._inputs(x))
        du, _ = self.cell._backward(cache, _as_frames(v))
        d_direct = _as_cube(du[..., 0:1])
        d_res = _as_cube(du[..., 2:3])
        # residual input contributes through -Phi^T Phi
        return v + self.cell.gamma * (
            d_direct - adjoint(self.mask, forward(self.mask, d_res).data)
        )

    def grad_params(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        _, cache = self.cell._forward(self._inputs(x))
        _, grads = self.cell._backward(cache, _as_frames(v))
        flat = np.concatenate(
            [grads[n].ravel() for n in ("k_in", "b_in", "k_gate", "b_gate", "k_cand", "b_cand")]
        )
        return self.cell.gamma * flat


@dataclass
class AdmmState:
    """Split variables for the ADMM baseline; mu is absorbed into the denoiser."""

    x: np.ndarray
    v: np.ndarray
    u: np.ndarray
    rho: float
    mu: float = 0.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not (self.x.shape == self.v.shape == self.u.shape):
            raise ShapeMismatchError("ADMM state cubes must share a shape")


def pnp_admm_step(state: AdmmState, mask: SensingMask, y, denoiser: Denoiser) -> AdmmState:
    """One ADMM sweep with the diagonal closed-form data update.

    x <- z + Phi^T (rho I + Q)^{-1} (y - Phi z), z = v - u/rho
    v <- D(x + u/rho)
    u <- u + rho (x - v)
    """
    ydata = _meas_data(y)
    z = state.v - state.u / state.rho
    resid = (ydata - forward(mask, z).data) / (state.rho + mask.q_diag)
    x_new = z + mask.frames * resid[:, :, None]
    v_new = denoiser.denoise(x_new + state.u / state.rho)
    u_new = state.u + state.rho * (x_new - v_new)
    return AdmmState(x=x_new, v=v_new, u=u_new, rho=state.rho, mu=state.mu)


def pnp_admm_solve(
    mask: SensingMask,
    y,
    denoiser: Denoiser,
    rho: float,
    max_iter: int,
    tol: float = 1e-6,
    psnr_ref=None,
) -> SolveResult:
    """Iterate pnp_admm_step from the canonical initializer, tracing progress."""
    x0 = init_estimate(mask, y)
    state = AdmmState(x=x0, v=x0.copy(), u=np.zeros_like(x0), rho=rho)
    trace = IterationTrace()
    for k in range(1, max_iter + 1):
        t0 = time.perf_counter()
        new = pnp_admm_step(state, mask, y, denoiser)
        dt = time.perf_counter() - t0
        res = float(np.linalg.norm(new.x - state.x))
        rel = res / (float(np.linalg.norm(state.x)) + _EPS)
        trace.append(res, rel, dt, _trace_psnr(new.x, psnr_ref))
        state = new
        if rel <= tol:
            return SolveResult(x_hat=state.x, converged=True, iterations=k, trace=trace)
    return SolveResult(x_hat=state.x, converged=False, iterations=max_iter, trace=trace)


def pnp_gap_solve(
    mask: SensingMask,
    y,
    schedule,
    max_iter: int,
    tv_iters: int = 30,
    tol: float = 1e-6,
    psnr_ref=None,
) -> SolveResult:
    """Classical GAP baseline: project, then TV-denoise with a per-iteration
    strength taken from `schedule` (cycled when shorter than max_iter)."""
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must contain at least one strength")
    v = init_estimate(mask, y)
    trace = IterationTrace()
    for k in range(1, max_iter + 1):
        t0 = time.perf_counter()
        x = gap_project(mask, y, v)
        v_new = tv_denoise(x, schedule[(k - 1) % len(schedule)], tv_iters)
        dt = time.perf_counter() - t0
        res = float(np.linalg.norm(v_new - v))
        rel = res / (float(np.linalg.norm(v)) + _EPS)
        trace.append(res, rel, dt, _trace_psnr(v_new, psnr_ref))
        v = v_new
        if rel <= tol:
            return SolveResult(x_hat=v, converged=True, iterations=k, trace=trace)
    return SolveResult(x_hat=v, converged=False, iterations=max_iter, trace=trace)


def save_cell(prefix: str, cell: GatedConvCell) -> None:
    """Write <prefix>.vsci (flat theta) and <prefix>.meta (architecture)."""
    tensorio.write_tensor(prefix + ".vsci", cell.flatten())
    meta = {
        "kind": "gated_cell",
        "channels": cell.k_in.shape[0],
        "kernel": cell.k_in.shape[2],
        "gamma": repr(cell.gamma),
        "sn_h": cell.sn_shape[0],
        "sn_w": cell.sn_shape[1],
        "sn_seed": cell.sn_seed,
    }
    tensorio.write_kv(prefix + ".meta", meta)


def load_cell(prefix: str) -> GatedConvCell:
    meta = tensorio.read_kv(prefix + ".meta")
    if meta.get("kind") != "gated_cell":
        raise ValueError(f"{prefix}.meta: not a gated_cell checkpoint")
    cell = make_gated_cell(
        seed=int(meta["sn_seed"]),
        channels=int(meta["channels"]),
        kernel=int(meta["kernel"]),
        gamma=float(meta["gamma"]),
        init_scale=0.0,
        sn_shape=(int(meta["sn_h"]), int(meta["sn_w"])),
    )
    cell.unflatten(tensorio.read_tensor(prefix + ".vsci"))
    return cell
