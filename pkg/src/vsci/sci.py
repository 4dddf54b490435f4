"""Snapshot-compressive-imaging measurement model.

A video cube is an (H, W, B) float64 array; B frames are collapsed into a
single 2D measurement y[i] = sum_b m_b[i] * x_b[i] by per-frame modulation
masks m_b. Because the sensing operator is a row of diagonals, the Gram
matrix is diagonal with entries q[i] = sum_b m_b[i]^2, and the Euclidean
projection onto {x : Phi x = y} is a cheap elementwise update.

All operations are pure; none mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DeadPixelError, ShapeMismatchError

POLICY_REJECT = "reject"
POLICY_FLOOR = "floor"
DEFAULT_FLOOR_TAU = 1e-6


def validate_cube(data) -> np.ndarray:
    """Check video-cube invariants and return the array as float64.

    A valid cube is a 3D (H, W, B) array of finite values with every
    dimension >= 1. Values are nominally in [0, 1] but are not clamped here;
    clamping happens only at metric/export time.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"cube must be 3D (H, W, B), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeMismatchError(f"cube dims must be >= 1, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("cube contains non-finite entries")
    return arr


@dataclass
class SensingMask:
    """Per-frame modulation masks plus the precomputed diagonal Gram entries.

    frames        (H, W, B) nonnegative mask values (typically {0, 1})
    q_diag        (H, W) with q_diag = sum_b frames[..., b]**2
    policy        "reject": constructing a mask with any q_diag == 0 fails;
                  "floor": divisions use max(q_diag, floor_tau) instead
    floor_tau     divisor floor used under the "floor" policy
    """

    frames: np.ndarray
    q_diag: np.ndarray
    policy: str = POLICY_REJECT
    floor_tau: float = DEFAULT_FLOOR_TAU

    @property
    def height(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[2]

    def effective_q(self) -> np.ndarray:
        """Divisor actually used in projections, honoring the dead-pixel policy."""
        if self.policy == POLICY_FLOOR:
            return np.maximum(self.q_diag, self.floor_tau)
        dead = np.flatnonzero(self.q_diag <= 0.0)
        if dead.size:
            raise DeadPixelError(int(dead[0]))
        return self.q_diag

    def live_pixels(self) -> np.ndarray:
        """Boolean (H, W) map of pixels with nonzero mask energy."""
        return self.q_diag > 0.0


@dataclass
class Measurement:
    """A coded 2D snapshot with optional noise provenance."""

    data: np.ndarray
    noise_sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"measurement must be 2D, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("measurement contains non-finite entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def mask_generate(
    seed: int,
    h: int,
    w: int,
    b: int,
    kind: str = "bernoulli",
    p: float = 0.5,
    policy: str = POLICY_REJECT,
    floor_tau: float = DEFAULT_FLOOR_TAU,
) -> SensingMask:
    """Deterministically generate a sensing mask.

    kind = "bernoulli": iid {0,1} per pixel/frame with P(1) = p.
    kind = "all_ones":  every frame is all ones (q_diag == b everywhere).

    Under policy="reject" a mask whose q_diag vanishes anywhere raises
    DeadPixelError naming the first offending flat index.
    """
    if h < 1 or w < 1 or b < 1:
        raise ValueError(f"mask dims must be >= 1, got {(h, w, b)}")
    if kind == "all_ones":
        frames = np.ones((h, w, b), dtype=np.float64)
    elif kind == "bernoulli":
        if not 0.0 < p <= 1.0:
            raise ValueError(f"bernoulli p must be in (0, 1], got {p}")
        rng = np.random.default_rng(seed)
        frames = (rng.random((h, w, b)) < p).astype(np.float64)
    else:
        raise ValueError(f"unknown mask kind {kind!r}")
    q_diag = np.einsum("hwb,hwb->hw", frames, frames)
    mask = SensingMask(frames=frames, q_diag=q_diag, policy=policy, floor_tau=floor_tau)
    if policy == POLICY_REJECT:
        mask.effective_q()  # raises DeadPixelError if any pixel is dead
    elif policy != POLICY_FLOOR:
        raise ValueError(f"unknown dead-pixel policy {policy!r}")
    return mask


def _check_cube_shape(mask: SensingMask, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.frames.shape:
        raise ShapeMismatchError(
            f"cube shape {x.shape} does not match mask {mask.frames.shape}"
        )
    return x


def _check_meas_shape(mask: SensingMask, y) -> np.ndarray:
    data = y.data if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)
    if data.shape != mask.q_diag.shape:
        raise ShapeMismatchError(
            f"measurement shape {data.shape} does not match mask {mask.q_diag.shape}"
        )
    return data


def forward(mask: SensingMask, x: np.ndarray) -> Measurement:
    """Noiseless coded snapshot: y[i] = sum_b m_b[i] * x_b[i]."""
    x = _check_cube_shape(mask, x)
    data = np.einsum("hwb,hwb->hw", mask.frames, x)
    return Measurement(data=data, noise_sigma=0.0, seed=None)


def adjoint(mask: SensingMask, y) -> np.ndarray:
    """Transpose operator: x_b[i] = m_b[i] * y[i]. Returns an (H, W, B) cube."""
    data = _check_meas_shape(mask, y)
    return mask.frames * data[:, :, None]


def init_estimate(mask: SensingMask, y) -> np.ndarray:
    """Canonical solver initializer; same operation as :func:`adjoint`."""
    return adjoint(mask, y)


def add_noise(y: Measurement, sigma: float, seed: int) -> Measurement:
    """Add iid Gaussian noise, deterministic per seed; records provenance."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Measurement(data=y.data.copy(), noise_sigma=0.0, seed=seed)
    rng = np.random.default_rng(seed)
    noisy = y.data + rng.normal(0.0, sigma, size=y.data.shape)
    return Measurement(data=noisy, noise_sigma=sigma, seed=seed)


def gap_project(mask: SensingMask, y, v: np.ndarray) -> np.ndarray:
    """Euclidean projection of v onto {x : Phi x = y}.

    Computed elementwise as
        out_b[i] = v_b[i] + m_b[i] * (y[i] - sum_c m_c[i] v_c[i]) / q[i],
    where q honors the dead-pixel policy. On non-dead pixels the output is
    measurement-consistent: forward(mask, out) == y.
    """
    v = _check_cube_shape(mask, v)
    data = _check_meas_shape(mask, y)
    q = mask.effective_q()
    residual = (data - np.einsum("hwb,hwb->hw", mask.frames, v)) / q
    return v + mask.frames * residual[:, :, None]


def project_null(mask: SensingMask, w: np.ndarray) -> np.ndarray:
    """Apply the measurement-null-space projector I - Phi^T Q^{-1} Phi to w.

    This is the (self-adjoint) Jacobian of :func:`gap_project` in v, used by
    iteration-map VJPs.
    """
    w = _check_cube_shape(mask, w)
    q = mask.effective_q()
    s = np.einsum("hwb,hwb->hw", mask.frames, w) / q
    return w - mask.frames * s[:, :, None]


def dense_sensing_matrix(mask: SensingMask) -> np.ndarray:
    """Materialize the (n, n*B) sensing matrix of concatenated diagonals.

    Vectorization convention: frame-major stacking of row-major-flattened
    frames, i.e. x_vec = concat(x[..., 0].ravel(), ..., x[..., B-1].ravel()).
    Intended for small diagnostic instances only.
    """
    h, w, b = mask.frames.shape
    n = h * w
    phi = np.zeros((n, n * b))
    for k in range(b):
        phi[:, k * n : (k + 1) * n] = np.diag(mask.frames[:, :, k].ravel())
    return phi


def cube_to_vec(x: np.ndarray) -> np.ndarray:
    """Flatten an (H, W, B) cube with the frame-major convention above."""
    return np.concatenate([x[:, :, k].ravel() for k in range(x.shape[2])])


def vec_to_cube(vec: np.ndarray, h: int, w: int, b: int) -> np.ndarray:
    """Inverse of :func:`cube_to_vec`."""
    return np.stack([vec[k * h * w : (k + 1) * h * w].reshape(h, w) for k in range(b)], axis=2)
