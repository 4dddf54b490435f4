"""Independent dense-matrix oracles used across the test suite.

Everything here builds the sensing operator explicitly as an n x nB matrix
of concatenated diagonals and works with plain linear algebra, staying
independent of the elementwise code paths it checks.
"""

import numpy as np


def dense_phi(mask) -> np.ndarray:
    """(n, n*B) matrix; column block k is diag(frame k, row-major flattened)."""
    h, w, b = mask.frames.shape
    n = h * w
    phi = np.zeros((n, n * b))
    for k in range(b):
        phi[:, k * n : (k + 1) * n] = np.diag(mask.frames[:, :, k].ravel())
    return phi


def vec(cube: np.ndarray) -> np.ndarray:
    """Frame-major vectorization matching dense_phi's column order."""
    h, w, b = cube.shape
    return np.concatenate([cube[:, :, k].ravel() for k in range(b)])


def unvec(v: np.ndarray, h: int, w: int, b: int) -> np.ndarray:
    return np.stack([v[k * h * w : (k + 1) * h * w].reshape(h, w) for k in range(b)], axis=2)


def dense_gap_project(mask, y_data: np.ndarray, v_cube: np.ndarray) -> np.ndarray:
    """v + Phi^T (Phi Phi^T)^{-1} (y - Phi v) with an explicit matrix inverse."""
    h, w, b = mask.frames.shape
    phi = dense_phi(mask)
    gram_inv = np.linalg.inv(phi @ phi.T)
    out = vec(v_cube) + phi.T @ (gram_inv @ (y_data.ravel() - phi @ vec(v_cube)))
    return unvec(out, h, w, b)


def dense_projector(mask) -> np.ndarray:
    """P = Phi^T (Phi Phi^T)^{-1} Phi."""
    phi = dense_phi(mask)
    return phi.T @ np.linalg.inv(phi @ phi.T) @ phi


def random_mask(seed, h, w, b, p=0.5):
    """Bernoulli mask with no dead pixels (resampled per pixel if needed)."""
    from vsci.sci import SensingMask

    rng = np.random.default_rng(seed)
    frames = (rng.random((h, w, b)) < p).astype(float)
    dead = frames.sum(axis=2) == 0
    while dead.any():
        frames[dead] = (rng.random((int(dead.sum()), b)) < p).astype(float)
        dead = frames.sum(axis=2) == 0
    q = np.einsum("hwb,hwb->hw", frames, frames)
    return SensingMask(frames=frames, q_diag=q)


def numeric_cell_count(n: int) -> np.ndarray:
    return np.arange(n, dtype=float)
