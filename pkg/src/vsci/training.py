"""Training with implicit (Jacobian-free) differentiation through fixed points.

The loss 1/2 ||x_hat - x_star||^2 is differentiated without unrolling: with
J the map Jacobian at the fixed point, the adjoint vector solves
    a = J^T a + (x_hat - x_star),
either by the same Anderson engine used for the forward pass (mode
"fixed_point") or by a truncated Neumann sum (mode "neumann"). The parameter
gradient is then the map's parameter-VJP contracted with a. Memory stays
constant in the forward iteration count because nothing is unrolled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import memtrack
from .errors import DivergedError, ShapeMismatchError, TrainingAbortedError
from .fixed_point import FixedPointConfig, SolveResult, anderson_solve
from .metrics import psnr
from .sci import init_estimate


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr: float = 1e-3
    lr_decay: float = 0.1       # fraction removed every lr_decay_every epochs
    lr_decay_every: int = 10
    momentum: float = 0.0
    clip_norm: float = 0.0  # 0 disables gradient-norm clipping
    backward_mode: str = "fixed_point"  # or "neumann"
    neumann_order: int = 8
    backward_tol: float = 1e-8
    backward_max_iter: int = 100
    seed: int = 0
    sn_iters_step: int = 1      # power iterations after each update
    sn_iters_val: int = 20      # power iterations before validation
    forward: FixedPointConfig = field(default_factory=FixedPointConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.backward_tol <= 0 or self.backward_max_iter < 1:
            raise ValueError("rates and counts must be positive")
        if self.backward_mode not in ("fixed_point", "neumann"):
            raise ValueError(f"unknown backward mode {self.backward_mode!r}")
        if self.neumann_order < 0:
            raise ValueError("neumann_order must be >= 0")

    def backward_config(self) -> FixedPointConfig:
        return replace(
            self.forward,
            tol=self.backward_tol,
            max_iter=self.backward_max_iter,
            record_trace=False,
        )


def mse_loss(x_hat: np.ndarray, x_star: np.ndarray) -> float:
    """1/2 sum((x_hat - x_star)^2); gradient w.r.t. x_hat is x_hat - x_star."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_hat.shape != x_star.shape:
        raise ShapeMismatchError(f"{x_hat.shape} vs {x_star.shape}")
    return 0.5 * float(np.sum((x_hat - x_star) ** 2))


def backward_fixed_point(vjp_at_xhat, g: np.ndarray, cfg: FixedPointConfig) -> SolveResult:
    """Solve a = J^T a + g from a(0) = 0 with the Anderson engine.

    Returns the full SolveResult; x_hat is a(inf) ~ (I - J^T)^{-1} g.
    Raises DivergedError when the adjoint iteration blows up (empirically
    ||J^T|| >= 1 with no usable mixing direction).
    """
    if not np.isfinite(g).all():
        raise ValueError("g must be finite")
    g = np.asarray(g, dtype=np.float64)
    return anderson_solve(lambda a: vjp_at_xhat(a) + g, np.zeros_like(g), cfg)


def neumann_backward(vjp_at_xhat, g: np.ndarray, order: int) -> np.ndarray:
    """Truncated series sum_{p=0..order} (J^T)^p g via repeated VJPs."""
    if order < 0:
        raise ValueError("order must be >= 0")
    g = np.asarray(g, dtype=np.float64)
    acc = memtrack.track(g.copy())
    term = g
    for _ in range(order):
        term = memtrack.track(vjp_at_xhat(term))
        acc += term
    return acc


@dataclass
class LossGradResult:
    grad: np.ndarray
    loss: float
    x_hat: np.ndarray
    forward_converged: bool
    forward_iterations: int
    backward_converged: bool
    approximate: bool  # true when either solve stopped at its iteration cap


def loss_gradient(model, sample, cfg: TrainConfig) -> LossGradResult:
    """Full implicit gradient of the sample loss w.r.t. the model parameters.

    sample is (mask, y, x_star). The forward fixed point starts from the
    canonical initializer Phi^T y. Non-converged solves still yield a
    gradient, flagged approximate.
    """
    mask, y, x_star = sample
    fmap = model.make_map(mask, y)
    fwd = anderson_solve(fmap.apply, init_estimate(mask, y), cfg.forward)
    x_hat = memtrack.track(fwd.x_hat)
    g = memtrack.track(x_hat - x_star)
    loss = mse_loss(x_hat, x_star)
    if cfg.backward_mode == "neumann":
        a = neumann_backward(lambda v: fmap.vjp_input(x_hat, v), g, cfg.neumann_order)
        backward_converged = True
    else:
        bwd = backward_fixed_point(
            lambda v: fmap.vjp_input(x_hat, v), g, cfg.backward_config()
        )
        a = memtrack.track(bwd.x_hat)
        backward_converged = bwd.converged
    grad = memtrack.track(fmap.grad_params(x_hat, a))
    return LossGradResult(
        grad=grad,
        loss=loss,
        x_hat=x_hat,
        forward_converged=fwd.converged,
        forward_iterations=fwd.iterations,
        backward_converged=backward_converged,
        approximate=not (fwd.converged and backward_converged),
    )


def loss_eval(model, sample, cfg: TrainConfig) -> float:
    """Loss only (forward solve + MSE); used by finite differencing."""
    mask, y, x_star = sample
    fmap = model.make_map(mask, y)
    fwd = anderson_solve(fmap.apply, init_estimate(mask, y), cfg.forward)
    return mse_loss(fwd.x_hat, x_star)


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_psnr: float
    skipped: int


@dataclass
class TrainResult:
    theta: np.ndarray
    log: list

    def log_to_csv(self, path: str) -> None:
        lines = ["epoch,mean_loss,val_psnr,skipped"]
        for row in self.log:
            vp = f"{row.val_psnr:.17g}" if np.isfinite(row.val_psnr) else ""
            lines.append(f"{row.epoch},{row.mean_loss:.17g},{vp},{row.skipped}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def evaluate_psnr(model, samples, solver_cfg: FixedPointConfig) -> float:
    """Mean PSNR (clamped reconstructions) of the model over samples."""
    vals = []
    for mask, y, x_star in samples:
        fmap = model.make_map(mask, y)
        res = anderson_solve(fmap.apply, init_estimate(mask, y), solver_cfg)
        _, mean_db = psnr(np.clip(res.x_hat, 0.0, 1.0), x_star)
        vals.append(mean_db)
    return float(np.mean(vals))


def train(model, dataset, cfg: TrainConfig, val_set=None) -> TrainResult:
    """Plain SGD (optional momentum) over per-sample implicit gradients.

    After every parameter update the model is spectrally renormalized with
    sn_iters_step power iterations (sn_iters_val before each validation
    pass). Diverged samples are skipped and counted; an epoch skipping more
    than half the dataset aborts. Deterministic per cfg.seed.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    theta = model.get_params()
    velocity = np.zeros_like(theta)
    log = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (1.0 - cfg.lr_decay) ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(dataset))
        losses = []
        skipped = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = []
            for idx in batch:
                try:
                    r = loss_gradient(model, dataset[idx], cfg)
                except DivergedError:
                    skipped += 1
                    continue
                grads.append(r.grad)
                losses.append(r.loss)
            if not grads:
                continue
            g = np.mean(grads, axis=0)
            if cfg.clip_norm > 0:
                gn = float(np.linalg.norm(g))
                if gn > cfg.clip_norm:
                    g = g * (cfg.clip_norm / gn)
            velocity = cfg.momentum * velocity - lr * g
            if np.any(velocity != 0.0):
                model.set_params(model.get_params() + velocity)
                model.spectral_normalize(cfg.sn_iters_step)
        if skipped > 0.5 * len(dataset):
            raise TrainingAbortedError(
                f"epoch {epoch}: {skipped}/{len(dataset)} samples diverged", log=log
            )
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val_psnr = float("nan")
        if val_set:
            model.spectral_normalize(cfg.sn_iters_val)
            val_psnr = evaluate_psnr(model, val_set, cfg.forward)
        log.append(EpochLog(epoch=epoch, mean_loss=mean_loss, val_psnr=val_psnr, skipped=skipped))
    model.spectral_normalize(cfg.sn_iters_val)
    return TrainResult(theta=model.get_params(), log=log)


@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    finite_diff: np.ndarray
    rel_errors: np.ndarray
    max_rel_error: float

    def to_kv(self) -> dict:
        return {
            "n_probes": len(self.indices),
            "max_rel_error": repr(self.max_rel_error),
        }


def finite_diff_gradcheck(
    model, sample, h: float, n_probe: int, seed: int, cfg: TrainConfig
) -> GradCheckReport:
    """Central-difference check of loss_gradient on sampled coordinates.

    Relative error per coordinate is |analytic - fd| / max(|analytic|, |fd|),
    reported as 0 when both magnitudes are below 1e-10 (numerically dead
    coordinate). The model parameters are restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    analytic_full = loss_gradient(model, sample, cfg).grad
    theta = model.get_params()
    n = theta.size
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[: min(n_probe, n)]
    fd = np.empty(idx.size)
    try:
        for j, i in enumerate(idx):
            bump = theta.copy()
            bump[i] = theta[i] + h
            model.set_params(bump)
            lp = loss_eval(model, sample, cfg)
            bump[i] = theta[i] - h
            model.set_params(bump)
            lm = loss_eval(model, sample, cfg)
            fd[j] = (lp - lm) / (2.0 * h)
    finally:
        model.set_params(theta)
    ana = analytic_full[idx]
    scale = np.maximum(np.abs(ana), np.abs(fd))
    rel = np.zeros(idx.size)
    alive = scale > 1e-10
    rel[alive] = np.abs(ana[alive] - fd[alive]) / scale[alive]
    return GradCheckReport(
        indices=idx,
        analytic=ana,
        finite_diff=fd,
        rel_errors=rel,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
    )
