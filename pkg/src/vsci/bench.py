"""Trajectory benchmark: PSNR-vs-iteration stability across methods.

For every scene x method cell: simulate a coded measurement, run the method
for up to K iterations recording PSNR against the ground truth each
iteration, and write a per-cell trace CSV plus one summary CSV with the
stability figure of merit drop_db = max PSNR - final PSNR.

Timing columns record wall-clock by default; timing="none" writes zeros so
output files are bitwise reproducible.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .denoisers import IdentityDenoiser, TvDenoiser, load_denoiser
from .errors import DivergedError
from .fixed_point import FixedPointConfig, solve
from .maps import DeGapMap, DeRnnMap, load_cell, make_gated_cell, pnp_admm_solve, pnp_gap_solve
from .metrics import ssim
from .sci import add_noise, forward, init_estimate, mask_generate
from .synth import SyntheticScene, synth_video


@dataclass
class MethodSpec:
    """One reconstruction method for the benchmark.

    name        pnp_gap | de_gap | de_rnn | admm
    schedule    TV strengths per iteration for pnp_gap (cycled)
    checkpoint  parameter file prefix for de_gap / de_rnn; None = untrained
                (identity denoiser / identity cell)
    rho         ADMM penalty
    denoiser    "identity" or "tv:<lam>" for admm
    """

    name: str
    schedule: tuple = (0.05,)
    checkpoint: str | None = None
    rho: float = 0.1
    denoiser: str = "identity"
    label: str = ""

    def __post_init__(self):
        if self.name not in ("pnp_gap", "de_gap", "de_rnn", "admm"):
            raise ValueError(f"unknown method {self.name!r}")
        if not self.label:
            self.label = self.name


@dataclass
class BenchSpec:
    scenes: list
    methods: list
    mask_seed: int = 0
    mask_kind: str = "bernoulli"
    mask_p: float = 0.5
    mask_policy: str = "floor"
    noise_sigma: float = 0.0
    noise_seed: int = 1234
    max_iter: int = 100
    tol: float = 0.0  # 0 = run the full iteration budget
    solver: str = "anderson"
    tv_iters: int = 30
    outdir: str = "bench_out"
    timing: str = "wall"  # "none" zeroes timing columns for bitwise output

    def __post_init__(self):
        if not self.scenes or not self.methods:
            raise ValueError("need at least one scene and one method")


def _scene_tag(scene: SyntheticScene) -> str:
    return f"{scene.kind}_s{scene.seed}"


def _make_denoiser(spec: str):
    if spec == "identity":
        return IdentityDenoiser()
    if spec.startswith("tv:"):
        return TvDenoiser(lam=float(spec.split(":", 1)[1]))
    return load_denoiser(spec)


def _run_method(method: MethodSpec, mask, y, cube, bench: BenchSpec):
    cfg = FixedPointConfig(
        tol=bench.tol if bench.tol > 0 else 0.0,
        max_iter=bench.max_iter,
        record_trace=True,
    )
    if method.name == "de_gap":
        den = load_denoiser(method.checkpoint) if method.checkpoint else IdentityDenoiser()
        fmap = DeGapMap(denoiser=den, mask=mask, y=y)
        return solve(fmap.apply, init_estimate(mask, y), cfg, method=bench.solver, psnr_ref=cube)
    if method.name == "de_rnn":
        cell = load_cell(method.checkpoint) if method.checkpoint else make_gated_cell(0)
        fmap = DeRnnMap(cell=cell, mask=mask, y=y)
        return solve(fmap.apply, init_estimate(mask, y), cfg, method=bench.solver, psnr_ref=cube)
    if method.name == "pnp_gap":
        return pnp_gap_solve(
            mask, y, method.schedule, bench.max_iter,
            tv_iters=bench.tv_iters, tol=bench.tol, psnr_ref=cube,
        )
    return pnp_admm_solve(
        mask, y, _make_denoiser(method.denoiser), method.rho, bench.max_iter,
        tol=bench.tol, psnr_ref=cube,
    )


def _write_trace_csv(path: str, trace, timing: str) -> None:
    lines = ["iter,psnr,residual,time_ms"]
    for i in range(len(trace.residuals)):
        p = f"{trace.psnrs[i]:.17g}" if i < len(trace.psnrs) else ""
        t = 0.0 if timing == "none" else trace.times[i] * 1e3
        lines.append(f"{i + 1},{p},{trace.residuals[i]:.17g},{t:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def run_trajectory_bench(bench: BenchSpec):
    """Run every scene x method cell; returns the summary rows and writes CSVs."""
    os.makedirs(bench.outdir, exist_ok=True)
    rows = []
    for scene in bench.scenes:
        cube = synth_video(scene)
        mask = mask_generate(
            bench.mask_seed, scene.h, scene.w, scene.b,
            kind=bench.mask_kind, p=bench.mask_p, policy=bench.mask_policy,
        )
        y = forward(mask, cube)
        if bench.noise_sigma > 0:
            y = add_noise(y, bench.noise_sigma, bench.noise_seed)
        for method in bench.methods:
            tag = f"{_scene_tag(scene)}_{method.label}"
            t0 = time.perf_counter()
            try:
                result = _run_method(method, mask, y, cube, bench)
                diverged = False
                trace = result.trace
                x_hat = result.x_hat
            except DivergedError as exc:
                diverged = True
                trace = exc.trace
                x_hat = None
            wall = 0.0 if bench.timing == "none" else time.perf_counter() - t0
            if trace is not None:
                _write_trace_csv(os.path.join(bench.outdir, f"trace_{tag}.csv"), trace, bench.timing)
            if diverged or trace is None or not trace.psnrs:
                rows.append({
                    "scene": _scene_tag(scene), "method": method.label,
                    "final_psnr": math.nan, "max_psnr": math.nan, "drop_db": math.nan,
                    "mean_ssim": math.nan, "sec_per_meas": wall, "diverged": True,
                })
                continue
            final_psnr = trace.psnrs[-1]
            max_psnr = max(trace.psnrs)
            _, mean_ssim = ssim(np.clip(x_hat, 0.0, 1.0), cube)
            rows.append({
                "scene": _scene_tag(scene), "method": method.label,
                "final_psnr": final_psnr, "max_psnr": max_psnr,
                "drop_db": max_psnr - final_psnr, "mean_ssim": mean_ssim,
                "sec_per_meas": wall, "diverged": False,
            })
    _write_summary(os.path.join(bench.outdir, "summary.csv"), rows)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.17g}"
    return str(v)


def _write_summary(path: str, rows) -> None:
    cols = ["scene", "method", "final_psnr", "max_psnr", "drop_db", "mean_ssim", "sec_per_meas"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in cols))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def psnr_at(trace, k: int) -> float:
    """PSNR after k iterations; constant continuation past early convergence."""
    if not trace.psnrs:
        return math.nan
    return trace.psnrs[min(k, len(trace.psnrs)) - 1]
