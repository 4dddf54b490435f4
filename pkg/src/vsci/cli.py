"""Command-line surface.

Subcommands: mask, simulate, reconstruct, train, gradcheck, spectrum, bench.
Exit codes: 0 ok, 2 config error, 3 I/O error, 4 diverged, 5 gradcheck over
threshold. Every command is deterministic given its seeds (bench timing
columns excepted unless bench.timing=none).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from . import tensorio
from .analysis import build_report, estimate_map_lipschitz, projection_spectrum
from .bench import BenchSpec, MethodSpec, run_trajectory_bench
from .denoisers import (
    IdentityDenoiser,
    TvDenoiser,
    estimate_residual_lipschitz,
    load_denoiser,
    make_conv_residual,
    save_denoiser,
)
from .errors import ConfigError, DivergedError, TensorFileError, VsciError
from .fixed_point import FixedPointConfig, solve
from .maps import DeGapMap, DeRnnMap, load_cell, make_gated_cell, pnp_admm_solve, pnp_gap_solve
from .metrics import psnr, ssim
from .models import DeGapModel
from .sci import (
    Measurement,
    SensingMask,
    add_noise,
    forward,
    init_estimate,
    mask_generate,
)
from .synth import SCENE_KINDS, SyntheticScene, synth_video
from .training import TrainConfig, finite_diff_gradcheck, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


def save_mask(prefix: str, mask: SensingMask) -> None:
    tensorio.write_tensor(prefix + ".vsci", mask.frames)
    tensorio.write_kv(
        prefix + ".meta",
        {"kind": "mask", "policy": mask.policy, "floor_tau": repr(mask.floor_tau)},
    )


def load_mask(prefix: str) -> SensingMask:
    frames = tensorio.read_tensor(prefix + ".vsci")
    policy, tau = "reject", 1e-6
    if os.path.exists(prefix + ".meta"):
        meta = tensorio.read_kv(prefix + ".meta")
        policy = meta.get("policy", "reject")
        tau = float(meta.get("floor_tau", "1e-6"))
    q = np.einsum("hwb,hwb->hw", frames, frames)
    return SensingMask(frames=frames, q_diag=q, policy=policy, floor_tau=tau)


def _solver_cfg(args, cfg: dict) -> FixedPointConfig:
    def pick(flag, key):
        return getattr(args, flag) if getattr(args, flag, None) is not None else cfg[key]

    return FixedPointConfig(
        tol=pick("tol", "solver.tol"),
        max_iter=pick("max_iter", "solver.max_iter"),
        anderson_memory=pick("memory", "solver.anderson_memory"),
        anderson_damping=pick("damping", "solver.anderson_damping"),
        anderson_reg=pick("reg", "solver.anderson_reg"),
    )


def _load_run_config(args) -> dict:
    if getattr(args, "config", None):
        return cfgmod.load_config(args.config)
    return cfgmod.defaults()


def cmd_mask(args) -> int:
    mask = mask_generate(
        args.seed, args.height, args.width, args.frames,
        kind=args.kind, p=args.p, policy=args.policy, floor_tau=args.tau,
    )
    save_mask(args.out, mask)
    print(f"mask {args.height}x{args.width}x{args.frames} kind={args.kind} -> {args.out}.vsci")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scene = SyntheticScene(
        kind=args.scene, seed=args.seed, h=args.height, w=args.width,
        b=args.frames, amplitude=args.amplitude,
    )
    cube = synth_video(scene)
    mask = load_mask(args.mask)
    y = forward(mask, cube)
    if args.sigma > 0:
        y = add_noise(y, args.sigma, args.noise_seed)
    tensorio.write_tensor(args.out_cube, cube)
    tensorio.write_tensor(args.out_meas, y.data)
    tensorio.write_kv(
        args.out_meas + ".meta",
        {
            "scene": scene.kind, "scene_seed": scene.seed,
            "h": scene.h, "w": scene.w, "b": scene.b,
            "amplitude": repr(scene.amplitude),
            "mask": args.mask, "sigma": repr(args.sigma),
            "noise_seed": args.noise_seed,
        },
    )
    print(f"simulated {scene.kind} -> cube {args.out_cube}, measurement {args.out_meas}")
    return EXIT_OK


def _reconstruct(args, cfg):
    mask = load_mask(args.mask)
    y = Measurement(data=tensorio.read_tensor(args.measurement), noise_sigma=0.0)
    solver_cfg = _solver_cfg(args, cfg)
    gt = tensorio.read_tensor(args.gt) if args.gt else None
    if args.method == "de-gap":
        den = load_denoiser(args.checkpoint) if args.checkpoint else IdentityDenoiser()
        fmap = DeGapMap(denoiser=den, mask=mask, y=y)
        result = solve(fmap.apply, init_estimate(mask, y), solver_cfg,
                       method=args.solver, psnr_ref=gt)
    elif args.method == "de-rnn":
        cell = load_cell(args.checkpoint) if args.checkpoint else make_gated_cell(0)
        fmap = DeRnnMap(cell=cell, mask=mask, y=y)
        result = solve(fmap.apply, init_estimate(mask, y), solver_cfg,
                       method=args.solver, psnr_ref=gt)
    elif args.method == "pnp-gap":
        schedule = [float(s) for s in args.schedule.split(",")]
        result = pnp_gap_solve(mask, y, schedule, solver_cfg.max_iter,
                               tv_iters=args.tv_iters, tol=solver_cfg.tol, psnr_ref=gt)
    elif args.method == "pnp-admm":
        den = TvDenoiser(lam=args.tv_lam, iters=args.tv_iters) if args.tv_lam > 0 else IdentityDenoiser()
        result = pnp_admm_solve(mask, y, den, args.rho, solver_cfg.max_iter,
                                tol=solver_cfg.tol, psnr_ref=gt)
    else:
        raise ConfigError(f"unknown method {args.method!r}")
    return mask, y, result, gt


def cmd_reconstruct(args) -> int:
    cfg = _load_run_config(args)
    mask, y, result, gt = _reconstruct(args, cfg)
    tensorio.write_tensor(args.out, result.x_hat)
    if args.trace:
        result.trace.to_csv(args.trace)
    consistency = float(np.max(np.abs(forward(mask, result.x_hat).data - y.data)))
    print(f"converged={result.converged} iterations={result.iterations}")
    print(f"measurement_consistency_inf={consistency:.3e}")
    if gt is not None:
        _, p = psnr(np.clip(result.x_hat, 0.0, 1.0), gt)
        _, s = ssim(np.clip(result.x_hat, 0.0, 1.0), gt)
        print(f"psnr_db={p:.4f}")
        print(f"ssim={s:.6f}")
    return EXIT_OK


def _make_dataset(args, n: int, seed0: int):
    samples = []
    for i in range(n):
        scene = SyntheticScene(kind=args.scene, seed=seed0 + i, h=args.height,
                               w=args.width, b=args.frames, amplitude=args.amplitude)
        cube = synth_video(scene)
        mask = mask_generate(args.mask_seed, args.height, args.width, args.frames,
                             kind="bernoulli", p=args.mask_p, policy="floor")
        y = forward(mask, cube)
        if args.sigma > 0:
            y = add_noise(y, args.sigma, seed0 + 1000 + i)
        samples.append((mask, y, cube))
    return samples


def _train_cfg(args, cfg: dict) -> TrainConfig:
    def pick(flag, key):
        return getattr(args, flag) if getattr(args, flag, None) is not None else cfg[key]

    forward_cfg = FixedPointConfig(
        tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"],
        anderson_memory=cfg["solver.anderson_memory"],
        anderson_damping=cfg["solver.anderson_damping"],
        anderson_reg=cfg["solver.anderson_reg"], record_trace=False,
    )
    return TrainConfig(
        epochs=pick("epochs", "train.epochs"),
        batch_size=pick("batch_size", "train.batch_size"),
        lr=pick("lr", "train.lr"),
        lr_decay=cfg["train.lr_decay"],
        lr_decay_every=cfg["train.lr_decay_every"],
        momentum=pick("momentum", "train.momentum"),
        backward_mode=pick("backward_mode", "train.backward_mode"),
        neumann_order=cfg["train.neumann_order"],
        backward_tol=cfg["train.backward_tol"],
        backward_max_iter=cfg["train.backward_max_iter"],
        seed=pick("seed", "train.seed"),
        forward=forward_cfg,
    )


def _desk_model(args) -> DeGapModel:
    den = make_conv_residual(
        seed=args.model_seed, channels=args.channels, n_layers=args.layers,
        gamma=args.gamma, init=args.init,
    )
    return DeGapModel(denoiser=den)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    tcfg = _train_cfg(args, cfg)
    model = _desk_model(args)
    model.spectral_normalize(tcfg.sn_iters_val)
    dataset = _make_dataset(args, args.train_scenes, seed0=args.data_seed)
    val = _make_dataset(args, args.val_scenes, seed0=args.data_seed + 10_000)
    result = train(model, dataset, tcfg, val_set=val or None)
    save_denoiser(args.out_prefix, model.denoiser)
    if args.log:
        result.log_to_csv(args.log)
    last = result.log[-1]
    print(f"trained {tcfg.epochs} epochs, final mean_loss={last.mean_loss:.6g} "
          f"val_psnr={last.val_psnr:.4f}")
    print(f"checkpoint -> {args.out_prefix}.vsci")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_run_config(args)
    tcfg = _train_cfg(args, cfg)
    tcfg.forward.tol = args.solve_tol
    tcfg.forward.max_iter = max(tcfg.forward.max_iter, 400)
    tcfg.backward_tol = args.solve_tol
    model = _desk_model(args)
    dataset = _make_dataset(args, 1, seed0=args.data_seed)
    report = finite_diff_gradcheck(model, dataset[0], h=args.h,
                                   n_probe=args.probes, seed=args.seed or 0, cfg=tcfg)
    print(f"probes={len(report.indices)} max_rel_error={report.max_rel_error:.3e} "
          f"threshold={args.threshold:.3e}")
    if report.max_rel_error > args.threshold:
        print("gradcheck FAILED")
        return EXIT_GRADCHECK
    print("gradcheck ok")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    mask = mask_generate(args.mask_seed, args.height, args.width, args.frames,
                         kind=args.kind, p=args.p, policy=args.policy)
    spectrum = projection_spectrum(mask)
    den = load_denoiser(args.checkpoint) if args.checkpoint else IdentityDenoiser()
    scene = SyntheticScene(kind="moving_square", seed=0, h=args.height,
                           w=args.width, b=args.frames)
    cube = synth_video(scene)
    y = forward(mask, cube)
    fmap = DeGapMap(denoiser=den, mask=mask, y=y)
    sigma = estimate_map_lipschitz(fmap, init_estimate(mask, y), n_iters=args.iters, seed=0)
    eps = estimate_residual_lipschitz(den, seed=0, n_pairs=args.pairs,
                                      shape=(args.height, args.width, args.frames))
    report = build_report(sigma, eps, spectrum)
    for key, val in report.to_kv().items():
        print(f"{key} = {val}")
    if args.out:
        report.write(args.out)
    return EXIT_OK


def _parse_method(text: str) -> MethodSpec:
    """pnp_gap:0.1,0.05 | de_gap[:ckpt] | de_rnn[:ckpt] | admm:rho=0.1,denoiser=tv:0.05"""
    name, _, rest = text.partition(":")
    if name == "pnp_gap":
        sched = tuple(float(s) for s in rest.split(",")) if rest else (0.05,)
        return MethodSpec(name=name, schedule=sched)
    if name in ("de_gap", "de_rnn"):
        return MethodSpec(name=name, checkpoint=rest or None)
    if name == "admm":
        rho, den = 0.1, "identity"
        if rest:
            for part in rest.split(","):
                k, _, v = part.partition("=")
                if k == "rho":
                    rho = float(v)
                elif k == "denoiser":
                    den = v
                else:
                    raise ConfigError(f"unknown admm option {k!r}")
        return MethodSpec(name=name, rho=rho, denoiser=den)
    raise ConfigError(f"unknown method spec {text!r}")


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    scenes = [
        SyntheticScene(kind=args.scene, seed=s, h=args.height, w=args.width,
                       b=args.frames, amplitude=args.amplitude)
        for s in range(args.scene_seed, args.scene_seed + args.n_scenes)
    ]
    methods = [_parse_method(m) for m in args.methods]
    spec = BenchSpec(
        scenes=scenes, methods=methods,
        mask_seed=cfg["bench.mask_seed"], mask_kind=cfg["bench.mask_kind"],
        mask_p=cfg["bench.mask_p"], mask_policy=cfg["bench.mask_policy"],
        noise_sigma=cfg["bench.noise_sigma"], noise_seed=cfg["bench.noise_seed"],
        max_iter=args.max_iter if args.max_iter is not None else cfg["bench.max_iter"],
        tol=cfg["bench.tol"], solver=cfg["bench.solver"],
        tv_iters=cfg["bench.tv_iters"], outdir=args.outdir,
        timing=args.timing if args.timing else cfg["bench.timing"],
    )
    rows = run_trajectory_bench(spec)
    for r in rows:
        print(f"{r['scene']}/{r['method']}: final={r['final_psnr']:.3f} dB "
              f"max={r['max_psnr']:.3f} drop={r['drop_db']:.3f}"
              if not r["diverged"] else f"{r['scene']}/{r['method']}: DIVERGED")
    print(f"summary -> {os.path.join(spec.outdir, 'summary.csv')}")
    return EXIT_OK


def _add_model_flags(p):
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--init", default="smooth", choices=["smooth", "random", "zero"])


def _add_data_flags(p, h=16, w=16, b=4):
    p.add_argument("--scene", default="moving_square", choices=list(SCENE_KINDS))
    p.add_argument("--height", type=int, default=h)
    p.add_argument("--width", type=int, default=w)
    p.add_argument("--frames", type=int, default=b)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--mask-p", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--data-seed", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vsci",
        description="Snapshot-compressive-imaging reconstruction via fixed-point iteration maps.",
        epilog=cfgmod.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="generate a sensing mask")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--kind", default="bernoulli", choices=["bernoulli", "all_ones"])
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--policy", default="reject", choices=["reject", "floor"])
    p.add_argument("--tau", type=float, default=1e-6)
    p.add_argument("--out", required=True, help="output prefix (.vsci/.meta)")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("simulate", help="synthetic scene -> coded measurement")
    p.add_argument("--scene", default="moving_square", choices=list(SCENE_KINDS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--mask", required=True, help="mask prefix from `vsci mask`")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=1234)
    p.add_argument("--out-cube", required=True)
    p.add_argument("--out-meas", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="recover a cube from a measurement")
    p.add_argument("--config")
    p.add_argument("--mask", required=True)
    p.add_argument("--measurement", required=True)
    p.add_argument("--method", default="de-gap",
                   choices=["de-gap", "de-rnn", "pnp-gap", "pnp-admm"])
    p.add_argument("--solver", default="anderson", choices=["picard", "anderson"])
    p.add_argument("--checkpoint")
    p.add_argument("--schedule", default="0.05", help="pnp-gap TV strengths, comma separated")
    p.add_argument("--tv-lam", type=float, default=0.0, help="pnp-admm TV strength")
    p.add_argument("--tv-iters", type=int, default=30)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--memory", type=int)
    p.add_argument("--damping", type=float)
    p.add_argument("--reg", type=float)
    p.add_argument("--gt", help="ground-truth cube for PSNR/SSIM")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="write trace CSV here")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the projection-denoiser model")
    p.add_argument("--config")
    _add_data_flags(p, h=32, w=32, b=4)
    _add_model_flags(p)
    p.add_argument("--train-scenes", type=int, default=16)
    p.add_argument("--val-scenes", type=int, default=4)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--backward-mode", choices=["fixed_point", "neumann"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the implicit gradient")
    p.add_argument("--config")
    _add_data_flags(p, h=8, w=8, b=2)
    _add_model_flags(p)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--probes", type=int, default=25)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--solve-tol", type=float, default=1e-12)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("spectrum", help="projector spectrum + Lipschitz diagnostics")
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--height", type=int, default=6)
    p.add_argument("--width", type=int, default=6)
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--kind", default="bernoulli", choices=["bernoulli", "all_ones"])
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--policy", default="floor", choices=["reject", "floor"])
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--pairs", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("bench", help="PSNR-vs-iteration stability benchmark")
    p.add_argument("--config")
    p.add_argument("--scene", default="moving_square", choices=list(SCENE_KINDS))
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--n-scenes", type=int, default=2)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--methods", nargs="+", required=True,
                   help="e.g. de_gap:ckpt pnp_gap:0.1,0.05 admm:rho=0.1,denoiser=tv:0.05")
    p.add_argument("--timing", choices=["wall", "none"])
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_bench)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TensorFileError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, VsciError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
