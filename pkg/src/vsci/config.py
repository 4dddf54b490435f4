"""Flat key=value run configuration shared by the CLI subcommands.

Files are UTF-8 text, one `key = value` per line, '#' starts a comment.
Keys are namespaced (solver.*, train.*, bench.*). Unknown keys are rejected
by name; CLI flags override file values. dump/load round-trips losslessly.
"""

from __future__ import annotations

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default, help)
KNOWN_KEYS = {
    "solver.tol": (float, 1e-6, "relative-residual stopping threshold"),
    "solver.max_iter": (int, 150, "iteration cap K"),
    "solver.anderson_memory": (int, 3, "history length s"),
    "solver.anderson_damping": (float, 1.0, "mixing damping delta in (0,1]"),
    "solver.anderson_reg": (float, 1e-8, "relative Tikhonov weight in the alpha solve"),
    "solver.record_trace": (bool, True, "keep per-iteration trace"),
    "train.epochs": (int, 30, "training epochs"),
    "train.batch_size": (int, 1, "samples per parameter update"),
    "train.lr": (float, 1e-3, "learning rate"),
    "train.lr_decay": (float, 0.1, "fractional decay applied every lr_decay_every epochs"),
    "train.lr_decay_every": (int, 10, "epochs between decays"),
    "train.momentum": (float, 0.0, "SGD momentum"),
    "train.backward_mode": (str, "fixed_point", "fixed_point | neumann"),
    "train.neumann_order": (int, 8, "series order for neumann backward"),
    "train.backward_tol": (float, 1e-8, "adjoint solve tolerance"),
    "train.backward_max_iter": (int, 100, "adjoint solve iteration cap"),
    "train.seed": (int, 0, "shuffling / init seed"),
    "bench.mask_seed": (int, 0, "mask generator seed"),
    "bench.mask_kind": (str, "bernoulli", "bernoulli | all_ones"),
    "bench.mask_p": (float, 0.5, "bernoulli mask density"),
    "bench.mask_policy": (str, "floor", "dead-pixel policy: reject | floor"),
    "bench.noise_sigma": (float, 0.0, "measurement noise level"),
    "bench.noise_seed": (int, 1234, "measurement noise seed"),
    "bench.max_iter": (int, 100, "iterations per method"),
    "bench.tol": (float, 0.0, "early-stop tolerance (0 = run full budget)"),
    "bench.solver": (str, "anderson", "picard | anderson"),
    "bench.tv_iters": (int, 30, "inner TV iterations for pnp baselines"),
    "bench.timing": (str, "wall", "wall | none (none = bitwise-reproducible CSVs)"),
}

_PARSERS = {int: int, float: float, str: str, bool: _parse_bool}


def defaults() -> dict:
    return {k: spec[1] for k, spec in KNOWN_KEYS.items()}


def parse_value(key: str, raw: str):
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key: {key}")
    typ = KNOWN_KEYS[key][0]
    try:
        return _PARSERS[typ](raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config(path: str) -> dict:
    """Defaults overlaid with the file's entries; unknown keys are fatal."""
    cfg = defaults()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            cfg[key] = parse_value(key, val)
    return cfg


def dump_config(cfg: dict, path: str) -> None:
    """Write every known key; floats use repr so load(dump(c)) == c."""
    lines = []
    for key in KNOWN_KEYS:
        val = cfg[key]
        lines.append(f"{key} = {repr(val) if isinstance(val, float) else val}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def help_text() -> str:
    rows = [f"  {k}  (default {spec[1]!r}): {spec[2]}" for k, spec in KNOWN_KEYS.items()]
    return "config keys (file via --config, overridable by flags):\n" + "\n".join(rows)
