"""Command-line front end: train, eval, sample, gradcheck, sweep, export-prior.

Config files are UTF-8, one ``key = value`` per line; ``#`` starts a
comment. Training keys are the TrainConfig field names, dataset keys carry
a ``data.`` prefix (``data.n_train = 512``). SNR lists are comma-separated.
Unknown or repeated keys are errors.

Exit codes: 0 success, 2 usage or config error, 3 training diverged,
4 unreadable input (missing file, bad checkpoint), 1 anything else. Every
failure prints one JSON line ``{"error": kind, "exit": code, "message": ...}``
to stderr. Every command writes ``manifest.json`` to its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck as gc
from .checkpoint import CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .nets import DiagGaussian
from .objective import Bound
from .sampler import reverse_sample, write_trajectory
from .signals import DatasetSpec, build_split, envelope
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    Trainer,
    build_nets,
    evaluate_params,
    sampling_schedule,
    stream,
    write_metrics,
    _EVAL,
)

EXIT_OK, EXIT_CRASH, EXIT_USAGE, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3, 4
SCHEDULES = ("full", "6", "3")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- config


def _field_types(cls) -> dict:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


TRAIN_KEYS = _field_types(TrainConfig)
DATA_KEYS = {f"data.{k}": t for k, t in _field_types(DatasetSpec).items()}


def _convert(key: str, typ, text: str):
    try:
        if typ is tuple:
            vals = tuple(float(v) for v in text.split(",") if v.strip())
            if not vals:
                raise ValueError("empty list")
            return vals
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise CliError("config", EXIT_USAGE, f"bad value for {key}: {text!r} ({exc})") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines into a dict of typed values."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", EXIT_USAGE, f"{source}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        typ = TRAIN_KEYS.get(key) or DATA_KEYS.get(key)
        if typ is None:
            raise CliError("config", EXIT_USAGE, f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise CliError("config", EXIT_USAGE, f"{source}:{n}: duplicate key {key!r}")
        out[key] = _convert(key, typ, val)
    return out


def build_configs(values: dict) -> tuple[TrainConfig, DatasetSpec]:
    train = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    data = {k[5:]: v for k, v in values.items() if k in DATA_KEYS}
    try:
        return TrainConfig(**train), DatasetSpec(**data)
    except (TypeError, ValueError) as exc:
        raise CliError("config", EXIT_USAGE, str(exc)) from None


def default_config_text() -> str:
    return resources.files("restoregrad").joinpath("default.cfg").read_text(encoding="utf-8")


def load_config(path: str | None, overrides: list[str]) -> tuple[TrainConfig, DatasetSpec]:
    if path is None:
        values = parse_config(default_config_text(), "default.cfg")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError("missing_file", EXIT_INPUT, f"cannot read config {path}: {exc.strerror}") from None
        values = parse_config(text, path)
    values.update(parse_config("\n".join(overrides), "--set"))
    return build_configs(values)


def resolved(cfg: TrainConfig, ds: DatasetSpec) -> dict:
    out = asdict(cfg)
    out.update({f"data.{k}": v for k, v in asdict(ds).items()})
    return out


def keys_help() -> str:
    cfg, ds = TrainConfig(), DatasetSpec()
    lines = ["config keys (key = default):"]
    for k in TRAIN_KEYS:
        lines.append(f"  {k} = {getattr(cfg, k)}")
    for k in DATA_KEYS:
        v = getattr(ds, k[5:])
        lines.append(f"  {k} = {','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
    return "\n".join(lines)


# ---------------------------------------------------------------- outputs


def _atomic_write(path: Path, data: str) -> None:
    atomic_write_bytes(path, data.encode("utf-8"))


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"v{__version__}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_manifest(out: Path, command: str, config: dict, artifacts: list, started: float, status: str = "ok") -> Path:
    missing = [a for a in artifacts if not (out / a).exists()]
    if missing:
        raise RuntimeError(f"manifest lists missing artifacts {missing}")
    man = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "artifacts": sorted(artifacts),
        "status": status,
        "wall_clock_s": round(time.time() - started, 3),
        "version": version_string(),
    }
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("missing_file", EXIT_INPUT, f"no such checkpoint: {path}") from None
    except CheckpointError as exc:
        raise CliError("checkpoint", EXIT_INPUT, f"{path}: {exc}") from None


def _test_index(ds: DatasetSpec, index: int) -> int:
    if not 0 <= index < ds.n_test:
        raise CliError("usage", EXIT_USAGE, f"--index {index} outside test split of {ds.n_test}")
    return index


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    started = time.time()
    cfg, ds = load_config(args.config, list(args.set or []))
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    out = _outdir(args.out)
    try:
        state, rows = Trainer(cfg, ds).run()
    except TrainingDiverged as exc:
        write_metrics(out / "metrics.csv", exc.rows)
        report = {"step": exc.step, "reason": exc.reason, "breakdown": exc.breakdown.as_dict() if exc.breakdown else None}
        _atomic_write(out / "divergence.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "train", resolved(cfg, ds), ["metrics.csv", "divergence.json"], started, "diverged")
        raise CliError("diverged", EXIT_DIVERGED, str(exc)) from None
    write_metrics(out / "metrics.csv", rows)
    save_checkpoint(out / "checkpoint.rgck", state)
    write_manifest(out, "train", resolved(cfg, ds), ["metrics.csv", "checkpoint.rgck"], started)
    if rows:
        print(f"step {rows[-1][0]} loss {rows[-1][1]:.4f} eval si-snr {rows[-1][5]:.2f} dB")
    return EXIT_OK


EVAL_HEADER = ["mode", "schedule", "n", "si_snr", "ssnr", "mse"]


def cmd_eval(args) -> int:
    started = time.time()
    state = _load_ckpt(args.checkpoint)
    out = _outdir(args.out)
    x0, y, _ = build_split(state.dataset, "test")
    seed = state.config.seed if args.seed is None else args.seed
    row = evaluate_params(state.config, state.eval_params(), x0, y, args.steps, seed, per_sample=args.per_sample)
    # eval.csv keeps one row per schedule so repeated runs stay idempotent
    path = out / "eval.csv"
    existing = {}
    if path.exists():
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                existing[r["schedule"]] = [r[k] for k in EVAL_HEADER]
    existing[args.steps] = [row["mode"], row["schedule"], row["n"], _fmt(row["si_snr"]), _fmt(row["ssnr"]), _fmt(row["mse"])]
    _write_csv(path, EVAL_HEADER, [existing[s] for s in SCHEDULES if s in existing])
    artifacts = ["eval.csv"]
    if args.per_sample:
        name = f"eval_{args.steps}_samples.csv"
        _write_csv(out / name, ["index", "si_snr", "ssnr", "mse"], [[i, _fmt(a), _fmt(b), _fmt(c)] for i, a, b, c in row["rows"]])
        artifacts.append(name)
    write_manifest(out, "eval", resolved(state.config, state.dataset), artifacts, started)
    print(f"{row['mode']} steps={row['schedule']} si-snr {row['si_snr']:.3f} ssnr {row['ssnr']:.3f} mse {row['mse']:.5f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    started = time.time()
    state = _load_ckpt(args.checkpoint)
    out = _outdir(args.out)
    cfg, ds = state.config, state.dataset
    i = _test_index(ds, args.index)
    x0, y, _ = build_split(ds, "test")
    params = state.eval_params()
    nets = build_nets(cfg)
    theta = Bound(nets["theta"], params["theta"])
    psi = Bound(nets["psi"], params["psi"]) if "psi" in params else None
    yi = y[i : i + 1]
    prior = cfg.prior_spec().resolve(yi, psi)
    seed = cfg.seed if args.seed is None else args.seed
    trace = [] if args.trace else None
    xhat = reverse_sample(theta, prior, yi, sampling_schedule(cfg, args.steps), stream(seed, _EVAL, 1 + i), trace)[0]
    name = f"sample_{i}.csv"
    _write_csv(out / name, ["i", "y", "x0", "xhat"], [[j, _fmt(y[i, j]), _fmt(x0[i, j]), _fmt(xhat[j])] for j in range(ds.d)])
    artifacts = [name]
    if trace is not None:
        tname = f"trajectory_{i}.csv"
        write_trajectory(out / tname, trace)
        artifacts.append(tname)
    write_manifest(out, "sample", resolved(cfg, ds), artifacts, started)
    return EXIT_OK


def cmd_export_prior(args) -> int:
    started = time.time()
    state = _load_ckpt(args.checkpoint)
    out = _outdir(args.out)
    cfg, ds = state.config, state.dataset
    i = _test_index(ds, args.index)
    x0, y, _ = build_split(ds, "test")
    params = state.eval_params()
    nets = build_nets(cfg)
    psi = Bound(nets["psi"], params["psi"]) if "psi" in params else None
    prior: DiagGaussian = cfg.prior_spec().resolve(y[i : i + 1], psi)
    sp = np.asarray(prior.std, dtype=np.float64).reshape(-1)
    if "phi" in params:
        sq = Bound(nets["phi"], params["phi"])(x0[i : i + 1], y[i : i + 1]).detach().std.reshape(-1)
        post = [_fmt(v) for v in sq]
    else:
        post = [""] * ds.d
    env = envelope(x0[i])
    name = f"prior_{i}.csv"
    _write_csv(
        out / name,
        ["i", "y", "x0", "envelope", "sigma_prior", "sigma_post"],
        [[j, _fmt(y[i, j]), _fmt(x0[i, j]), _fmt(env[j]), _fmt(sp[j]), post[j]] for j in range(ds.d)],
    )
    write_manifest(out, "export-prior", resolved(cfg, ds), [name], started)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    if args.d < 1 or args.T < 1:
        raise CliError("usage", EXIT_USAGE, "--d and --T must be >= 1")
    res = gc.run(args.d, args.T, args.seed, args.coords)
    for name in gc.LOSSES:
        print(f"{name:9s} worst relative error {res[name]:.3e}")
    ok = res["worst"] < args.tol
    print(f"worst {res['worst']:.3e} ({'PASS' if ok else 'FAIL'} < {args.tol:g}) in {res['seconds']:.1f}s")
    if args.out:
        out = _outdir(args.out)
        _write_csv(out / "gradcheck.csv", ["loss", "worst_rel_err"], [[n, _fmt(res[n])] for n in (*gc.LOSSES, "worst")])
        write_manifest(out, "gradcheck", {"d": args.d, "T": args.T, "seed": args.seed, "coords": args.coords}, ["gradcheck.csv"], started)
    if not ok:
        raise CliError("gradcheck", EXIT_CRASH, f"worst relative error {res['worst']:.3e} >= {args.tol:g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    key = {"eta": "eta", "lambda": "lam"}[args.param]
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise CliError("usage", EXIT_USAGE, f"bad --values {args.values!r}") from None
    if not values:
        raise CliError("usage", EXIT_USAGE, "--values is empty")
    base, ds = load_config(args.config, list(args.set or []))
    base = replace(base, mode="restoregrad")
    out = _outdir(args.out)
    x0, y, _ = build_split(ds, "test")
    rows = []
    for v in values:
        cfg = replace(base, **{key: v})
        try:
            state, trows = Trainer(cfg, ds).run()
        except TrainingDiverged as exc:
            rows.append([args.param, _fmt(v), "diverged", "", "", "", exc.step])
            continue
        r = evaluate_params(cfg, state.eval_params(), x0, y, args.steps, cfg.seed)
        rows.append([args.param, _fmt(v), "ok", _fmt(r["si_snr"]), _fmt(r["ssnr"]), _fmt(r["mse"]), state.step])
        print(f"{args.param}={v:g} si-snr {r['si_snr']:.3f}")
    _write_csv(out / "sweep.csv", ["param", "value", "status", "si_snr", "ssnr", "mse", "steps"], rows)
    write_manifest(out, "sweep", resolved(base, ds), ["sweep.csv"], started)
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(default_config_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="restoregrad",
        description="Diffusion restoration with a learned prior on a synthetic 1-D benchmark.",
        epilog=keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=f"restoregrad {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=keys_help(), formatter_class=raw)
        sp.set_defaults(fn=fn)
        return sp

    t = add("train", cmd_train, "train one model and write metrics.csv, checkpoint.rgck, manifest.json")
    t.add_argument("--config", help="key = value config file (default: the shipped default.cfg)")
    t.add_argument("--mode", choices=["restoregrad", "no_posterior", "standard_prior", "handcrafted_prior"])
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    t.add_argument("--out", required=True, help="output directory")

    e = add("eval", cmd_eval, "evaluate a checkpoint on the test split; upserts a row of eval.csv")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--steps", choices=SCHEDULES, default="6")
    e.add_argument("--seed", type=int, help="sampling seed (default: training seed)")
    e.add_argument("--per-sample", action="store_true", help="also write one row per test pair")
    e.add_argument("--out", required=True)

    s = add("sample", cmd_sample, "restore one test pair; writes sample_N.csv and optionally trajectory_N.csv")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", type=int, required=True, help="index within the test split")
    s.add_argument("--steps", choices=SCHEDULES, default="6")
    s.add_argument("--seed", type=int)
    s.add_argument("--trace", action="store_true", help="write the per-step trajectory")
    s.add_argument("--out", required=True)

    g = add("gradcheck", cmd_gradcheck, "compare reverse-mode and finite-difference gradients of every loss")
    g.add_argument("--d", type=int, default=8)
    g.add_argument("--T", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=8, help="coordinates probed per parameter array")
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--out", help="optional output directory for gradcheck.csv")

    w = add("sweep", cmd_sweep, "train restoregrad for each value of eta or lambda; writes sweep.csv")
    w.add_argument("--param", choices=["eta", "lambda"], required=True)
    w.add_argument("--values", required=True, help="comma-separated values")
    w.add_argument("--config")
    w.add_argument("--set", action="append", metavar="KEY=VALUE")
    w.add_argument("--steps", choices=SCHEDULES, default="6")
    w.add_argument("--out", required=True)

    x = add("export-prior", cmd_export_prior, "write y, x0, envelope, prior and posterior std of one test pair")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--index", type=int, required=True)
    x.add_argument("--out", required=True)

    add("show-config", cmd_show_config, "print the shipped default config")
    return p


def _fail(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        return _fail(exc.kind, exc.code, str(exc))
    except FileNotFoundError as exc:
        return _fail("missing_file", EXIT_INPUT, str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail("internal", EXIT_CRASH, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
