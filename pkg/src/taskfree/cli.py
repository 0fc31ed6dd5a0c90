"""Command-line entry point: ``taskfree {run,sweep,replay,report}``."""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, StreamFaultError
from .experiments import EXPERIMENTS
from .harness import PROFILES, VARIANTS, RunConfig, export_csv, read_csv, train_online
from .streams import RecordedStream, parse_stream_config, record_stream

log = logging.getLogger("taskfree")

# RunConfig fields settable from flags / the [run] section, with their parsers.
_FIELDS = {
    "variant": str,
    "seed": int,
    "lr": float,
    "lam": float,
    "buffer_capacity": int,
    "window": int,
    "delta_mu": float,
    "delta_sigma": float,
    "inner_steps": int,
    "omega_mode": str,
    "normalize_buffer": lambda v: v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on"),
    "loss": str,
    "margin": float,
    "hidden": lambda v: tuple(int(h) for h in str(v).replace(" ", "").split(",") if h),
    "embedding_dim": int,
    "epochs": int,
    "eval_every": int,
    "test_per_segment": int,
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value config file with [run], [stream] and [segment.N] sections")
    p.add_argument("--experiment", choices=sorted(EXPERIMENTS), help="built-in stream and tuned hyperparameters")
    p.add_argument("--profile", choices=sorted(PROFILES), help="hyperparameter defaults")
    for name in _FIELDS:
        flag = "--" + name.replace("_", "-")
        if name == "normalize_buffer":
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None)
        elif name == "variant":
            p.add_argument(flag, dest=name, choices=VARIANTS, default=None)
        else:
            p.add_argument(flag, dest=name, default=None)


def build_config(args: argparse.Namespace) -> RunConfig:
    """Profile defaults < experiment presets < config file < command-line flags."""
    settings: dict = {}
    stream = None
    file_run: dict = {}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise ConfigError(f"cannot read config file {args.config}")
        if "run" in cp:
            file_run = dict(cp["run"])
        if "stream" in cp:
            stream = parse_stream_config(cp)
    profile = args.profile or file_run.pop("profile", None)
    experiment = args.experiment or file_run.pop("experiment", None)
    file_run.pop("profile", None)
    file_run.pop("experiment", None)
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        settings.update(PROFILES[profile])
    if experiment:
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}")
        make_stream, tuned = EXPERIMENTS[experiment]
        if not profile:
            settings.update(PROFILES["classification"])
        settings.update(tuned)
        stream = stream or make_stream()
    for key, value in file_run.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown [run] key {key!r}")
        settings[key] = _FIELDS[key](value)
    for key, parse in _FIELDS.items():
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = parse(value)
    if stream is None:
        raise ConfigError("no stream given: pass --experiment or a config file with a [stream] section")
    try:
        cfg = RunConfig(stream=stream, **settings)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _run_one(cfg: RunConfig, out: Path, batches=None):
    metrics = train_online(cfg, batches=batches)
    if metrics.records:
        export_csv(metrics, out)
    return metrics


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.record:
        n = record_stream(cfg.stream.build(cfg.seed).batches(), args.record)
        log.info("recorded %d batches to %s", n, args.record)
    metrics = _run_one(cfg, Path(args.out))
    if metrics.records:
        print(f"{cfg.variant} seed={cfg.seed}: total={metrics.final.total:.4f} weighted={metrics.final.weighted:.4f} "
              f"consolidations={len(metrics.consolidations)} -> {args.out}")
    if metrics.fault:
        print(f"error: {metrics.fault}", file=sys.stderr)
        return 2
    return 0


def _sweep_job(job):
    cfg, out = job
    m = _run_one(cfg, out)
    return cfg.variant, cfg.seed, m.final.total if m.records else float("nan"), m.fault


def cmd_sweep(args) -> int:
    base = build_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = args.variants or [base.variant]
    jobs = [
        (base.replace(variant=v, seed=s), out_dir / f"{v}_seed{s}.csv")
        for v in variants
        for s in args.seeds
    ]
    for j in jobs:
        j[0].validate()
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    faults = 0
    for variant, seed, total, fault in results:
        print(f"{variant:18s} seed={seed:<4d} total={total:.4f}" + (f"  FAULT: {fault}" if fault else ""))
        faults += fault is not None
    return 2 if faults else 0


def cmd_replay(args) -> int:
    cfg = build_config(args)
    batches = list(RecordedStream(args.stream_file).batches())
    metrics = _run_one(cfg, Path(args.out), batches=batches)
    if metrics.records:
        print(f"{cfg.variant} seed={cfg.seed} (replayed {len(batches)} batches): total={metrics.final.total:.4f} -> {args.out}")
    if metrics.fault:
        print(f"error: {metrics.fault}", file=sys.stderr)
        return 2
    return 0


def summarize(paths) -> list[dict]:
    rows = []
    for path in paths:
        records = read_csv(path)
        if not records:
            continue
        last = records[-1]
        n_seg = sum(1 for k in last if k.startswith("acc_seg"))
        forgetting = [last[f"forgetting_seg{i}"] for i in range(n_seg)]
        rows.append(
            dict(
                file=Path(path).name,
                variant=last["variant"],
                seed=last["seed"],
                step=last["step"],
                total=last["total"],
                weighted=last["weighted"],
                mean_forgetting=float(np.mean(forgetting[:-1])) if n_seg > 1 else forgetting[0],
                consolidations=sum(r["consolidated"] for r in records),
            )
        )
    return rows


def cmd_report(args) -> int:
    rows = summarize(args.csv)
    if not rows:
        print("no records found", file=sys.stderr)
        return 1
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    print(f"{'variant':18s} {'seed':>4s} {'step':>6s} {'total':>7s} {'weighted':>8s} {'forget':>7s} {'consol':>6s}")
    for r in rows:
        print(f"{r['variant']:18s} {r['seed']:4d} {r['step']:6d} {r['total']:7.4f} {r['weighted']:8.4f} "
              f"{r['mean_forgetting']:7.4f} {r['consolidations']:6d}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskfree", description="Task-free online continual learning on synthetic streams")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write its metrics CSV")
    _add_run_flags(p)
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--record", help="also dump the training stream to this binary file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over seeds and variants")
    _add_run_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="train on a recorded stream file")
    _add_run_flags(p)
    p.add_argument("--stream-file", required=True)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="summarize metrics CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="write the summary table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, StreamFaultError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
