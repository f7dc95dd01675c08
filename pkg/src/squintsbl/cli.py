"""Command-line front end: data generation, training, evaluation, sweeps.

Subcommands share one convention for system parameters: every config
key has a flag of the same name, and precedence is flag > config file >
built-in default.  All output files embed the config hash and the seed,
so results stay traceable to the exact setup that produced them.

Exit codes: 0 success, 1 usage or validation error, 2 numerical
failure (a divergence outside the contexts where it is an expected
outcome), 3 file errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

_INT_KEYS = (
    "n_antennas", "n_rf", "n_uses", "n_subcarriers", "grid_angular",
    "grid_delay", "n_clusters", "n_subpaths", "n_iterations", "rng_seed",
)
_FLOAT_KEYS = (
    "center_freq", "bandwidth", "noise_var", "angle_spread",
    "delay_spread", "max_mean_delay",
)

_KEY_HELP = {
    "n_antennas": "receive array size",
    "n_rf": "RF chains per use",
    "n_uses": "pilot time uses",
    "n_subcarriers": "OFDM tones",
    "grid_angular": "angular grid points",
    "grid_delay": "delay grid points",
    "n_clusters": "scattering clusters",
    "n_subpaths": "subpaths per cluster",
    "n_iterations": "default estimator depth",
    "rng_seed": "root seed for all streams",
    "center_freq": "carrier frequency, Hz",
    "bandwidth": "sampling rate, Hz",
    "noise_var": "per-antenna noise variance",
    "angle_spread": "intra-cluster angle std, radians",
    "delay_spread": "intra-cluster delay std, seconds",
    "max_mean_delay": "cluster mean delay bound, seconds",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("system configuration (flag > file > default)")
    g.add_argument("--config", metavar="FILE", help="JSON file of config keys")
    g.add_argument("--scale", choices=("default", "desk"), default="default",
                   help="baseline geometry before overrides")
    for name in _INT_KEYS:
        g.add_argument(f"--{name.replace('_', '-')}", type=int, default=None,
                       metavar="N", help=_KEY_HELP[name])
    for name in _FLOAT_KEYS:
        g.add_argument(f"--{name.replace('_', '-')}", type=float, default=None,
                       metavar="X", help=_KEY_HELP[name])
    g.add_argument("--snr-db", type=float, default=None, metavar="DB",
                   help="sets noise-var to 10^(-snr/10)")
    g.add_argument("--angle-spread-deg", type=float, default=None, metavar="DEG",
                   help="angle spread in degrees")


def _build_config(args):
    from .config import SystemConfig, default_config, desk_config, noise_var_from_snr_db

    overrides: dict = {}
    if not getattr(args, "defaults", False) and getattr(args, "config", None):
        try:
            file_vals = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise _UsageError(f"config file {args.config}: {exc}") from exc
        if not isinstance(file_vals, dict):
            raise _UsageError(f"config file {args.config} must hold a JSON object")
        known = {f.name for f in __import__("dataclasses").fields(SystemConfig)}
        unknown = set(file_vals) - known
        if unknown:
            raise _UsageError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        overrides.update(file_vals)

    for name in _INT_KEYS + _FLOAT_KEYS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "snr_db", None) is not None:
        if getattr(args, "noise_var", None) is not None:
            raise _UsageError("--snr-db and --noise-var are two spellings of the same key; give one")
        overrides["noise_var"] = noise_var_from_snr_db(args.snr_db)
    if getattr(args, "angle_spread_deg", None) is not None:
        if getattr(args, "angle_spread", None) is not None:
            raise _UsageError("--angle-spread-deg and --angle-spread are two spellings of the same key; give one")
        overrides["angle_spread"] = math.radians(args.angle_spread_deg)

    if getattr(args, "defaults", False):
        return default_config()
    if getattr(args, "scale", "default") == "desk":
        return desk_config(**overrides)
    return default_config(**overrides)


def _parse_points(text: str) -> list[float]:
    s = text.strip()
    if ":" in s:
        parts = s.split(":")
        if len(parts) != 3:
            raise _UsageError("point range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise _UsageError("point step must be positive")
        vals, v = [], start
        while v <= stop + 1e-9 * max(1.0, step):
            vals.append(v)
            v += step
        return vals
    vals = [float(p) for p in s.split(",") if p.strip()]
    if not vals:
        raise _UsageError("no sweep points given")
    return vals


def _parse_algos(text: str | None, nets: dict) -> list[str]:
    if text:
        return [a.strip() for a in text.split(",") if a.strip()]
    extra = sorted(a for a in nets if a not in ("sbl", "amp-sbl"))
    return ["sbl", "amp-sbl"] + extra


def _load_nets(entries, cfg) -> dict:
    from .mstep import load_checkpoint

    nets = {}
    for entry in entries or []:
        algo, sep, path = entry.partition("=")
        if not sep or not algo or not path:
            raise _UsageError(f"--net wants ALGO=PATH, got {entry!r}")
        net = load_checkpoint(path)
        if net.config_hash != cfg.config_hash():
            print(f"note: network for {algo!r} was trained under config {net.config_hash}, "
                  f"evaluating under {cfg.config_hash()}", file=sys.stderr)
        nets[algo] = net
    return nets


def _threads(args) -> int:
    n = getattr(args, "threads", None)
    if n is None:
        n = os.cpu_count() or 1
    if n < 1:
        raise _UsageError("--threads must be at least 1")
    return n


# ---- subcommands ------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    from .channel import save_dataset
    from .training import generate_splits

    cfg = _build_config(args)
    if args.sizes:
        try:
            sizes = tuple(int(s) for s in args.sizes.split(","))
        except ValueError as exc:
            raise _UsageError(f"--sizes wants three integers, got {args.sizes!r}") from exc
        if len(sizes) != 3:
            raise _UsageError("--sizes wants train,val,test")
    else:
        sizes = (2000, 250, 250) if args.scale == "desk" else (8000, 1000, 1000)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "dataset-manifest",
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.rng_seed,
        "splits": {},
    }
    for ds in generate_splits(cfg, sizes):
        import numpy as np

        fname = f"{ds.split}.npz"
        save_dataset(ds, out / fname)
        per = [float(np.linalg.norm(r.h) ** 2) / cfg.n_subcarriers for r in ds.realizations]
        manifest["splits"][ds.split] = {"file": fname, "n_samples": len(ds)}
        print(f"{ds.split}: {len(ds)} samples -> {out / fname}  "
              f"mean |H|^2/K = {np.mean(per):.4f} (std {np.std(per):.4f})")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"manifest: {out / 'manifest.json'}  config {cfg.config_hash()} seed {cfg.rng_seed}")
    return 0


def _cmd_train(args) -> int:
    from .channel import load_dataset
    from .config import SystemConfig, noise_var_from_snr_db
    from .evaluation import standard_operator
    from .mstep import load_checkpoint, save_checkpoint
    from .training import TrainConfig, train_layerwise, write_report_csv

    data_dir = Path(args.data)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    stored_cfg = SystemConfig.from_dict(manifest["config"])
    cfg = stored_cfg
    if args.snr_db is not None and args.noise_var is not None:
        raise _UsageError("--snr-db and --noise-var are two spellings of the same key; give one")
    if args.snr_db is not None:
        cfg = cfg.replace(noise_var=noise_var_from_snr_db(args.snr_db))
    if args.noise_var is not None:
        cfg = cfg.replace(noise_var=args.noise_var)

    datasets = tuple(
        load_dataset(data_dir / manifest["splits"][split]["file"], expect_config=stored_cfg)
        for split in ("train", "val", "test")
    )
    train_cfg = TrainConfig(
        depth=args.depth,
        e_step=args.e_step,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        lr_decay=args.lr_decay,
        lr_patience=args.lr_patience,
        stop_patience=args.stop_patience,
        max_epochs=args.max_epochs,
        loss_domain=args.loss_domain,
        end_to_end=not args.truncated,
        gamma_floor=args.gamma_floor,
        feature_mode=args.feature_mode,
    )
    initial = load_checkpoint(args.resume) if args.resume else None
    op = standard_operator(cfg)
    net, report = train_layerwise(train_cfg, cfg, op, datasets, initial_net=initial)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "checkpoint.npz", cfg)
    write_report_csv(report, out / "training_report.csv", cfg, train_cfg)
    print(f"trained depth {train_cfg.depth} ({net.n_stages} stages, {train_cfg.e_step} E-step) "
          f"in {report.wall_time_s:.0f} s; test NMSE {report.final_test_nmse_db:.2f} dB")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    print(f"report:     {out / 'training_report.csv'}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import run_tradeoff, write_tradeoff_csv

    cfg = _build_config(args)
    nets = _load_nets(args.net, cfg)
    algos = _parse_algos(args.algos, nets)
    rows = run_tradeoff(algos, cfg, args.n_samples, nets=nets,
                        n_iterations=args.iterations, n_workers=_threads(args))
    for row in rows:
        if math.isnan(row.fail_rate):
            print(f"{row.algo}: reference only, {row.flops} FLOPs/iteration")
            continue
        nm = "n/a" if math.isnan(row.nmse_db) else f"{row.nmse_db:.2f} dB"
        line = (f"{row.algo}: NMSE {nm} over {args.n_samples} samples "
                f"({row.iterations} iterations, {row.flops} FLOPs)")
        if row.fail_rate > 0:
            line += f", fail rate {row.fail_rate:.2f}"
        print(line)
    if args.out:
        write_tradeoff_csv(rows, args.out, cfg)
        print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    from .evaluation import run_sweep

    cfg = _build_config(args)
    nets = _load_nets(args.net, cfg)
    algos = _parse_algos(args.algos, nets)
    points = _parse_points(args.points)

    def progress(row):
        nm = "n/a" if math.isnan(row.nmse_db) else f"{row.nmse_db:.2f} dB"
        print(f"{row.axis}={row.value:g} {row.algo}: NMSE {nm}, fail rate {row.fail_rate:.2f}")

    result = run_sweep(args.axis, points, algos, cfg, args.n_samples, nets=nets,
                       n_iterations=args.iterations, n_workers=_threads(args),
                       progress=progress)
    out = args.out or f"sweep_{args.axis}.csv"
    result.write_csv(out)
    print(f"wrote {out}")
    return 0


def _cmd_flops(args) -> int:
    from .evaluation import (
        PER_ITERATION_FLOPS,
        RECONSTRUCTION_FLOPS,
        FlopsDims,
        classic_amp_iteration_flops,
        flops_per_iteration,
        reconstruction_flops,
    )

    cfg = _build_config(args)
    d = FlopsDims.from_config(cfg)
    print(f"# config_hash={cfg.config_hash()} seed={cfg.rng_seed}")
    print(f"per-iteration FLOPs at K={d.k}, M={d.m}, G={d.g}, G_A={d.g_a}, N={d.n}")
    for algo in PER_ITERATION_FLOPS:
        print(f"  {algo:<20} {flops_per_iteration(algo, cfg):>16,}")
    print(f"  {'amp-sbl (classic)':<20} {classic_amp_iteration_flops(cfg):>16,}")
    print("reconstruction FLOPs")
    for family in RECONSTRUCTION_FLOPS:
        print(f"  {family:<20} {reconstruction_flops(family, cfg):>16,}")
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest

    failures = selftest.run(verbose=True)
    return 0 if failures == 0 else 2


# ---- parser -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="squintsbl",
                     description="Wideband hybrid-array channel estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="draw train/val/test channel sets")
    _add_config_flags(p)
    p.add_argument("--sizes", metavar="TR,VA,TE", help="split sizes (default 8000,1000,1000; desk 2000,250,250)")
    p.add_argument("--out", default="data", metavar="DIR", help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="layer-wise training of the learned variance update")
    p.add_argument("--data", required=True, metavar="DIR", help="directory from gen-data")
    p.add_argument("--out", default="run", metavar="DIR", help="output directory")
    p.add_argument("--depth", type=int, required=True, help="unrolled iteration count (>= 2)")
    p.add_argument("--e-step", choices=("amp", "exact"), default="amp")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=10.0)
    p.add_argument("--lr-patience", type=int, default=4)
    p.add_argument("--stop-patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--loss-domain", choices=("channel", "coeff"), default="channel")
    p.add_argument("--feature-mode", choices=("abs2", "abs"), default="abs2")
    p.add_argument("--gamma-floor", type=float, default=1e-12)
    p.add_argument("--truncated", action="store_true",
                   help="train with per-iteration gradients only (no state backpropagation)")
    p.add_argument("--resume", metavar="CKPT", help="existing checkpoint to append stages to")
    p.add_argument("--snr-db", type=float, default=None, help="override the dataset's noise level")
    p.add_argument("--noise-var", type=float, default=None, help="override the dataset's noise level")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score estimators at one operating point")
    _add_config_flags(p)
    p.add_argument("--algos", metavar="LIST", help="comma list (default: sbl,amp-sbl plus any --net)")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--net", action="append", metavar="ALGO=PATH", help="checkpoint for a learned algorithm")
    p.add_argument("--iterations", type=int, default=None, help="depth for the classic algorithms")
    p.add_argument("--threads", type=int, default=None, help="sample-scoring workers (default: cores)")
    p.add_argument("--out", metavar="CSV", help="also write algo,flops,nmse_db,iterations")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="score estimators along an SNR or pilot-use axis")
    _add_config_flags(p)
    p.add_argument("--axis", choices=("snr", "q"), required=True)
    p.add_argument("--points", required=True, metavar="SPEC", help="comma list or start:stop:step")
    p.add_argument("--algos", metavar="LIST", help="comma list (default: sbl,amp-sbl plus any --net)")
    p.add_argument("--n-samples", type=int, default=50)
    p.add_argument("--net", action="append", metavar="ALGO=PATH", help="checkpoint for a learned algorithm")
    p.add_argument("--iterations", type=int, default=None, help="depth for the classic algorithms")
    p.add_argument("--threads", type=int, default=None, help="sample-scoring workers (default: cores)")
    p.add_argument("--out", metavar="CSV", help="output file (default sweep_<axis>.csv)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("flops", help="print the complexity table at the configured sizes")
    _add_config_flags(p)
    p.add_argument("--defaults", action="store_true", help="ignore file and flags; reference sizes")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("selftest", help="run the built-in numerical checks")
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.command in ("train", "selftest") else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        from .sbl import DivergenceError
        from .training import TrainingDivergence

        if isinstance(exc, (DivergenceError, TrainingDivergence)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 2
        raise
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
