"""Command-line entry point: ``freqprop <subcommand> [options]``.

Exit status is 0 on success, 1 when an experiment's trend checks fail (its
artifacts are still written) and 2 on configuration, input or computation
errors (nothing is written).
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .analysis import magnitude_map_render
from .exceptions import ConfigError, FreqPropError
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .network import ConvLayer, init_network
from .propagation import compute_transfer_field
from .tensor import dft2

log = logging.getLogger("freqprop")

DEFAULT_SEED = 42
SEED_ENV = "SPECTRAL_SEED"


def _common(p):
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: results)")
    p.add_argument("--seed", type=int, help="run seed (overrides SPECTRAL_SEED and the config)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker processes for per-seed replicates (default: logical cores)")


def build_parser():
    parser = argparse.ArgumentParser(prog="freqprop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _common(p)
        p.add_argument("--n-seeds", type=int, help="number of seeded replicates")
    p = sub.add_parser("render-spectrum", help="render a PGM image's magnitude spectrum")
    _common(p)
    p.add_argument("--image", type=Path, required=True, help="input PGM (P5)")
    p.add_argument("--clamp-fundamental", action="store_true",
                   help="clamp the (0, 0) magnitude to the next largest before scaling")
    p = sub.add_parser("dump-transfer", help="write every conv layer's transfer field as CSV")
    _common(p)
    p.add_argument("--size", type=int, help="input map size (overrides network.size)")
    return parser


def resolve_seed(cli_seed, config):
    """CLI flag, then SPECTRAL_SEED, then the config file, then 42."""
    if cli_seed is not None:
        seed = cli_seed
    elif os.environ.get(SEED_ENV, "").strip():
        raw = os.environ[SEED_ENV].strip()
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    elif "seed" in config:
        seed = config["seed"]
    else:
        seed = DEFAULT_SEED
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    return int(seed)


def _load_config(args):
    if args.config is None:
        return {"schema_version": fio.SCHEMA_VERSION}
    return fio.read_config(args.config)


def _run_experiment(args, config):
    if config.get("experiment", args.command) != args.command:
        raise ConfigError(f"config is for {config['experiment']!r}, not {args.command!r}")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    overrides = {k: v for k, v in config.items() if k not in ("schema_version", "experiment", "network", "seed")}
    if args.n_seeds is not None:
        overrides["n_seeds"] = args.n_seeds
    try:
        cfg = ExperimentConfig.defaults(args.command, seed=resolve_seed(args.seed, config), **overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    log.info("running %s with seed %d", cfg.experiment, cfg.seed)
    report = run_experiment(cfg, jobs=args.jobs)
    path = fio.write_report(report, args.out, cfg)
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {path}")
    return 0 if report.passed else 1


def _render(args, config):
    img = fio.read_pgm(args.image)
    spec = dft2(img[None].astype(np.float64))
    out = args.out / "render-spectrum"
    stem = args.image.stem
    out.mkdir(parents=True, exist_ok=True)
    fio.write_pgm(magnitude_map_render(spec, clamp_fundamental=args.clamp_fundamental), out / f"{stem}.pgm")
    fio.write_grid_csv(np.abs(spec[0]), out / f"{stem}.csv")
    print(f"wrote {out / stem}.pgm")
    return 0


def _default_network():
    return {"size": (8, 8), "learning_rate": 0.01, "layers": [
        {"type": "conv", "in_channels": 3, "out_channels": 4, "kernel_size": 3, "padding": "circular",
         "init_mean": 0.0, "init_std": 0.1, "zero_bias": False},
        {"type": "conv", "in_channels": 4, "out_channels": 3, "kernel_size": 3, "padding": "circular",
         "init_mean": 0.0, "init_std": 0.1, "zero_bias": False},
    ]}


def _dump_transfer(args, config):
    spec = config.get("network") or _default_network()
    seed = resolve_seed(args.seed, config)
    net = init_network(fio.network_from_config(spec, seed), seed)
    size = (args.size, args.size) if args.size else tuple(spec["size"])
    if min(size) < 1:
        raise ConfigError("--size must be >= 1")
    fields = []
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            fields.append(compute_transfer_field(layer, size))
        size = layer.output_size(size)
    out = fio.report_dir(args.out, "dump-transfer", seed)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_transfer_csv(fields, out / "transfer.csv")
    fio.dump_weights(net, out / "weights.bin")
    print(f"wrote {out}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        config = _load_config(args)
        if args.command == "render-spectrum":
            return _render(args, config)
        if args.command == "dump-transfer":
            return _dump_transfer(args, config)
        return _run_experiment(args, config)
    except (FreqPropError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
