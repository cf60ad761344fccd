"""Command line entry point.

    hetswitch run          --config cfg.json | --preset NAME  [--out DIR] [--seed S] [--threads N]
    hetswitch matrix       same flags, forces the degradation-matrix protocol
    hetswitch dg           same flags, forces the leave-one-device-out sweep
    hetswitch dump-samples same flags plus -n, writes binary PPM images
    hetswitch validate     parse and echo the resolved config
    hetswitch presets      list preset names

Exit codes: 0 ok, 2 invalid config, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import PRESETS, ExperimentConfig, load_config, preset
from .fed_data import FormatError, RenderCache, assign_profiles, partition
from .fl_core import Federation, RoundError, run_experiment
from .protocols import dg_sweep, robustness_comparison, train_test_matrix
from .report import emit, to_json

log = logging.getLogger("hetswitch")


class UsageError(Exception):
    """Bad configuration; maps to exit code 2."""


# --- config resolution -------------------------------------------------------

def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}")
    return "invalid config: " + "; ".join(lines)


def resolve_config(args) -> ExperimentConfig:
    if bool(args.config) == bool(args.preset):
        raise UsageError("give exactly one of --config or --preset")
    try:
        if args.preset:
            cfg = preset(args.preset)
        else:
            cfg = load_config(args.config)
        if args.seed is not None:
            cfg = ExperimentConfig.model_validate({**cfg.echo(), "seed": args.seed})
    except ValidationError as e:
        raise UsageError(_format_validation(e)) from None
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from None
    return cfg


def _setup(cfg: ExperimentConfig):
    base = cfg.build_dataset()  # I/O and format errors are runtime failures
    try:
        fl = cfg.fl_config()
        profiles = cfg.build_profiles()
        table = cfg.share_table(profiles)
        spec = cfg.model_spec(base)
        strategy = cfg.build_strategy()
        shards = partition(base, fl.n_clients, fl.seed, min_size=fl.batch_size)
        shards = assign_profiles(shards, profiles, table, fl.seed)
    except KeyError as e:
        raise UsageError(f"invalid config: profiles: {e.args[0]}") from None
    except ValueError as e:  # includes ConfigError and SpecError
        raise UsageError(f"invalid config: {e}") from None
    return fl, base, profiles, table, spec, strategy, shards


# --- modes -------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def execute(cfg: ExperimentConfig, out: Path, threads: int = 1, mode: str | None = None) -> dict:
    """Run ``cfg`` (in ``mode`` if given) and write the report tree to ``out``.

    Returns the top-level summary that was written.
    """
    mode = mode or cfg.mode
    if mode != cfg.mode:
        cfg = ExperimentConfig.model_validate({**cfg.echo(), "mode": mode})
    fl, base, profiles, table, spec, strategy, shards = _setup(cfg)
    echo = cfg.echo()
    run_kw = dict(threads=threads, eval_every=cfg.eval_every, config_echo=echo)
    cache = RenderCache(base)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", to_json(echo))

    if mode == "standard":
        rep = run_experiment(fl, strategy, Federation(base, shards, profiles, cache), spec, **run_kw)
        emit(rep, out)
        return rep.summary()

    if mode == "dg-sweep":
        if len(profiles) < 2:
            raise UsageError("invalid config: profiles: dg sweep needs at least two profiles")
        names = [p.name for p in profiles]
        unknown = [x for x in (cfg.exclude or []) if x not in names]
        if unknown:
            raise UsageError(f"invalid config: exclude: unknown profile(s) {unknown}")
        given = None if cfg.profiles.shares == "uniform" else table
        reports, summary = dg_sweep(fl, strategy, base, shards, profiles, spec, given, cache,
                                    exclude=cfg.exclude, **run_kw)
        for ex, rep in reports.items():
            emit(rep, out / "dg" / ex)
        _write(out / "summary.json", to_json(summary))
        return summary

    if mode == "degradation-matrix":
        acc, deg, reports = train_test_matrix(fl, strategy, base, shards, profiles, spec, cache,
                                              relative=cfg.relative_degradation, **run_kw)
        names = [p.name for p in profiles]
        for name, rep in zip(names, reports):
            emit(rep, out / "train" / name)
        summary = {"profiles": names, "accuracy": acc, "degradation": deg,
                   "relative": cfg.relative_degradation}
        _write(out / "matrix.json", to_json(summary))
        lines = ["train," + ",".join(names)]
        lines += [names[i] + "," + ",".join(repr(float(v)) for v in deg[i]) for i in range(len(names))]
        _write(out / "matrix.csv", "\n".join(lines) + "\n")
        return summary

    if mode == "robustness":
        r = cfg.robustness
        table_out, reports = robustness_comparison(fl, base, shards, profiles, spec, r.train_degree,
                                                   r.test_degrees, r.variants, cache, **run_kw)
        for v, rep in zip(r.variants, reports):
            emit(rep, out / "variants" / v.replace("+", "_"))
        _write(out / "robustness.json", to_json(table_out))
        return table_out

    raise UsageError(f"invalid config: mode: unknown mode {mode!r}")


# --- PPM dumps ---------------------------------------------------------------

def to_ppm(img: np.ndarray) -> bytes:
    """Binary P6 encoding of an (H, W, 3) image in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    px = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def dump_samples(cfg: ExperimentConfig, out: Path, n: int, include_base: bool = False) -> list[Path]:
    if n < 0:
        raise UsageError("-n must be >= 0")
    base = cfg.build_dataset()
    profiles = cfg.build_profiles()
    n = min(n, len(base.train_y))
    written: list[Path] = []
    if n == 0:
        return written
    idx = np.arange(n)
    cache = RenderCache(base)
    groups = [(p.name, cache.get("train", p, idx)) for p in profiles]
    if include_base:
        groups.insert(0, ("_base", base.train_x[:n]))
    for name, imgs in groups:
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(imgs):
            p = d / f"sample_{i:04d}_y{int(base.train_y[i])}.ppm"
            p.write_bytes(to_ppm(im))
            written.append(p)
    return written


# --- argparse ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--preset", metavar="NAME", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int, metavar="U64", help="override the master seed")
    if out:
        p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
        p.add_argument("--threads", type=int, default=1, metavar="N",
                       help="worker threads for client updates; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetswitch", description="Federated learning simulator for "
                                 "device-induced image heterogeneity.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, help_ in [("run", "run the experiment in the config's mode"),
                        ("matrix", "train-on-i / test-on-j degradation matrix"),
                        ("dg", "leave-one-device-out sweep")]:
        _common(sub.add_parser(name, help=help_))
    d = sub.add_parser("dump-samples", help="write rendered samples per profile as PPM")
    _common(d)
    d.add_argument("-n", type=int, default=4, help="samples per profile (default: 4)")
    d.add_argument("--include-base", action="store_true", help="also dump the unrendered base images")
    _common(sub.add_parser("validate", help="check a config and print the resolved form"), out=False)
    sub.add_parser("presets", help="list preset names")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cmd == "presets":
            print("\n".join(sorted(PRESETS)))
            return 0
        cfg = resolve_config(args)
        if args.cmd == "validate":
            _setup(cfg)  # catches cross-field problems (shares vs profiles, shard sizes)
            sys.stdout.write(to_json(cfg.echo()))
            return 0
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = Path(args.out)
        if args.cmd == "dump-samples":
            paths = dump_samples(cfg, out, args.n, args.include_base)
            print(f"wrote {len(paths)} files under {out}")
            return 0
        mode = {"matrix": "degradation-matrix", "dg": "dg-sweep"}.get(args.cmd)
        summary = execute(cfg, out, args.threads, mode)
        sys.stdout.write(to_json(summary))
        return 0
    except UsageError as e:
        print(f"hetswitch: {e}", file=sys.stderr)
        return 2
    except (RoundError, FormatError, OSError, ValueError, KeyError) as e:
        print(f"hetswitch: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
