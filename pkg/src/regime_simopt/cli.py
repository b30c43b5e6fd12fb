"""Command-line entry point ``regime-simopt``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (a
``failure.json`` manifest is left in the output directory when one is set).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import ConfigError, ExperimentSpec, gap_report, read_traces, run_experiment
from .msm import ObservationStream, make_family, simulate
from .optimizer import METHODS, infer_regime_count
from .posterior import GammaPrior, HdpPrior, PriorSpec, UniformPrior, posterior_draws

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _cmd_run(args) -> int:
    spec = ExperimentSpec.from_yaml(args.config)
    if args.problem:
        if args.problem != spec.problem.name:
            raise ConfigError(f"--problem {args.problem} does not match the config's problem {spec.problem.name}")
    if args.seed is not None:
        spec.seed = args.seed
    if args.macros is not None:
        if args.macros < 1:
            raise ConfigError("--macros must be >= 1")
        spec.macros = args.macros
    methods = tuple(args.method) if args.method else spec.methods
    out = args.out or spec.out
    if out is None:
        raise ConfigError("no output directory (use --out or set 'out' in the config)")
    _, summary = run_experiment(spec, out, methods)
    for m in methods:
        last = [r for r in summary if r["method"] == m][-1]
        print(f"{m}: final mean cumulative GAP {last['mean_cum_gap']:.4f} (se {last['se']:.4f})")
    print(f"results written to {out}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    spec = ExperimentSpec.from_yaml(args.config)
    if spec.truth is None:
        raise ConfigError("config has no 'truth' section to simulate from")
    n = args.length or spec.run.observations_needed() + 1
    stream = simulate(spec.truth, n, args.seed if args.seed is not None else spec.seed)
    stream.to_csv(args.out)
    print(f"wrote {n} observations to {args.out}")
    return EXIT_OK


def _prior_from_args(args, family) -> PriorSpec:
    kw = {"family": family}
    if args.rate_prior:
        kw["rate"] = GammaPrior(*args.rate_prior)
    if args.mean_prior:
        kw["mean"] = UniformPrior(*args.mean_prior)
    if args.sd_prior:
        kw["sd"] = UniformPrior(*args.sd_prior)
    return PriorSpec(**kw)


def _cmd_infer(args) -> int:
    stream = ObservationStream.from_csv(args.data)
    if np.any(np.isnan(stream.values)):
        raise ConfigError(f"{args.data} has no observation values")
    kw = {"sd": args.known_sd} if args.family == "gaussian_known_var" else {}
    family = make_family(args.family, **kw)
    prior = _prior_from_args(args, family)
    if args.hdp:
        prior = replace(prior, hdp=HdpPrior(truncation=args.truncation))
        tau = args.tau if args.tau else 1.0 / np.sqrt(len(stream))
        s_max, r_hat = infer_regime_count(stream, args.truncation, args.n_mc, tau, prior, args.seed)
        print(f"regime count: mode {r_hat}, max {s_max} (threshold {tau:.4g})")
        return EXIT_OK
    if args.regimes is None:
        raise ConfigError("--regimes is required unless --hdp is given")
    draws = posterior_draws(stream, args.regimes, prior, args.n_mc, args.burn_in, 1, args.seed)
    if args.out:
        draws.to_csv(args.out)
        print(f"wrote {draws.n_mc} draws to {args.out}")
    names = family.param_names
    mean = draws.params.mean(axis=0)
    for k in range(args.regimes):
        desc = ", ".join(f"{n}={v:.4g}" for n, v in zip(names, mean[k]))
        print(f"regime {k + 1}: {desc}; next-period weight {draws.weights[:, k].mean():.3f}")
    return EXIT_OK


def _cmd_gap_report(args) -> int:
    src = Path(args.results)
    path = src / "traces.csv" if src.is_dir() else src
    if not path.exists():
        raise ConfigError(f"no traces found at {path}")
    traces = read_traces(path)
    out = Path(args.out) if args.out else path.parent / "summary.csv"
    rows = gap_report(traces, out)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regime-simopt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--method", action="append", choices=METHODS, help="repeatable; overrides the config list")
    r.add_argument("--problem", help="sanity check against the config's problem")
    r.add_argument("--seed", type=int)
    r.add_argument("--macros", type=int)
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("simulate-data", help="simulate an observation stream from a config's true model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--length", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_cmd_simulate)

    i = sub.add_parser("infer", help="posterior inference on an observation stream")
    i.add_argument("--data", required=True)
    i.add_argument("--regimes", type=int)
    i.add_argument("--family", default="exponential",
                   choices=["exponential", "gaussian_known_var", "gaussian", "diag_bivariate_gaussian"])
    i.add_argument("--known-sd", type=float, default=1.0)
    i.add_argument("--rate-prior", type=float, nargs=2, metavar=("SHAPE", "RATE"))
    i.add_argument("--mean-prior", type=float, nargs=2, metavar=("LO", "HI"))
    i.add_argument("--sd-prior", type=float, nargs=2, metavar=("LO", "HI"))
    i.add_argument("--n-mc", type=int, default=100)
    i.add_argument("--burn-in", type=int, default=200)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--hdp", action="store_true", help="estimate the regime count instead")
    i.add_argument("--truncation", type=int, default=10)
    i.add_argument("--tau", type=float)
    i.add_argument("--out")
    i.set_defaults(func=_cmd_infer)

    g = sub.add_parser("gap-report", help="summarize traces.csv into summary.csv")
    g.add_argument("results")
    g.add_argument("--out")
    g.set_defaults(func=_cmd_gap_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
