"""Command-line driver: ``ingest``, ``run``, ``scaling`` and ``distortion``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import DataError, InvalidParameterError, make_rng
from .experiment import (
    POLICIES,
    ExperimentConfig,
    distortion_sweep,
    emit_report,
    run_experiment,
    runtime_scaling_probe,
)
from .ingestion import DATASETS, ingest

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("rpbandit")


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on bad flags, which matches the config-error code.
    p = argparse.ArgumentParser(prog="rpbandit", description="Projected Thompson-sampling bandit experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("ingest", help="ratings file -> feature/reward artifact")
    g.add_argument("--dataset", choices=DATASETS, required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--top-items", type=int, required=True)
    g.add_argument("--reg", type=float, default=0.1)
    g.add_argument("--iters", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="artifact path prefix")
    g.add_argument("--delimiter", default=None, help="default ',' (or '::' for .dat files)")
    g.add_argument("--k-user", type=int, default=None)
    g.add_argument("--k-item", type=int, default=None)

    r = sub.add_parser("run", help="run a policy on an environment")
    r.add_argument("--policy", choices=POLICIES, required=True)
    r.add_argument("--env", choices=("synthetic", "replay"), default="synthetic")
    r.add_argument("--artifact", default=None)
    r.add_argument("--n", type=int, default=120)
    r.add_argument("--d", type=int, default=24)
    r.add_argument("--arms", type=int, default=50)
    r.add_argument("--T", type=int, default=1000)
    r.add_argument("--reps", type=int, default=1)
    r.add_argument("--lambda", dest="lam", type=float, default=1.0)
    r.add_argument("--delta", type=float, default=0.1)
    r.add_argument("--epsilon", type=float, default=0.1)
    r.add_argument("--R", type=float, default=0.5)
    r.add_argument("--alpha", type=float, default=1.0)
    r.add_argument("--egreedy-eps", type=float, default=0.1)
    r.add_argument("--context-gen", choices=("ball", "latent"), default="ball")
    r.add_argument("--rank", type=int, default=8)
    r.add_argument("--jitter", type=float, default=0.1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--diagnostics", action="store_true")
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="json")
    r.add_argument("--no-timing", action="store_true", help="skip the timing sidecar file")

    s = sub.add_parser("scaling", help="per-step time of select+update across n")
    s.add_argument("--d", type=int, default=20)
    s.add_argument("--n-list", type=_int_list, required=True)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    dd = sub.add_parser("distortion", help="projection inner-product distortion sweep")
    dd.add_argument("--n", type=int, required=True)
    dd.add_argument("--d-list", type=_int_list, required=True)
    dd.add_argument("--epsilon", type=float, default=0.5)
    dd.add_argument("--trials", type=int, default=20_000)
    dd.add_argument("--seed", type=int, default=0)
    dd.add_argument("--out", required=True)
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _cmd_ingest(a) -> None:
    delim = a.delimiter or ("::" if str(a.input).endswith(".dat") else ",")
    art = ingest(a.input, a.dataset, a.k, a.top_items, a.reg, a.iters, make_rng(a.seed, "environment"),
                 delimiter=delim, k_user=a.k_user, k_item=a.k_item)
    art.save(a.out)
    log.info("wrote artifact %s: %d users x %d items, n=%d", a.out, art.user_factors.shape[0],
             art.item_factors.shape[0], art.n)


def _cmd_run(a) -> None:
    cfg = ExperimentConfig(policy=a.policy, env=a.env, T=a.T, repetitions=a.reps, base_seed=a.seed,
                           n=a.n, arms=a.arms, context_gen=a.context_gen, rank=a.rank, jitter=a.jitter,
                           artifact=a.artifact, d=a.d, lam=a.lam, delta=a.delta, epsilon=a.epsilon,
                           R=a.R, alpha=a.alpha, egreedy_eps=a.egreedy_eps, diagnostics=a.diagnostics)
    report = run_experiment(cfg)
    emit_report(report, a.out, a.format, timing=not a.no_timing)
    agg = report.aggregates()
    log.info("%s: average cumulative reward %.1f, CTR %.4f%s", a.policy, agg["average_cumulative_reward"],
             agg["average_ctr"], " (partial)" if report.partial else "")


def _cmd_scaling(a) -> None:
    rows = runtime_scaling_probe(a.d, a.n_list, steps=a.steps, seed=a.seed)
    _write_json(a.out, {"d": a.d, "steps": a.steps, "seed": a.seed,
                        "rows": [{"n": n, "step_ns": ns} for n, ns in rows]})


def _cmd_distortion(a) -> None:
    rows = distortion_sweep(a.n, a.d_list, a.epsilon, a.trials, a.seed)
    _write_json(a.out, {"n": a.n, "epsilon": a.epsilon, "trials": a.trials, "seed": a.seed, "rows": rows})


COMMANDS = {"ingest": _cmd_ingest, "run": _cmd_run, "scaling": _cmd_scaling, "distortion": _cmd_distortion}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except InvalidParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
