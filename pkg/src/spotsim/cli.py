"""Command-line driver.

    spotsim run <config> [--synthetic]
    spotsim compare <config> --methods user,recent_average:2 [--synthetic]
    spotsim baseline <config> [--synthetic]
    spotsim validate <config> [--synthetic]

Output goes to ``experiment.output_dir`` unless ``SPOTSIM_OUTPUT_DIR`` is set.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from spotsim.experiment import (
    ConfigError,
    baseline,
    compare_methods,
    load_config,
    output_dir,
    prepare_inputs,
    run_experiment,
)
from spotsim.market import MarketError, fmt_money
from spotsim.simulation import SimulationError
from spotsim.workload import SWFError

log = logging.getLogger("spotsim")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spotsim", description="Spot-market virtual cluster simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config")
        sp.add_argument("--synthetic", action="store_true",
                        help="generate the price traces and workload instead of reading files")
        return sp

    add("run", help="run the full replicated experiment")
    cmp = add("compare", help="paired comparison of estimation methods")
    cmp.add_argument("--methods", required=True, help="comma-separated estimation methods")
    add("baseline", help="worst-case and best-case baseline costs only")
    add("validate", help="parse and check inputs without simulating")
    return p


def _cmd_run(cfg) -> None:
    res = run_experiment(cfg)
    cost = res.aggregate["total_cost"]
    print(f"{len(res.records)} replications -> {output_dir(cfg)}")
    print(f"mean cost ${cost['mean']:.2f} (sd {cost['std']:.2f}); "
          f"worst-case ${fmt_money(res.worst.total)}; best-case ${fmt_money(res.best.total)}")
    print(f"mean misses {res.aggregate['misses']['mean']:.2f}; "
          f"mean utilization {res.aggregate['utilization']['mean']:.3f}")


def _cmd_compare(cfg, methods: str) -> None:
    names = [m for m in (s.strip() for s in methods.split(",")) if m]
    cmp = compare_methods(cfg, names)
    sys.stdout.write(cmp.files["comparison.csv"])


def _cmd_baseline(cfg) -> None:
    _, _, text = baseline(cfg)
    sys.stdout.write(text)


def _cmd_validate(cfg) -> None:
    inputs = prepare_inputs(cfg)
    print(f"workload: {len(inputs.jobs)} jobs spanning {inputs.span} s")
    for name, tr in inputs.traces.items():
        print(f"trace {name}: {len(tr)} points, {tr.start}..{tr.end}")
    print(f"offset window: {inputs.window[0]}..{inputs.window[1]}; replications: {cfg.replications}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, synthetic=args.synthetic)
        if args.command == "run":
            _cmd_run(cfg)
        elif args.command == "compare":
            _cmd_compare(cfg, args.methods)
        elif args.command == "baseline":
            _cmd_baseline(cfg)
        else:
            _cmd_validate(cfg)
    except (ConfigError, MarketError, SWFError, SimulationError, ValueError) as exc:
        print(f"spotsim: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"spotsim: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
