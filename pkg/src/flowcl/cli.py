"""Command-line entry point.

Exit codes: 0 on success, 1 when some cells failed (partial results),
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, FlowclError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowcl",
                                     description="Continual self-consistency "
                                                 "training for amortized inference")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")

    p_val = sub.add_parser("validate", help="validate a config without running")
    p_val.add_argument("config")

    p_rep = sub.add_parser("report", help="emit plot data from a results directory")
    p_rep.add_argument("results_dir")
    p_rep.add_argument("--kind", required=True)
    p_rep.add_argument("--regimes", nargs="*", default=None)

    p_ref = sub.add_parser("reference",
                           help="precompute and cache an MCMC reference for a CSV")
    p_ref.add_argument("--model", required=True)
    p_ref.add_argument("--data", required=True)
    p_ref.add_argument("--response", default="y")
    p_ref.add_argument("--samples", type=int, default=4000)
    p_ref.add_argument("--warmup", type=int, default=1000)
    p_ref.add_argument("--seed", type=int, default=0)
    p_ref.add_argument("--cache-dir", default=None)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlowclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "validate":
        from .harness import parse_config
        cfg = parse_config(args.config)
        print(f"ok: model={cfg.model} regimes={cfg.regimes} seeds={cfg.seeds}")
        return 0

    if args.command == "run":
        from .harness import parse_config, run_experiment
        cfg = parse_config(args.config)
        rows, manifest = run_experiment(cfg)
        n_fail = len(manifest["failures"])
        print(f"wrote {len(rows)} result rows to "
              f"{os.path.join(cfg.output_dir, 'results.csv')}")
        if n_fail:
            print(f"{n_fail} cell(s) failed; see manifest.json", file=sys.stderr)
            return 1
        return 0

    if args.command == "report":
        from .harness import emit_plot_data, read_results
        rows = read_results(os.path.join(args.results_dir, "results.csv"))
        try:
            path = emit_plot_data(rows, args.kind, args.results_dir,
                                  regimes=args.regimes)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(path)
        return 0

    if args.command == "reference":
        from .models import load_csv_task, make_model
        from .reference import cached_reference
        model = make_model(args.model)
        data, info = load_csv_task(args.data, args.response)
        if data.shape[1] != model.dim_x:
            raise ConfigError(args.data, f"{data.shape[1]} columns after loading, "
                                         f"model expects {model.dim_x}")
        cache_dir = (args.cache_dir or os.environ.get("FLOWCL_CACHE_DIR")
                     or "reference-cache")
        sampler_cfg = {"n_samples": args.samples, "warmup": args.warmup,
                       "step_scale": 0.5, "thin": 1}
        result = cached_reference(model, data, sampler_cfg, cache_dir, args.seed)
        print(f"cached {result.samples.shape[0]} reference samples in {cache_dir}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
