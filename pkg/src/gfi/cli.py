"""Command-line front end: ``gfi run <config.toml>``.

The config file has three sections; ``[experiment]`` holds the run budget,
``[gfi]`` the sampler settings, ``[scenario]`` the data-generating knobs::

    [experiment]
    model = "network"       # linear | network | mc | tensor
    replicates = 200
    draws = 500
    levels = [0.90, 0.95, 0.99]
    seed = 7
    workers = 1

    [gfi]
    c = 0.05
    lam = "cv"              # penalty weight, or "cv" for 10-fold selection
    sigma = "true"          # known value, "true" = scenario sigma, omit to estimate

    [scenario]
    n = 90
    p = 5
    p_w = 0.2
    p_b = 0.0
    s = 0.0
    sigma = 0.5

Flags override the matching config keys.
"""
from __future__ import annotations

import argparse
from dataclasses import replace

from .harness import ExperimentConfig, run_experiment


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gfi",
        description="Fiducial-sample coverage experiments for additive-noise models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run the experiment described by a TOML config")
    runp.add_argument("config", help="path to the config file")
    runp.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
    runp.add_argument("--workers", type=int, default=None, help="replicate worker processes")
    runp.add_argument("--out-dir", default="gfi-results", help="directory for result files")
    runp.add_argument("--replicates", type=int, default=None, help="override replicate count")
    runp.add_argument("--draws", type=int, default=None, help="override draws per replicate")
    args = parser.parse_args(argv)

    cfg = ExperimentConfig.from_toml(args.config)
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "workers", "replicates", "draws")
        if getattr(args, key) is not None
    }
    if overrides:
        cfg = replace(cfg, **overrides)

    report = run_experiment(cfg, out_dir=args.out_dir)

    print(f"completed {report.completed} of {cfg.replicates} replicates"
          + (f" ({len(report.aborted)} aborted)" if report.aborted else ""))
    for name in sorted(report.groups):
        st = report.groups[name]
        cov = ", ".join(
            f"{key}: {st.coverage[key]:.3f} (width {st.mean_width[key]:.4g})"
            for key in sorted(st.coverage, key=float)
        )
        print(f"  {name}: coverage {cov}; bias {st.bias:.4g}; rmse {st.rmse:.4g}")
    print(f"results in {args.out_dir}/: summary.json, coverage.csv, estimates.csv")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
