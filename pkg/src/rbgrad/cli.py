"""Command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 usage or validation error,
3 a trial aborted on a numeric error, 4 a diagnostic check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from rbgrad.runner import ESTIMATORS, ExperimentConfig, ValidationError, run


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_file", help="JSON file of config values")
    common.add_argument("--estimator", choices=ESTIMATORS)
    common.add_argument("--rb-k", dest="rb_k", type=int)
    common.add_argument("--minibatch-n", dest="minibatch_n", type=int)
    common.add_argument("--budgeted", action="store_true")
    common.add_argument("--auto-k", dest="auto_k", action="store_true")
    common.add_argument("--optimizer", choices=("adam", "sgd"))
    common.add_argument("--lr", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out")
    common.add_argument("--no-wall-time", dest="record_wall_time", action="store_false",
                        help="write 0.0 in wall_ms so traces are byte-reproducible")
    common.add_argument("--data", help="read the dataset from CSV instead of simulating")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rbgrad", description="Rao-Blackwellized gradient experiments")
    sub = parser.add_subparsers(dest="experiment", required=True)

    b = sub.add_parser("bernoulli", parents=[common], argument_default=argparse.SUPPRESS, help="three-bit Bernoulli toy")
    b.add_argument("--eta0", type=float)
    b.add_argument("--target-p", dest="target_p", type=float, nargs="+")

    g = sub.add_parser("gmm", parents=[common], argument_default=argparse.SUPPRESS, help="Gaussian mixture variational inference")
    for name, typ in (("K", int), ("N", int), ("d", int), ("sigma0", float), ("sigma-y", float)):
        g.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)

    n = sub.add_parser("nmixture", parents=[common], argument_default=argparse.SUPPRESS, help="N-mixture model with shifted negative binomial q")
    for name, typ in (("lam", float), ("p", float), ("n-true", int), ("count", int),
                      ("r0", float), ("p0", float)):
        n.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)

    dg = sub.add_parser("diagnose", parents=[common], argument_default=argparse.SUPPRESS, help="property suites and variance sweeps")
    dg.add_argument("--suite")
    dg.add_argument("--cases", type=int)
    dg.add_argument("--eta", type=float)
    dg.add_argument("--k-list", dest="k_list", type=int, nargs="+")
    dg.add_argument("--M", type=int)
    return parser


def parse_config(argv, file_values: dict | None = None) -> ExperimentConfig:
    """Flags override config-file values, which override defaults.

    Unknown flags make argparse exit with status 2. Invalid combinations raise
    :class:`ValidationError` naming the offending fields.
    """
    ns = vars(_parser().parse_args(argv))
    ns.pop("verbose", None)
    config_file = ns.pop("config_file", None)
    values = dict(file_values or {})
    if config_file:
        with open(config_file) as fh:
            values.update(json.load(fh))
    values.update(ns)
    cfg = ExperimentConfig.from_dict(values)
    cfg.resolved().validate()
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(argv)
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
