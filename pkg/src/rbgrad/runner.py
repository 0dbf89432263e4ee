"""Experiment configuration, model construction and trace emission."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rbgrad import diagnostics
from rbgrad.estimators import BASE_ESTIMATORS, REINFORCE_PLUS, EstimatorConfig
from rbgrad.models import (
    BernoulliToy,
    GmmModel,
    NMixtureModel,
    bernoulli_integrand,
    gmm_simulate,
    kmeans_init,
    nmixture_simulate,
    read_dataset,
    write_dataset,
)
from rbgrad.optim import OptimizerConfig, TraceRecord, run_optimization

logger = logging.getLogger(__name__)

EXPERIMENTS = ("bernoulli", "gmm", "nmixture", "diagnose")
ESTIMATORS = ("exact", "reinforce", "reinforce-plus")
OUT_DIR_ENV = "RBGRAD_OUT_DIR"
CSV_HEADER = ["trial", "iter", "loss", "grad_norm", "base_evals", "wall_ms"]

DEFAULT_LR = {"bernoulli": 1e-2, "gmm": 1e-2, "nmixture": 1e-3}
DEFAULT_ITERS = {"bernoulli": 2000, "gmm": 1000, "nmixture": 1000}
DEFAULT_TRIALS = {"bernoulli": 20, "gmm": 20, "nmixture": 10}

# spawn keys for setup streams; trial streams use the entropy pair (seed, trial)
DATA_STREAM, INIT_STREAM, DIAG_STREAM = 0, 1, 2


class ValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration: " + "; ".join(problems))


@dataclass
class ExperimentConfig:
    experiment: str = "bernoulli"
    estimator: str = "reinforce-plus"
    rb_k: int = 0
    minibatch_n: int = 1
    budgeted: bool = False
    auto_k: bool = False
    optimizer: str = "adam"
    lr: float | None = None
    iters: int | None = None
    trials: int | None = None
    seed: int = 0
    jobs: int = 1
    out: str | None = None
    record_wall_time: bool = True
    data: str | None = None
    # bernoulli
    eta0: float = -4.0
    target_p: list[float] = field(default_factory=lambda: [0.6, 0.51, 0.48])
    # gmm
    K: int = 10
    N: int = 200
    d: int = 2
    sigma0: float = 5.0
    sigma_y: float = 0.5
    # nmixture
    lam: float = 10.0
    p: float = 0.2
    n_true: int = 10
    count: int = 1000
    r0: float = 5.0
    p0: float = 0.5
    # diagnose
    suite: str = "all"
    cases: int = 100
    eta: float = -4.0
    k_list: list[int] = field(default_factory=lambda: list(range(9)))
    M: int = 10000

    def resolved(self) -> "ExperimentConfig":
        """Copy with experiment-dependent defaults filled in."""
        cfg = dataclasses.replace(self)
        if self.experiment in DEFAULT_LR:
            cfg.lr = DEFAULT_LR[self.experiment] if self.lr is None else self.lr
            cfg.iters = DEFAULT_ITERS[self.experiment] if self.iters is None else self.iters
            cfg.trials = DEFAULT_TRIALS[self.experiment] if self.trials is None else self.trials
        if cfg.out is None:
            ext = "csv"
            cfg.out = str(Path(os.environ.get(OUT_DIR_ENV, ".")) / f"{self.experiment}.{ext}")
        return cfg

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(self.estimator, self.rb_k, self.minibatch_n, self.budgeted, self.auto_k)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr)

    def support_size(self) -> int | None:
        if self.experiment == "bernoulli":
            return 2 ** len(self.target_p)
        if self.experiment == "gmm":
            return self.K
        return None

    def validate(self) -> None:
        problems = []
        if self.experiment not in EXPERIMENTS:
            problems.append(f"experiment: unknown {self.experiment!r}")
        if self.estimator not in ESTIMATORS:
            problems.append(f"estimator: unknown {self.estimator!r}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer: unknown {self.optimizer!r}")
        if self.estimator in ESTIMATORS:
            problems += self.estimator_config().validate(self.support_size())
        for name in ("iters", "trials"):
            value = getattr(self, name)
            if value is not None and value < 1:
                problems.append(f"{name}: must be >= 1, got {value}")
        if self.lr is not None and not self.lr > 0:
            problems.append(f"lr: must be positive, got {self.lr}")
        if self.jobs < 1:
            problems.append(f"jobs: must be >= 1, got {self.jobs}")
        if self.experiment == "gmm":
            if self.K > self.N:
                problems.append("K, N: K-means needs K <= N")
            if not (self.sigma0 > 0 and self.sigma_y > 0):
                problems.append("sigma0, sigma_y: must be positive")
        if self.experiment == "nmixture" and not 0 < self.p <= 1:
            problems.append(f"p: must lie in (0, 1], got {self.p}")
        if self.experiment == "diagnose":
            if self.suite not in (*diagnostics.SUITES, "sweep", "all"):
                problems.append(f"suite: unknown {self.suite!r}")
            if self.cases < 1:
                problems.append("cases: must be >= 1")
            if self.M < 2:
                problems.append("M: must be >= 2")
        if problems:
            raise ValidationError(problems)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError([f"{u}: unknown field" for u in sorted(unknown)])
        return cls(**data)


def setup_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def _dataset_path(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    return out.with_name(out.stem + ".data.csv")


def build_model(cfg: ExperimentConfig):
    """Construct the experiment model; simulated datasets are written next to the trace."""
    if cfg.experiment == "bernoulli":
        return BernoulliToy(cfg.target_p, cfg.eta0)
    data_rng = setup_rng(cfg.seed, DATA_STREAM)
    if cfg.experiment == "gmm":
        if cfg.data:
            cols, _ = read_dataset(cfg.data)
            y = np.stack([cols[f"y{i}"] for i in range(cfg.d)], axis=1)
        else:
            sim = gmm_simulate(cfg.K, cfg.N, cfg.d, cfg.sigma0, cfg.sigma_y, np.full(cfg.K, 1.0 / cfg.K), data_rng)
            y = sim.y
            cols = {f"y{i}": y[:, i] for i in range(cfg.d)} | {"z": sim.z}
            write_dataset(_dataset_path(cfg), cols, cfg.seed)
        init = kmeans_init(y, cfg.K, setup_rng(cfg.seed, INIT_STREAM))
        return GmmModel(y, cfg.K, cfg.sigma0, cfg.sigma_y, init=init)
    if cfg.experiment == "nmixture":
        if cfg.data:
            cols, _ = read_dataset(cfg.data)
            y = cols["y"]
        else:
            y = nmixture_simulate(cfg.n_true, cfg.p, cfg.count, data_rng)
            write_dataset(_dataset_path(cfg), {"y": y}, cfg.seed)
        return NMixtureModel(y, p=cfg.p, lam=cfg.lam, r0=cfg.r0, p0=cfg.p0)
    raise ValueError(f"no model for experiment {cfg.experiment!r}")


def write_trace(path, records: list[TraceRecord], record_wall_time: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in sorted(records, key=lambda r: (r.trial, r.iter)):
            wall = f"{r.wall_ms:.3f}" if record_wall_time else "0.0"
            writer.writerow([r.trial, r.iter, repr(r.loss), repr(r.grad_norm), r.base_evals, wall])


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records: list[TraceRecord], trials: int) -> dict:
    finals = {}
    for r in records:
        if not r.aborted:
            finals[r.trial] = r.loss
    losses = np.array(list(finals.values()))
    aborted = sorted({r.trial for r in records if r.aborted})
    summary = {"trials": trials, "trials_aborted": aborted}
    if len(losses):
        summary["final_mean_loss"] = float(losses.mean())
        summary["final_loss_se"] = float(losses.std(ddof=1) / np.sqrt(len(losses))) if len(losses) > 1 else 0.0
    return summary


def run_experiment(cfg: ExperimentConfig) -> int:
    model = build_model(cfg)
    records = run_optimization(model, cfg.estimator_config(), cfg.optimizer_config(),
                               cfg.iters, cfg.trials, cfg.seed, jobs=cfg.jobs)
    write_trace(cfg.out, records, cfg.record_wall_time)
    summary = summarize(records, cfg.trials)
    sidecar = {"config": cfg.to_dict(), "seed": cfg.seed, "summary": summary}
    if cfg.experiment != "bernoulli" and not cfg.data:
        sidecar["dataset"] = str(_dataset_path(cfg))
    Path(cfg.out + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    if "final_mean_loss" in summary:
        print(f"{cfg.experiment}: final mean loss {summary['final_mean_loss']:.6g} "
              f"+/- {summary['final_loss_se']:.2g} over {cfg.trials} trials -> {cfg.out}")
    return 3 if summary["trials_aborted"] else 0


def run_diagnose(cfg: ExperimentConfig) -> int:
    rng = setup_rng(cfg.seed, DIAG_STREAM)
    if cfg.suite == "sweep":
        eta = np.array([cfg.eta])
        dist, f = bernoulli_integrand(eta, cfg.target_p)
        base = BASE_ESTIMATORS.get(cfg.estimator, REINFORCE_PLUS)
        ks = [k for k in cfg.k_list if k <= dist.support_size]
        rows = diagnostics.variance_vs_k_sweep(dist, f, eta, base, ks, cfg.M, rng)
        diagnostics.write_sweep_csv(cfg.out, rows)
        for row in rows:
            print(f"k={row.k:2d} tail_mass={row.tail_mass:.6f} total_variance={row.total_variance:.6g}")
        return 0
    names = list(diagnostics.SUITES) if cfg.suite == "all" else [cfg.suite]
    reports = [diagnostics.SUITES[name](cfg.cases, rng) for name in names]
    with open(cfg.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["suite", "check", "passed", "worst", "cases", "criterion"])
        for rep in reports:
            for r in rep.results:
                writer.writerow([rep.suite, r.name, r.passed, repr(r.worst), r.cases, r.detail])
                print(f"{'PASS' if r.passed else 'FAIL'}  {rep.suite:13s} {r.name:24s} "
                      f"worst={r.worst:.3g}  ({r.detail}, {r.cases} cases)")
    return 0 if all(rep.passed for rep in reports) else 4


def run(cfg: ExperimentConfig) -> int:
    """Execute a validated configuration. Returns the process exit code."""
    cfg = cfg.resolved()
    cfg.validate()
    try:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        if cfg.experiment == "diagnose":
            return run_diagnose(cfg)
        return run_experiment(cfg)
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        print(f"error: {exc}")
        return 1
