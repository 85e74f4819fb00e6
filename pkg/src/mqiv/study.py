"""Monte Carlo study runner: bias / ASE / ESE / coverage over replications."""

from __future__ import annotations

import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mqiv.data import split_folds
from mqiv.errors import MqivError
from mqiv.estimators import ESTIMATORS, run_estimators
from mqiv.learners import LearnerSpec
from mqiv.nuisance import fit_raw_nuisances, oracle_spec
from mqiv.simulation import ER_MODES, MECHANISMS, DgpConfig, generate, oracle_att

DEFAULT_SAMPLE_SIZES = (600, 1200, 2400, 3600, 7200)


@dataclass(frozen=True)
class McConfig:
    sample_sizes: tuple = DEFAULT_SAMPLE_SIZES
    replications: int = 1000
    estimators: tuple = ("W1", "IF1", "W2", "W3")
    learner_spec: LearnerSpec | None = None  # None -> oracle nuisances for er_mode
    k_folds: int = 5
    er_mode: str = "violated"
    mechanism: str = "direct_multiplicative"
    base_seed: int = 0
    ci_level: float = 0.95

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sample_sizes or any(int(n) < 1 for n in self.sample_sizes):
            raise ValueError("sample sizes must be positive")
        ests = tuple(e.upper() for e in self.estimators)
        unknown = [e for e in ests if e not in ESTIMATORS]
        if unknown or not ests:
            raise ValueError(f"estimators must be a nonempty subset of {ESTIMATORS}, got {self.estimators}")
        if self.er_mode not in ER_MODES:
            raise ValueError(f"er_mode must be one of {ER_MODES}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")
        object.__setattr__(self, "estimators", ests)
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))

    @property
    def spec(self) -> LearnerSpec:
        return self.learner_spec if self.learner_spec is not None else oracle_spec(self.er_mode)

    def to_dict(self) -> dict:
        return {
            "sample_sizes": list(self.sample_sizes),
            "replications": self.replications,
            "estimators": list(self.estimators),
            "learner": self.spec.to_dict(),
            "k_folds": self.k_folds,
            "er_mode": self.er_mode,
            "mechanism": self.mechanism,
            "base_seed": self.base_seed,
            "ci_level": self.ci_level,
        }


def preset(name: str) -> McConfig:
    """Named configurations. ``table2`` uses 1000 replications at five sizes; ``table2-desk`` cuts that to 200 replications at three sizes."""
    if name == "table2-desk":
        return McConfig(sample_sizes=(600, 2400, 7200), replications=200,
                        estimators=("W1", "IF1", "W2", "W3"))
    if name == "table2":
        return McConfig()
    raise ValueError(f"unknown preset {name!r}; expected 'table2-desk' or 'table2'")


@dataclass
class CellSummary:
    estimator: str
    n: int
    replications: int
    failures: int
    bias: float | None
    ase: float | None
    ese: float | None
    coverage: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class McReport:
    config: dict
    oracle_att: float
    cells: list
    failures: list = field(default_factory=list)

    def cell(self, estimator: str, n: int) -> CellSummary:
        for c in self.cells:
            if c.estimator == estimator and c.n == n:
                return c
        raise KeyError((estimator, n))

    @property
    def failure_count(self) -> int:
        return len(self.failures)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "oracle_att": self.oracle_att,
            "cells": [c.to_dict() for c in self.cells],
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        return format_table(self)


def run_replication(cfg: McConfig, n: int, rep: int) -> dict:
    """One replication; returns {estimator: (point, se, ci_low, ci_high)} or {"error": reason}."""
    seed = cfg.base_seed + rep
    sample = generate(DgpConfig(n=n, er_mode=cfg.er_mode, mechanism=cfg.mechanism, seed=seed))
    try:
        folds = split_folds(n, cfg.k_folds, seed)
        raw = fit_raw_nuisances(sample.ds, folds, cfg.spec, need_single_arm="W3" in cfg.estimators)
        results = run_estimators(cfg.estimators, sample.ds, folds, raw, cfg.ci_level)
    except (MqivError, ValueError, np.linalg.LinAlgError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {r.estimator: (r.point, r.se, r.ci_low, r.ci_high) for r in results}


def _run_task(args):
    cfg, n, rep = args
    return run_replication(cfg, n, rep)


def _summarize(estimator, n, records, truth, reps) -> CellSummary:
    ok = [r[estimator] for r in records if "error" not in r]
    failures = reps - len(ok)
    if not ok:
        return CellSummary(estimator, n, reps, failures, None, None, None, None)
    points = np.array([p for p, *_ in ok])
    ses = [se for _, se, _, _ in ok if se is not None]
    cis = [(lo, hi) for _, _, lo, hi in ok if lo is not None]
    ese = float(np.std(points, ddof=1)) if points.size > 1 else 0.0
    return CellSummary(
        estimator=estimator,
        n=n,
        replications=reps,
        failures=failures,
        bias=float(points.mean() - truth),
        ase=float(np.mean(ses)) if len(ses) == len(ok) else None,
        ese=ese,
        coverage=float(np.mean([lo <= truth <= hi for lo, hi in cis])) if len(cis) == len(ok) else None,
    )


def run_study(cfg: McConfig, jobs: int = 1, progress: bool = False) -> McReport:
    """Run every (sample size, replication) pair and aggregate.

    Replication r uses seed base_seed + r, so results do not depend on ``jobs``
    or on execution order.
    """
    truth = oracle_att("quadrature")
    tasks = [(cfg, n, rep) for n in cfg.sample_sizes for rep in range(cfg.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = []
            for i, res in enumerate(pool.map(_run_task, tasks, chunksize=4)):
                results.append(res)
                if progress:
                    _report_progress(i + 1, len(tasks))
    else:
        results = []
        for i, task in enumerate(tasks):
            results.append(_run_task(task))
            if progress:
                _report_progress(i + 1, len(tasks))

    cells, failures = [], []
    for j, n in enumerate(cfg.sample_sizes):
        block = results[j * cfg.replications:(j + 1) * cfg.replications]
        for rep, rec in enumerate(block):
            if "error" in rec:
                failures.append({"n": n, "replication": rep, "seed": cfg.base_seed + rep,
                                 "reason": rec["error"]})
        for est in cfg.estimators:
            cells.append(_summarize(est, n, block, truth, cfg.replications))
    return McReport(config=cfg.to_dict(), oracle_att=truth, cells=cells, failures=failures)


def _report_progress(done, total):
    step = max(1, total // 20)
    if done % step == 0 or done == total:
        print(f"replications: {done}/{total}", file=sys.stderr, flush=True)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.3f}"


def format_table(report: McReport) -> str:
    """Plain-text table: one block per sample size, Bias/ASE/ESE/Coverage rows."""
    ests = report.config["estimators"]
    width = 9
    header = "Metric".ljust(10) + "".join(e.rjust(width) for e in ests)
    lines = [
        f"Oracle ATT = {report.oracle_att:.4f}  (er_mode={report.config['er_mode']}, "
        f"reps={report.config['replications']}, learner={report.config['learner']['kind']})",
        header,
        "-" * len(header),
    ]
    for n in report.config["sample_sizes"]:
        lines.append(f"Sample size N={n}")
        row_cells = [report.cell(e, n) for e in ests]
        for label, attr in (("Bias", "bias"), ("ASE", "ase"), ("ESE", "ese"), ("Coverage", "coverage")):
            lines.append(label.ljust(10) + "".join(_fmt(getattr(c, attr)).rjust(width) for c in row_cells))
        fails = sum(c.failures for c in row_cells)
        if fails:
            lines.append(f"  ({fails} failed estimator runs)")
    return "\n".join(lines)
