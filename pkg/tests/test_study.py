import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from mqiv.data import split_folds
from mqiv.estimators import run_estimators
from mqiv.learners import LearnerSpec
from mqiv.nuisance import fit_raw_nuisances, oracle_spec
from mqiv.simulation import DgpConfig, generate, oracle_att
from mqiv.study import McConfig, preset, run_replication, run_study

SCHEMA = json.loads((Path(__file__).parents[1] / "docs/schemas/mc_report.schema.json").read_text())


def test_single_replication_is_degenerate():
    cfg = McConfig(sample_sizes=(800,), replications=1, estimators=("IF1", "W1"), base_seed=4)
    rep = run_study(cfg)
    sample = generate(DgpConfig(n=800, seed=4))
    raw = fit_raw_nuisances(sample.ds, split_folds(800, 5, 4), oracle_spec())
    direct = run_estimators(["IF1", "W1"], sample.ds, split_folds(800, 5, 4), raw)
    for res in direct:
        cell = rep.cell(res.estimator, 800)
        assert cell.ese == 0.0
        assert cell.bias == pytest.approx(res.point - oracle_att(), abs=1e-15)
    assert rep.cell("IF1", 800).coverage in (0.0, 1.0)
    assert rep.cell("W1", 800).ase is None and rep.cell("W1", 800).coverage is None


def test_aggregation_matches_manual():
    cfg = McConfig(sample_sizes=(500,), replications=4, estimators=("IF1",), base_seed=10)
    rep = run_study(cfg)
    runs = [run_replication(cfg, 500, r)["IF1"] for r in range(4)]
    pts = np.array([p for p, *_ in runs])
    truth = oracle_att()
    cell = rep.cell("IF1", 500)
    assert cell.bias == pytest.approx(pts.mean() - truth)
    assert cell.ese == pytest.approx(pts.std(ddof=1))
    assert cell.ase == pytest.approx(np.mean([s for _, s, _, _ in runs]))
    assert cell.coverage == pytest.approx(np.mean([lo <= truth <= hi for _, _, lo, hi in runs]))


def test_reproducible_and_parallel_invariant():
    cfg = McConfig(sample_sizes=(300, 600), replications=3, estimators=("W1", "IF1", "W2", "W3"),
                   base_seed=2)
    a = run_study(cfg).to_json()
    b = run_study(cfg).to_json()
    c = run_study(cfg, jobs=2).to_json()
    assert a == b == c
    jsonschema.validate(json.loads(a), SCHEMA)


def test_failures_recorded():
    # 3 rows cannot be split into 5 folds
    cfg = McConfig(sample_sizes=(3,), replications=2, estimators=("IF1",))
    rep = run_study(cfg)
    assert rep.failure_count == 2
    assert rep.failures[0]["reason"].startswith("ValueError")
    assert rep.cell("IF1", 3).bias is None
    jsonschema.validate(rep.to_dict(), SCHEMA)


def test_learned_nuisances_run():
    cfg = McConfig(sample_sizes=(600,), replications=2, estimators=("IF1", "PHI"),
                   learner_spec=LearnerSpec("least_squares", {"degree": 2}), k_folds=3)
    rep = run_study(cfg)
    assert rep.failure_count == 0
    assert rep.config["learner"]["kind"] == "least_squares"


def test_table_layout():
    rep = run_study(McConfig(sample_sizes=(400,), replications=2, estimators=("W1", "IF1")))
    table = rep.to_table()
    lines = table.splitlines()
    assert "Sample size N=400" in lines
    for label in ("Bias", "ASE", "ESE", "Coverage"):
        assert any(line.startswith(label) for line in lines)
    assert lines[1].split() == ["Metric", "W1", "IF1"]


def test_presets():
    desk = preset("table2-desk")
    assert desk.replications == 200 and desk.sample_sizes == (600, 2400, 7200)
    assert desk.estimators == ("W1", "IF1", "W2", "W3") and desk.spec.kind == "oracle"
    full = preset("table2")
    assert full.replications == 1000 and full.sample_sizes == (600, 1200, 2400, 3600, 7200)
    with pytest.raises(ValueError):
        preset("nope")


@pytest.mark.parametrize("kw", [dict(replications=0), dict(sample_sizes=()), dict(sample_sizes=(0,)),
                                dict(estimators=("IF9",)), dict(estimators=()), dict(er_mode="x"),
                                dict(ci_level=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        McConfig(**kw)


def test_estimator_names_normalized():
    assert McConfig(estimators=("if1", "w2")).estimators == ("IF1", "W2")
