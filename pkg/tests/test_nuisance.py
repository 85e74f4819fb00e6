import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from mqiv.data import FoldAssignment, split_folds
from mqiv.errors import NuisanceError
from mqiv.learners import LearnerSpec
from mqiv.nuisance import RawNuisances, derive, fit_raw_nuisances, oracle_spec, w_consistency_check
from mqiv.simulation import DgpConfig, generate, oracle_nuisances


def _raw(**kw):
    base = dict(e0=0.2, e1=1.0, e10=1.0, e11=1.3, p0=0.2, p1=0.7, pi1=0.5)
    base.update(kw)
    return RawNuisances(**{k: np.atleast_1d(np.asarray(v, float)) for k, v in base.items()})


def test_derive_hand_example():
    d = derive(_raw())
    assert d.phi[0] == pytest.approx(0.3)
    assert d.delta_star[0] == pytest.approx(1.0)
    assert d.rho[0] == pytest.approx(0.7 * 0.5 + 0.2 * 0.5)
    assert d.floored_count == 0


@pytest.mark.parametrize("p0,p1", [(0.2, 0.7), (0.5, 0.5), (0.9, 0.1), (0.3, 0.301)])
def test_numerator_cancellation(p0, p1):
    raw = _raw(e0=0.4, e1=1.9, e10=0.1, e11=1.6, p0=p0, p1=p1)
    assert derive(raw).delta_star[0] == 0.0


def test_floored_denominator_path():
    c = 2.5
    d = derive(_raw(p0=0.5, p1=0.5, pi1=0.5, e0=c, e1=c, e10=1.0, e11=1.0))
    assert d.delta_a[0] == 0.01 and d.floored_count == 1
    assert d.rho[0] == pytest.approx(0.5)
    assert d.w[0] == pytest.approx(c - 0.5 * d.delta_star[0])


def test_floor_preserves_sign():
    d = derive(_raw(p0=0.504, p1=0.5))
    assert d.delta_a[0] == -0.01
    assert d.floored.tolist() == [0]


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
       st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_w_identity_property(e0, e1, e10, e11, p0, p1, pi1):
    raw = _raw(e0=e0, e1=e1, e10=e10, e11=e11, p0=p0, p1=p1, pi1=pi1)
    d = derive(raw)
    if d.floored_count == 0:
        scale = max(1.0, abs(d.delta_star[0]))
        assert w_consistency_check(raw, d) <= 1e-10 * scale
    assert 0.01 - 1e-12 <= d.rho[0] <= 0.99 + 1e-12


def test_w_check_flags_floored_points():
    raw = _raw(p0=np.array([0.2, 0.5]), p1=np.array([0.7, 0.505]), e0=np.array([0.2, 0.0]),
               e1=np.array([1.0, 3.0]), e10=np.array([1.0, 1.0]), e11=np.array([1.3, 1.0]),
               pi1=np.array([0.5, 0.5]))
    d = derive(raw)
    assert d.floored.tolist() == [1]
    assert w_consistency_check(raw, d) > 1e-10
    ok = raw.take(np.array([0]))
    assert w_consistency_check(ok, derive(ok)) <= 1e-12


def test_oracle_passthrough_and_identity(sim_small):
    ds = sim_small.ds
    raw = fit_raw_nuisances(ds, split_folds(ds.n, 5, 0), oracle_spec(), need_single_arm=True)
    truth = oracle_nuisances(ds.x)
    for name in ("e0", "e1", "e10", "e11", "p0", "p1", "pi1", "m0", "m1"):
        np.testing.assert_allclose(getattr(raw, name), truth[name], rtol=0, atol=1e-10)
    assert w_consistency_check(raw, derive(raw)) <= 1e-10


def test_ensemble_p1_close_to_oracle():
    ds = generate(DgpConfig(n=4000, seed=21)).ds
    raw = fit_raw_nuisances(ds, split_folds(ds.n, 5, 21), LearnerSpec("cv_ensemble"))
    p1_true = 1 - math.exp(-1)
    np.testing.assert_allclose(oracle_nuisances(ds.x[:5])["p1"], p1_true, atol=1e-12)
    assert np.sqrt(np.mean((raw.p1 - p1_true) ** 2)) < 0.05
    for name in ("p0", "p1", "pi1"):
        v = getattr(raw, name)
        assert v.min() >= 0.01 and v.max() <= 0.99


def test_missing_treated_cell_named():
    # Treated units with Z=0 exist only in fold 0, so fold 0's complement has none.
    n = 40
    i = np.arange(n)
    z = i % 2
    folds = (i // 2) % 2
    a = ((z == 1) & (i % 3 == 0)) | ((z == 0) & (folds == 0) & (i % 4 == 0))
    a = a.astype(int)
    ds = make_dataset(np.arange(n, dtype=float), a, z, np.linspace(0, 1, n))
    fa = FoldAssignment(fold_of=folds, k=2)
    with pytest.raises(NuisanceError, match=r"\(A=1,Z=0\)") as info:
        fit_raw_nuisances(ds, fa, LearnerSpec("least_squares"))
    assert info.value.cell == "(A=1,Z=0)" and info.value.fold == 0


@pytest.mark.parametrize("spec", [LearnerSpec("least_squares"), LearnerSpec("knn", {"k": 5}),
                                  LearnerSpec("boosted_stumps", {"rounds": 20})])
def test_cross_fitting_hygiene(spec):
    sample = generate(DgpConfig(n=600, seed=2))
    ds = sample.ds
    folds = split_folds(ds.n, 3, 2)
    base = fit_raw_nuisances(ds, folds, spec, need_single_arm=True)
    rng = np.random.default_rng(0)
    for k in range(folds.k):
        idx = folds.indices(k)
        y = ds.y.copy()
        y[idx] = rng.normal(size=idx.size) * 100
        noisy = make_dataset(y, ds.a, ds.z, ds.x)
        refit = fit_raw_nuisances(noisy, folds, spec, need_single_arm=True)
        for name in ("e0", "e1", "e10", "e11", "m0", "m1", "p0", "p1", "pi1"):
            np.testing.assert_array_equal(getattr(refit, name)[idx], getattr(base, name)[idx])
        other = folds.complement(k)
        assert not np.array_equal(refit.e0[other], base.e0[other])


def test_raw_nuisances_clipped_and_finite(sim_small):
    ds = sim_small.ds
    raw = fit_raw_nuisances(ds, split_folds(ds.n, 5, 1), LearnerSpec("least_squares"))
    for name in ("e0", "e1", "e10", "e11"):
        assert np.all(np.isfinite(getattr(raw, name)))
    assert set(raw.diagnostics["clip_counts"]) == {"p0", "p1", "pi1"}
    assert raw.m0 is None and not raw.has_single_arm
