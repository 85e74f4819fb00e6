"""ATT estimators under the multiplicative quasi-IV model.

W1   plug-in modified Wald ratio
IF1  cross-fitted EIF (one-step) estimator with Wald interval
W2   plug-in standard Wald ratio (needs the exclusion restriction)
W3   plug-in single-arm Wald ratio (needs the exclusion restriction)
PHI  plug-in average direct effect of Z on Y among the treated
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from mqiv.data import Dataset, FoldAssignment
from mqiv.errors import EstimationError
from mqiv.nuisance import DerivedNuisances, RawNuisances, derive

ESTIMATORS = ("W1", "IF1", "W2", "W3", "PHI")
PROBE_MODES = ("M1", "M2", "M3", "ALL_WRONG")


@dataclass
class EstimateResult:
    estimator: str
    point: float
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    level: float | None = None
    fold_estimates: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "point": self.point,
            "se": self.se,
            "ci": None if self.ci_low is None else [self.ci_low, self.ci_high],
            "level": self.level,
            "fold_estimates": list(self.fold_estimates),
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


def confidence_interval(point: float, se: float, level: float = 0.95) -> tuple:
    """Wald interval point +/- z_{1-alpha/2} se."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if se < 0 or not math.isfinite(se):
        raise ValueError(f"se must be finite and non-negative, got {se}")
    half = normal_quantile(0.5 + level / 2.0) * se
    return point - half, point + half


# Pointwise influence-function pieces -------------------------------------------

def _finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(np.asarray(arr, dtype=float))):
            raise ValueError("non-finite nuisance value")


def theta(y, a, z, raw: RawNuisances, derived: DerivedNuisances):
    """Correction term of the efficient influence function (vectorized).

    rho/(p1-p0) * (2Z-1)/pi_Z * {Y - A d* - Z phi - w - A/p_Z [Y - Z phi - e10]}
    with p1 - p0 taken from ``derived.delta_a`` (so a floored denominator is
    used consistently).
    """
    y, a, z = np.asarray(y, float), np.asarray(a, float), np.asarray(z, float)
    pi_z = np.where(z == 1, raw.pi1, 1.0 - np.asarray(raw.pi1))
    p_z = np.where(z == 1, raw.p1, raw.p0)
    phi, dstar = derived.phi, derived.delta_star
    _finite(pi_z, p_z, phi, dstar, derived.w, derived.rho, raw.e10)
    resid = y - a * dstar - z * phi - derived.w
    treated_resid = (a / p_z) * (y - z * phi - raw.e10)
    return derived.rho / derived.delta_a * (2 * z - 1) / pi_z * (resid - treated_resid)


def theta_alternative(y, a, z, raw: RawNuisances, derived: DerivedNuisances):
    """Equivalent form of :func:`theta` written with e_Z and p_Z in place of w.

    Agrees with :func:`theta` whenever w = e0 - p0 d* and
    e1 - e0 = (p1 - p0) d* + phi hold for the supplied nuisances.
    """
    y, a, z = np.asarray(y, float), np.asarray(a, float), np.asarray(z, float)
    pi_z = np.where(z == 1, raw.pi1, 1.0 - np.asarray(raw.pi1))
    p_z = np.where(z == 1, raw.p1, raw.p0)
    e_z = np.where(z == 1, raw.e1, raw.e0)
    phi, dstar = derived.phi, derived.delta_star
    _finite(pi_z, p_z, e_z, phi, dstar, derived.rho, raw.e10)
    bracket = y - e_z - (a - p_z) * dstar - (a / p_z) * (y - z * phi - raw.e10)
    return derived.rho / derived.delta_a * (2 * z - 1) / pi_z * bracket


def eif_contribution(y, a, z, raw: RawNuisances, derived: DerivedNuisances,
                     delta_star_marginal: float, pr_a: float):
    """EIF value(s): {A (d*(X) - d*_m) + theta(O)} / Pr(A=1)."""
    if not 0.0 < pr_a < 1.0:
        raise ValueError(f"pr_a must lie in (0, 1), got {pr_a}")
    a_arr = np.asarray(a, float)
    return (a_arr * (derived.delta_star - delta_star_marginal) + theta(y, a, z, raw, derived)) / pr_a


# Estimators -----------------------------------------------------------------

def _treated_mean(ds: Dataset, values, name: str) -> float:
    a = ds.a.astype(float)
    if a.sum() == 0:
        raise EstimationError(f"{name}: no treated units")
    return float(np.sum(a * values) / a.sum())


def _diagnostics(raw: RawNuisances, derived: DerivedNuisances | None = None) -> dict:
    diag = raw.diagnostics or {}
    out = {
        "floored_count": derived.floored_count if derived is not None else 0,
        "clip_counts": dict(diag.get("clip_counts", {})),
        "learner_flags": list(diag.get("learner_flags", [])),
    }
    if derived is not None and derived.floored_count:
        out["floored_indices"] = [int(i) for i in derived.floored[:50]]
    return out


def estimate_plugin_mqiv(ds: Dataset, raw: RawNuisances, derived: DerivedNuisances | None = None
                         ) -> EstimateResult:
    """W1: treated average of the modified Wald ratio d*(X)."""
    derived = derived if derived is not None else derive(raw)
    point = _treated_mean(ds, derived.delta_star, "W1")
    return EstimateResult("W1", point, diagnostics=_diagnostics(raw, derived))


def estimate_eif_mqiv(ds: Dataset, folds: FoldAssignment, raw: RawNuisances,
                      derived: DerivedNuisances | None = None, level: float = 0.95) -> EstimateResult:
    """IF1: cross-fitted EIF estimator.

    Fold estimate: P_{I_k}{A d*(X) + theta(O)} / P(A), with P(A) the
    full-sample treated fraction; the point estimate averages folds. The
    variance is the fold-averaged mean of [(gamma - A point)/P(A)]^2.
    """
    derived = derived if derived is not None else derive(raw)
    a = ds.a.astype(float)
    pr_a = a.mean()
    if pr_a == 0:
        raise EstimationError("IF1: no treated units")
    gamma = a * derived.delta_star + theta(ds.y, ds.a, ds.z, raw, derived)
    members = [folds.indices(k) for k in range(folds.k)]
    if any(idx.size == 0 for idx in members):
        raise EstimationError("IF1: a fold has an empty evaluation set")
    fold_estimates = [float(np.mean(gamma[idx]) / pr_a) for idx in members]
    point = float(np.mean(fold_estimates))
    sigma2 = float(np.mean([np.mean(((gamma[idx] - a[idx] * point) / pr_a) ** 2) for idx in members]))
    se = math.sqrt(sigma2 / ds.n)
    lo, hi = confidence_interval(point, se, level)
    diag = _diagnostics(raw, derived)
    diag["sigma2"] = sigma2
    return EstimateResult("IF1", point, se, lo, hi, level, fold_estimates, diag)


def wald_ratio(raw: RawNuisances, denom_floor: float | None = None) -> np.ndarray:
    """Standard conditional Wald ratio (e1 - e0)/(p1 - p0), floored like d*."""
    derived = derive(raw) if denom_floor is None else derive(raw, denom_floor)
    return (np.asarray(raw.e1) - np.asarray(raw.e0)) / derived.delta_a


def estimate_plugin_wald(ds: Dataset, raw: RawNuisances) -> EstimateResult:
    """W2: treated average of the standard Wald ratio (no direct-effect correction)."""
    derived = derive(raw)
    point = _treated_mean(ds, wald_ratio(raw), "W2")
    return EstimateResult("W2", point, diagnostics=_diagnostics(raw, derived))


def estimate_plugin_single_arm(ds: Dataset, raw: RawNuisances) -> EstimateResult:
    """W3: treated average of Y + (m1 - m0)/(p1 - p0)."""
    if not raw.has_single_arm:
        raise EstimationError("W3 needs the m0/m1 nuisances; fit with need_single_arm=True")
    derived = derive(raw)
    sw = ds.y + (np.asarray(raw.m1) - np.asarray(raw.m0)) / derived.delta_a
    point = _treated_mean(ds, sw, "W3")
    return EstimateResult("W3", point, diagnostics=_diagnostics(raw, derived))


def estimate_direct_effect_treated(ds: Dataset, raw: RawNuisances) -> EstimateResult:
    """PHI: treated average of phi(X) = e11 - e10, the direct effect of Z on Y."""
    derived = derive(raw)
    point = _treated_mean(ds, derived.phi, "PHI")
    return EstimateResult("PHI", point, diagnostics=_diagnostics(raw, derived))


def run_estimators(names, ds: Dataset, folds: FoldAssignment, raw: RawNuisances,
                   level: float = 0.95) -> list:
    """Evaluate several estimators on shared nuisances, in the order given."""
    derived = derive(raw)
    out = []
    for name in names:
        key = name.upper()
        if key == "W1":
            out.append(estimate_plugin_mqiv(ds, raw, derived))
        elif key == "IF1":
            out.append(estimate_eif_mqiv(ds, folds, raw, derived, level))
        elif key == "W2":
            out.append(estimate_plugin_wald(ds, raw))
        elif key == "W3":
            out.append(estimate_plugin_single_arm(ds, raw))
        elif key == "PHI":
            out.append(estimate_direct_effect_treated(ds, raw))
        else:
            raise ValueError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    return out


# Multiple-robustness probe ------------------------------------------------------

# Signed multipliers on the additive regression perturbation shift*(1+X1).
# A common shift on all four regressions would cancel inside phi and d*, so
# the signs are chosen to move both contrasts.
_REGRESSION_SIGNS = {"e0": 1.0, "e1": -1.0, "e10": -1.0, "e11": 1.0, "m0": 1.0, "m1": -1.0}

# Which nuisance blocks are held at the truth in each mode.
_TRUE_BLOCKS = {
    "M1": {"p", "pi"},
    "M2": {"delta_star", "e1z", "w"},
    "M3": {"delta_star", "e1z", "pi"},
    "ALL_WRONG": set(),
}


@dataclass
class ProbeResult:
    mode: str
    n: int
    shift: float
    mean_eif: float
    sd: float
    se: float

    @property
    def z_score(self) -> float:
        return self.mean_eif / self.se if self.se > 0 else math.inf

    @property
    def passes(self) -> bool:
        """Mean EIF within three standard errors of zero."""
        return abs(self.mean_eif) <= 3.0 * self.se

    def to_dict(self) -> dict:
        return {**asdict(self), "z_score": self.z_score, "passes": self.passes}


def perturb_nuisances(raw: RawNuisances, x: np.ndarray, shift: float) -> RawNuisances:
    """Misspecified copy of ``raw``.

    Regressions get a signed additive shift*(1 + X1); probabilities get
    shift*(1 + X1) added on the logit scale. (A centred logit tilt such as
    shift*(X1 - 0.5) largely averages out and leaves the all-wrong bias
    undetectable at moderate N.)
    """
    bump = shift * (1.0 + x[:, 0])
    changes = {}
    for name, sign in _REGRESSION_SIGNS.items():
        val = getattr(raw, name)
        if val is not None:
            changes[name] = np.asarray(val) + sign * bump
    for name in ("p0", "p1", "pi1"):
        changes[name] = expit(logit(np.asarray(getattr(raw, name))) + bump)
    return raw.with_values(**changes)


def probe_nuisances(truth: RawNuisances, x: np.ndarray, mode: str, shift: float):
    """Mixed true/misspecified nuisances for a robustness-probe mode."""
    mode = mode.upper().replace("-", "_")
    if mode not in _TRUE_BLOCKS:
        raise ValueError(f"unknown probe mode {mode!r}; expected one of {PROBE_MODES}")
    if not shift > 0:
        raise ValueError(f"shift must be positive, got {shift}")
    keep = _TRUE_BLOCKS[mode]
    wrong = perturb_nuisances(truth, x, shift)
    mixed = {}
    if "p" in keep:
        mixed.update(p0=truth.p0, p1=truth.p1)
    if "pi" in keep:
        mixed["pi1"] = truth.pi1
    if "e1z" in keep:
        mixed.update(e10=truth.e10, e11=truth.e11)
    raw = wrong.with_values(**mixed)
    derived = derive(raw)
    true_derived = derive(truth)
    overrides = {}
    if "delta_star" in keep:
        overrides["delta_star"] = true_derived.delta_star
    if "w" in keep:
        overrides["w"] = true_derived.w
    if "e1z" in keep:
        overrides["phi"] = true_derived.phi
    if overrides:
        derived = derived.with_values(**overrides)
    return raw, derived


def robustness_probe(ds: Dataset, mode: str, shift: float = 0.3, er_mode: str = "violated"
                     ) -> ProbeResult:
    """Sample mean of the EIF with some nuisance blocks true and the rest perturbed.

    ``ds`` must come from the simulation design (covariates X1, X2 in [0,1]);
    true nuisances and the true ATT come from the quadrature oracle.
    """
    from mqiv.simulation import oracle_att, oracle_nuisances

    nu = oracle_nuisances(ds.x, er_mode=er_mode)
    truth = RawNuisances(**{k: nu[k] for k in ("e0", "e1", "e10", "e11", "p0", "p1", "pi1")})
    raw, derived = probe_nuisances(truth, ds.x, mode, shift)
    pr_a = float(ds.a.mean())
    values = eif_contribution(ds.y, ds.a, ds.z, raw, derived, oracle_att("quadrature"), pr_a)
    sd = float(np.std(values, ddof=1))
    return ProbeResult(mode.upper().replace("-", "_"), ds.n, float(shift), float(np.mean(values)),
                       sd, sd / math.sqrt(ds.n))
