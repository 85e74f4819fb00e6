"""Nuisance learners: least squares, IRLS logistic, kNN, boosted stumps, and a
cross-validated convex ensemble over them.

Every learner is deterministic given its inputs and spec. Probability models
clip their outputs to ``clip`` (default [0.01, 0.99]).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from mqiv.data import split_folds

log = logging.getLogger(__name__)

KINDS = ("least_squares", "logistic", "knn", "boosted_stumps", "cv_ensemble", "oracle")
DEFAULT_CLIP = (0.01, 0.99)
RIDGE_JITTER = 1e-8
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8

_DEFAULTS: dict[str, dict[str, Any]] = {
    "least_squares": {"degree": 1},
    "logistic": {"degree": 1, "max_iter": IRLS_MAX_ITER, "tol": IRLS_TOL},
    "knn": {"k": 10},
    "boosted_stumps": {"rounds": 200, "learning_rate": 0.1, "max_depth": 1},
    "cv_ensemble": {"candidates": None, "inner_k": 3, "seed": 0,
                    "iterations": 500, "step": 0.1, "tol": 1e-8},
    # ``er_mode`` selects the simulation design's true nuisances (see mqiv.nuisance).
    "oracle": {"function": None, "er_mode": None},
}


class LearnerError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus validated hyperparameters (missing keys take defaults).

    ``clip`` bounds every probability prediction.
    """

    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    clip: tuple = DEFAULT_CLIP

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LearnerError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.hyperparameters) - set(_DEFAULTS[self.kind])
        if unknown:
            raise LearnerError(f"{self.kind}: unknown hyperparameter(s) {sorted(unknown)}")
        hp = {**_DEFAULTS[self.kind], **self.hyperparameters}
        lo, hi = self.clip
        if not 0.0 <= lo < hi <= 1.0:
            raise LearnerError(f"invalid clip bounds {self.clip}")
        object.__setattr__(self, "clip", (float(lo), float(hi)))
        if self.kind in ("least_squares", "logistic"):
            if int(hp["degree"]) not in (1, 2):
                raise LearnerError(f"{self.kind}: degree must be 1 or 2")
        if self.kind == "logistic" and (hp["max_iter"] < 1 or hp["tol"] <= 0):
            raise LearnerError("logistic: max_iter >= 1 and tol > 0 required")
        if self.kind == "knn" and int(hp["k"]) < 1:
            raise LearnerError("knn: k must be >= 1")
        if self.kind == "boosted_stumps":
            if int(hp["rounds"]) < 1 or not 0 < hp["learning_rate"] <= 1:
                raise LearnerError("boosted_stumps: rounds >= 1 and 0 < learning_rate <= 1 required")
            if int(hp["max_depth"]) != 1:
                raise LearnerError("boosted_stumps: only max_depth=1 (stumps) is supported")
        if self.kind == "cv_ensemble":
            cands = hp["candidates"]
            if cands is None:
                cands = default_candidates()
            cands = tuple(c if isinstance(c, LearnerSpec) else LearnerSpec(**c) for c in cands)
            if not cands:
                raise LearnerError("cv_ensemble: candidate list is empty")
            if any(c.kind == "cv_ensemble" for c in cands):
                raise LearnerError("cv_ensemble: candidates may not themselves be ensembles")
            if int(hp["inner_k"]) < 2:
                raise LearnerError("cv_ensemble: inner_k must be >= 2")
            hp["candidates"] = cands
        if self.kind == "oracle":
            if hp["er_mode"] is None and not callable(hp["function"]):
                raise LearnerError("oracle: 'function' must be a callable mapping (n, d) features to n values")
            if hp["er_mode"] not in (None, "violated", "satisfied"):
                raise LearnerError(f"oracle: unknown er_mode {hp['er_mode']!r}")
        object.__setattr__(self, "hyperparameters", hp)

    @property
    def hp(self) -> Mapping[str, Any]:
        return self.hyperparameters

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        hp = {}
        for key, val in self.hyperparameters.items():
            if key == "candidates":
                hp[key] = [c.to_dict() for c in val]
            elif key == "function":
                hp[key] = getattr(val, "__name__", "callable")
            else:
                hp[key] = val
        out["hyperparameters"] = hp
        return out


def default_candidates() -> tuple:
    """Library used by the default ensemble; suited to smooth low-dimensional truths."""
    return (
        LearnerSpec("least_squares", {"degree": 2}),
        LearnerSpec("logistic", {"degree": 2}),
        LearnerSpec("knn", {"k": 25}),
        LearnerSpec("boosted_stumps", {"rounds": 100, "learning_rate": 0.1}),
    )


@dataclass(frozen=True, eq=False)
class FittedModel:
    kind: str
    params: Any
    d: int
    is_probability: bool
    clip: tuple = DEFAULT_CLIP
    flags: tuple = ()

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.d:
            raise LearnerError(f"model expects {self.d} features, got {x.shape[1]}")
        raw = _PREDICTORS[self.kind](self.params, x)
        if self.is_probability:
            raw = np.clip(raw, *self.clip)
        return raw


def predict(model: FittedModel, x):
    """Predict at one feature vector (returns a float) or a matrix of rows (returns an array)."""
    single = np.ndim(x) == 1
    out = model.predict(x)
    return float(out[0]) if single else out


# Feature maps ---------------------------------------------------------------

@dataclass(frozen=True)
class _Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x):
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def __call__(self, x):
        return (x - self.mean) / self.scale


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Intercept, linear terms and (for degree 2) squares and pairwise products."""
    cols = [np.ones(x.shape[0]), *x.T]
    if degree == 2:
        d = x.shape[1]
        for i in range(d):
            for j in range(i, d):
                cols.append(x[:, i] * x[:, j])
    return np.column_stack(cols)


# Least squares --------------------------------------------------------------

def _fit_least_squares(spec, x, y):
    degree = int(spec.hp["degree"])
    std = _Standardizer.fit(x) if degree == 2 else None
    design = polynomial_features(std(x) if std else x, degree)
    flags = []
    if np.linalg.matrix_rank(design) < design.shape[1]:
        gram = design.T @ design + RIDGE_JITTER * np.eye(design.shape[1])
        coef = np.linalg.solve(gram, design.T @ y)
        flags.append("rank_deficient_ridge")
    else:
        coef = np.linalg.lstsq(design, y, rcond=None)[0]
    return (coef, degree, std), flags


def _predict_least_squares(params, x):
    coef, degree, std = params
    return polynomial_features(std(x) if std else x, degree) @ coef


# Logistic (IRLS) -----------------------------------------------------------

def logistic_loglik(beta, design, y) -> float:
    eta = design @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_gradient(beta, design, y) -> np.ndarray:
    return design.T @ (y - expit(design @ beta))


def irls(design, y, max_iter=IRLS_MAX_ITER, tol=IRLS_TOL):
    """Newton-Raphson / IRLS for the logistic log-likelihood.

    Returns (coef, converged, iterations). On non-convergence the last
    iterate is returned.
    """
    beta = np.zeros(design.shape[1])
    for it in range(1, max_iter + 1):
        mu = expit(design @ beta)
        wts = mu * (1 - mu)
        hess = design.T @ (design * wts[:, None]) + RIDGE_JITTER * np.eye(design.shape[1])
        step = np.linalg.solve(hess, logistic_gradient(beta, design, y))
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            return beta - step, False, it
        if np.max(np.abs(step)) < tol:
            return beta, True, it
    return beta, False, max_iter


def _fit_logistic(spec, x, y):
    if not np.all((y == 0) | (y == 1)):
        raise LearnerError("logistic requires 0/1 targets")
    degree = int(spec.hp["degree"])
    std = _Standardizer.fit(x)
    design = polynomial_features(std(x), degree)
    coef, converged, _ = irls(design, y, int(spec.hp["max_iter"]), float(spec.hp["tol"]))
    flags = [] if converged else ["irls_not_converged"]
    return (coef, degree, std), flags


def _predict_logistic(params, x):
    coef, degree, std = params
    return expit(polynomial_features(std(x), degree) @ coef)


# kNN ---------------------------------------------------------------------

def _fit_knn(spec, x, y):
    std = _Standardizer.fit(x)
    k = min(int(spec.hp["k"]), x.shape[0])
    return (cKDTree(std(x)), np.asarray(y, dtype=float), k, std), []


def _predict_knn(params, x):
    tree, y, k, std = params
    _, idx = tree.query(std(x), k=k)
    if k == 1:
        return y[idx]
    return y[idx].mean(axis=1)


# Boosted stumps --------------------------------------------------------------

def _best_stump(xs_sorted, order, resid):
    """Exhaustive least-squares stump search over all features.

    Returns (feature, threshold, left_value, right_value) or None if no feature
    has two distinct values.
    """
    n = resid.shape[0]
    total = resid.sum()
    best = None
    best_gain = -np.inf
    counts = np.arange(1, n)
    for j in range(xs_sorted.shape[1]):
        col = xs_sorted[:, j]
        csum = np.cumsum(resid[order[:, j]])[:-1]
        valid = col[1:] > col[:-1]
        if not valid.any():
            continue
        gain = csum**2 / counts + (total - csum) ** 2 / (n - counts)
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = gain[i]
            left = csum[i] / counts[i]
            right = (total - csum[i]) / (n - counts[i])
            best = (j, 0.5 * (col[i] + col[i + 1]), left, right)
    return best


def _fit_boosted_stumps(spec, x, y):
    std = _Standardizer.fit(x)
    xs = std(x)
    order = np.argsort(xs, axis=0, kind="stable")
    xs_sorted = np.take_along_axis(xs, order, axis=0)
    rate = float(spec.hp["learning_rate"])
    init = float(np.mean(y))
    fitted = np.full(y.shape[0], init)
    stumps = []
    for _ in range(int(spec.hp["rounds"])):
        stump = _best_stump(xs_sorted, order, y - fitted)
        if stump is None:
            break
        j, thr, left, right = stump
        fitted += rate * np.where(xs[:, j] <= thr, left, right)
        stumps.append(stump)
    table = np.array(stumps, dtype=float).reshape(-1, 4)
    return (init, rate, table, std), []


def _predict_boosted_stumps(params, x):
    init, rate, table, std = params
    xs = std(x)
    out = np.full(x.shape[0], init)
    for j, thr, left, right in table:
        out += rate * np.where(xs[:, int(j)] <= thr, left, right)
    return out


# Oracle ------------------------------------------------------------------------

def _fit_oracle(spec, x, y):
    if spec.hp["function"] is None:
        raise LearnerError("simulation oracle specs are only usable through fit_raw_nuisances")
    return spec.hp["function"], []


def _predict_oracle(fn, x):
    return np.asarray(fn(x), dtype=float).reshape(x.shape[0])


# Ensemble --------------------------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum(w) = 1}."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.shape[0] + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def simplex_least_squares(preds, y, iterations=500, step=0.1, tol=1e-8):
    """Convex weights minimizing mean squared error of ``preds @ w`` against ``y``.

    Projected gradient descent from uniform weights. Columns and target are
    rescaled by the target's root mean square (which leaves the minimizer
    unchanged), and the step is capped at 1/L for the rescaled problem so the
    iteration cannot diverge.
    """
    n, m = preds.shape
    if m == 1:
        return np.ones(1)
    scale = np.sqrt(np.mean(y**2)) or 1.0
    p = preds / scale
    t = y / scale
    lipschitz = 2.0 * np.linalg.eigvalsh(p.T @ p / n)[-1]
    eta = min(step, 1.0 / lipschitz) if lipschitz > 0 else step
    w = np.full(m, 1.0 / m)
    for _ in range(iterations):
        grad = 2.0 * p.T @ (p @ w - t) / n
        w_new = project_simplex(w - eta * grad)
        if np.max(np.abs(w_new - w)) < tol:
            w = w_new
            break
        w = w_new
    return w


def cv_ensemble_fit(candidates, features, targets, inner_k=3, seed=0, probability=False,
                    clip=DEFAULT_CLIP, iterations=500, step=0.1, tol=1e-8) -> FittedModel:
    """Convex combination of candidate learners chosen by inner cross-validation.

    Candidates that cannot fit the target type (logistic on continuous
    targets) are skipped; candidates that raise during fitting are dropped and
    reported in the model's flags.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    binary = bool(np.all((y == 0) | (y == 1)))
    usable = [c for c in candidates if c.kind != "logistic" or binary]
    if not usable:
        raise LearnerError("cv_ensemble: no candidate applies to these targets")
    n = x.shape[0]
    folds = split_folds(n, min(int(inner_k), n), seed)
    oof = np.empty((n, len(usable)))
    flags = []
    alive = np.ones(len(usable), dtype=bool)
    for j, cand in enumerate(usable):
        try:
            for f in range(folds.k):
                tr, te = folds.complement(f), folds.indices(f)
                model = fit(cand, x[tr], y[tr], probability=probability, clip=clip)
                oof[te, j] = model.predict(x[te])
        except (LearnerError, np.linalg.LinAlgError) as exc:
            alive[j] = False
            flags.append(f"dropped_{cand.kind}: {exc}")
    if not alive.any():
        raise LearnerError("cv_ensemble: every candidate failed to fit")
    weights = np.zeros(len(usable))
    weights[alive] = simplex_least_squares(oof[:, alive], y, iterations, step, tol)
    members = []
    for cand, wgt in zip(usable, weights):
        if wgt > 0:
            members.append((float(wgt), fit(cand, x, y, probability=probability, clip=clip)))
    for _, m in members:
        flags.extend(m.flags)
    params = (tuple(members), tuple((c.kind, float(w)) for c, w in zip(usable, weights)))
    return FittedModel("cv_ensemble", params, x.shape[1], probability, clip, tuple(flags))


def _predict_ensemble(params, x):
    members, _ = params
    out = np.zeros(x.shape[0])
    for wgt, model in members:
        out += wgt * model.predict(x)
    return out


def ensemble_weights(model: FittedModel) -> dict:
    """Candidate kind -> weight for a fitted cv_ensemble (duplicates are suffixed)."""
    out = {}
    for kind, w in model.params[1]:
        key = kind
        i = 2
        while key in out:
            key = f"{kind}_{i}"
            i += 1
        out[key] = w
    return out


_FITTERS: dict[str, Callable] = {
    "least_squares": _fit_least_squares,
    "logistic": _fit_logistic,
    "knn": _fit_knn,
    "boosted_stumps": _fit_boosted_stumps,
    "oracle": _fit_oracle,
}

_PREDICTORS: dict[str, Callable] = {
    "least_squares": _predict_least_squares,
    "logistic": _predict_logistic,
    "knn": _predict_knn,
    "boosted_stumps": _predict_boosted_stumps,
    "oracle": _predict_oracle,
    "cv_ensemble": _predict_ensemble,
}


def fit(spec: LearnerSpec, features, targets, probability: bool | None = None,
        clip: tuple | None = None) -> FittedModel:
    """Fit ``spec`` to (features, targets).

    ``probability`` marks the target as a 0/1 indicator whose predictions are
    clipped; it defaults to True for logistic and False otherwise.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(targets, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise LearnerError(f"{x.shape[0]} feature rows but {y.shape[0]} targets")
    if x.shape[0] == 0:
        raise LearnerError("cannot fit on zero rows")
    if probability is None:
        probability = spec.kind == "logistic"
    if probability and not np.all((y == 0) | (y == 1)):
        raise LearnerError("probability models require 0/1 targets")
    clip = spec.clip if clip is None else clip
    if spec.kind == "cv_ensemble":
        hp = spec.hp
        return cv_ensemble_fit(hp["candidates"], x, y, hp["inner_k"], hp["seed"], probability,
                               clip, hp["iterations"], hp["step"], hp["tol"])
    if spec.kind in ("least_squares", "logistic"):
        n_params = polynomial_features(x[:1], int(spec.hp["degree"])).shape[1]
        if x.shape[0] < x.shape[1] + 1 or (spec.kind == "logistic" and x.shape[0] < n_params):
            raise LearnerError(f"{spec.kind} needs more rows than parameters, got {x.shape[0]}")
    params, flags = _FITTERS[spec.kind](spec, x, y)
    for flag in flags:
        log.debug("%s fit flagged: %s", spec.kind, flag)
    return FittedModel(spec.kind, params, x.shape[1], bool(probability), clip, tuple(flags))
