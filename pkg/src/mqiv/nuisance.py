"""Cross-fitted nuisance regressions and the quantities derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from mqiv.data import Dataset, FoldAssignment
from mqiv.errors import NuisanceError
from mqiv.learners import LearnerError, LearnerSpec, fit

DENOM_FLOOR = 0.01

RAW_FIELDS = ("e0", "e1", "e10", "e11", "p0", "p1", "pi1")
SINGLE_ARM_FIELDS = ("m0", "m1")


@dataclass(frozen=True, eq=False)
class RawNuisances:
    """Out-of-fold nuisance predictions, one value per observation.

    e_z = E[Y|Z=z,X], e_1z = E[Y|A=1,Z=z,X], p_z = Pr(A=1|Z=z,X),
    pi1 = Pr(Z=1|X), m_z = E[Y(1-A)|Z=z,X] (single-arm comparator only).
    Fields may also be scalars when describing a single observation.
    """

    e0: np.ndarray
    e1: np.ndarray
    e10: np.ndarray
    e11: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    pi1: np.ndarray
    m0: np.ndarray | None = None
    m1: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def pi0(self):
        return 1.0 - self.pi1

    @property
    def has_single_arm(self) -> bool:
        return self.m0 is not None and self.m1 is not None

    def e_at(self, z):
        return np.where(z == 1, self.e1, self.e0)

    def p_at(self, z):
        return np.where(z == 1, self.p1, self.p0)

    def pi_at(self, z):
        return np.where(z == 1, self.pi1, 1.0 - self.pi1)

    def take(self, idx) -> "RawNuisances":
        vals = {f: getattr(self, f)[idx] for f in RAW_FIELDS}
        for f in SINGLE_ARM_FIELDS:
            v = getattr(self, f)
            vals[f] = None if v is None else v[idx]
        return RawNuisances(**vals, diagnostics=self.diagnostics)

    def with_values(self, **changes) -> "RawNuisances":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class DerivedNuisances:
    phi: np.ndarray
    delta_a: np.ndarray
    delta_star: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    floored: np.ndarray  # indices where |p1 - p0| was raised to the floor

    @property
    def floored_count(self) -> int:
        return int(np.size(self.floored))

    def with_values(self, **changes) -> "DerivedNuisances":
        return replace(self, **changes)


def derive(raw: RawNuisances, denom_floor: float = DENOM_FLOOR) -> DerivedNuisances:
    """Plug-in phi, delta^A, delta*, rho and w from the raw regressions.

    |p1 - p0| is raised to ``denom_floor`` keeping its sign (zero counts as
    positive); the affected indices are recorded in ``floored``.
    """
    e0, e1 = np.asarray(raw.e0, float), np.asarray(raw.e1, float)
    p0, p1, pi1 = np.asarray(raw.p0, float), np.asarray(raw.p1, float), np.asarray(raw.pi1, float)
    phi = np.asarray(raw.e11, float) - np.asarray(raw.e10, float)
    delta_a = p1 - p0
    low = np.abs(delta_a) < denom_floor
    delta_a = np.where(low, np.where(delta_a < 0, -denom_floor, denom_floor), delta_a)
    delta_star = (e1 - e0 - phi) / delta_a
    pi0 = 1.0 - pi1
    rho = p1 * pi1 + p0 * pi0
    # w(X) = E[Y - A delta*(X) - Z phi(X) | X]
    w = e1 * pi1 + e0 * pi0 - rho * delta_star - pi1 * phi
    return DerivedNuisances(
        phi=phi, delta_a=delta_a, delta_star=delta_star, rho=rho, w=w,
        floored=np.flatnonzero(np.atleast_1d(low)),
    )


def w_consistency_check(raw: RawNuisances, derived: DerivedNuisances) -> float:
    """max |w - (e0 - p0 delta*)|; zero up to rounding wherever nothing was floored."""
    alt = np.asarray(raw.e0) - np.asarray(raw.p0) * derived.delta_star
    return float(np.max(np.abs(np.asarray(derived.w) - alt)))


def check_training_cells(ds: Dataset, folds: FoldAssignment) -> None:
    """Raise NuisanceError naming the first (cell, fold) whose training set is empty."""
    for k in range(folds.k):
        tr = folds.complement(k)
        a, z = ds.a[tr], ds.z[tr]
        for zz in (0, 1):
            if not np.any(z == zz):
                raise NuisanceError(f"fold {k}: training complement has no units with Z={zz}",
                                    cell=f"Z={zz}", fold=k)
        for aa in (0, 1):
            if not np.any(a == aa):
                raise NuisanceError(f"fold {k}: training complement has no units with A={aa}",
                                    cell=f"A={aa}", fold=k)
        for zz in (0, 1):
            if not np.any((a == 1) & (z == zz)):
                raise NuisanceError(f"fold {k}: training complement has no treated units in cell (A=1,Z={zz})",
                                    cell=f"(A=1,Z={zz})", fold=k)


def _oracle_raw(ds: Dataset, spec: LearnerSpec, need_single_arm: bool) -> RawNuisances:
    from mqiv.simulation import oracle_nuisances

    er_mode = spec.hp["er_mode"]
    nu = oracle_nuisances(ds.x, er_mode=er_mode)
    vals = {f: nu[f] for f in RAW_FIELDS}
    if need_single_arm:
        vals.update(m0=nu["m0"], m1=nu["m1"])
    return RawNuisances(**vals, diagnostics={"learner": "oracle", "er_mode": er_mode,
                                             "clip_counts": {}, "learner_flags": []})


def oracle_spec(er_mode: str = "violated") -> LearnerSpec:
    """Learner spec that makes fit_raw_nuisances return the simulation's true nuisances."""
    return LearnerSpec("oracle", {"er_mode": er_mode})


def fit_raw_nuisances(ds: Dataset, folds: FoldAssignment, spec: LearnerSpec,
                      need_single_arm: bool = False) -> RawNuisances:
    """Cross-fit every raw nuisance: models trained on I_k^c predict on I_k."""
    if spec.kind == "oracle" and spec.hp["er_mode"] is not None:
        return _oracle_raw(ds, spec, need_single_arm)
    if folds.fold_of.shape[0] != ds.n:
        raise NuisanceError(f"fold assignment covers {folds.fold_of.shape[0]} rows, dataset has {ds.n}")
    check_training_cells(ds, folds)

    names = RAW_FIELDS + (SINGLE_ARM_FIELDS if need_single_arm else ())
    out = {name: np.empty(ds.n) for name in names}
    flags = []
    y = ds.y
    a = ds.a.astype(float)
    z = ds.z.astype(float)
    y_untreated = y * (1.0 - a)

    for k in range(folds.k):
        tr = folds.complement(k)
        te = folds.indices(k)
        if te.size == 0:
            raise NuisanceError(f"fold {k} has no evaluation rows", fold=k)
        xtr, xte = ds.x[tr], ds.x[te]
        atr, ztr = ds.a[tr], ds.z[tr]
        # name -> (training mask within tr, target, is probability, cell label)
        jobs = {
            "pi1": (np.ones(tr.size, bool), z[tr], True, "all"),
        }
        for zz in (0, 1):
            in_z = ztr == zz
            jobs[f"e{zz}"] = (in_z, y[tr], False, f"Z={zz}")
            jobs[f"e1{zz}"] = (in_z & (atr == 1), y[tr], False, f"(A=1,Z={zz})")
            jobs[f"p{zz}"] = (in_z, a[tr], True, f"Z={zz}")
            if need_single_arm:
                jobs[f"m{zz}"] = (in_z, y_untreated[tr], False, f"Z={zz}")
        for name in names:
            mask, target, prob, cell = jobs[name]
            try:
                model = fit(spec, xtr[mask], target[mask], probability=prob)
            except LearnerError as exc:
                raise NuisanceError(f"fold {k}: could not fit {name} on cell {cell}: {exc}",
                                    cell=cell, fold=k) from exc
            out[name][te] = model.predict(xte)
            flags.extend(f"fold{k}:{name}:{flag}" for flag in model.flags)

    lo, hi = spec.clip
    clip_counts = {
        name: int(np.sum((out[name] <= lo) | (out[name] >= hi))) for name in ("p0", "p1", "pi1")
    }
    for name in names:
        out[name].setflags(write=False)
    return RawNuisances(**out, diagnostics={"learner": spec.kind, "clip_counts": clip_counts,
                                            "learner_flags": flags})
