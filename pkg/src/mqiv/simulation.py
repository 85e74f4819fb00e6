"""Simulation design: data-generating process and its exact nuisance oracles.

Design (X1, X2, U iid Uniform(0,1)):

    Pr(Z=1|X)       = logistic(-1 + X1 + X2)
    Pr(A=1|Z,X,U)   = exp{Z(X1/2 + X2/2 + 0.5) - X1/2 - X2/2 - U - 0.5}
    E[Y^{a,z}|U,X]  = (U X1 + U X2 + U^2) a + (X1 + X2^2 + U) + (X1 + X2 + X1 X2) z + X1
    Y               = E[Y^{A,Z}|U,X] + eps,  eps ~ N(0, 0.25)

With ``er_mode="satisfied"`` the outcome is Y - (X1 + X2 + X1 X2) Z, i.e. the
instrument has no direct effect. Oracle nuisances integrate over U with a
64-node Gauss-Legendre rule on [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from mqiv.data import Dataset

NOISE_SD = 0.5
ER_MODES = ("violated", "satisfied")
MECHANISMS = ("direct_multiplicative", "and_gate")
LATENT_COLUMNS = ("u", "a_z0", "a_z1", "mean_y00", "mean_y01", "mean_y10", "mean_y11")


@lru_cache(maxsize=None)
def gauss_legendre_unit(n_nodes: int = 64):
    """Nodes and weights of the n-point Gauss-Legendre rule mapped to [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes = 0.5 * (t + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


# Structural pieces. ``s`` is X1 + X2 throughout.

def instrument_propensity(x1, x2):
    return expit(-1.0 + x1 + x2)


def alpha1(z, x1, x2):
    return z * (x1 / 2 + x2 / 2 + 0.5)


def alpha2(u, x1, x2):
    return -x1 / 2 - x2 / 2 - u - 0.5


def treatment_probability(z, u, x1, x2):
    """Pr(A=1 | Z=z, U=u, X=x) = exp{alpha1 + alpha2}."""
    return np.exp(alpha1(z, x1, x2) + alpha2(u, x1, x2))


def beta_a(u, x1, x2):
    return u * x1 + u * x2 + u**2


def beta_u(u, x1, x2):
    return x1 + x2**2 + u


def beta_z(x1, x2):
    return x1 + x2 + x1 * x2


def beta_x(x1, x2):
    return x1


@dataclass(frozen=True)
class DgpConfig:
    n: int
    er_mode: str = "violated"
    mechanism: str = "direct_multiplicative"
    seed: int = 0
    keep_latents: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.er_mode not in ER_MODES:
            raise ValueError(f"er_mode must be one of {ER_MODES}, got {self.er_mode!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    ds: Dataset
    latents: dict | None = None


def generate(cfg: DgpConfig) -> SimulatedSample:
    """Draw one sample.

    Draw order from a single ``default_rng(seed)`` stream: X1, X2, U, Z, then
    the treatment draws (two Bernoulli potential treatments for the direct
    mechanism, one uniform threshold for the latent-index/AND-gate mechanism),
    then the outcome noise.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    x1 = rng.random(n)
    x2 = rng.random(n)
    u = rng.random(n)
    z = (rng.random(n) < instrument_propensity(x1, x2)).astype(np.int8)

    prob0 = treatment_probability(0, u, x1, x2)
    prob1 = treatment_probability(1, u, x1, x2)
    prob = np.where(z == 1, prob1, prob0)
    if not np.all((prob > 0) & (prob < 1)):
        raise AssertionError("treatment probability left (0, 1)")

    if cfg.mechanism == "direct_multiplicative":
        a_z0 = rng.binomial(1, prob0).astype(np.int8)
        a_z1 = rng.binomial(1, prob1).astype(np.int8)
    else:
        # Latent index: A^z = 1{g_Z(z) g_U(U) >= eps_z} with one shared threshold.
        g_u = np.exp(alpha2(u, x1, x2))
        eps_z = rng.random(n)
        a_z0 = (np.exp(alpha1(0, x1, x2)) * g_u >= eps_z).astype(np.int8)
        a_z1 = (np.exp(alpha1(1, x1, x2)) * g_u >= eps_z).astype(np.int8)
    a = np.where(z == 1, a_z1, a_z0)

    ba = beta_a(u, x1, x2)
    base = beta_u(u, x1, x2) + beta_x(x1, x2)
    bz = beta_z(x1, x2) if cfg.er_mode == "violated" else np.zeros(n)
    y = ba * a + base + bz * z + rng.normal(0.0, NOISE_SD, n)

    ds = Dataset(y, a, z, np.column_stack([x1, x2]), ("x1", "x2"))
    latents = None
    if cfg.keep_latents:
        latents = {
            "u": u,
            "a_z0": a_z0,
            "a_z1": a_z1,
            "mean_y00": base,
            "mean_y01": base + bz,
            "mean_y10": ba + base,
            "mean_y11": ba + base + bz,
        }
    return SimulatedSample(ds=ds, latents=latents)


def _check_unit_square(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == 2 else x
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"oracle covariates must have shape (n, 2), got {x.shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("oracle covariates must lie in [0, 1]^2")
    return x[:, 0], x[:, 1]


def _u_integrals(z, x1, x2):
    """U-quadrature of the pieces every oracle nuisance is built from.

    Returns a dict of length-n arrays:
      pa    = E_U[Pr(A=1|U,z,x)]
      ba_pa = E_U[beta_A Pr(A=1|U,z,x)]
      bu_pa = E_U[beta_U Pr(A=1|U,z,x)]
      bu    = E_U[beta_U]
    """
    nodes, weights = gauss_legendre_unit()
    u = nodes[None, :]
    x1c, x2c = x1[:, None], x2[:, None]
    pa = treatment_probability(z, u, x1c, x2c)
    bu = beta_u(u, x1c, x2c)
    return {
        "pa": pa @ weights,
        "ba_pa": (beta_a(u, x1c, x2c) * pa) @ weights,
        "bu_pa": (bu * pa) @ weights,
        "bu": bu @ weights,
    }


def oracle_nuisances(x, z=None, er_mode: str = "violated") -> dict:
    """True nuisance functions evaluated at covariates ``x`` (shape (n, 2)).

    Returns a dict with e0, e1, e10, e11, p0, p1, pi1, m0, m1 and the
    conditional ATT ``cate``. ``z`` is accepted for call-site symmetry and
    ignored: every z-indexed nuisance is returned for both arms.
    """
    if er_mode not in ER_MODES:
        raise ValueError(f"er_mode must be one of {ER_MODES}, got {er_mode!r}")
    x1, x2 = _check_unit_square(x)
    bz = beta_z(x1, x2) if er_mode == "violated" else np.zeros_like(x1)
    bx = beta_x(x1, x2)
    out = {"pi1": instrument_propensity(x1, x2)}
    for arm in (0, 1):
        q = _u_integrals(arm, x1, x2)
        out[f"p{arm}"] = q["pa"]
        out[f"e{arm}"] = q["ba_pa"] + q["bu"] + bz * arm + bx
        out[f"e1{arm}"] = (q["ba_pa"] + q["bu_pa"]) / q["pa"] + bz * arm + bx
        # E[Y(1-A)|Z,X]: treatment-free mean times the untreated probability.
        out[f"m{arm}"] = q["bu"] - q["bu_pa"] + (bz * arm + bx) * (1.0 - q["pa"])
    q1 = _u_integrals(1, x1, x2)
    out["cate"] = q1["ba_pa"] / q1["pa"]
    return out


def oracle_cate(x) -> np.ndarray:
    """E[beta_A(U,X) | A=1, X=x], the conditional ATT."""
    return oracle_nuisances(x)["cate"]


def oracle_att(method: str = "quadrature", size: int | None = None, seed: int = 20240101) -> float:
    """True marginal ATT.

    ``quadrature`` integrates cate(x) against Pr(A=1|x) on a tensor
    Gauss-Legendre grid over the unit square. ``monte_carlo`` simulates
    ``size`` units (at least 10**6) and averages Y^1 - Y^0 over the treated.
    """
    if method == "quadrature":
        if size is not None:
            raise ValueError("quadrature takes no size argument")
        return _oracle_att_quadrature()
    if method == "monte_carlo":
        if size is None or size < 10**6:
            raise ValueError(f"monte_carlo needs size >= 1e6, got {size}")
        sample = generate(DgpConfig(n=size, seed=seed, keep_latents=True))
        lat = sample.latents
        treated = sample.ds.a == 1
        return float(np.mean(lat["mean_y10"][treated] - lat["mean_y00"][treated]))
    raise ValueError(f"unknown method {method!r}; expected 'quadrature' or 'monte_carlo'")


@lru_cache(maxsize=None)
def _oracle_att_quadrature() -> float:
    nodes, weights = gauss_legendre_unit()
    g1, g2 = np.meshgrid(nodes, nodes, indexing="ij")
    w2 = np.outer(weights, weights).ravel()
    x = np.column_stack([g1.ravel(), g2.ravel()])
    nu = oracle_nuisances(x)
    rho = nu["p1"] * nu["pi1"] + nu["p0"] * (1 - nu["pi1"])
    return float(np.sum(w2 * rho * nu["cate"]) / np.sum(w2 * rho))


def oracle_treated_mean(fn) -> float:
    """E[fn(X) | A=1] by 2-D quadrature; ``fn`` maps an (n, 2) array to n values."""
    nodes, weights = gauss_legendre_unit()
    g1, g2 = np.meshgrid(nodes, nodes, indexing="ij")
    w2 = np.outer(weights, weights).ravel()
    x = np.column_stack([g1.ravel(), g2.ravel()])
    nu = oracle_nuisances(x)
    rho = nu["p1"] * nu["pi1"] + nu["p0"] * (1 - nu["pi1"])
    return float(np.sum(w2 * rho * fn(x)) / np.sum(w2 * rho))


def oracle_marginal_relevance() -> float:
    """E[p1(X)] - E[p0(X)] over the covariate law."""
    nodes, weights = gauss_legendre_unit()
    g1, g2 = np.meshgrid(nodes, nodes, indexing="ij")
    w2 = np.outer(weights, weights).ravel()
    nu = oracle_nuisances(np.column_stack([g1.ravel(), g2.ravel()]))
    return float(np.sum(w2 * (nu["p1"] - nu["p0"])))
