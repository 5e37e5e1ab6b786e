"""Non-rigid Coherent Point Drift registration.

The template ``S_t`` (M x D) is the set of GMM centroids, the reference
``S_r`` (N x D) the data. The template moves along the dense field
``v(Z) = K(Z, S_t) W`` with a Gaussian kernel of width ``beta``.
"""
from __future__ import annotations

import io
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from clsreg.geometry import as_cloud

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-10
P1_EPS = 1e-12


class CpdError(RuntimeError):
    """Registration failed (e.g. the energy became NaN)."""


@dataclass(frozen=True)
class CpdConfig:
    beta: float = 1.0
    lam: float = 3.0
    omega: float = 0.1
    max_iterations: int = 150
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.omega < 1:
            raise ValueError("omega must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, d: dict) -> CpdConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class CpdState:
    """Snapshot of one EM iteration, handed to the ``callback`` of :func:`cpd_register`."""

    iteration: int
    sigma2: float
    posterior: np.ndarray
    weights: np.ndarray
    energy: float
    residual: float


@dataclass
class DeformationField:
    """Dense non-rigid map ``Z -> Z + K(Z, template) @ weights``."""

    template: np.ndarray
    beta: float
    weights: np.ndarray
    sigma2: float | None = None
    energy: float | None = None
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        self.template = as_cloud(self.template)
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.template.shape)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("deformation weights must be finite")

    @property
    def deformed_template(self) -> np.ndarray:
        return apply_deformation(self, self.template)

    def to_json(self) -> dict:
        buf = io.StringIO()
        np.savetxt(buf, self.template, delimiter=",", fmt="%.17g")
        return {
            "beta": self.beta,
            "template": buf.getvalue(),
            "weights": self.weights.reshape(-1).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> DeformationField:
        template = np.loadtxt(io.StringIO(d["template"]), delimiter=",", ndmin=2)
        return cls(template, float(d["beta"]), np.asarray(d["weights"], dtype=float))


def gaussian_kernel(a, b, beta: float) -> np.ndarray:
    """``K[i, j] = exp(-|a_i - b_j|^2 / (2 beta^2))``."""
    if not beta > 0:
        raise ValueError("kernel width beta must be positive")
    a = as_cloud(a)
    b = as_cloud(b, a.shape[1])
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * beta**2))


def outlier_constant(sigma2: float, omega: float, dim: int, n: int) -> float:
    """Uniform-component term added to every E-step denominator."""
    if omega == 0:
        return 0.0
    return omega / (1.0 - omega) * (2.0 * np.pi * sigma2) ** (dim / 2.0) / n


def e_step(template_deformed, reference, sigma2: float, omega: float) -> np.ndarray:
    """Posterior ``P[m, n]`` that reference point ``n`` was drawn from centroid ``m``.

    A column whose Gaussian terms all underflow (with no outlier mass to
    absorb them) is assigned entirely to the outlier component.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    t = as_cloud(template_deformed)
    r = as_cloud(reference, t.shape[1])
    k = np.exp(-cdist(t, r, "sqeuclidean") / (2.0 * sigma2))
    denom = k.sum(axis=0) + outlier_constant(sigma2, omega, t.shape[1], len(r))
    empty = denom == 0
    denom[empty] = 1.0
    p = k / denom
    p[:, empty] = 0.0
    return p


def m_step(template, reference, G, P, sigma2: float, lam: float,
           return_residual: bool = False, warn: bool = True):
    """Solve ``(G + lam*sigma2*d(P1)^-1) W = d(P1)^-1 P S_r - S_t`` for ``W``."""
    t = as_cloud(template)
    r = as_cloud(reference, t.shape[1])
    p1 = P.sum(axis=1)
    starved = p1 < P1_EPS
    if starved.any():
        if warn:
            warnings.warn(f"{int(starved.sum())} template point(s) carry no responsibility; "
                          f"regularizing with eps={P1_EPS}", RuntimeWarning, stacklevel=2)
        p1 = np.where(starved, P1_EPS, p1)
    A = G + np.diag(lam * sigma2 / p1)
    B = (P @ r) / p1[:, None] - t
    try:
        W = cho_solve(cho_factor(A), B)
    except LinAlgError:
        W = solve(A, B)
    if return_residual:
        return W, float(np.linalg.norm(A @ W - B))
    return W


def update_sigma2(template_deformed, reference, P) -> float:
    t = as_cloud(template_deformed)
    r = as_cloud(reference, t.shape[1])
    total = P.sum()
    if total <= 0:
        warnings.warn("posterior is entirely outlier mass; sigma2 set to floor", RuntimeWarning,
                      stacklevel=2)
        return SIGMA2_FLOOR
    s2 = float((P * cdist(t, r, "sqeuclidean")).sum() / (t.shape[1] * total))
    return max(s2, SIGMA2_FLOOR)


def initial_sigma2(template, reference) -> float:
    t = as_cloud(template)
    r = as_cloud(reference, t.shape[1])
    return max(float(cdist(t, r, "sqeuclidean").mean() / t.shape[1]), SIGMA2_FLOOR)


def cpd_energy(template_deformed, reference, sigma2: float, lam: float, W, G) -> float:
    """Negative log-likelihood of the mixture plus ``(lam/2) tr(W^T G W)``."""
    t = as_cloud(template_deformed)
    r = as_cloud(reference, t.shape[1])
    nll = -logsumexp(-cdist(t, r, "sqeuclidean") / (2.0 * sigma2), axis=0).sum()
    W = np.asarray(W, dtype=float)
    return float(nll + 0.5 * lam * np.sum(W * (G @ W)))


def cpd_register(template, reference, cfg: CpdConfig = CpdConfig(),
                 callback: Callable[[CpdState], None] | None = None) -> DeformationField:
    """Register ``template`` onto ``reference`` by EM; returns the template's deformation field."""
    t = as_cloud(template)
    r = as_cloud(reference, t.shape[1])
    if len(t) == 0 or len(r) == 0:
        raise ValueError("cpd_register needs non-empty clouds")
    G = gaussian_kernel(t, t, cfg.beta)
    W = np.zeros_like(t)
    deformed = t.copy()
    sigma2 = initial_sigma2(t, r)
    energy_prev = cpd_energy(deformed, r, sigma2, cfg.lam, W, G)
    converged = False
    starved = 0
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        P = e_step(deformed, r, sigma2, cfg.omega)
        starved += bool((P.sum(axis=1) < P1_EPS).any())
        W, residual = m_step(t, r, G, P, sigma2, cfg.lam, return_residual=True, warn=False)
        deformed = t + G @ W
        sigma2 = update_sigma2(deformed, r, P)
        energy = cpd_energy(deformed, r, sigma2, cfg.lam, W, G)
        if not np.isfinite(energy) or not np.all(np.isfinite(W)):
            raise CpdError(f"CPD diverged at iteration {it}: energy={energy}, sigma2={sigma2}")
        if callback is not None:
            callback(CpdState(it, sigma2, P, W, energy, residual))
        if abs(energy_prev - energy) <= cfg.tolerance * abs(energy_prev) or sigma2 <= SIGMA2_FLOOR:
            converged = True
            break
        energy_prev = energy
    if starved:
        log.warning("%d CPD iteration(s) had template points without responsibility "
                    "(regularized with eps=%g)", starved, P1_EPS)
    log.debug("cpd finished after %d iterations (sigma2=%.3g)", it, sigma2)
    return DeformationField(t, cfg.beta, W, sigma2=sigma2, energy=energy, iterations=it,
                            converged=converged)


def apply_deformation(fld: DeformationField, Z) -> np.ndarray:
    """Move arbitrary points ``Z`` along the dense field."""
    z = as_cloud(Z, fld.template.shape[1])
    return z + gaussian_kernel(z, fld.template, fld.beta) @ fld.weights
