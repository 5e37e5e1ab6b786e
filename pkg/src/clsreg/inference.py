"""Fit a category model to a new observation.

The unknowns are the latent coordinates ``x`` and a rigid correction
``theta``. The deformed canonical shape is

    Y(x, theta) = R (C + V0 + sum_j x_j B_j) + t

where ``V0`` is the mean displacement and ``B_j`` the displacement produced
by latent axis ``j`` (both are ``G`` times a destandardized basis column).
The score is a Gaussian-mixture negative log-likelihood minimized by gradient
descent with Armijo backtracking.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from clsreg.cpd import DeformationField, apply_deformation
from clsreg.geometry import (
    RigidTransform,
    apply_rigid,
    as_cloud,
    bbox_diagonal,
    quat_from_rotvec,
    quat_multiply,
)
from clsreg.shape_space import CategoryModel, decode, kernel_matrix, unflatten_weights

log = logging.getLogger(__name__)

DIRECTIONS = ("observed", "canonical-outer")
METRICS = ("displacement", "diagonal")


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    """Settings for :func:`infer`.

    ``sigma2=None`` means ``(0.05 * diag(C))**2``. Descent stops when the
    gradient norm per observed point falls below ``gtol`` or when the mean
    relative energy decrease over the last ``window`` steps falls below
    ``ftol``.

    With ``metric="displacement"`` steps are measured by how far they move
    the model points, so latent, rotation and translation moves of equal
    length displace the shape equally. ``metric="diagonal"`` instead divides
    latent axes by their training spread and leaves rotation (radians) and
    translation (model units) as they are. Either way a ``*_scale`` of 0
    freezes that block.
    """

    sigma2: float | None = None
    max_iterations: int = 1000
    gtol: float = 1e-6
    ftol: float = 1e-6
    window: int = 10
    armijo: float = 1e-4
    initial_step: float = 1e-3
    latent_scale: float = 1.0
    rotation_scale: float = 1.0
    translation_scale: float = 1.0
    energy_direction: str = "observed"
    anneal: bool = False
    anneal_factors: tuple[float, ...] = (16.0, 4.0, 1.0)
    # annealed stages before latent_stage hold x fixed (and the translation too
    # with coarse_rotation_only); latent_bound clips x to that many training sds
    latent_stage: int = 0
    latent_bound: float | None = None
    metric: str = "displacement"
    coarse_rotation_only: bool = False

    def __post_init__(self):
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not (self.gtol > 0 and self.ftol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.energy_direction not in DIRECTIONS:
            raise ValueError(f"energy_direction must be one of {DIRECTIONS}")
        object.__setattr__(self, "anneal_factors", tuple(float(f) for f in self.anneal_factors))

    def resolved_sigma2(self, model: CategoryModel) -> float:
        if self.sigma2 is not None:
            return float(self.sigma2)
        return (0.05 * bbox_diagonal(model.canonical)) ** 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["anneal_factors"] = list(self.anneal_factors)
        return d

    @classmethod
    def from_json(cls, d: dict) -> InferenceConfig:
        return cls(**d)


@dataclass(frozen=True)
class LatentPose:
    x: np.ndarray
    theta: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("latent vector must be finite")
        object.__setattr__(self, "x", x)

    @classmethod
    def default(cls, model: CategoryModel) -> LatentPose:
        return cls(np.zeros(model.latent_dim), RigidTransform.identity())


@dataclass
class InferenceResult:
    pose: LatentPose
    deformed: np.ndarray
    field: DeformationField
    energy_trace: list[float]
    converged: bool
    iterations: int = 0
    sigma2: float = float("nan")
    stage_traces: list[list[float]] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "x": self.pose.x.tolist(),
            "theta": self.pose.theta.to_json(),
            "energy_trace": list(self.energy_trace),
            "converged": bool(self.converged),
            "iterations": self.iterations,
            "sigma2": self.sigma2,
        }


def _log_mixture(logits: np.ndarray, axis: int, need_resp: bool):
    """``-sum(logsumexp(logits, axis))`` and the softmax responsibilities along ``axis``."""
    top = logits.max(axis=axis, keepdims=True)
    e = np.exp(logits - top)
    total = e.sum(axis=axis, keepdims=True)
    energy = -float((np.log(total) + top).sum())
    return energy, (e / total if need_resp else None)


class LatentShapeModel:
    """Precomputed displacement basis of a :class:`CategoryModel`."""

    def __init__(self, model: CategoryModel):
        self.model = model
        G = kernel_matrix(model)
        M, D = model.canonical.shape
        self.mean_displacement = G @ unflatten_weights(model.feature_means, D)
        cols = model.basis * model.feature_scales[:, None]
        # axes[j] = G @ W_j, displacement per unit of latent coordinate j
        self.axes = np.einsum("mk,kdj->jmd", G, cols.reshape(M, D, -1))
        self.base = model.canonical + self.mean_displacement

    def local_shape(self, x) -> np.ndarray:
        return self.base + np.tensordot(np.asarray(x, dtype=float), self.axes, axes=1)

    def shape(self, pose: LatentPose) -> np.ndarray:
        return apply_rigid(self.local_shape(pose.x), pose.theta)

    def energy_and_gradients(self, obs: np.ndarray, pose: LatentPose, sigma2: float,
                             direction: str = "observed", need_grad: bool = True):
        """Energy plus gradients w.r.t. ``x``, the rotation tangent (left
        perturbation ``R <- exp([d]x) R``) and the translation."""
        local = self.local_shape(pose.x)
        R = pose.theta.matrix
        rotated = local @ R.T
        Y = rotated + pose.theta.translation
        # d2[m, n] = |O_n - Y_m|^2
        d2 = cdist(Y, obs, "sqeuclidean")
        if direction == "observed":
            # each observed point scores against all deformed canonical points
            energy, resp = _log_mixture(-d2 / (2.0 * sigma2), axis=0, need_resp=need_grad)
            if not need_grad:
                return energy, None, None, None
            # dE/dY_m = sum_n r_mn (Y_m - O_n) / sigma2
            gY = (resp.sum(axis=1)[:, None] * Y - resp @ obs) / sigma2
        else:
            energy, resp = _log_mixture(d2 / (2.0 * sigma2), axis=1, need_resp=need_grad)
            if not need_grad:
                return energy, None, None, None
            gY = -(Y - resp @ obs) / sigma2
        g_local = gY @ R
        gx = np.einsum("md,jmd->j", g_local, self.axes)
        g_rot = np.cross(rotated, gY).sum(axis=0)
        g_trans = gY.sum(axis=0)
        return energy, gx, g_rot, g_trans


def _quaternion_gradient(q: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Map a rotation-tangent gradient onto the 4 quaternion components.

    For a tangent change ``dq`` the left-perturbation vector is
    ``2 vec(dq * conj(q))``; the result is the corresponding linear form,
    which is automatically orthogonal to ``q``.
    """
    q_conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    right = np.column_stack([quat_multiply(e, q_conj) for e in np.eye(4)])
    return 2.0 * right.T @ np.concatenate([[0.0], g_rot])


def _check_obs(model: CategoryModel, observation) -> np.ndarray:
    obs = as_cloud(observation, model.dim)
    if len(obs) == 0:
        raise ValueError("observation is empty")
    return obs


def inference_energy(model: CategoryModel, observation, pose: LatentPose,
                     cfg: InferenceConfig = InferenceConfig(),
                     shape_model: LatentShapeModel | None = None) -> float:
    sm = shape_model or LatentShapeModel(model)
    e, *_ = sm.energy_and_gradients(_check_obs(model, observation), pose,
                                    cfg.resolved_sigma2(model), cfg.energy_direction,
                                    need_grad=False)
    if not np.isfinite(e):
        raise InferenceError(f"energy is not finite at x={pose.x.tolist()}, "
                             f"theta={pose.theta.as_vector().tolist()}")
    return e


def energy_gradient(model: CategoryModel, observation, pose: LatentPose,
                    cfg: InferenceConfig = InferenceConfig(),
                    shape_model: LatentShapeModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(dE/dx, dE/dtheta)``; the latter over ``[qw, qx, qy, qz, tx, ty, tz]`` with
    the quaternion part tangent to the unit sphere."""
    sm = shape_model or LatentShapeModel(model)
    _, gx, g_rot, g_trans = sm.energy_and_gradients(
        _check_obs(model, observation), pose, cfg.resolved_sigma2(model), cfg.energy_direction)
    return gx, np.concatenate([_quaternion_gradient(pose.theta.rotation, g_rot), g_trans])


def _step(pose: LatentPose, u: np.ndarray, q: int, sx: np.ndarray, rs: float, ts: float,
          bound: np.ndarray | None = None) -> LatentPose:
    x = pose.x + sx * u[:q]
    if bound is not None:
        x = np.clip(x, -bound, bound)
    dq = quat_from_rotvec(rs * u[q:q + 3])
    rot = quat_multiply(dq, pose.theta.rotation)
    # the translation is not rotated by the increment: Y = dR (R P) + t + dt
    trans = pose.theta.translation + ts * u[q + 3:q + 6]
    return LatentPose(x, RigidTransform(rot, trans))


def displacement_metric(sm: LatentShapeModel, pose: LatentPose) -> np.ndarray:
    """Gram matrix ``J^T J / M`` of the point displacements produced by unit parameter changes.

    Parameters are ordered ``[x (q), rotation tangent (3), translation (3)]``;
    a step ``d`` moves the shape by ``d^T G d`` in mean squared distance.
    """
    R = pose.theta.matrix
    rotated = sm.local_shape(pose.x) @ R.T
    M = len(rotated)
    cols = [(ax @ R.T).reshape(-1) for ax in sm.axes]
    cols += [np.cross(e, rotated).reshape(-1) for e in np.eye(3)]
    cols += [np.tile(e, M) for e in np.eye(3)]
    J = np.column_stack(cols)
    return J.T @ J / M


def _descend(sm: LatentShapeModel, obs, pose, sigma2, cfg: InferenceConfig):
    q = sm.model.latent_dim
    scales = np.concatenate([cfg.latent_scale * sm.model.latent_sd,
                             np.full(3, cfg.rotation_scale), np.full(3, cfg.translation_scale)])
    free = scales > 0
    bound = None if cfg.latent_bound is None else cfg.latent_bound * sm.model.latent_sd
    n_obs = len(obs)
    if cfg.metric == "displacement":
        # whitening factor: steps are measured by how far they move the model points
        G = displacement_metric(sm, pose)[np.ix_(free, free)]
        G += 1e-12 * np.trace(G) / len(G) * np.eye(len(G))
        chol = np.linalg.cholesky(G)
        to_white = lambda g: solve_triangular(chol, g, lower=True)  # noqa: E731
        from_white = lambda u: solve_triangular(chol.T, u, lower=False)  # noqa: E731
    else:
        to_white = lambda g: scales[free] * g  # noqa: E731
        from_white = lambda u: scales[free] * u  # noqa: E731

    def evaluate(p, need_grad=True):
        e, gx, gr, gt = sm.energy_and_gradients(obs, p, sigma2, cfg.energy_direction, need_grad)
        if not np.isfinite(e):
            raise InferenceError(f"energy became {e} at x={p.x.tolist()}, "
                                 f"theta={p.theta.as_vector().tolist()}")
        if not need_grad:
            return e, None
        return e, to_white(np.concatenate([gx, gr, gt])[free])

    def move(p, u):
        full = np.zeros(q + 6)
        full[free] = from_white(u)
        return _step(p, full, q, np.ones(q), 1.0, 1.0, bound)

    energy, grad = evaluate(pose)
    trace = [energy]
    step = cfg.initial_step
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) / n_obs < cfg.gtol:
            converged = True
            break
        accepted = False
        for _ in range(60):
            cand = move(pose, -step * grad)
            e_new, g_new = evaluate(cand)
            if e_new <= energy - cfg.armijo * step * gnorm2 and e_new < energy:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no decrease representable along the gradient: stationary to working precision
            converged = True
            break
        pose = cand
        grad_old = grad
        energy, grad = e_new, g_new
        trace.append(energy)
        if len(trace) > cfg.window:
            mean_decrease = (trace[-cfg.window - 1] - energy) / cfg.window
            if mean_decrease <= cfg.ftol * max(abs(energy), 1.0):
                converged = True
                break
        # Barzilai-Borwein trial length for the next line search
        s_vec = -step * grad_old
        y_vec = grad - grad_old
        sy = float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / sy if sy > 0 else step * 2.0
    return pose, trace, converged, it


def infer(model: CategoryModel, observation, cfg: InferenceConfig = InferenceConfig(),
          init: LatentPose | None = None,
          shape_model: LatentShapeModel | None = None) -> InferenceResult:
    """Estimate latent shape and rigid pose of ``observation`` (assumed coarsely aligned)."""
    start = time.perf_counter()
    obs = _check_obs(model, observation)
    sm = shape_model or LatentShapeModel(model)
    pose = init or LatentPose.default(model)
    if pose.x.shape != (model.latent_dim,):
        raise ValueError(f"initial latent vector must have length {model.latent_dim}")
    sigma2 = cfg.resolved_sigma2(model)
    schedule = [sigma2 * f for f in cfg.anneal_factors] if cfg.anneal else [sigma2]
    traces = []
    iterations = 0
    converged = False
    for k, s2 in enumerate(schedule):
        stage_cfg = cfg
        if cfg.anneal and k < cfg.latent_stage:
            stage_cfg = replace(cfg, latent_scale=0.0)
            if cfg.coarse_rotation_only:
                stage_cfg = replace(stage_cfg, translation_scale=0.0)
        pose, trace, converged, it = _descend(sm, obs, pose, s2, stage_cfg)
        traces.append(trace)
        iterations += it
    fld = decode(model, pose.x)
    deformed = sm.shape(pose)
    elapsed = time.perf_counter() - start
    log.info("inference: %d iterations, energy %.6g -> %.6g, %.2fs", iterations,
             traces[0][0], traces[-1][-1], elapsed)
    return InferenceResult(pose, deformed, fld, traces[-1], converged, iterations, sigma2,
                           traces, elapsed)


def complete_shape(result: InferenceResult, densify: int | None = None, seed=0,
                   dense_canonical=None) -> np.ndarray:
    """Completed instance shape, optionally resampled to ``densify`` points.

    Extra samples are drawn on the canonical shape itself (midpoints between
    neighbouring canonical points, or ``dense_canonical`` when given) and
    then pushed through the fitted field and rigid transform.
    """
    C = result.field.template
    if dense_canonical is None and (densify is None or densify == len(C)):
        return result.deformed.copy()
    if dense_canonical is not None:
        src = as_cloud(dense_canonical, C.shape[1])
    else:
        rng = np.random.default_rng(seed)
        if densify <= len(C):
            src = C[np.sort(rng.choice(len(C), densify, replace=False))]
        else:
            extra = densify - len(C)
            _, nbr = cKDTree(C).query(C, k=min(7, len(C)))
            a = rng.integers(len(C), size=extra)
            b = nbr[a, rng.integers(1, nbr.shape[1], size=extra)] if nbr.shape[1] > 1 else a
            w = rng.uniform(0.25, 0.75, size=(extra, 1))
            src = np.vstack([C, w * C[a] + (1 - w) * C[b]])
    return apply_rigid(apply_deformation(result.field, src), result.pose.theta)



def result_from_json(model: CategoryModel, d: dict) -> InferenceResult:
    """Rebuild an :class:`InferenceResult` saved with ``to_json`` against ``model``."""
    pose = LatentPose(d["x"], RigidTransform.from_json(d["theta"]))
    if pose.x.shape != (model.latent_dim,):
        raise ValueError(f"result latent length {pose.x.size} does not match model q={model.latent_dim}")
    sm = LatentShapeModel(model)
    return InferenceResult(pose, sm.shape(pose), decode(model, pose.x), list(d.get("energy_trace", [])),
                           bool(d.get("converged", False)), int(d.get("iterations", 0)),
                           float(d.get("sigma2", float("nan"))))
