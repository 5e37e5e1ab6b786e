"""Latent space of deformation fields for one object category.

Training registers the canonical shape onto every training instance, flattens
each weight matrix into a feature row, standardizes the rows column-wise and
extracts a low-dimensional principal subspace with EM-PCA.
"""
from __future__ import annotations

import io
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, qr, solve, subspace_angles

from clsreg.cpd import CpdConfig, DeformationField, cpd_register, gaussian_kernel
from clsreg.geometry import as_cloud, chamfer_error

log = logging.getLogger(__name__)

MODEL_VERSION = 1
VARIANCE_TARGET = 0.95


class TrainingError(RuntimeError):
    pass


def flatten_weights(W) -> np.ndarray:
    return np.asarray(W, dtype=float).reshape(-1)


def unflatten_weights(y, dim: int = 3) -> np.ndarray:
    return np.asarray(y, dtype=float).reshape(-1, dim)


@dataclass
class DesignMatrix:
    """Column-standardized feature rows plus the statistics needed to undo it."""

    rows: np.ndarray
    feature_means: np.ndarray
    feature_scales: np.ndarray
    constant_columns: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def destandardize(self, rows=None) -> np.ndarray:
        rows = self.rows if rows is None else np.asarray(rows, dtype=float)
        return rows * self.feature_scales + self.feature_means


def standardize(rows) -> DesignMatrix:
    """Zero-mean, unit-variance columns. Constant columns keep scale 1 and are flagged."""
    Y = np.atleast_2d(np.asarray(rows, dtype=float))
    if Y.shape[0] < 2:
        raise ValueError("standardization needs at least two rows")
    means = Y.mean(axis=0)
    scales = Y.std(axis=0)
    # relative test: columns equal up to roundoff count as constant
    constant = scales <= 1e-12 * np.maximum(np.abs(means), 1.0)
    scales = np.where(constant, 1.0, scales)
    centered = Y - means
    centered[:, constant] = 0.0
    return DesignMatrix(centered / scales, means, scales, np.flatnonzero(constant))


def explained_variance_ratio(Y) -> np.ndarray:
    """Cumulative explained-variance share of the leading singular directions of ``Y``."""
    s = np.linalg.svd(np.asarray(Y, dtype=float), compute_uv=False)
    power = s**2
    total = power.sum()
    if total == 0:
        return np.ones_like(power)
    return np.cumsum(power) / total


def select_latent_dim(Y, target: float = VARIANCE_TARGET) -> int:
    """Smallest ``q`` whose cumulative explained variance reaches ``target``."""
    cum = explained_variance_ratio(Y)
    # allow for roundoff when the threshold is met exactly
    return int(np.searchsorted(cum, target - 1e-12) + 1)


def _canonical_axes(Y, Q) -> np.ndarray:
    """Rotate the orthonormal basis ``Q`` onto the principal axes of ``Y`` within its span.

    Columns are sorted by variance and sign-fixed (largest-magnitude entry
    positive) so the basis is unique for a given subspace.
    """
    _, _, vt = np.linalg.svd(Y @ Q, full_matrices=False)
    B = Q @ vt.T
    pivot = np.argmax(np.abs(B), axis=0)
    signs = np.sign(B[pivot, np.arange(B.shape[1])])
    signs[signs == 0] = 1.0
    return B * signs


def pca_em(Y, q: int, max_iters: int = 20000, tol: float = 1e-12, seed=0,
           restarts: list | None = None) -> np.ndarray:
    """EM-PCA principal subspace of ``Y`` (n x p); returns an orthonormal ``p x q`` basis.

    Inside the loop the loadings are kept as a ``q x p`` matrix ``L``:
    E-step ``X = Y L^T (L L^T)^-1``, M-step ``L = (X^T X)^-1 X^T Y``.
    Iteration stops when the largest principal angle between successive
    subspaces drops below ``tol``.
    """
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    q_max = min(max(n - 1, 1), p)
    if not 1 <= q <= q_max:
        raise ValueError(f"latent dimension q={q} must be in [1, {q_max}]")
    rank = np.linalg.matrix_rank(Y)
    if rank < q:
        warnings.warn(f"design matrix rank {rank} < q={q}; reducing q", RuntimeWarning, stacklevel=2)
        q = max(rank, 1)
    rng = np.random.default_rng(seed)
    L = qr(rng.standard_normal((p, q)), mode="economic")[0].T
    prev = L.T
    for it in range(max_iters):
        try:
            X = solve(L @ L.T, L @ Y.T, assume_a="pos").T
            L = solve(X.T @ X, X.T @ Y, assume_a="pos")
        except LinAlgError:
            if restarts is not None:
                restarts.append(it)
            log.warning("singular system in EM-PCA at iteration %d; re-randomizing", it)
            L = qr(rng.standard_normal((p, q)), mode="economic")[0].T
            continue
        basis = qr(L.T, mode="economic")[0]
        change = float(np.max(subspace_angles(basis, prev)))
        prev = basis
        if change < tol:
            break
    return _canonical_axes(Y, prev)


@dataclass
class CategoryModel:
    """Canonical shape plus a linear latent space over its deformation fields."""

    canonical: np.ndarray
    basis: np.ndarray
    feature_means: np.ndarray
    feature_scales: np.ndarray
    beta: float
    training_latents: np.ndarray
    explained_variance: float = float("nan")
    labels: list[str] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.canonical.shape[1]

    @property
    def latent_sd(self) -> np.ndarray:
        sd = self.training_latents.std(axis=0)
        return np.where(sd > 0, sd, 1.0)

    def to_json(self) -> dict:
        buf = io.StringIO()
        np.savetxt(buf, self.canonical, delimiter=",", fmt="%.17g")
        return {
            "version": MODEL_VERSION,
            "beta": self.beta,
            "canonical": buf.getvalue(),
            "means": self.feature_means.tolist(),
            "scales": self.feature_scales.tolist(),
            "basis": self.basis.reshape(-1).tolist(),
            "latent_dim": self.latent_dim,
            "training_latents": self.training_latents.tolist(),
            "explained_variance": self.explained_variance,
            "labels": list(self.labels),
            "residuals": list(self.residuals),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict) -> CategoryModel:
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        canonical = np.loadtxt(io.StringIO(d["canonical"]), delimiter=",", ndmin=2)
        q = int(d["latent_dim"])
        return cls(
            canonical=canonical,
            basis=np.asarray(d["basis"], dtype=float).reshape(-1, q),
            feature_means=np.asarray(d["means"], dtype=float),
            feature_scales=np.asarray(d["scales"], dtype=float),
            beta=float(d["beta"]),
            training_latents=np.asarray(d["training_latents"], dtype=float).reshape(-1, q),
            explained_variance=float(d.get("explained_variance", float("nan"))),
            labels=list(d.get("labels", [])),
            residuals=list(d.get("residuals", [])),
            provenance=d.get("provenance", {}),
        )


def encode(model: CategoryModel, y_standardized) -> np.ndarray:
    return np.asarray(y_standardized, dtype=float) @ model.basis


def encode_weights(model: CategoryModel, W) -> np.ndarray:
    """Latent coordinates of a raw (unstandardized) weight matrix."""
    y = (flatten_weights(W) - model.feature_means) / model.feature_scales
    return encode(model, y)


def decode_weights(model: CategoryModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (model.latent_dim,):
        raise ValueError(f"latent vector must have length {model.latent_dim}")
    y = model.basis @ x
    return unflatten_weights(y * model.feature_scales + model.feature_means, model.dim)


def decode(model: CategoryModel, x) -> DeformationField:
    return DeformationField(model.canonical, model.beta, decode_weights(model, x))


def select_canonical(training, cfg: CpdConfig = CpdConfig(), counter: list | None = None) -> int:
    """Index of the instance whose registrations onto all others have the lowest summed energy."""
    clouds = [as_cloud(c) for c in training]
    if len(clouds) < 2:
        raise ValueError("need at least two training instances")
    totals = []
    for i, c in enumerate(clouds):
        total = 0.0
        for j, other in enumerate(clouds):
            if i == j:
                continue
            total += cpd_register(c, other, cfg).energy
            if counter is not None:
                counter.append((i, j))
        totals.append(total)
    log.info("canonical selection energies: %s", totals)
    return int(np.argmin(totals))


def _register_all(canonical, clouds, cfg, labels, threads):
    def job(k):
        try:
            return cpd_register(canonical, clouds[k], cfg)
        except Exception as exc:
            raise TrainingError(f"registration of instance {labels[k]!r} failed: {exc}") from exc

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(job, range(len(clouds))))
    return [job(k) for k in range(len(clouds))]


def train_category(training, canonical: int | str = "auto", cfg: CpdConfig = CpdConfig(),
                   labels: list[str] | None = None, q: int | None = None, seed=0,
                   threads: int = 1) -> CategoryModel:
    """Build the category model from training clouds given in their canonical frame.

    The canonical instance contributes no row to the design matrix; every
    other instance yields one flattened weight matrix.
    """
    clouds = [as_cloud(c) for c in training]
    if len(clouds) < 2:
        raise ValueError("need at least two training instances")
    labels = list(labels) if labels else [f"instance_{i}" for i in range(len(clouds))]
    idx = select_canonical(clouds, cfg) if canonical == "auto" else int(canonical)
    if not 0 <= idx < len(clouds):
        raise ValueError(f"canonical index {idx} out of range")
    C = clouds[idx]
    others = [k for k in range(len(clouds)) if k != idx]
    fields = _register_all(C, [clouds[k] for k in others], cfg, [labels[k] for k in others], threads)
    residuals = [chamfer_error(f.deformed_template, clouds[k]) for f, k in zip(fields, others)]

    rows = np.stack([flatten_weights(f.weights) for f in fields])
    if len(rows) < 2:
        # a single deformation cannot be standardized; the canonical's own zero field joins it
        rows = np.vstack([np.zeros_like(rows[0]), rows])
    design = standardize(rows)
    Y = design.rows
    cum = explained_variance_ratio(Y)
    if q is None:
        q = select_latent_dim(Y)
    q = min(q, max(len(others) - 1, 1), Y.shape[1])
    basis = pca_em(Y, q, seed=seed)
    latents = Y @ basis
    model = CategoryModel(
        canonical=C,
        basis=basis,
        feature_means=design.feature_means,
        feature_scales=design.feature_scales,
        beta=cfg.beta,
        training_latents=latents,
        explained_variance=float(cum[basis.shape[1] - 1]),
        labels=[labels[k] for k in others],
        residuals=residuals,
        provenance={"canonical_index": idx, "canonical_label": labels[idx], "seed": seed,
                    "cpd": cfg.to_json(), "constant_columns": int(len(design.constant_columns))},
    )
    log.info("trained %d-dim latent space (explained variance %.4f)", model.latent_dim,
             model.explained_variance)
    return model


def kernel_matrix(model: CategoryModel) -> np.ndarray:
    return gaussian_kernel(model.canonical, model.canonical, model.beta)
