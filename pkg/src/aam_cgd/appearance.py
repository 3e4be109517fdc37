"""Linear appearance model with implicit project-out and Bayesian
project-out operators.

All operators are applied as thin factored products; no F x F matrix is
ever materialized.  Appearance vectors are channel-major, matching
`warp.warp_to_reference`.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InsufficientDataError
from .shape_model import _resolve_n_components

SIGMA_FLOOR_REL = 1e-8
SIGMA_FLOOR_ABS = 1e-12


@dataclass(frozen=True)
class AppearanceModel:
    """Linear appearance model a = mean + basis @ c.

    The mean is stored orthogonal to the basis (the within-subspace
    component of the data mean is absorbed into the parameters), so
    basis.T @ mean = 0 holds exactly.
    """

    mean: np.ndarray         # (F * k,)
    basis: np.ndarray        # (F * k, m), orthonormal columns
    eigenvalues: np.ndarray  # (m,), descending
    image_noise: float       # sigma^2 > 0

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def n_features(self):
        return self.mean.size

    def validate(self, atol=1e-10):
        if self.basis.shape[0] != self.mean.size:
            raise DimensionError("basis rows do not match mean length")
        m = self.n_components
        if not np.allclose(self.basis.T @ self.basis, np.eye(m), atol=atol):
            raise DimensionError("appearance basis is not orthonormal")
        if np.max(np.abs(self.basis.T @ self.mean), initial=0.0) > 1e-8:
            raise DimensionError("appearance mean not orthogonal to basis")
        if self.eigenvalues.size != m:
            raise DimensionError("eigenvalue count does not match basis")
        if np.any(self.eigenvalues <= 0):
            raise DimensionError("appearance eigenvalues must be positive")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise DimensionError(
                "appearance eigenvalues must be sorted descending")
        if not self.image_noise > 0:
            raise DimensionError("image noise must be positive")
        return self


def build_appearance_model(warped_images, n_components=None):
    """Mean-centered PCA of warped appearance vectors.

    `n_components` follows the shape-model convention: int = mode count,
    float = cumulative variance ratio, None = full rank.  The image noise
    is the mean discarded eigenvalue, floored at 1e-8 times the leading
    eigenvalue so the Bayesian operator stays well defined.
    """
    if len(warped_images) < 2:
        raise InsufficientDataError("need at least 2 warped images")
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in warped_images]
    if any(v.size != vecs[0].size for v in vecs):
        raise DimensionError("warped vectors have inconsistent lengths")
    X = np.stack(vecs)
    n_samples, dim = X.shape
    data_mean = X.mean(axis=0)
    X = X - data_mean

    floor = max(float(data_mean @ data_mean) * 1e-26, 1e-300)
    if n_samples < dim:
        gram = (X @ X.T) / (n_samples - 1)
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        keep = evals > max((evals[0] if evals.size else 0.0) * 1e-12, floor)
        evals = evals[keep]
        comps = X.T @ evecs[:, keep]
        comps /= np.sqrt(evals * (n_samples - 1))[None, :]
    else:
        cov = (X.T @ X) / (n_samples - 1)
        evals, comps = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, comps = evals[order], comps[:, order]
        keep = evals > max((evals[0] if evals.size else 0.0) * 1e-12, floor)
        evals, comps = evals[keep], comps[:, keep]

    n_keep = _resolve_n_components(n_components, evals, "appearance")
    discarded = evals[n_keep:]
    if discarded.size:
        noise = float(discarded.mean())
    else:
        noise = float(evals[0]) * SIGMA_FLOOR_REL if evals.size else 0.0
    if noise <= 0:
        noise = SIGMA_FLOOR_ABS

    basis = comps[:, :n_keep].copy()
    mean = data_mean - basis @ (basis.T @ data_mean)
    eigenvalues = evals[:n_keep].copy()
    for a in (mean, basis, eigenvalues):
        a.setflags(write=False)
    return AppearanceModel(mean=mean, basis=basis, eigenvalues=eigenvalues,
                           image_noise=noise).validate()


def appearance_instance(model, c):
    """Evaluate mean + basis @ c."""
    c = np.asarray(c, dtype=np.float64).ravel()
    if c.size != model.n_components:
        raise DimensionError(
            f"expected {model.n_components} parameters, got {c.size}")
    return model.mean + model.basis @ c


def project_appearance(model, v):
    """Least-squares appearance parameters basis.T @ (v - mean)."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != model.n_features:
        raise DimensionError("vector length does not match the model")
    return model.basis.T @ (v - model.mean)


def project_out(model, r):
    """Apply I - A A^T as two thin products.

    Accepts a vector (F*k,) or a matrix (F*k, n) applied column-wise.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[0] != model.n_features:
        raise DimensionError("vector length does not match the model")
    return r - model.basis @ (model.basis.T @ r)


@dataclass(frozen=True)
class BpoOperator:
    """Weighted Bayesian project-out quadratic form.

    The quadratic form is
        rho * ||A^T r||^2_{D^-1} + ((1 - rho) / sigma^2) * ||(I - A A^T) r||^2
    with D = diag(eigenvalues + sigma^2).  rho = 0 recovers the classic
    project-out loss scaled by 1 / sigma^2; rho = 0.5 recovers half of the
    marginal-likelihood quadratic form.
    """

    model: AppearanceModel
    rho: float = 0.5
    d: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        d = self.model.eigenvalues + self.model.image_noise
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def ortho_weight(self):
        return (1.0 - self.rho) / self.model.image_noise

    def apply(self, r):
        """Weight a vector or matrix by the operator (gradient direction
        of the quadratic form)."""
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.model.n_features:
            raise DimensionError("vector length does not match the model")
        A = self.model.basis
        a = A.T @ r
        ortho = r - A @ a
        scale = self.d[:, None] if r.ndim == 2 else self.d
        return self.rho * (A @ (a / scale)) + self.ortho_weight * ortho


def bpo_apply(op, r):
    """Return (weighted vector, cost) of the Bayesian project-out form."""
    r = np.asarray(r, dtype=np.float64).ravel()
    if r.size != op.model.n_features:
        raise DimensionError("vector length does not match the model")
    A = op.model.basis
    a = A.T @ r
    ortho = r - A @ a
    cost = (op.rho * float(a @ (a / op.d))
            + op.ortho_weight * float(ortho @ ortho))
    weighted = op.rho * (A @ (a / op.d)) + op.ortho_weight * ortho
    return weighted, cost
