"""Point distribution model: Procrustes alignment, PCA and the similarity-
augmented orthonormal shape basis.

Shapes are flat float64 vectors of length 2v with interleaved coordinates
(x1, y1, ..., xv, yv).
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, DimensionError, InsufficientDataError

N_SIMILARITY = 4

PROCRUSTES_MAX_ITERS = 100
PROCRUSTES_TOL = 1e-10


def as_shape(points):
    """Validate and return a shape vector as a float64 array."""
    s = np.asarray(points, dtype=np.float64).ravel()
    if s.size % 2 != 0 or s.size < 6:
        raise DimensionError(
            f"shape vector must have even length >= 6, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise DimensionError("shape vector contains non-finite coordinates")
    return s


def shape_to_points(s):
    """View a flat shape vector as a (v, 2) coordinate array."""
    return np.asarray(s, dtype=np.float64).reshape(-1, 2)


def points_to_shape(pts):
    return np.asarray(pts, dtype=np.float64).ravel()


def centroid(s):
    return shape_to_points(s).mean(axis=0)


def face_size(s):
    """Mean of the width and height of the shape's bounding box."""
    pts = shape_to_points(s)
    extent = pts.max(axis=0) - pts.min(axis=0)
    size = 0.5 * (extent[0] + extent[1])
    if size <= 0:
        raise DegeneracyError("shape has zero spatial extent")
    return float(size)


@dataclass(frozen=True)
class SimilarityTransform:
    """2D similarity y = scale * R @ x + translation."""

    scale: float
    rotation: np.ndarray     # (2, 2) orthogonal, det +1
    translation: np.ndarray  # (2,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if self.scale <= 0:
            raise DimensionError("similarity scale must be positive")
        if not np.allclose(R.T @ R, np.eye(2), atol=1e-12):
            raise DimensionError("rotation matrix is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise DimensionError("rotation matrix must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(
            self, "translation",
            np.asarray(self.translation, dtype=np.float64).reshape(2))

    @property
    def angle(self):
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, s):
        pts = shape_to_points(s)
        out = self.scale * pts @ self.rotation.T + self.translation
        return points_to_shape(out)

    def inverse(self):
        Rinv = self.rotation.T
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotation=Rinv,
            translation=-(1.0 / self.scale) * (Rinv @ self.translation))

    @classmethod
    def identity(cls):
        return cls(scale=1.0, rotation=np.eye(2), translation=np.zeros(2))


def align_similarity(source, target):
    """Least-squares similarity mapping `source` onto `target`.

    Closed form via the complex representation of 2D points.
    """
    src = shape_to_points(source)
    tgt = shape_to_points(target)
    if src.shape != tgt.shape:
        raise DimensionError("source and target must have equal lengths")
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    zs = (src[:, 0] - cs[0]) + 1j * (src[:, 1] - cs[1])
    zt = (tgt[:, 0] - ct[0]) + 1j * (tgt[:, 1] - ct[1])
    denom = np.vdot(zs, zs).real
    if denom <= 0 or not np.isfinite(denom):
        raise DegeneracyError("source shape is degenerate (zero extent)")
    a = np.vdot(zs, zt) / denom  # vdot conjugates the first argument
    scale = abs(a)
    if scale <= 0:
        raise DegeneracyError("degenerate similarity alignment")
    theta = np.angle(a)
    R = np.array([[np.cos(theta), -np.sin(theta)],
                  [np.sin(theta), np.cos(theta)]])
    t = ct - scale * R @ cs
    return SimilarityTransform(scale=scale, rotation=R, translation=t)


def _center_and_normalize(s):
    pts = shape_to_points(s) - centroid(s)
    norm = np.linalg.norm(pts)
    if norm <= 0 or not np.isfinite(norm):
        raise DegeneracyError("degenerate shape: all landmarks coincide")
    return points_to_shape(pts / norm)


def procrustes_align(shapes, max_iters=PROCRUSTES_MAX_ITERS,
                     tol=PROCRUSTES_TOL):
    """Generalized Procrustes analysis.

    Returns (aligned, transforms, mean) where aligned[i] is shapes[i] with
    the inverse of transforms[i] applied, transforms[i] is the similarity
    mapping the mean onto shapes[i], and the mean has zero centroid and
    unit centered norm.

    The initial reference is the average of the centered, unit-normalized
    inputs, which makes the result independent of input ordering.
    """
    if len(shapes) < 2:
        raise InsufficientDataError("need at least 2 shapes to align")
    shapes = [as_shape(s) for s in shapes]
    length = shapes[0].size
    for s in shapes[1:]:
        if s.size != length:
            raise DimensionError("all shapes must have the same length")

    normalized = np.stack([_center_and_normalize(s) for s in shapes])
    mean = _center_and_normalize(normalized.mean(axis=0))

    aligned = None
    for _ in range(max_iters):
        transforms = [align_similarity(mean, s) for s in shapes]
        aligned = [t.inverse().apply(s) for t, s in zip(transforms, shapes)]
        new_mean = _center_and_normalize(np.mean(aligned, axis=0))
        change = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if change < tol:
            break

    transforms = [align_similarity(mean, s) for s in shapes]
    aligned = [t.inverse().apply(s) for t, s in zip(transforms, shapes)]
    return aligned, transforms, mean


def similarity_basis(mean):
    """Orthonormal 2v x 4 differential similarity basis of the mean shape.

    Column order: x-translation, y-translation, scale, rotation.  Scale and
    rotation differentials are taken about the mean's centroid.
    """
    mean = as_shape(mean)
    pts = shape_to_points(mean) - centroid(mean)
    v = pts.shape[0]
    cols = np.zeros((2 * v, 4))
    cols[0::2, 0] = 1.0                      # d/d tx
    cols[1::2, 1] = 1.0                      # d/d ty
    cols[:, 2] = points_to_shape(pts)        # d/d scale
    rot90 = np.column_stack([-pts[:, 1], pts[:, 0]])
    cols[:, 3] = points_to_shape(rot90)      # d/d angle
    q, _ = np.linalg.qr(cols)
    # QR may flip column signs; keep the original orientation.
    for j in range(4):
        if q[:, j] @ cols[:, j] < 0:
            q[:, j] = -q[:, j]
    return q


@dataclass(frozen=True)
class ShapeModel:
    """Linear shape model s = mean + basis @ p.

    The first 4 basis columns are the orthonormalized similarity
    differentials; the remaining n columns are non-rigid PCA modes with
    variances `eigenvalues`.  `shape_noise` is the average variance of the
    discarded modes.
    """

    mean: np.ndarray         # (2v,)
    basis: np.ndarray        # (2v, 4 + n)
    eigenvalues: np.ndarray  # (n,)
    shape_noise: float

    @property
    def n_points(self):
        return self.mean.size // 2

    @property
    def n_nonrigid(self):
        return self.basis.shape[1] - N_SIMILARITY

    @property
    def n_params(self):
        return self.basis.shape[1]

    def validate(self, atol=1e-10):
        if self.mean.size % 2 != 0 or self.mean.size < 6:
            raise DimensionError("invalid mean shape length")
        if self.basis.shape[0] != self.mean.size:
            raise DimensionError("basis rows do not match mean length")
        if self.basis.shape[1] < N_SIMILARITY:
            raise DimensionError("basis must include 4 similarity columns")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.n_params), atol=atol):
            raise DimensionError("shape basis is not orthonormal")
        if self.eigenvalues.size != self.n_nonrigid:
            raise DimensionError("eigenvalue count does not match basis")
        if np.any(self.eigenvalues <= 0):
            raise DimensionError("shape eigenvalues must be positive")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise DimensionError("shape eigenvalues must be sorted descending")
        if self.shape_noise < 0:
            raise DimensionError("shape noise must be non-negative")
        return self


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _resolve_n_components(n_components, evals, what):
    """Interpret a truncation request: int = mode count, float = cumulative
    variance ratio in (0, 1], None = keep everything."""
    available = evals.size
    if n_components is None:
        return available
    if isinstance(n_components, float):
        if not 0 < n_components <= 1:
            raise DimensionError(
                f"{what} variance ratio must lie in (0, 1], "
                f"got {n_components}")
        total = evals.sum()
        if total <= 0:
            return 0
        ratios = np.cumsum(evals) / total
        return min(int(np.searchsorted(ratios, n_components - 1e-12) + 1),
                   available)
    n_keep = int(n_components)
    if n_keep < 0:
        raise DimensionError(f"{what} component count must be >= 0")
    if n_keep > available:
        warnings.warn(
            f"requested {n_keep} {what} components but only {available} "
            "available; capping", RuntimeWarning)
        n_keep = available
    return n_keep


def build_shape_model(aligned, mean, n_components=None):
    """Build a ShapeModel from Procrustes-aligned shapes.

    `n_components` selects the number of non-rigid modes: an int (capped at
    the available rank, with a warning), a float variance ratio in (0, 1]
    (smallest count whose cumulative eigenvalue mass reaches the ratio), or
    None to keep everything.
    """
    if len(aligned) < 2:
        raise InsufficientDataError("need at least 2 aligned shapes")
    mean = as_shape(mean)
    X = np.stack([as_shape(s) for s in aligned]) - mean
    n_samples, dim = X.shape

    sim = similarity_basis(mean)
    # Non-rigid modes live in the orthogonal complement of the similarity
    # columns; projecting first keeps the joint basis exactly orthonormal.
    X = X - (X @ sim) @ sim.T

    # Rank cutoff: relative to the spectrum plus an absolute floor tied to
    # the coordinate scale, so round-off modes of identical shapes vanish.
    def _rank_floor(evals):
        top = evals[0] if evals.size else 0.0
        return max(top * 1e-12, float(mean @ mean) * 1e-26, 1e-300)

    if n_samples < dim:
        # Gram-matrix eigendecomposition, cheaper when samples < dimension.
        gram = (X @ X.T) / (n_samples - 1)
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        keep = evals > _rank_floor(evals)
        evals = evals[keep]
        comps = X.T @ evecs[:, keep]
        comps /= np.sqrt(evals * (n_samples - 1))[None, :]
    else:
        cov = (X.T @ X) / (n_samples - 1)
        evals, comps = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = evals[order]
        comps = comps[:, order]
        keep = evals > _rank_floor(evals)
        evals = evals[keep]
        comps = comps[:, keep]

    n_keep = _resolve_n_components(n_components, evals, "shape")

    discarded = evals[n_keep:]
    shape_noise = float(discarded.mean()) if discarded.size else 0.0

    basis = np.hstack([sim, comps[:, :n_keep]])
    # Final Gram-Schmidt pass to remove residual round-off coupling.
    q, _ = np.linalg.qr(basis)
    for j in range(basis.shape[1]):
        if q[:, j] @ basis[:, j] < 0:
            q[:, j] = -q[:, j]

    mean = mean.copy()
    eigenvalues = evals[:n_keep].copy()
    _freeze(mean, q, eigenvalues)
    return ShapeModel(mean=mean, basis=q, eigenvalues=eigenvalues,
                      shape_noise=shape_noise).validate()


def shape_instance(model, p):
    """Evaluate mean + basis @ p."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size != model.n_params:
        raise DimensionError(
            f"expected {model.n_params} parameters, got {p.size}")
    return model.mean + model.basis @ p


def project_shape(model, s):
    """Least-squares parameters basis.T @ (s - mean)."""
    s = as_shape(s)
    if s.size != model.mean.size:
        raise DimensionError(
            f"expected shape length {model.mean.size}, got {s.size}")
    return model.basis.T @ (s - model.mean)


def load_landmarks(path):
    """Read landmarks from a text file ("x y" per line, pts-style headers
    tolerated) or from a JSON array of [x, y] pairs."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        pairs = json.loads(text)
        pts = np.asarray(pairs, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionError(f"{path}: JSON landmarks must be [x, y] pairs")
        return as_shape(pts)
    pts = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line in ("{", "}"):
            continue
        if ":" in line:  # pts-style header (version, n_points)
            continue
        fields = line.split()
        if len(fields) != 2:
            raise DimensionError(f"{path}: expected 'x y' per line")
        pts.append([float(fields[0]), float(fields[1])])
    return as_shape(np.asarray(pts, dtype=np.float64))


def save_landmarks(path, s):
    pts = shape_to_points(s)
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in pts:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
