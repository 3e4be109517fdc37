"""Piecewise-affine motion model on a Delaunay-triangulated reference frame.

The reference frame is the integer pixel grid covering the mean shape.
Frame positions are expressed in the mean shape's coordinate system
(x = column + x-origin, y = row + y-origin); images use array coordinates
where position (x, y) reads pixels[int(y), int(x)].

Warped image vectors are channel-major: vec[ch * F + i] holds channel
`ch` at masked pixel `i`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import DegeneracyError, DimensionError
from .shape_model import (as_shape, project_shape, shape_instance,
                          shape_to_points)

BARYCENTRIC_TOL = 1e-9


@dataclass(frozen=True)
class ReferenceFrame:
    """Masked pixel grid over the mean shape's convex hull."""

    width: int
    height: int
    origin: np.ndarray       # (2,) x/y offset of pixel (row=0, col=0)
    mask: np.ndarray         # (height, width) bool
    index_grid: np.ndarray   # (height, width) dense index or -1
    positions: np.ndarray    # (F, 2) masked pixel positions, mean coords
    neighbors: np.ndarray    # (F, 4) dense index of -x, +x, -y, +y or -1

    @property
    def n_pixels(self):
        return self.positions.shape[0]

    def validate(self):
        F = self.n_pixels
        if F <= 0:
            raise DimensionError("reference frame has no masked pixels")
        if int(self.mask.sum()) != F:
            raise DimensionError("mask does not match pixel count")
        idx = self.index_grid[self.mask]
        if sorted(idx.tolist()) != list(range(F)):
            raise DimensionError("pixel index is not a bijection onto 0..F-1")
        return self

    def to_grid(self, vec, fill=0.0):
        """Scatter a channel-major vector onto (k, height, width) grids."""
        vec = np.asarray(vec, dtype=np.float64).ravel()
        F = self.n_pixels
        if vec.size % F != 0:
            raise DimensionError("vector length is not a multiple of F")
        k = vec.size // F
        grids = np.full((k, self.height, self.width), fill, dtype=np.float64)
        grids[:, self.mask] = vec.reshape(k, F)
        return grids

    def from_grid(self, grids):
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim == 2:
            grids = grids[None]
        return grids[:, self.mask].ravel()


@dataclass(frozen=True)
class Triangulation:
    """Triangle list over the mean shape plus per-pixel barycentric data."""

    triangles: np.ndarray    # (T, 3) vertex indices
    pixel_tri: np.ndarray    # (F,) triangle id per masked pixel
    barycentric: np.ndarray  # (F, 3)

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def validate(self):
        if np.any(self.pixel_tri < 0) or np.any(
                self.pixel_tri >= self.n_triangles):
            raise DimensionError("pixel -> triangle map out of range")
        sums = self.barycentric.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise DimensionError("barycentric coordinates do not sum to 1")
        if np.any(self.barycentric < -BARYCENTRIC_TOL):
            raise DimensionError("negative barycentric coordinate")
        return self


def rasterize_barycentric(vertices, triangles, queries,
                          tol=BARYCENTRIC_TOL):
    """Locate query points in a triangle mesh.

    Returns (tri_id, bary) where tri_id[i] is the first triangle containing
    queries[i] (-1 if none) and bary[i] its clipped, renormalized
    barycentric coordinates.  Containment allows coordinates >= -tol so
    that points exactly on edges are kept.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = queries.shape[0]
    tri_id = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3))
    todo = np.ones(n, dtype=bool)
    for t, (i, j, k) in enumerate(triangles):
        if not todo.any():
            break
        a, b, c = vertices[i], vertices[j], vertices[k]
        M = np.column_stack([b - a, c - a])
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        if abs(det) < 1e-14:
            raise DegeneracyError(f"degenerate triangle {t} in mesh")
        inv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
        rel = queries[todo] - a
        uv = rel @ inv.T
        b1 = 1.0 - uv[:, 0] - uv[:, 1]
        coords = np.column_stack([b1, uv[:, 0], uv[:, 1]])
        inside = np.all(coords >= -tol, axis=1)
        hit_idx = np.flatnonzero(todo)[inside]
        tri_id[hit_idx] = t
        bary[hit_idx] = np.clip(coords[inside], 0.0, None)
        todo[hit_idx] = False
    norm = bary.sum(axis=1)
    good = norm > 0
    bary[good] /= norm[good, None]
    return tri_id, bary


def build_reference_frame(model, margin=0):
    """Delaunay-triangulate the mean shape and rasterize its pixel grid."""
    pts = shape_to_points(model.mean)
    try:
        delaunay = Delaunay(pts)
    except QhullError as exc:
        raise DegeneracyError(f"mean shape cannot be triangulated: {exc}")
    triangles = np.ascontiguousarray(delaunay.simplices, dtype=np.int64)

    x0 = int(np.floor(pts[:, 0].min())) - margin
    y0 = int(np.floor(pts[:, 1].min())) - margin
    x1 = int(np.ceil(pts[:, 0].max())) + margin
    y1 = int(np.ceil(pts[:, 1].max())) + margin
    width, height = x1 - x0 + 1, y1 - y0 + 1

    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    queries = np.column_stack([(cols + x0).ravel(), (rows + y0).ravel()])
    tri_id, bary = rasterize_barycentric(pts, triangles, queries)

    inside = tri_id >= 0
    mask = inside.reshape(height, width)
    F = int(inside.sum())
    if F == 0:
        raise DegeneracyError("mean shape covers no pixels; rescale it")
    index_grid = np.full((height, width), -1, dtype=np.int64)
    index_grid[mask] = np.arange(F)

    positions = queries[inside]
    pixel_tri = tri_id[inside]
    barycentric = bary[inside]

    rr, cc = np.nonzero(mask)
    neighbors = np.full((F, 4), -1, dtype=np.int64)
    for axis, (dr, dc) in enumerate(
            [(0, -1), (0, 1), (-1, 0), (1, 0)]):  # -x, +x, -y, +y
        r2, c2 = rr + dr, cc + dc
        ok = (r2 >= 0) & (r2 < height) & (c2 >= 0) & (c2 < width)
        neighbors[ok, axis] = index_grid[r2[ok], c2[ok]]

    origin = np.array([x0, y0], dtype=np.float64)
    frame = ReferenceFrame(width=width, height=height, origin=origin,
                           mask=mask, index_grid=index_grid,
                           positions=positions, neighbors=neighbors)
    tri = Triangulation(triangles=triangles, pixel_tri=pixel_tri,
                        barycentric=barycentric)
    return frame.validate(), tri.validate()


def bilinear_sample(image, positions):
    """Sample image channels at float positions, clamping to the border.

    image: (H, W) or (H, W, k); positions: (N, 2) in (x, y) array coords.
    Returns (N, k).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, k = img.shape
    x = np.clip(positions[:, 0], 0.0, w - 1.0)
    y = np.clip(positions[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def warp_destinations(shape, tri):
    """Image-space destination of every masked pixel under the warp that
    maps the mean shape onto `shape`."""
    pts = shape_to_points(shape)
    verts = pts[tri.triangles[tri.pixel_tri]]          # (F, 3, 2)
    return np.einsum("ft,ftd->fd", tri.barycentric, verts)


def warp_to_reference(image, shape, frame, tri):
    """Warp an image onto the reference frame.

    Returns the channel-major vector of length F * k.
    """
    shape = as_shape(shape)
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise DimensionError("empty image")
    dest = warp_destinations(shape, tri)
    samples = bilinear_sample(img, dest)               # (F, k)
    return samples.T.ravel()


def sample_frame_image(grids, frame, positions):
    """Sample reference-frame grids at mean-coordinate positions.

    grids: (k, H, W) as returned by frame.to_grid.  Returns (N, k).
    """
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim == 2:
        grids = grids[None]
    array_pos = positions - frame.origin[None, :]
    return bilinear_sample(np.moveaxis(grids, 0, -1), array_pos)


def fill_outside_mask(grids, frame, iterations=None):
    """Propagate masked values outward so bilinear sampling near the mask
    boundary never mixes in arbitrary fill values."""
    grids = np.array(grids, dtype=np.float64, copy=True)
    if grids.ndim == 2:
        grids = grids[None]
    known = frame.mask.copy()
    if iterations is None:
        iterations = max(grids.shape[1], grids.shape[2])
    for _ in range(iterations):
        if known.all():
            break
        acc = np.zeros_like(grids)
        cnt = np.zeros(known.shape, dtype=np.float64)
        acc[:, :, 1:] += np.where(known[None, :, :-1], grids[:, :, :-1], 0.0)
        cnt[:, 1:] += known[:, :-1]
        acc[:, :, :-1] += np.where(known[None, :, 1:], grids[:, :, 1:], 0.0)
        cnt[:, :-1] += known[:, 1:]
        acc[:, 1:, :] += np.where(known[None, :-1, :], grids[:, :-1, :], 0.0)
        cnt[1:, :] += known[:-1, :]
        acc[:, :-1, :] += np.where(known[None, 1:, :], grids[:, 1:, :], 0.0)
        cnt[:-1, :] += known[1:, :]
        new = ~known & (cnt > 0)
        grids[:, new] = acc[:, new] / cnt[new]
        known |= new
    return grids


def warp_jacobian_identity(model, frame, tri):
    """Derivative of warped pixel positions w.r.t. the shape parameters,
    evaluated at the identity warp.  Returns (F, 2, n_params)."""
    basis = model.basis
    sx = basis[0::2, :]
    sy = basis[1::2, :]
    verts = tri.triangles[tri.pixel_tri]               # (F, 3)
    bx = np.einsum("ft,ftp->fp", tri.barycentric, sx[verts])
    by = np.einsum("ft,ftp->fp", tri.barycentric, sy[verts])
    return np.stack([bx, by], axis=1)


def _triangle_linear_maps(ref_pts, cur_pts, triangles):
    """Linear part of the affine map taking each reference triangle to the
    corresponding current triangle.  Returns (T, 2, 2)."""
    i, j, k = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    D = np.stack([ref_pts[j] - ref_pts[i], ref_pts[k] - ref_pts[i]], axis=2)
    C = np.stack([cur_pts[j] - cur_pts[i], cur_pts[k] - cur_pts[i]], axis=2)
    det = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    if np.any(np.abs(det) < 1e-14):
        raise DegeneracyError("degenerate reference triangle in composition")
    Dinv = np.empty_like(D)
    Dinv[:, 0, 0] = D[:, 1, 1]
    Dinv[:, 0, 1] = -D[:, 0, 1]
    Dinv[:, 1, 0] = -D[:, 1, 0]
    Dinv[:, 1, 1] = D[:, 0, 0]
    Dinv /= det[:, None, None]
    return C @ Dinv


def compose(model, tri, p, dp):
    """First-order composition p o dp of shape parameters.

    Each mean landmark is displaced by the incremental offset basis @ dp;
    the displacement is transported into the current shape through the
    current warp's per-triangle affine maps (averaged over the triangles
    adjacent to each landmark) and the displaced landmarks are projected
    back onto the model.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    dp = np.asarray(dp, dtype=np.float64).ravel()
    if p.size != model.n_params or dp.size != model.n_params:
        raise DimensionError("parameter vectors must have length n_params")
    if not dp.any():
        return p.copy()
    ref_pts = shape_to_points(model.mean)
    cur_pts = shape_to_points(shape_instance(model, p))
    ds = (model.basis @ dp).reshape(-1, 2)

    M = _triangle_linear_maps(ref_pts, cur_pts, tri.triangles)
    v = ref_pts.shape[0]
    acc = np.zeros((v, 2, 2))
    cnt = np.zeros(v)
    for corner in range(3):
        np.add.at(acc, tri.triangles[:, corner], M)
        np.add.at(cnt, tri.triangles[:, corner], 1.0)
    if np.any(cnt == 0):
        raise DegeneracyError("landmark not referenced by any triangle")
    acc /= cnt[:, None, None]

    moved = cur_pts + np.einsum("vij,vj->vi", acc, ds)
    return project_shape(model, moved.ravel())


def invert_increment(dp):
    """First-order inverse of an incremental warp."""
    return -np.asarray(dp, dtype=np.float64).ravel()


@dataclass(frozen=True)
class WarpEngine:
    """Bundle of the precomputed warp machinery for one shape model."""

    model: object
    frame: ReferenceFrame
    tri: Triangulation
    dWdp: np.ndarray

    @classmethod
    def build(cls, model, margin=0):
        frame, tri = build_reference_frame(model, margin=margin)
        dWdp = warp_jacobian_identity(model, frame, tri)
        return cls(model=model, frame=frame, tri=tri, dWdp=dWdp)

    @property
    def n_pixels(self):
        return self.frame.n_pixels

    def warp(self, image, shape):
        return warp_to_reference(image, shape, self.frame, self.tri)

    def warp_params(self, image, p):
        return self.warp(image, shape_instance(self.model, p))

    def compose(self, p, dp):
        return compose(self.model, self.tri, p, dp)

    def increment_positions(self, dp):
        """Positions W(x; dp) of the masked pixels under an incremental
        warp, in mean coordinates."""
        disp = (self.model.basis @ np.asarray(dp, dtype=np.float64)).reshape(
            -1, 2)
        verts = self.tri.triangles[self.tri.pixel_tri]
        move = np.einsum("ft,ftd->fd", self.tri.barycentric, disp[verts])
        return self.frame.positions + move
