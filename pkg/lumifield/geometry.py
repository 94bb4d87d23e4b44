"""Shapes used as luminaire proxies and scene surfaces.

All methods are vectorized over rays: origins and directions have shape
(N, 3). Misses are reported with t = inf.
"""

import logging

import numpy as np

logger = logging.getLogger(__name__)


def normalize(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def _first_positive(t_near, t_far, hit, eps):
    """Smallest of t_near, t_far that is larger than eps."""
    t = np.where(t_near > eps, t_near, np.where(t_far > eps, t_far, np.inf))
    return np.where(hit, t, np.inf)


class Shape:
    """Interface of scene shapes."""

    kind = None

    def intersect(self, origins, dirs):
        """Entry and exit parameters (t_near, t_far, hit) of each ray.

        Segments are clipped to t >= 0.
        """
        raise NotImplementedError("Missing implementation for intersect.")

    def first_hit(self, origins, dirs, eps=1e-9):
        """Nearest hit distance beyond eps and the surface normal there."""
        t_near, t_far, hit = self.intersect(origins, dirs)
        t = _first_positive(t_near, t_far, hit, eps)
        points = origins + dirs * np.where(np.isfinite(t), t, 0.0)[:, None]
        return t, self.normal(points)

    def normal(self, points):
        raise NotImplementedError("Missing implementation for normal.")

    @property
    def area(self):
        raise NotImplementedError("Missing implementation for area.")

    def sample_surface(self, u):
        """Uniform area samples from uniform numbers u of shape (N, 2).

        Returns:
            (points, normals) of shape (N, 3) each; the density is 1 / area.
        """
        raise NotImplementedError("Missing implementation for sample_surface.")


class Sphere(Shape):
    """Sphere with center and radius."""

    kind = "sphere"

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)

    def intersect(self, origins, dirs):
        offset = np.asarray(origins, dtype=np.float64) - self.center
        half_b = np.einsum("ij,ij->i", offset, dirs)
        c = np.einsum("ij,ij->i", offset, offset) - self.radius ** 2
        disc = half_b * half_b - c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_near = -half_b - root
        t_far = -half_b + root
        hit &= t_far > 0
        return np.maximum(t_near, 0.0), np.maximum(t_far, 0.0), hit

    def normal(self, points):
        return (points - self.center) / self.radius

    @property
    def area(self):
        return 4.0 * np.pi * self.radius ** 2

    def sample_surface(self, u):
        z = 1.0 - 2.0 * u[:, 0]
        ring = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        phi = 2.0 * np.pi * u[:, 1]
        normals = np.stack([ring * np.cos(phi), ring * np.sin(phi), z], axis=-1)
        return self.center + self.radius * normals, normals

    def __repr__(self):
        return "Sphere(center={}, radius={})".format(self.center.tolist(),
                                                     self.radius)


class Box(Shape):
    """Axis aligned box between corners lo and hi."""

    kind = "box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self):
        return self.hi - self.lo

    def intersect(self, origins, dirs):
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        parallel = dirs == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (self.lo - origins) * inv
            t_hi = (self.hi - origins) * inv
        inside_slab = (origins >= self.lo) & (origins <= self.hi)
        slab_near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf),
                             np.minimum(t_lo, t_hi))
        slab_far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf),
                            np.maximum(t_lo, t_hi))
        t_near = slab_near.max(axis=-1)
        t_far = slab_far.min(axis=-1)
        hit = (t_far > t_near) & (t_far > 0)
        t_near = np.where(hit, np.maximum(t_near, 0.0), 0.0)
        t_far = np.where(hit, t_far, 0.0)
        return t_near, t_far, hit

    def normal(self, points):
        half = 0.5 * self.extent
        local = (points - self.center) / half
        axis = np.argmax(np.abs(local), axis=-1)
        normals = np.zeros_like(points)
        rows = np.arange(len(points))
        normals[rows, axis] = np.sign(local[rows, axis])
        return normals

    def _face_areas(self):
        dx, dy, dz = self.extent
        return np.array([dy * dz, dx * dz, dx * dy])

    @property
    def area(self):
        return 2.0 * self._face_areas().sum()

    def sample_surface(self, u):
        # u[:, 0] selects the face and is reused for the first face coordinate
        faces = np.repeat(self._face_areas(), 2)
        cdf = np.cumsum(faces) / faces.sum()
        face = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), 5)
        lower = np.concatenate([[0.0], cdf[:-1]])
        width = np.maximum(cdf - lower, 1e-300)
        s = (u[:, 0] - lower[face]) / width[face]
        axis = face // 2
        side = face % 2
        points = np.empty((len(u), 3))
        normals = np.zeros((len(u), 3))
        rows = np.arange(len(u))
        first = (axis + 1) % 3
        second = (axis + 2) % 3
        points[rows, axis] = np.where(side == 1, self.hi[axis], self.lo[axis])
        points[rows, first] = self.lo[first] + s * self.extent[first]
        points[rows, second] = self.lo[second] + u[:, 1] * self.extent[second]
        normals[rows, axis] = np.where(side == 1, 1.0, -1.0)
        return points, normals

    def __repr__(self):
        return "Box(lo={}, hi={})".format(self.lo.tolist(), self.hi.tolist())


class Plane(Shape):
    """Infinite plane through point with the given normal."""

    kind = "plane"

    def __init__(self, point, normal):
        self.point = np.asarray(point, dtype=np.float64).reshape(3)
        self.plane_normal = normalize(np.asarray(normal, dtype=np.float64))

    def intersect(self, origins, dirs):
        denom = dirs @ self.plane_normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.plane_normal) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 0)
        t = np.where(hit, t, 0.0)
        return t, t, hit

    def normal(self, points):
        return np.broadcast_to(self.plane_normal, np.shape(points)).copy()

    @property
    def area(self):
        return np.inf

    def sample_surface(self, u):
        raise ValueError("an infinite plane cannot be area sampled")


class Triangles(Shape):
    """Triangle list of shape (M, 3, 3)."""

    kind = "triangles"

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
        self.edge1 = self.vertices[:, 1] - self.vertices[:, 0]
        self.edge2 = self.vertices[:, 2] - self.vertices[:, 0]
        cross = np.cross(self.edge1, self.edge2)
        self.areas = 0.5 * np.linalg.norm(cross, axis=-1)
        self.face_normals = cross / np.maximum(2.0 * self.areas, 1e-300)[:, None]

    def _hits(self, origins, dirs, eps):
        """Moller-Trumbore against all triangles, shape (N, M)."""
        pvec = np.cross(dirs[:, None, :], self.edge2[None])
        det = np.einsum("nmk,mk->nm", pvec, self.edge1)
        valid = np.abs(det) > 1e-14
        inv_det = 1.0 / np.where(valid, det, 1.0)
        tvec = origins[:, None, :] - self.vertices[None, :, 0]
        u = np.einsum("nmk,nmk->nm", tvec, pvec) * inv_det
        qvec = np.cross(tvec, self.edge1[None])
        v = np.einsum("nk,nmk->nm", dirs, qvec) * inv_det
        t = np.einsum("nmk,mk->nm", qvec, self.edge2) * inv_det
        valid &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        return np.where(valid, t, np.inf)

    def first_hit(self, origins, dirs, eps=1e-9):
        t_all = self._hits(origins, dirs, eps)
        index = np.argmin(t_all, axis=-1)
        t = t_all[np.arange(len(origins)), index]
        return t, self.face_normals[index]

    def intersect(self, origins, dirs):
        t, _ = self.first_hit(origins, dirs, 0.0)
        hit = np.isfinite(t)
        t = np.where(hit, t, 0.0)
        return t, t, hit

    def normal(self, points):
        raise ValueError("triangle normals are reported by first_hit")

    @property
    def area(self):
        return float(self.areas.sum())

    def sample_surface(self, u):
        cdf = np.cumsum(self.areas) / self.areas.sum()
        index = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"),
                           len(cdf) - 1)
        lower = np.concatenate([[0.0], cdf[:-1]])
        s = (u[:, 0] - lower[index]) / np.maximum(cdf - lower, 1e-300)[index]
        root = np.sqrt(s)
        b1 = 1.0 - root
        b2 = u[:, 1] * root
        points = (b1[:, None] * self.vertices[index, 0]
                  + (root * (1.0 - u[:, 1]))[:, None] * self.vertices[index, 1]
                  + b2[:, None] * self.vertices[index, 2])
        return points, self.face_normals[index]
