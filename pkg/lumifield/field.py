"""Dense voxel grid radiance field.

The grid stores pre-activation density logits and SH emission logits at voxel
centers. Queries outside the bounding box return zero density and zero
coefficients.
"""

import collections
import logging
import struct

import numpy as np
from scipy import special

from lumifield import shmath
from lumifield.errors import FormatError

logger = logging.getLogger(__name__)

CONSTANT = "constant"
TRILINEAR = "trilinear"
INTERPOLATIONS = (CONSTANT, TRILINEAR)

DEFAULT_INITIAL_SIGMA = 0.1

GRID_MAGIC = b"LFGRID"
GRID_VERSION = 1
_HEADER = struct.Struct("<6sIIIII6dI")
_FLAG_SOFTPLUS = 1

# corner offsets of the trilinear stencil
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])

# Positions are processed in chunks so gathered SH arrays stay small.
_QUERY_CHUNK = 1 << 16

FieldQuery = collections.namedtuple("FieldQuery", ["position", "density",
                                                   "coeffs"])


def apply_softplus(logits):
    return np.logaddexp(0.0, logits)


def inverse_softplus(sigma):
    """Logit whose softplus is sigma (sigma > 0)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("softplus inverse needs a positive density")
    return sigma + np.log(-np.expm1(-sigma))


def check_bbox(bbox):
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if not np.all(np.isfinite(bbox)):
        raise ValueError("bounding box must be finite")
    if np.any(bbox[1] - bbox[0] <= 0):
        raise ValueError("bounding box must have positive extent on each axis")
    return bbox


def inside_bbox(bbox, positions):
    return np.all((positions >= bbox[0]) & (positions <= bbox[1]), axis=-1)


class RadianceFieldGrid:
    """Trainable density and SH emission field on a regular lattice.

    Attributes:
        resolution: (nx, ny, nz) voxel counts.
        bbox: (2, 3) array, min and max corners in world units.
        l_max: SH level.
        density: (nx, ny, nz) density logits (or raw densities when softplus
            is False).
        sh: (nx, ny, nz, 3, K) SH emission logits.
        softplus: apply softplus to the stored density.
        interpolation: default interpolation used by query.
    """

    def __init__(self, bbox, l_max, density, sh, softplus=True,
                 interpolation=TRILINEAR):
        self.bbox = check_bbox(bbox)
        self.l_max = l_max
        count = shmath.coeff_count(l_max)
        self.density = np.asarray(density, dtype=np.float64)
        if self.density.ndim != 3 or min(self.density.shape) < 1:
            raise ValueError("density must be a non empty 3D array")
        self.sh = np.asarray(sh, dtype=np.float64)
        if self.sh.shape != self.density.shape + (3, count):
            raise ValueError("sh shape {} does not match resolution {} and "
                             "level {}".format(self.sh.shape,
                                               self.density.shape, l_max))
        if interpolation not in INTERPOLATIONS:
            raise ValueError("unknown interpolation {!r}".format(interpolation))
        self.softplus = bool(softplus)
        self.interpolation = interpolation

    @property
    def resolution(self):
        return self.density.shape

    @property
    def n_voxels(self):
        return self.density.size

    @property
    def voxel_size(self):
        return (self.bbox[1] - self.bbox[0]) / np.array(self.resolution)

    @property
    def coeff_count(self):
        return self.sh.shape[-1]

    @property
    def sigma(self):
        """Activated density per voxel."""
        return self.activate_density(self.density)

    def activate_density(self, values):
        if self.softplus:
            return apply_softplus(values)
        return np.maximum(values, 0.0)

    def density_derivative(self, values):
        """Derivative of the density activation at the stored values."""
        if self.softplus:
            return special.expit(values)
        return (values > 0).astype(np.float64)

    def voxel_centers(self):
        """World positions of all voxel centers, shape (nx, ny, nz, 3)."""
        axes = [self.bbox[0, a] + (np.arange(n) + 0.5) * self.voxel_size[a]
                for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def stencil(self, positions, interp=None):
        """Voxels and weights contributing to each position.

        Args:
            positions: (..., 3) world positions.
            interp: CONSTANT or TRILINEAR, defaults to self.interpolation.

        Returns:
            (indices, weights): flat voxel indices and blend weights, both of
            shape (..., M) with M = 1 (constant) or 8 (trilinear). Weights of
            positions outside the bounding box are zero.
        """
        interp = interp or self.interpolation
        positions = np.asarray(positions, dtype=np.float64)
        res = np.array(self.resolution)
        local = (positions - self.bbox[0]) / self.voxel_size
        inside = inside_bbox(self.bbox, positions)

        if interp == CONSTANT:
            cell = np.clip(np.floor(local).astype(np.int64), 0, res - 1)
            indices = self._flat(cell)[..., None]
            weights = inside[..., None].astype(np.float64)
            return indices, weights
        if interp != TRILINEAR:
            raise ValueError("unknown interpolation {!r}".format(interp))

        local = local - 0.5
        base = np.floor(local)
        frac = local - base
        base = base.astype(np.int64)
        corners = np.clip(base[..., None, :] + _CORNERS, 0, res - 1)
        corner_weights = np.where(_CORNERS == 1, frac[..., None, :],
                                  1.0 - frac[..., None, :]).prod(axis=-1)
        indices = self._flat(corners)
        weights = corner_weights * inside[..., None]
        return indices, weights

    def _flat(self, cell):
        _, ny, nz = self.resolution
        return (cell[..., 0] * ny + cell[..., 1]) * nz + cell[..., 2]

    def query(self, positions, interp=None):
        """Density and SH coefficients at world positions.

        Args:
            positions: (..., 3) world positions.
            interp: CONSTANT or TRILINEAR, defaults to self.interpolation.

        Returns:
            (sigma, coeffs) with shapes (...) and (..., 3, K).
        """
        positions = np.asarray(positions, dtype=np.float64)
        shape = positions.shape[:-1]
        flat_pos = positions.reshape(-1, 3)
        sigma_flat = self.sigma.reshape(-1)
        sh_flat = self.sh.reshape(self.n_voxels, 3, -1)
        sigma = np.zeros(len(flat_pos))
        coeffs = np.zeros((len(flat_pos), 3, self.coeff_count))
        for start in range(0, len(flat_pos), _QUERY_CHUNK):
            chunk = slice(start, start + _QUERY_CHUNK)
            indices, weights = self.stencil(flat_pos[chunk], interp)
            sigma[chunk] = np.sum(weights * sigma_flat[indices], axis=-1)
            for corner in range(indices.shape[-1]):
                coeffs[chunk] += (weights[:, corner, None, None]
                                  * sh_flat[indices[:, corner]])
        return sigma.reshape(shape), coeffs.reshape(shape + coeffs.shape[1:])

    def query_point(self, position, interp=None):
        """Query a single position, returning a FieldQuery."""
        sigma, coeffs = self.query(np.asarray(position)[None], interp)
        return FieldQuery(np.asarray(position, dtype=np.float64),
                          float(sigma[0]), shmath.ShCoeffs(coeffs[0]))

    def parameters(self):
        """Trainable arrays keyed by name; updates happen in place."""
        return collections.OrderedDict([("density", self.density),
                                        ("sh", self.sh)])

    def copy(self):
        return RadianceFieldGrid(self.bbox.copy(), self.l_max,
                                 self.density.copy(), self.sh.copy(),
                                 softplus=self.softplus,
                                 interpolation=self.interpolation)

    def __eq__(self, other):
        return (isinstance(other, RadianceFieldGrid)
                and self.l_max == other.l_max
                and self.softplus == other.softplus
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.density, other.density)
                and np.array_equal(self.sh, other.sh))

    def __repr__(self):
        return "RadianceFieldGrid(resolution={}, l_max={}, bbox={})".format(
            self.resolution, self.l_max, self.bbox.tolist())


def query(grid, position, interp=TRILINEAR):
    """Module level form of RadianceFieldGrid.query."""
    return grid.query(position, interp)


class Zeros:
    """Initial density of about 0.1 everywhere and zero SH logits."""


class Constant:
    """Constant initial density sigma0 and SH logit logit0."""

    def __init__(self, sigma0, logit0=0.0):
        self.sigma0 = sigma0
        self.logit0 = logit0


def init_grid(resolution, bbox, l_max, init=None, softplus=True,
              interpolation=TRILINEAR):
    """Create a grid.

    Args:
        resolution: int or (nx, ny, nz).
        bbox: (2, 3) min and max corners.
        l_max: SH level.
        init: Zeros() (default) or Constant(sigma0, logit0).
        softplus: density activation flag.
        interpolation: default query interpolation.

    Raises:
        ValueError: on a zero volume bounding box or empty resolution.
    """
    if np.isscalar(resolution):
        resolution = (int(resolution),) * 3
    resolution = tuple(int(n) for n in resolution)
    if len(resolution) != 3 or min(resolution) < 1:
        raise ValueError("resolution components must be >= 1")
    bbox = check_bbox(bbox)
    init = init or Zeros()
    count = shmath.coeff_count(l_max)
    if isinstance(init, Constant):
        sigma0, logit0 = init.sigma0, init.logit0
    else:
        sigma0, logit0 = DEFAULT_INITIAL_SIGMA, 0.0
    stored = inverse_softplus(sigma0) if softplus else sigma0
    density = np.full(resolution, float(stored))
    sh = np.full(resolution + (3, count), float(logit0))
    logger.debug("Initialized grid %s with sigma %s", resolution, sigma0)
    return RadianceFieldGrid(bbox, l_max, density, sh, softplus=softplus,
                             interpolation=interpolation)


def write_grid(handle, grid):
    """Write the grid to a binary file handle."""
    nx, ny, nz = grid.resolution
    flags = _FLAG_SOFTPLUS if grid.softplus else 0
    handle.write(_HEADER.pack(GRID_MAGIC, GRID_VERSION, nx, ny, nz, grid.l_max,
                              *grid.bbox.reshape(-1), flags))
    handle.write(grid.density.astype("<f4").tobytes())
    handle.write(grid.sh.astype("<f4").tobytes())


def _read_exact(handle, size, what):
    data = handle.read(size)
    if len(data) != size:
        raise FormatError("truncated {}: expected {} bytes, got {}".format(
            what, size, len(data)))
    return data


def read_grid(handle, interpolation=TRILINEAR):
    """Read a grid written by write_grid."""
    header = _read_exact(handle, _HEADER.size, "grid header")
    magic, version, nx, ny, nz, l_max, *rest = _HEADER.unpack(header)
    bbox, flags = rest[:6], rest[6]
    if magic != GRID_MAGIC:
        raise FormatError("not a grid file (magic {!r})".format(magic))
    if version != GRID_VERSION:
        raise FormatError("unsupported grid version {}".format(version))
    try:
        count = shmath.coeff_count(l_max)
    except ValueError as error:
        raise FormatError(str(error))
    n_voxels = nx * ny * nz
    density = np.frombuffer(_read_exact(handle, 4 * n_voxels, "density"),
                            dtype="<f4").reshape(nx, ny, nz)
    sh = np.frombuffer(_read_exact(handle, 4 * n_voxels * 3 * count, "sh"),
                       dtype="<f4").reshape(nx, ny, nz, 3, count)
    try:
        return RadianceFieldGrid(np.reshape(bbox, (2, 3)), l_max,
                                 density.astype(np.float64),
                                 sh.astype(np.float64),
                                 softplus=bool(flags & _FLAG_SOFTPLUS),
                                 interpolation=interpolation)
    except ValueError as error:
        raise FormatError("invalid grid: {}".format(error))


def save_grid(path, grid):
    with open(path, "wb") as handle:
        write_grid(handle, grid)
    logger.info("Saved grid %s to %s", grid.resolution, path)


def load_grid(path, interpolation=TRILINEAR):
    with open(path, "rb") as handle:
        return read_grid(handle, interpolation)
