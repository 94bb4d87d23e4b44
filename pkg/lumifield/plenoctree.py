"""Sparse octree distillation of radiance fields and ray traversal.

All leaves live at the maximum depth and hold the density and the SH logits
averaged over their volume. Internal nodes have eight child slots tagged
0 (empty), > 0 (index of an internal node) or < 0 (leaf -tag - 1). Nodes are
numbered breadth first with the root at index 0, and octant bits are ordered
x, y, z from most to least significant.
"""

import dataclasses
import io
import logging
import struct

import numpy as np

from lumifield import geometry
from lumifield import parallel
from lumifield import raymarch
from lumifield import shmath
from lumifield.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

OCTREE_MAGIC = b"PLNOCT1"
OCTREE_VERSION = 1
_HEADER = struct.Struct("<7sI6dIIII")
MAX_DEPTH = 20
_OCTANT_WEIGHTS = np.array([4, 2, 1])

# voxels refined per source query
_REFINE_CHUNK = 128


@dataclasses.dataclass(frozen=True)
class ExtractionConfig:
    """Extraction settings.

    Attributes:
        prune_sigma: voxels with a lower density are dropped.
        refine_samples: uniform samples averaged per surviving voxel.
        max_depth: depth of the leaves; the lattice has 2 ** max_depth cells
            per axis.
        seed: key of the refinement random streams.
    """

    prune_sigma: float = 0.01
    refine_samples: int = 256
    max_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.prune_sigma < 0:
            raise ConfigError("prune_sigma must be non negative")
        if self.refine_samples < 1:
            raise ConfigError("refine_samples must be >= 1")
        if not 1 <= self.max_depth <= MAX_DEPTH:
            raise ConfigError("max_depth must be in [1, {}]".format(MAX_DEPTH))
        if self.seed < 0:
            raise ConfigError("seed must be non negative")


def cubify(bbox):
    """Smallest cube sharing the center of bbox and containing it."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    center = 0.5 * (bbox[0] + bbox[1])
    half = 0.5 * np.max(bbox[1] - bbox[0])
    return np.stack([center - half, center + half])


def _cell_keys(cells, lattice):
    return (cells[:, 0] * lattice + cells[:, 1]) * lattice + cells[:, 2]


def _locate(known, wanted, lattice):
    """Row of each wanted cell within the known cells."""
    keys = _cell_keys(known, lattice)
    order = np.argsort(keys, kind="stable")
    return order[np.searchsorted(keys[order], _cell_keys(wanted, lattice))]


def _octants(cells):
    return (cells & 1) @ _OCTANT_WEIGHTS


class Plenoctree:
    """Immutable sparse octree of density and SH leaves.

    Attributes:
        bbox: (2, 3) cube.
        max_depth: depth of all leaves.
        l_max: SH level of the leaves.
        children: (n_nodes, 8) int32 child tags.
        leaf_sigma: (n_leaves,) float32 densities.
        leaf_sh: (n_leaves, 3, K) float32 SH logits.
    """

    def __init__(self, bbox, max_depth, l_max, children, leaf_sigma, leaf_sh):
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        self.max_depth = int(max_depth)
        self.l_max = l_max
        self.children = np.asarray(children, dtype=np.int32).reshape(-1, 8)
        self.leaf_sigma = np.asarray(leaf_sigma, dtype=np.float32).reshape(-1)
        self.leaf_sh = np.asarray(leaf_sh, dtype=np.float32).reshape(
            len(self.leaf_sigma), 3, shmath.coeff_count(l_max))
        if len(self.children) < 1:
            raise ValueError("an octree needs a root node")
        if (np.any(self.children >= len(self.children))
                or np.any(self.children < -len(self.leaf_sigma))):
            raise ValueError("child tag out of range")

    @classmethod
    def empty(cls, bbox, max_depth, l_max):
        return cls(bbox, max_depth, l_max, np.zeros((1, 8), np.int32),
                   np.zeros(0, np.float32),
                   np.zeros((0, 3, shmath.coeff_count(l_max)), np.float32))

    @property
    def n_nodes(self):
        return len(self.children)

    @property
    def n_leaves(self):
        return len(self.leaf_sigma)

    @property
    def extent(self):
        return float(self.bbox[1, 0] - self.bbox[0, 0])

    @property
    def lattice(self):
        return 1 << self.max_depth

    @property
    def leaf_size(self):
        return self.extent / self.lattice

    @property
    def leaf_nbytes(self):
        """Bytes stored per leaf: density plus SH payload."""
        return 4 * (1 + 3 * shmath.coeff_count(self.l_max))

    @property
    def sh_nbytes(self):
        """Bytes of SH payload over all leaves."""
        return self.leaf_sh.nbytes

    def descend(self, cells):
        """Level of the deepest node covering each cell and its leaf index.

        Returns:
            (level, leaf): level is the depth of the empty cell that stopped
            the descent, or max_depth for leaves; leaf is -1 when empty.
        """
        count = len(cells)
        node = np.zeros(count, dtype=np.int64)
        level = np.full(count, self.max_depth, dtype=np.int64)
        leaf = np.full(count, -1, dtype=np.int64)
        pending = np.ones(count, dtype=bool)
        for depth in range(self.max_depth):
            octant = _octants(cells >> (self.max_depth - 1 - depth))
            tag = self.children[node, octant].astype(np.int64)
            empty = pending & (tag == 0)
            level[empty] = depth + 1
            found = pending & (tag < 0)
            leaf[found] = -tag[found] - 1
            pending &= tag > 0
            node = np.where(pending, tag, node)
        return level, leaf

    def locate_cells(self, positions):
        local = np.floor((positions - self.bbox[0]) / self.leaf_size)
        return np.clip(local, 0, self.lattice - 1).astype(np.int64)

    def query(self, positions):
        """Piecewise constant density and SH logits at world positions."""
        positions = np.asarray(positions, dtype=np.float64)
        shape = positions.shape[:-1]
        flat = positions.reshape(-1, 3)
        inside = np.all((flat >= self.bbox[0]) & (flat <= self.bbox[1]),
                        axis=-1)
        _, leaf = self.descend(self.locate_cells(flat))
        leaf = np.where(inside, leaf, -1)
        hit = leaf >= 0
        sigma = np.zeros(len(flat))
        coeffs = np.zeros((len(flat), 3, shmath.coeff_count(self.l_max)))
        sigma[hit] = self.leaf_sigma[leaf[hit]]
        coeffs[hit] = self.leaf_sh[leaf[hit]]
        return sigma.reshape(shape), coeffs.reshape(shape + coeffs.shape[1:])

    def leaf_cells(self):
        """Integer lattice cell of every leaf, shape (n_leaves, 3)."""
        cells = np.zeros((self.n_leaves, 3), dtype=np.int64)
        frontier = [(0, np.zeros(3, dtype=np.int64))]
        while frontier:
            node, cell = frontier.pop()
            for octant, tag in enumerate(self.children[node]):
                if tag == 0:
                    continue
                bits = np.array([(octant >> 2) & 1, (octant >> 1) & 1,
                                 octant & 1])
                child = 2 * cell + bits
                if tag < 0:
                    cells[-tag - 1] = child
                else:
                    frontier.append((int(tag), child))
        return cells

    def __eq__(self, other):
        return (isinstance(other, Plenoctree)
                and self.max_depth == other.max_depth
                and self.l_max == other.l_max
                and np.array_equal(self.bbox, other.bbox)
                and np.array_equal(self.children, other.children)
                and np.array_equal(self.leaf_sigma, other.leaf_sigma)
                and np.array_equal(self.leaf_sh, other.leaf_sh))

    def __repr__(self):
        return "Plenoctree(depth={}, l_max={}, nodes={}, leaves={})".format(
            self.max_depth, self.l_max, self.n_nodes, self.n_leaves)


def build_tree(bbox, max_depth, l_max, cells, leaf_sigma, leaf_sh):
    """Assemble a tree from occupied max depth cells and their leaf data."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    parents = np.zeros((1, 3), dtype=np.int64)
    tables = []
    n_nodes = 1
    leaf_cells = np.zeros((0, 3), dtype=np.int64)
    for depth in range(max_depth):
        level_cells = np.unique(cells >> (max_depth - 1 - depth), axis=0)
        parent_rows = _locate(parents, level_cells >> 1, 1 << depth)
        octant = _octants(level_cells)
        order = np.lexsort((octant, parent_rows))
        level_cells = level_cells[order]
        parent_rows = parent_rows[order]
        octant = octant[order]
        if depth < max_depth - 1:
            tags = n_nodes + np.arange(len(level_cells))
            n_nodes += len(level_cells)
        else:
            tags = -(np.arange(len(level_cells)) + 1)
            leaf_cells = level_cells
        table = np.zeros((len(parents), 8), dtype=np.int32)
        table[parent_rows, octant] = tags
        tables.append(table)
        parents = level_cells
    rows = _locate(cells, leaf_cells, 1 << max_depth)
    return Plenoctree(bbox, max_depth, l_max, np.concatenate(tables),
                      np.asarray(leaf_sigma)[rows], np.asarray(leaf_sh)[rows])


def _refinement_offsets(cells, lattice, cfg):
    """Uniform in-voxel offsets, one counter based stream per voxel."""
    keys = _cell_keys(cells, lattice)
    offsets = np.empty((len(cells), cfg.refine_samples, 3))
    for row, key in enumerate(keys):
        stream = np.random.Philox(key=cfg.seed, counter=int(key) << 128)
        offsets[row] = np.random.Generator(stream).random(
            (cfg.refine_samples, 3))
    return offsets


def extract(source, cfg, threads=None, progress=False):
    """Distill a queryable field into a plenoctree.

    Args:
        source: object with bbox, l_max and query(positions).
        cfg: ExtractionConfig.
        threads: worker cap.
        progress: show progress bars.

    Returns:
        Plenoctree over the cubified source bounding box.
    """
    bbox = cubify(source.bbox)
    if not np.all(np.isfinite(bbox)):
        raise ValueError("source bounding box must be finite")
    lattice = 1 << cfg.max_depth
    size = (bbox[1, 0] - bbox[0, 0]) / lattice
    grid_j, grid_k = np.meshgrid(np.arange(lattice), np.arange(lattice),
                                 indexing="ij")

    def centers(slab):
        cells = np.stack([np.full(grid_j.size, slab), grid_j.reshape(-1),
                          grid_k.reshape(-1)], axis=-1)
        sigma, _ = source.query(bbox[0] + (cells + 0.5) * size)
        return cells[sigma >= cfg.prune_sigma]

    label = "centers" if progress else None
    occupied = np.concatenate(parallel.ordered_map(centers, range(lattice),
                                                   threads, label))
    logger.info("%d of %d voxels survive center pruning at depth %d",
                len(occupied), lattice ** 3, cfg.max_depth)

    def refine(part):
        cells = occupied[part]
        offsets = _refinement_offsets(cells, lattice, cfg)
        sigma, coeffs = source.query(bbox[0] + (cells[:, None, :] + offsets)
                                     * size)
        return sigma.mean(axis=1), coeffs.mean(axis=1)

    chunks = parallel.chunk_slices(len(occupied), _REFINE_CHUNK)
    count = shmath.coeff_count(source.l_max)
    if chunks:
        refined = parallel.ordered_map(refine, chunks, threads,
                                       "refine" if progress else None)
        sigma = np.concatenate([s for s, _ in refined]).astype(np.float32)
        coeffs = np.concatenate([c for _, c in refined]).astype(np.float32)
    else:
        sigma = np.zeros(0, np.float32)
        coeffs = np.zeros((0, 3, count), np.float32)

    keep = sigma >= cfg.prune_sigma
    logger.info("%d leaves kept after refinement", int(keep.sum()))
    return build_tree(bbox, cfg.max_depth, source.l_max, occupied[keep],
                      sigma[keep], coeffs[keep])


def traverse(tree, rays, act, model, sigma_min=0.0, alpha_max=1.0,
             return_visits=False):
    """Accumulate emission and opacity over the occupied leaves along rays.

    Empty space is skipped at the coarsest empty node. Each visited leaf
    contributes one sample whose spacing is the ray's chord through the leaf,
    accumulated with the marching rule of the transmittance model.

    Args:
        tree: Plenoctree.
        rays: Rays; traversal is limited to [t_near, t_far].
        act: emission activation.
        model: LINEAR or EXPONENTIAL.
        sigma_min: leaves with a lower density contribute nothing.
        alpha_max: marching stops once the ray opacity reaches this value;
            1 disables early exit.
        return_visits: also return per ray (leaf, t_entry, t_exit) lists.

    Returns:
        MarchResult with leaves_visited, or (MarchResult, visits).
    """
    raymarch.check_model(model)
    count = len(rays)
    radiance = np.zeros((count, 3))
    trans = np.ones(count)
    depth = np.zeros(count)
    visited = np.zeros(count, dtype=np.int64)
    records = []

    t_box_near, t_box_far, hit = geometry.Box(*tree.bbox).intersect(
        rays.origins, rays.dirs)
    t_cur = np.maximum(rays.t_near, t_box_near)
    t_end = np.minimum(rays.t_far, t_box_far)
    active = hit & (t_end > t_cur) & (tree.n_leaves > 0)
    basis = shmath.sh_basis(tree.l_max, rays.dirs)
    nudge = 1e-9 * tree.extent
    leaf_sigma = tree.leaf_sigma.astype(np.float64)
    leaf_sh = tree.leaf_sh.astype(np.float64)

    while np.any(active):
        if alpha_max < 1.0:
            active &= (1.0 - trans) < alpha_max
            if not np.any(active):
                break
        ids = np.nonzero(active)[0]
        origins, dirs, t = rays.origins[ids], rays.dirs[ids], t_cur[ids]
        cells = tree.locate_cells(origins + dirs * (t + nudge)[:, None])
        level, leaf = tree.descend(cells)
        size = tree.extent / np.left_shift(1, level).astype(np.float64)
        corner = (tree.bbox[0]
                  + (cells >> (tree.max_depth - level)[:, None]) * size[:, None])
        planes = corner + np.where(dirs > 0, size[:, None], 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_axes = np.where(dirs != 0, (planes - origins) / dirs, np.inf)
        t_exit = np.minimum(np.maximum(t_axes.min(axis=1), t + nudge),
                            t_end[ids])

        rows = np.nonzero(leaf >= 0)[0]
        if len(rows):
            ray_ids = ids[rows]
            leaves = leaf[rows]
            chord = t_exit[rows] - t[rows]
            sigma = leaf_sigma[leaves]
            if sigma_min > 0:
                sigma = np.where(sigma < sigma_min, 0.0, sigma)
            optical = sigma * chord
            before = trans[ray_ids]
            if model == raymarch.LINEAR:
                weight = np.minimum(before, optical)
                emission_weight = weight * (before - 0.5 * weight)
                trans[ray_ids] = before - weight
            else:
                weight = before * -np.expm1(-optical)
                emission_weight = weight
                trans[ray_ids] = before * np.exp(-optical)
            emitted = act(np.einsum("rck,rk->rc", leaf_sh[leaves],
                                    basis[ray_ids]))
            radiance[ray_ids] += emission_weight[:, None] * emitted
            depth[ray_ids] += weight * (t[rows] + 0.5 * chord)
            visited[ray_ids] += 1
            if return_visits:
                records.append((ray_ids, leaves, t[rows], t_exit[rows]))

        t_cur[ids] = t_exit
        active[ids] &= t_exit < t_end[ids]

    result = raymarch.MarchResult(radiance, 1.0 - trans, depth,
                                  leaves_visited=visited)
    if not return_visits:
        return result
    visits = [[] for _ in range(count)]
    for ray_ids, leaves, entries, exits in records:
        for ray, leaf_index, entry, exit_ in zip(ray_ids, leaves, entries,
                                                  exits):
            visits[ray].append((int(leaf_index), float(entry), float(exit_)))
    return result, visits


def write_tree(handle, tree):
    handle.write(_HEADER.pack(OCTREE_MAGIC, OCTREE_VERSION,
                              *tree.bbox.reshape(-1), tree.max_depth,
                              tree.l_max, tree.n_nodes, tree.n_leaves))
    handle.write(tree.children.astype("<i4").tobytes())
    leaves = np.concatenate([tree.leaf_sigma[:, None],
                             tree.leaf_sh.reshape(tree.n_leaves, -1)], axis=1)
    handle.write(leaves.astype("<f4").tobytes())


def _read_exact(handle, size, what):
    data = handle.read(size)
    if len(data) != size:
        raise FormatError("truncated octree {}: expected {} bytes, got {}"
                          .format(what, size, len(data)))
    return data


def _remaining(handle):
    """Bytes left in a seekable handle, or None when it cannot seek."""
    try:
        position = handle.tell()
        end = handle.seek(0, io.SEEK_END)
        handle.seek(position)
    except (AttributeError, OSError, ValueError):
        return None
    return end - position


def read_tree(handle):
    header = _read_exact(handle, _HEADER.size, "header")
    magic, version, *rest = _HEADER.unpack(header)
    if magic != OCTREE_MAGIC:
        raise FormatError("not an octree file (magic {!r})".format(magic))
    if version != OCTREE_VERSION:
        raise FormatError("unsupported octree version {}".format(version))
    bbox = np.reshape(rest[:6], (2, 3))
    max_depth, l_max, n_nodes, n_leaves = rest[6:]
    if not 1 <= max_depth <= MAX_DEPTH:
        raise FormatError("octree depth {} outside [1, {}]".format(
            max_depth, MAX_DEPTH))
    if n_nodes < 1:
        raise FormatError("octree has no root node")
    try:
        count = shmath.coeff_count(l_max)
    except ValueError as error:
        raise FormatError(str(error))
    width = 1 + 3 * count
    expected = 32 * n_nodes + 4 * width * n_leaves
    remaining = _remaining(handle)
    if remaining is not None and remaining < expected:
        raise FormatError("truncated octree: header announces {} bytes, "
                          "{} left".format(expected, remaining))
    children = np.frombuffer(_read_exact(handle, 32 * n_nodes, "nodes"),
                             dtype="<i4").reshape(n_nodes, 8)
    leaves = np.frombuffer(_read_exact(handle, 4 * width * n_leaves, "leaves"),
                           dtype="<f4").reshape(n_leaves, width)
    try:
        return Plenoctree(bbox, max_depth, l_max, children.astype(np.int32),
                          leaves[:, 0].astype(np.float32),
                          leaves[:, 1:].reshape(n_leaves, 3, count)
                          .astype(np.float32))
    except ValueError as error:
        raise FormatError("invalid octree: {}".format(error))


def save(tree, path):
    with open(path, "wb") as handle:
        write_tree(handle, tree)
    logger.info("Saved %s to %s", tree, path)


def load(path):
    with open(path, "rb") as handle:
        return read_tree(handle)
