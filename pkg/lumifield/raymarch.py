"""Deterministic quadrature of emission and transmittance along rays.

A queryable field is any object with an ``l_max`` attribute and a
``query(positions)`` method returning densities (...) and SH logits
(..., 3, K). Both RadianceFieldGrid and the analytic toys qualify.

Per sample i with density sigma_i and spacing delta_i two weights are
accumulated: the opacity weight w_i = T_i - T_{i+1}, which sums to the ray
alpha, and the emission weight e_i, the integral of T * sigma over the
segment for piecewise constant density. Radiance is sum_i e_i * Phi_i.
"""

import collections
import logging

import numpy as np

from lumifield import shmath

logger = logging.getLogger(__name__)

LINEAR = "linear"
EXPONENTIAL = "exponential"
TRANSMITTANCE_MODELS = (LINEAR, EXPONENTIAL)

Accumulation = collections.namedtuple(
    "Accumulation", ["transmittance", "weights", "emission_weights"])


def check_model(model):
    if model not in TRANSMITTANCE_MODELS:
        raise ValueError("unknown transmittance model {!r}".format(model))
    return model


class Rays:
    """A batch of rays.

    Attributes:
        origins: (N, 3) world positions.
        dirs: (N, 3) unit directions.
        t_near: (N,) segment start.
        t_far: (N,) segment end.
    """

    def __init__(self, origins, dirs, t_near=None, t_far=None):
        self.origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        if self.origins.shape != self.dirs.shape or self.dirs.shape[-1] != 3:
            raise ValueError("origins and directions must both be (N, 3)")
        norms = np.linalg.norm(self.dirs, axis=-1)
        if np.any(np.abs(norms - 1.0) > shmath.UNIT_TOLERANCE):
            raise ValueError("ray directions must be unit vectors")
        count = len(self.origins)
        self.t_near = (np.zeros(count) if t_near is None
                       else np.broadcast_to(np.asarray(t_near, np.float64),
                                            (count,)).copy())
        self.t_far = (np.full(count, np.inf) if t_far is None
                      else np.broadcast_to(np.asarray(t_far, np.float64),
                                           (count,)).copy())
        if np.any(self.t_near < 0) or np.any(self.t_far < self.t_near):
            raise ValueError("ray bounds must satisfy 0 <= t_near <= t_far")

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, index):
        return Rays(self.origins[index], self.dirs[index], self.t_near[index],
                    self.t_far[index])

    def at(self, t):
        """Points at parameters t of shape (N,) or (N, S)."""
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 1:
            return self.origins + self.dirs * t[:, None]
        return self.origins[:, None, :] + self.dirs[:, None, :] * t[..., None]

    def with_bounds(self, t_near, t_far):
        return Rays(self.origins, self.dirs, t_near, t_far)

    def __repr__(self):
        return "Rays(n={})".format(len(self))


class MarchResult:
    """Accumulated quantities of a batch of rays.

    Attributes:
        radiance: (N, 3) emitted radiance.
        alpha: (N,) opacity, 1 - T(t_far).
        expected_depth: (N,) sum of opacity weight times sample distance.
        weights: (N, S) opacity weights, or None for octree traversal.
        leaves_visited: (N,) occupied leaves visited, octree traversal only.
    """

    def __init__(self, radiance, alpha, expected_depth, weights=None,
                 leaves_visited=None):
        self.radiance = radiance
        self.alpha = alpha
        self.expected_depth = expected_depth
        self.weights = weights
        self.leaves_visited = leaves_visited

    def __len__(self):
        return len(self.alpha)

    def __repr__(self):
        return "MarchResult(n={})".format(len(self))


def stratified_samples(t_near, t_far, n_samples, rng=None):
    """Samples in n equal strata of [t_near, t_far].

    Midpoints of the strata without rng, uniformly jittered within each
    stratum otherwise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if rng is None:
        offsets = np.full((len(t_near), n_samples), 0.5)
    else:
        offsets = rng.random((len(t_near), n_samples))
    fractions = (np.arange(n_samples) + offsets) / n_samples
    return t_near[:, None] + (t_far - t_near)[:, None] * fractions


def sample_deltas(t_vals, t_near, t_far):
    """Segment lengths of sorted samples.

    Segment bounds are the midpoints between neighbouring samples, closed by
    t_near and t_far, so the lengths sum to t_far - t_near.
    """
    mids = 0.5 * (t_vals[:, 1:] + t_vals[:, :-1])
    bounds = np.concatenate([np.asarray(t_near, np.float64)[:, None], mids,
                             np.asarray(t_far, np.float64)[:, None]], axis=1)
    return np.diff(bounds, axis=1)


def _transmittance(optical, model):
    depth = np.concatenate([np.zeros((len(optical), 1)),
                            np.cumsum(optical, axis=1)], axis=1)
    if model == LINEAR:
        return np.maximum(0.0, 1.0 - depth)
    return np.exp(-depth)


def accumulate(sigma, deltas, model, sigma_min=0.0, alpha_max=1.0):
    """Transmittance and weights of per sample densities.

    Args:
        sigma: (N, S) densities.
        deltas: (N, S) segment lengths.
        model: LINEAR or EXPONENTIAL.
        sigma_min: samples with lower density are skipped.
        alpha_max: samples after the ray opacity reached this are skipped.

    Returns:
        Accumulation with transmittance (N, S + 1), opacity weights (N, S)
        and emission weights (N, S).
    """
    check_model(model)
    sigma = np.where(sigma < sigma_min, 0.0, sigma) if sigma_min > 0 else sigma
    optical = sigma * deltas
    trans = _transmittance(optical, model)
    if alpha_max < 1.0:
        # the active samples form a prefix since T is non increasing
        active = (1.0 - trans[:, :-1]) < alpha_max
        optical = np.where(active, optical, 0.0)
        trans = _transmittance(optical, model)
    if model == LINEAR:
        weights = trans[:, :-1] - trans[:, 1:]
        emission = weights * (trans[:, :-1] - 0.5 * weights)
    else:
        weights = trans[:, :-1] * -np.expm1(-optical)
        emission = weights
    return Accumulation(trans, weights, emission)


def decode_samples(coeffs, dirs, act, l_max):
    """Emission of samples (N, S, 3, K) seen along ray directions (N, 3)."""
    basis = shmath.sh_basis(l_max, dirs)
    return act(np.einsum("nsck,nk->nsc", coeffs, basis))


def march_samples(rays, field, t_vals, act, model, deltas=None, sigma_min=0.0,
                  alpha_max=1.0):
    """March rays through the field at the given sample distances.

    Args:
        rays: Rays.
        field: queryable field.
        t_vals: (N, S) sorted sample distances.
        act: emission activation.
        model: LINEAR or EXPONENTIAL.
        deltas: (N, S) segment lengths, sample_deltas(t_vals) by default.
        sigma_min: density below which samples contribute nothing.
        alpha_max: opacity at which marching stops.

    Returns:
        MarchResult.
    """
    if deltas is None:
        deltas = sample_deltas(t_vals, rays.t_near, rays.t_far)
    sigma, coeffs = field.query(rays.at(t_vals))
    acc = accumulate(sigma, deltas, model, sigma_min, alpha_max)
    emitted = decode_samples(coeffs, rays.dirs, act, field.l_max)
    radiance = np.einsum("ns,nsc->nc", acc.emission_weights, emitted)
    alpha = 1.0 - acc.transmittance[:, -1]
    depth = np.sum(acc.weights * t_vals, axis=1)
    return MarchResult(radiance, alpha, depth, acc.weights)


def march(rays, field, model, act, n_samples, stratified_jitter=False,
          sigma_min=0.0, alpha_max=1.0, rng=None):
    """March rays with n_samples stratified samples per ray.

    Samples sit at stratum midpoints, or are jittered within their stratum
    when stratified_jitter is set (rng defaults to a fresh seeded
    generator).
    """
    check_model(model)
    if not 0.0 < alpha_max <= 1.0:
        raise ValueError("alpha_max must be in (0, 1]")
    if sigma_min < 0:
        raise ValueError("sigma_min must be non negative")
    if stratified_jitter and rng is None:
        rng = np.random.default_rng(0)
    t_vals = stratified_samples(rays.t_near, rays.t_far, n_samples,
                                rng if stratified_jitter else None)
    return march_samples(rays, field, t_vals, act, model, sigma_min=sigma_min,
                         alpha_max=alpha_max)


def hierarchical_resample(coarse_weights, t_near, t_far, n_fine, u):
    """Inverse transform samples of the piecewise constant weight PDF.

    Args:
        coarse_weights: (N, S) non negative weights of S equal strata.
        t_near, t_far: (N,) bounds of the strata.
        n_fine: number of samples per ray.
        u: (N, n_fine) uniform numbers in [0, 1).

    Returns:
        (t_vals, fallback): (N, n_fine) distances strictly inside the bounds
        and a (N,) flag marking rays whose weights were all zero and were
        sampled uniformly instead.
    """
    weights = np.atleast_2d(np.asarray(coarse_weights, dtype=np.float64))
    if np.any(weights < 0):
        raise ValueError("weights must be non negative")
    t_near = np.broadcast_to(np.asarray(t_near, np.float64), (len(weights),))
    t_far = np.broadcast_to(np.asarray(t_far, np.float64), (len(weights),))
    u = np.broadcast_to(np.asarray(u, dtype=np.float64),
                        (len(weights), n_fine))
    n_strata = weights.shape[1]

    totals = weights.sum(axis=1)
    fallback = totals <= 0
    if np.any(fallback):
        logger.debug("Uniform resampling fallback for %d rays",
                     int(fallback.sum()))
        weights = np.where(fallback[:, None], 1.0, weights)
        totals = weights.sum(axis=1)
    pdf = weights / totals[:, None]
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=1)],
                         axis=1)
    cdf[:, -1] = 1.0

    stratum = np.sum(u[:, :, None] >= cdf[:, None, 1:-1], axis=2)
    stratum = np.minimum(stratum, n_strata - 1)
    lower = np.take_along_axis(cdf, stratum, axis=1)
    mass = np.take_along_axis(pdf, stratum, axis=1)
    within = np.clip((u - lower) / np.where(mass > 0, mass, 1.0), 0.0, 1.0)
    width = (t_far - t_near)[:, None] / n_strata
    t_vals = t_near[:, None] + (stratum + within) * width

    low = np.nextafter(t_near, np.inf)[:, None]
    high = np.nextafter(t_far, -np.inf)[:, None]
    t_vals = np.where(low <= high, np.clip(t_vals, low, high), t_near[:, None])
    return t_vals, fallback


def fine_samples(coarse_t, coarse_weights, rays, n_fine, rng=None):
    """Sorted union of coarse samples and n_fine resampled distances."""
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine,
                            (len(rays), n_fine))
    else:
        u = rng.random((len(rays), n_fine))
    resampled, _ = hierarchical_resample(coarse_weights, rays.t_near,
                                         rays.t_far, n_fine, u)
    return np.sort(np.concatenate([coarse_t, resampled], axis=1), axis=1)


def march_hierarchical(rays, field, model, act, n_coarse, n_fine, rng=None,
                       sigma_min=0.0, alpha_max=1.0):
    """Coarse pass followed by a pass over the coarse plus resampled set.

    Returns:
        (coarse, fine) MarchResults.
    """
    coarse_t = stratified_samples(rays.t_near, rays.t_far, n_coarse, rng)
    coarse = march_samples(rays, field, coarse_t, act, model)
    if n_fine < 1:
        return coarse, coarse
    fine_t = fine_samples(coarse_t, coarse.weights, rays, n_fine, rng)
    fine = march_samples(rays, field, fine_t, act, model, sigma_min=sigma_min,
                         alpha_max=alpha_max)
    return coarse, fine


def intersect_proxy(rays, proxy):
    """Entry and exit distances of rays against a proxy shape.

    Args:
        rays: Rays.
        proxy: geometry.Sphere or geometry.Box.

    Returns:
        (t_near, t_far, hit) arrays; bounds are clipped to t >= 0 and zero
        where hit is False.
    """
    t_near, t_far, hit = proxy.intersect(rays.origins, rays.dirs)
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def clip_to_proxy(rays, proxy):
    """Rays with bounds set to their chord through the proxy.

    Rays that miss get the degenerate segment [0, 0].
    """
    t_near, t_far, _ = intersect_proxy(rays, proxy)
    return rays.with_bounds(t_near, t_far)
