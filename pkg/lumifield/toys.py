"""Analytic luminaire fields.

Toys implement the queryable field interface (``bbox``, ``l_max`` and
``query(positions) -> (sigma, coeffs)``) with closed form density and
emission, so they can render ground truth datasets and serve as extraction
sources. Emission is specified as target radiance and encoded into DC logits
through the inverse of the activation, so decoding reproduces it exactly.
"""

import logging

import numpy as np

from lumifield import shmath

logger = logging.getLogger(__name__)

DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
DEFAULT_SIGMA = 8.0


class AnalyticField:
    """Base class of toy fields.

    Subclasses implement ``_evaluate(positions)`` returning the density and
    the (..., 3) target emission, and may override ``_directional``.
    """

    name = None

    def __init__(self, act, l_max=0, bbox=DEFAULT_BBOX):
        shmath.check_level(l_max)
        self.act = act
        self.l_max = l_max
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)

    def _evaluate(self, positions):
        raise NotImplementedError("Missing implementation for _evaluate.")

    def _directional(self, positions):
        """Optional first order SH logits of shape (..., 3, 3)."""
        return None

    def encode(self, radiance):
        """DC logits that decode to the given radiance."""
        radiance = np.asarray(radiance, dtype=np.float64)
        return self.act.inverse(radiance) / shmath.SH_C0

    def query(self, positions):
        positions = np.asarray(positions, dtype=np.float64)
        inside = np.all((positions >= self.bbox[0])
                        & (positions <= self.bbox[1]), axis=-1)
        sigma, emission = self._evaluate(positions)
        sigma = np.where(inside, sigma, 0.0)
        coeffs = np.zeros(positions.shape[:-1]
                          + (3, shmath.coeff_count(self.l_max)))
        coeffs[..., 0] = self.encode(emission)
        directional = self._directional(positions)
        if directional is not None and self.l_max >= 1:
            coeffs[..., 1:4] = directional
        coeffs *= inside[..., None, None]
        return sigma, coeffs

    def __repr__(self):
        return "{}(l_max={})".format(type(self).__name__, self.l_max)


class UniformField(AnalyticField):
    """Constant density and emission filling the bounding box."""

    name = "uniform"

    def __init__(self, act, sigma, radiance, l_max=0, bbox=DEFAULT_BBOX):
        super().__init__(act, l_max, bbox)
        self.sigma = float(sigma)
        self.radiance = np.broadcast_to(np.asarray(radiance, np.float64), (3,))

    def _evaluate(self, positions):
        shape = positions.shape[:-1]
        return (np.full(shape, self.sigma),
                np.broadcast_to(self.radiance, shape + (3,)))


class EmissiveSphere(AnalyticField):
    """Dense emissive ball, optionally with a dark equatorial band.

    Points with |z| < band_half_width emit dark_radiance instead of radiance.
    A non zero tilt adds a first order SH term along z, brightening the
    emission seen from below and darkening it from above.
    """

    name = "sphere"

    def __init__(self, act, radiance, radius=0.5, sigma=DEFAULT_SIGMA,
                 band_half_width=0.0, dark_radiance=None, tilt=0.0, l_max=0,
                 bbox=DEFAULT_BBOX):
        super().__init__(act, l_max, bbox)
        self.radius = float(radius)
        self.sigma = float(sigma)
        self.radiance = np.broadcast_to(np.asarray(radiance, np.float64), (3,))
        self.band_half_width = float(band_half_width)
        if dark_radiance is None:
            dark_radiance = 0.02 * self.radiance
        self.dark_radiance = np.broadcast_to(
            np.asarray(dark_radiance, np.float64), (3,))
        self.tilt = float(tilt)

    def _inside(self, positions):
        return np.sum(positions * positions, axis=-1) <= self.radius ** 2

    def _evaluate(self, positions):
        inside = self._inside(positions)
        band = np.abs(positions[..., 2]) < self.band_half_width
        emission = np.where(band[..., None], self.dark_radiance, self.radiance)
        return np.where(inside, self.sigma, 0.0), emission

    def _directional(self, positions):
        if not self.tilt:
            return None
        terms = np.zeros(positions.shape[:-1] + (3, 3))
        terms[..., 1] = self.tilt
        return terms


class EmissiveShell(EmissiveSphere):
    """Emissive spherical shell between inner and outer radius."""

    name = "shell"

    def __init__(self, act, radiance, inner=0.35, outer=0.5,
                 sigma=DEFAULT_SIGMA, band_half_width=0.1, dark_radiance=None,
                 l_max=0, bbox=DEFAULT_BBOX):
        super().__init__(act, radiance, outer, sigma, band_half_width,
                         dark_radiance, 0.0, l_max, bbox)
        if not 0 <= inner < outer:
            raise ValueError("need 0 <= inner < outer")
        self.inner = float(inner)

    def _inside(self, positions):
        radius2 = np.sum(positions * positions, axis=-1)
        return (radius2 <= self.radius ** 2) & (radius2 >= self.inner ** 2)


class TwoBulbCluster(AnalyticField):
    """Two emissive balls of different color side by side on the x axis."""

    name = "cluster"

    def __init__(self, act, radiance, second_radiance=None, radius=0.3,
                 offset=0.45, sigma=DEFAULT_SIGMA, l_max=0, bbox=DEFAULT_BBOX):
        super().__init__(act, l_max, bbox)
        self.radiance = np.broadcast_to(np.asarray(radiance, np.float64), (3,))
        if second_radiance is None:
            second_radiance = self.radiance[::-1] * 0.5
        self.second_radiance = np.broadcast_to(
            np.asarray(second_radiance, np.float64), (3,))
        self.radius = float(radius)
        self.centers = np.array([[-offset, 0.0, 0.0], [offset, 0.0, 0.0]])
        self.sigma = float(sigma)

    def _evaluate(self, positions):
        first = np.sum((positions - self.centers[0]) ** 2, axis=-1)
        second = np.sum((positions - self.centers[1]) ** 2, axis=-1)
        radius2 = self.radius ** 2
        inside = (first <= radius2) | (second <= radius2)
        emission = np.where((second < first)[..., None], self.second_radiance,
                            self.radiance)
        return np.where(inside, self.sigma, 0.0), emission


TOYS = ("uniform", "sphere", "banded-sphere", "shell", "cluster")


def make_toy(name, max_radiance, l_max=0, act=None):
    """Toy field by name with radiance levels relative to max_radiance.

    Args:
        name: one of TOYS.
        max_radiance: maximum scene radiance used by the activation.
        l_max: SH level of the queried coefficients.
        act: emission activation; ExtendedSigmoid(max_radiance) by default.
    """
    act = act or shmath.ExtendedSigmoid(max_radiance)
    warm = np.array([0.9, 0.75, 0.5]) * max_radiance
    if name == "uniform":
        return UniformField(act, 1.0, 0.5 * warm, l_max)
    if name == "sphere":
        return EmissiveSphere(act, warm, l_max=l_max)
    if name == "banded-sphere":
        return EmissiveSphere(act, warm, band_half_width=0.12, l_max=l_max)
    if name == "shell":
        return EmissiveShell(act, warm, l_max=l_max)
    if name == "cluster":
        return TwoBulbCluster(act, warm, l_max=l_max)
    raise ValueError("unknown toy field {!r}, expected one of {}".format(
        name, ", ".join(TOYS)))
