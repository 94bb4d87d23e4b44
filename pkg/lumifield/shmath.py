"""Real spherical harmonics and emission activations.

The basis follows the real, orthonormal convention with the Condon-Shortley
phase folded into the closed form polynomials, evaluated up to l = 4. SH
coefficient arrays use the shape (..., 3, (l_max + 1) ** 2): color channel
major, coefficient minor, with coefficients ordered by l ascending and m from
-l to l.
"""

import logging
import math

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

MAX_SH_LEVEL = 4
UNIT_TOLERANCE = 1e-9

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_C4 = (
    2.5033429417967046,
    -1.7701307697799304,
    0.9461746957575601,
    -0.6690465435572892,
    0.10578554691520431,
    -0.6690465435572892,
    0.47308734787878004,
    -1.7701307697799304,
    0.6258357354491761,
)


def coeff_count(l_max):
    """Number of SH coefficients per channel for level l_max."""
    check_level(l_max)
    return (l_max + 1) ** 2


def check_level(l_max):
    if not isinstance(l_max, (int, np.integer)) or not 0 <= l_max <= MAX_SH_LEVEL:
        raise ValueError(
            "SH level must be an integer in [0, {}], got {!r}".format(
                MAX_SH_LEVEL, l_max))


def level_from_count(count):
    """Inverse of coeff_count."""
    l_max = int(round(math.sqrt(count))) - 1
    if l_max < 0 or (l_max + 1) ** 2 != count:
        raise ValueError("{} is not a valid SH coefficient count".format(count))
    check_level(l_max)
    return l_max


def sh_basis(l_max, dirs, normalize=False):
    """Evaluate the real SH basis.

    Args:
        l_max: SH level in [0, 4].
        dirs: unit directions, array of shape (..., 3).
        normalize: normalize non unit directions instead of rejecting them.

    Returns:
        Array of shape (..., (l_max + 1) ** 2).

    Raises:
        ValueError: on an invalid level, or on non unit directions when
            normalize is False.
    """
    check_level(l_max)
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[-1] != 3:
        raise ValueError("directions must have a trailing axis of size 3")
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        if not normalize:
            raise ValueError("directions must be unit vectors")
        logger.debug("Normalizing %d non unit directions",
                     int(np.count_nonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)))
        dirs = dirs / np.maximum(norms, 1e-300)[..., None]

    result = np.empty(dirs.shape[:-1] + ((l_max + 1) ** 2,))
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    result[..., 0] = SH_C0
    if l_max < 1:
        return result
    result[..., 1] = -SH_C1 * y
    result[..., 2] = SH_C1 * z
    result[..., 3] = -SH_C1 * x
    if l_max < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result[..., 4] = SH_C2[0] * xy
    result[..., 5] = SH_C2[1] * yz
    result[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    result[..., 7] = SH_C2[3] * xz
    result[..., 8] = SH_C2[4] * (xx - yy)
    if l_max < 3:
        return result
    result[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    result[..., 10] = SH_C3[1] * xy * z
    result[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    result[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    result[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    result[..., 14] = SH_C3[5] * z * (xx - yy)
    result[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    if l_max < 4:
        return result
    result[..., 16] = SH_C4[0] * xy * (xx - yy)
    result[..., 17] = SH_C4[1] * yz * (3 * xx - yy)
    result[..., 18] = SH_C4[2] * xy * (7 * zz - 1)
    result[..., 19] = SH_C4[3] * yz * (7 * zz - 3)
    result[..., 20] = SH_C4[4] * (zz * (35 * zz - 30) + 3)
    result[..., 21] = SH_C4[5] * xz * (7 * zz - 3)
    result[..., 22] = SH_C4[6] * (xx - yy) * (7 * zz - 1)
    result[..., 23] = SH_C4[7] * xz * (xx - 3 * yy)
    result[..., 24] = SH_C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy))
    return result


class Activation:
    """Maps an SH decoded logit to emitted radiance."""

    name = None

    def __call__(self, logits):
        raise NotImplementedError("Missing implementation for __call__.")

    def derivative(self, logits):
        """Derivative of the activation with respect to the logit."""
        raise NotImplementedError("Missing implementation for derivative.")

    def inverse(self, radiance):
        """Logit producing the given radiance."""
        raise NotImplementedError("Missing implementation for inverse.")

    def __eq__(self, other):
        return type(self) is type(other) and vars(self) == vars(other)

    def __hash__(self):
        return hash((type(self).__name__,) + tuple(sorted(vars(self).items())))

    def __repr__(self):
        args = ", ".join("{}={!r}".format(k, v) for k, v in vars(self).items())
        return "{}({})".format(type(self).__name__, args)


class ExtendedSigmoid(Activation):
    """Sigmoid scaled by the maximum scene radiance; output in (0, max)."""

    name = "sigmoid"

    def __init__(self, max_radiance):
        if not max_radiance > 0:
            raise ValueError("max_radiance must be positive")
        self.max_radiance = float(max_radiance)

    def __call__(self, logits):
        return self.max_radiance * special.expit(logits)

    def derivative(self, logits):
        sig = special.expit(logits)
        return self.max_radiance * sig * (1.0 - sig)

    def inverse(self, radiance):
        return special.logit(np.asarray(radiance, dtype=np.float64)
                             / self.max_radiance)


class Exponential(Activation):
    """Unbounded exponential activation, kept for ablations."""

    name = "exp"

    def __call__(self, logits):
        return np.exp(logits)

    def derivative(self, logits):
        return np.exp(logits)

    def inverse(self, radiance):
        return np.log(radiance)


class LogSigmoid(Activation):
    """Softly bounded log-sigmoid.

    Output range is (-log(1 + eps), -log(eps)).
    """

    name = "logsigmoid"

    def __init__(self, eps):
        if not 0.0 < eps < 1.0:
            raise ValueError("eps must be in (0, 1)")
        self.eps = float(eps)

    def __call__(self, logits):
        return -np.log(1.0 - special.expit(logits) + self.eps)

    def derivative(self, logits):
        sig = special.expit(logits)
        return sig * (1.0 - sig) / (1.0 - sig + self.eps)

    def inverse(self, radiance):
        sig = 1.0 + self.eps - np.exp(-np.asarray(radiance, dtype=np.float64))
        return special.logit(sig)


def make_activation(name, max_radiance=None, eps=1e-6):
    """Build an activation from its configuration name."""
    if name == ExtendedSigmoid.name:
        return ExtendedSigmoid(max_radiance)
    if name == Exponential.name:
        return Exponential()
    if name == LogSigmoid.name:
        return LogSigmoid(eps)
    raise ValueError("unknown activation {!r}".format(name))


class ShCoeffs:
    """SH coefficients of one point, three color channels."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != 3:
            raise ValueError("SH coefficients must have shape (3, K)")
        self.l_max = level_from_count(values.shape[1])
        self.values = values

    @classmethod
    def zeros(cls, l_max):
        return cls(np.zeros((3, coeff_count(l_max))))

    def decode(self, direction, act):
        return decode_emission(self.values, direction, act)

    def __eq__(self, other):
        return (isinstance(other, ShCoeffs)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return "ShCoeffs(l_max={}, values={!r})".format(self.l_max, self.values)


def sh_logits(coeffs, basis):
    """Per channel dot product of coefficients (..., 3, K) and basis (..., K)."""
    return np.einsum("...ck,...k->...c", coeffs, basis)


def decode_emission(coeffs, dirs, act, normalize=False):
    """Decode directional emission.

    Args:
        coeffs: SH logits of shape (..., 3, K) or an ShCoeffs.
        dirs: unit directions of shape (..., 3) broadcastable to coeffs.
        act: Activation applied to the per channel SH sum.
        normalize: normalize non unit directions.

    Returns:
        RGB radiance of shape (..., 3).
    """
    if isinstance(coeffs, ShCoeffs):
        coeffs = coeffs.values
    coeffs = np.asarray(coeffs, dtype=np.float64)
    l_max = level_from_count(coeffs.shape[-1])
    basis = sh_basis(l_max, dirs, normalize=normalize)
    return act(sh_logits(coeffs, basis))


def reinhard_weight(value, lam, eps):
    """Denominator of the HDR regularized loss, lam * value + eps."""
    return lam * np.asarray(value, dtype=np.float64) + eps
