"""Tests for the SH basis and the emission activations."""

import unittest

import numpy as np

from lumifield import shmath


def sphere_quadrature(n_theta=24, n_phi=48):
    """Gauss-Legendre in cos(theta) times a uniform azimuth grid.

    Exact for polynomials of the degrees used by the basis up to l = 4.
    """
    z, z_weights = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    ring = np.sqrt(1.0 - zz ** 2)
    dirs = np.stack([ring * np.cos(pp), ring * np.sin(pp), zz], axis=-1)
    weights = np.repeat(z_weights[:, None], n_phi, axis=1) * 2 * np.pi / n_phi
    return dirs.reshape(-1, 3), weights.reshape(-1)


class TestLevels(unittest.TestCase):

    def test_coeff_count(self):
        self.assertEqual([shmath.coeff_count(l) for l in range(5)],
                         [1, 4, 9, 16, 25])

    def test_invalid_level(self):
        for level in (-1, 5, 1.5):
            with self.assertRaises(ValueError):
                shmath.coeff_count(level)

    def test_level_from_count(self):
        self.assertEqual(shmath.level_from_count(9), 2)
        with self.assertRaises(ValueError):
            shmath.level_from_count(8)
        with self.assertRaises(ValueError):
            shmath.level_from_count(36)


class TestBasis(unittest.TestCase):

    def test_constant_band(self):
        dirs = np.array([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]])
        basis = shmath.sh_basis(0, dirs)
        np.testing.assert_array_equal(basis, [[0.28209479177387814]] * 2)

    def test_pole(self):
        basis = shmath.sh_basis(1, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(basis[1:], [0.0, 0.4886025119029199, 0.0])

    def test_orthonormal(self):
        dirs, weights = sphere_quadrature()
        for level in range(shmath.MAX_SH_LEVEL + 1):
            basis = shmath.sh_basis(level, dirs)
            gram = np.einsum("n,ni,nj->ij", weights, basis, basis)
            np.testing.assert_allclose(gram, np.eye(len(gram)), atol=1e-10)

    def test_monte_carlo_orthonormal(self):
        rng = np.random.default_rng(7)
        dirs = rng.normal(size=(200000, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        basis = shmath.sh_basis(2, dirs)
        gram = 4 * np.pi * basis.T @ basis / len(dirs)
        np.testing.assert_allclose(gram, np.eye(9), atol=3e-2)

    def test_non_unit_direction(self):
        with self.assertRaises(ValueError):
            shmath.sh_basis(1, np.array([0.0, 0.0, 2.0]))
        basis = shmath.sh_basis(1, np.array([0.0, 0.0, 2.0]), normalize=True)
        np.testing.assert_allclose(basis,
                                   shmath.sh_basis(1, np.array([0, 0, 1.0])))

    def test_bad_shape(self):
        with self.assertRaises(ValueError):
            shmath.sh_basis(1, np.ones((4, 2)))


class TestActivations(unittest.TestCase):

    def setUp(self):
        self.activations = [shmath.ExtendedSigmoid(10.0),
                            shmath.Exponential(),
                            shmath.LogSigmoid(1e-3)]

    def test_derivative_matches_differences(self):
        logits = np.linspace(-4.0, 4.0, 17)
        h = 1e-6
        for act in self.activations:
            numeric = (act(logits + h) - act(logits - h)) / (2 * h)
            np.testing.assert_allclose(act.derivative(logits), numeric,
                                       rtol=1e-6, err_msg=repr(act))

    def test_inverse(self):
        logits = np.array([-3.0, 0.0, 2.5])
        for act in self.activations:
            np.testing.assert_allclose(act.inverse(act(logits)), logits,
                                       rtol=1e-7, atol=1e-9)

    def test_sigmoid_range(self):
        act = shmath.ExtendedSigmoid(10.0)
        values = act(np.array([-30.0, 0.0, 30.0]))
        self.assertTrue(np.all(values > 0))
        self.assertTrue(np.all(values < 10.0))
        self.assertEqual(values[1], 5.0)

    def test_logsigmoid_range(self):
        act = shmath.LogSigmoid(0.01)
        values = act(np.array([-50.0, 50.0]))
        self.assertAlmostEqual(values[0], -np.log(1.01), places=12)
        self.assertAlmostEqual(values[1], -np.log(0.01), places=9)

    def test_validation(self):
        with self.assertRaises(ValueError):
            shmath.ExtendedSigmoid(0.0)
        for eps in (0.0, 1.0):
            with self.assertRaises(ValueError):
                shmath.LogSigmoid(eps)

    def test_make_activation(self):
        self.assertEqual(shmath.make_activation("sigmoid", 4.0),
                         shmath.ExtendedSigmoid(4.0))
        self.assertEqual(shmath.make_activation("exp"), shmath.Exponential())
        self.assertEqual(shmath.make_activation("logsigmoid", eps=0.5),
                         shmath.LogSigmoid(0.5))
        with self.assertRaises(ValueError):
            shmath.make_activation("relu")


class TestDecode(unittest.TestCase):

    def test_zero_coefficients(self):
        direction = np.array([0.0, 1.0, 0.0])
        coeffs = shmath.ShCoeffs.zeros(2)
        np.testing.assert_array_equal(
            coeffs.decode(direction, shmath.ExtendedSigmoid(10.0)), [5.0] * 3)
        np.testing.assert_array_equal(
            coeffs.decode(direction, shmath.Exponential()), [1.0] * 3)

    def test_constant_band_value(self):
        coeffs = np.full((3, 1), 1.0 / shmath.SH_C0)
        radiance = shmath.decode_emission(coeffs, np.array([1.0, 0.0, 0.0]),
                                          shmath.ExtendedSigmoid(1.0))
        np.testing.assert_allclose(radiance, [0.7310585786300049] * 3)

    def test_constant_band_is_direction_invariant(self):
        rng = np.random.default_rng(3)
        coeffs = np.zeros((3, 9))
        coeffs[:, 0] = rng.normal(size=3)
        dirs = rng.normal(size=(2, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        act = shmath.ExtendedSigmoid(2.0)
        first = shmath.decode_emission(coeffs, dirs[0], act)
        second = shmath.decode_emission(coeffs, dirs[1], act)
        np.testing.assert_array_equal(first, second)

    def test_monotone_in_coefficient(self):
        direction = np.array([0.0, 0.0, 1.0])
        act = shmath.ExtendedSigmoid(1.0)
        low = np.zeros((3, 4))
        high = low.copy()
        high[:, 2] = 0.5
        self.assertTrue(np.all(shmath.decode_emission(high, direction, act)
                               > shmath.decode_emission(low, direction, act)))

    def test_shcoeffs_shape(self):
        with self.assertRaises(ValueError):
            shmath.ShCoeffs(np.zeros((2, 4)))
        with self.assertRaises(ValueError):
            shmath.ShCoeffs(np.zeros((3, 5)))
        self.assertEqual(shmath.ShCoeffs(np.zeros((3, 16))).l_max, 3)


class TestReinhardWeight(unittest.TestCase):

    def test_values(self):
        self.assertAlmostEqual(shmath.reinhard_weight(0, 1, 0.01), 0.01)
        self.assertAlmostEqual(shmath.reinhard_weight(1, 1, 0.01), 1.01)
        self.assertAlmostEqual(shmath.reinhard_weight(12, 10, 0.01), 120.01)


if __name__ == "__main__":
    unittest.main()
