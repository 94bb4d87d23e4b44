"""Tests for proxy and surface shapes."""

import unittest

import numpy as np

from lumifield import geometry


def rays(origins, dirs):
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = geometry.normalize(np.atleast_2d(dirs))
    return origins, dirs


class TestSphere(unittest.TestCase):

    def setUp(self):
        self.sphere = geometry.Sphere((0, 0, 0), 1.0)

    def test_through_center(self):
        t_near, t_far, hit = self.sphere.intersect(*rays((0, 0, -2), (0, 0, 1)))
        self.assertTrue(hit[0])
        self.assertAlmostEqual(t_near[0], 1.0)
        self.assertAlmostEqual(t_far[0], 3.0)

    def test_miss(self):
        _, _, hit = self.sphere.intersect(*rays([(0, 1.5, -2), (0, 1.0, -2)],
                                                [(0, 0, 1), (0, 0, 1)]))
        self.assertFalse(hit[0])
        # tangent rays are misses
        self.assertFalse(hit[1])

    def test_behind(self):
        _, _, hit = self.sphere.intersect(*rays((0, 0, 2), (0, 0, 1)))
        self.assertFalse(hit[0])

    def test_inside(self):
        t_near, t_far, hit = self.sphere.intersect(*rays((0, 0, 0), (1, 0, 0)))
        self.assertTrue(hit[0])
        self.assertEqual(t_near[0], 0.0)
        self.assertAlmostEqual(t_far[0], 1.0)

    def test_first_hit_normal(self):
        t, normals = self.sphere.first_hit(*rays((0, 0, -2), (0, 0, 1)))
        self.assertAlmostEqual(t[0], 1.0)
        np.testing.assert_allclose(normals[0], [0, 0, -1])

    def test_samples_on_surface(self):
        u = np.random.default_rng(0).random((1000, 2))
        points, normals = geometry.Sphere((1, 2, 3), 2.0).sample_surface(u)
        np.testing.assert_allclose(np.linalg.norm(points - [1, 2, 3], axis=-1),
                                   2.0)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=-1), 1.0)
        self.assertAlmostEqual(geometry.Sphere((0, 0, 0), 2.0).area,
                               16 * np.pi)


class TestBox(unittest.TestCase):

    def setUp(self):
        self.box = geometry.Box((-1, -1, -1), (1, 1, 1))

    def test_inside(self):
        t_near, t_far, hit = self.box.intersect(*rays((0, 0, 0), (1, 0, 0)))
        self.assertTrue(hit[0])
        self.assertEqual(t_near[0], 0.0)
        self.assertEqual(t_far[0], 1.0)

    def test_outside(self):
        t_near, t_far, hit = self.box.intersect(*rays((-3, 0.5, 0), (1, 0, 0)))
        self.assertTrue(hit[0])
        self.assertEqual(t_near[0], 2.0)
        self.assertEqual(t_far[0], 4.0)

    def test_parallel_miss(self):
        _, _, hit = self.box.intersect(*rays((-3, 2, 0), (1, 0, 0)))
        self.assertFalse(hit[0])

    def test_normals(self):
        points = np.array([[1.0, 0.2, 0.3], [0.1, -1.0, 0.0],
                           [0.0, 0.5, 1.0]])
        np.testing.assert_array_equal(self.box.normal(points),
                                      [[1, 0, 0], [0, -1, 0], [0, 0, 1]])

    def test_samples_on_faces(self):
        box = geometry.Box((0, 0, 0), (1, 2, 3))
        self.assertEqual(box.area, 2 * (6 + 3 + 2))
        u = np.random.default_rng(1).random((4000, 2))
        points, normals = box.sample_surface(u)
        axis = np.argmax(np.abs(normals), axis=-1)
        on_face = np.isclose(points[np.arange(len(points)), axis],
                             np.where(normals.sum(axis=-1) > 0,
                                      box.hi[axis], box.lo[axis]))
        self.assertTrue(np.all(on_face))
        self.assertTrue(np.all((points >= box.lo - 1e-12)
                               & (points <= box.hi + 1e-12)))
        # the two 2 x 3 faces hold 6 / 11 of the area
        share = np.mean(axis == 0)
        self.assertAlmostEqual(share, 6.0 / 11.0, delta=0.03)


class TestPlane(unittest.TestCase):

    def test_hit(self):
        plane = geometry.Plane((0, 0, 0), (0, 1, 0))
        t, normals = plane.first_hit(*rays((0, 2, 0), (0, -1, 0)))
        self.assertAlmostEqual(t[0], 2.0)
        np.testing.assert_array_equal(normals[0], [0, 1, 0])

    def test_parallel(self):
        plane = geometry.Plane((0, 0, 0), (0, 1, 0))
        t, _ = plane.first_hit(*rays((0, 2, 0), (1, 0, 0)))
        self.assertEqual(t[0], np.inf)

    def test_not_sampleable(self):
        plane = geometry.Plane((0, 0, 0), (0, 0, 1))
        self.assertEqual(plane.area, np.inf)
        with self.assertRaises(ValueError):
            plane.sample_surface(np.zeros((1, 2)))


class TestTriangles(unittest.TestCase):

    def setUp(self):
        self.mesh = geometry.Triangles([[(0, 0, 0), (1, 0, 0), (0, 1, 0)],
                                        [(0, 0, 2), (1, 0, 2), (0, 1, 2)]])

    def test_nearest_hit(self):
        t, normals = self.mesh.first_hit(*rays((0.2, 0.2, -1), (0, 0, 1)))
        self.assertAlmostEqual(t[0], 1.0)
        np.testing.assert_allclose(normals[0], [0, 0, 1])

    def test_miss(self):
        t, _ = self.mesh.first_hit(*rays((0.8, 0.8, -1), (0, 0, 1)))
        self.assertEqual(t[0], np.inf)

    def test_samples_inside(self):
        self.assertAlmostEqual(self.mesh.area, 1.0)
        u = np.random.default_rng(2).random((500, 2))
        points, _ = self.mesh.sample_surface(u)
        self.assertTrue(np.all(points[:, 0] >= -1e-12))
        self.assertTrue(np.all(points[:, 1] >= -1e-12))
        self.assertTrue(np.all(points[:, 0] + points[:, 1] <= 1 + 1e-12))


if __name__ == "__main__":
    unittest.main()
