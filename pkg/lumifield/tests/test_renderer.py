"""Tests for the Monte Carlo renderer and scene loading."""

import os
import tempfile
import textwrap
import unittest

import numpy as np

from lumifield import dataio
from lumifield import geometry
from lumifield import plenoctree
from lumifield import raymarch
from lumifield import renderer
from lumifield import shmath
from lumifield import toys
from lumifield.errors import ConfigError, FormatError, SceneError

UNIT_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def opaque_tree(act, radiance=2.0, depth=2):
    """Tree filled with a dense uniform emitter."""
    return plenoctree.extract(
        toys.UniformField(act, 1e4, radiance),
        plenoctree.ExtractionConfig(refine_samples=1, max_depth=depth))


class RendererTestCase(unittest.TestCase):

    def setUp(self):
        self.act = shmath.ExtendedSigmoid(4.0)
        self.tree = opaque_tree(self.act)
        self.lamp = renderer.Luminaire(self.tree, self.act,
                                       proxy=geometry.Sphere((0, 0, 0), 1.0))
        self.camera = dataio.CameraPose.looking_at(
            dataio.PERSPECTIVE, (0.0, -4.0, 1.0), (8, 6), focal=35.0,
            sensor=36.0)


class TestTrace(RendererTestCase):

    def trace(self, scene, cfg=None):
        rays = raymarch.Rays([[0.0, -5.0, 0.0]], [[0.0, 1.0, 0.0]])
        return renderer.trace(scene, rays, np.random.default_rng(0),
                              cfg or renderer.EstimatorConfig())

    def test_opaque_luminaire_hides_background(self):
        scene = renderer.Scene(luminaires=[self.lamp],
                               background=(0.3, 0.4, 0.5))
        np.testing.assert_allclose(self.trace(scene), [[1.0, 1.0, 1.0]],
                                   rtol=1e-12)

    def test_empty_luminaire_is_invisible(self):
        lamp = renderer.Luminaire(plenoctree.Plenoctree.empty(UNIT_BOX, 2, 0),
                                  self.act,
                                  proxy=geometry.Sphere((0, 0, 0), 1.0))
        scene = renderer.Scene(luminaires=[lamp], background=(0.3, 0.4, 0.5))
        np.testing.assert_array_equal(self.trace(scene), [[0.3, 0.4, 0.5]])

    def test_bounce_limit(self):
        scene = renderer.Scene(luminaires=[self.lamp],
                               background=(0.3, 0.4, 0.5))
        cfg = renderer.EstimatorConfig(max_transparency_bounces=0)
        np.testing.assert_array_equal(self.trace(scene, cfg),
                                      [[0.3, 0.4, 0.5]])

    def test_luminaire_radiance(self):
        radiance, alpha = renderer.luminaire_radiance(
            self.lamp, np.array([0.0, -1.0, 0.0]), np.array([0.0, -1.0, 0.0]))
        np.testing.assert_allclose(radiance, [1.0, 1.0, 1.0], rtol=1e-12)
        self.assertEqual(alpha, 1.0)


class TestDirect(RendererTestCase):

    def test_sphere_irradiance(self):
        lamp = renderer.Luminaire(self.tree, self.act,
                                  proxy=geometry.Sphere((0, 0, 0), 1.0),
                                  translation=(0.0, 2.0, 0.0))
        scene = renderer.Scene(luminaires=[lamp])
        rng = np.random.default_rng(1)
        normals = np.tile([0.0, 1.0, 0.0], (1 << 16, 1))
        estimates = [renderer.estimate_direct(scene, np.zeros_like(normals),
                                              normals, rng)
                     for _ in range(4)]
        # albedo 1 under a sphere of radiance L at twice its radius gives L / 4
        mean = np.concatenate(estimates).mean(axis=0)
        np.testing.assert_allclose(mean, 0.25, rtol=0.02)

    def test_points_facing_away_get_nothing(self):
        lamp = renderer.Luminaire(self.tree, self.act,
                                  proxy=geometry.Sphere((0, 0, 0), 1.0),
                                  translation=(0.0, 2.0, 0.0))
        scene = renderer.Scene(luminaires=[lamp])
        result = renderer.estimate_direct(scene, np.zeros((64, 3)),
                                          np.tile([0.0, -1.0, 0.0], (64, 1)),
                                          np.random.default_rng(2))
        np.testing.assert_array_equal(result, 0.0)

    def test_transmission(self):
        wall = renderer.Surface(geometry.Plane((0, 0, 0), (0, 1, 0)),
                                renderer.Lambertian(0.5))
        scene = renderer.Scene(surfaces=[wall])
        origins = np.array([[0.0, -1.0, 0.0], [0.0, -1.0, 0.0]])
        dirs = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(
            renderer.transmission(scene, origins, dirs, np.array([2.0, 0.5])),
            [0.0, 1.0])
        scene = renderer.Scene(luminaires=[self.lamp])
        origins = np.array([[0.0, -5.0, 0.0]])
        self.assertEqual(renderer.transmission(scene, origins, dirs[:1],
                                               np.array([10.0]))[0], 0.0)
        self.assertEqual(renderer.transmission(scene, origins, dirs[:1],
                                               np.array([10.0]),
                                               skip=self.lamp)[0], 1.0)


class TestRender(RendererTestCase):

    def scene(self):
        floor = renderer.Surface(geometry.Plane((0, 0, -1), (0, 0, 1)),
                                 renderer.Lambertian(0.5))
        return renderer.Scene([floor], [self.lamp], (0.05, 0.05, 0.05),
                              self.camera)

    def test_thread_count_does_not_change_image(self):
        cfg = renderer.EstimatorConfig(spp=2, tile_size=4, seed=5)
        rows = []
        image, counts = renderer.render(self.scene(), cfg, threads=1,
                                        log_rows=rows)
        again, _ = renderer.render(self.scene(), cfg, threads=3)
        np.testing.assert_array_equal(image, again)
        self.assertEqual(image.shape, (6, 8, 3))
        np.testing.assert_array_equal(counts, 2)
        self.assertEqual([index for index, _ in rows], [0, 1, 2, 3])
        self.assertTrue(np.all(np.isfinite(image)) and np.all(image >= 0))

    def test_constant_scenes_are_exact(self):
        empty = renderer.Luminaire(plenoctree.Plenoctree.empty(UNIT_BOX, 2, 0),
                                   self.act,
                                   proxy=geometry.Sphere((0, 0, 0), 1.0))
        background = np.array([0.3, 0.4, 0.5])
        for luminaires in ([], [empty]):
            scene = renderer.Scene(luminaires=luminaires,
                                   background=background, camera=self.camera)
            for spp in (3, 16):
                cfg = renderer.EstimatorConfig(spp=spp, tile_size=4)
                image, _ = renderer.render(scene, cfg)
                np.testing.assert_array_equal(
                    image, np.broadcast_to(background, image.shape))

    def test_tile_size_does_not_change_image(self):
        images = [renderer.render(self.scene(), renderer.EstimatorConfig(
            spp=2, tile_size=size, seed=3))[0] for size in (3, 4, 16)]
        for image in images[1:]:
            np.testing.assert_allclose(image, images[0], rtol=1e-12,
                                       atol=1e-15)
        other = renderer.render(self.scene(), renderer.EstimatorConfig(
            spp=2, tile_size=4, seed=4))[0]
        self.assertFalse(np.array_equal(other, images[0]))

    def test_reflection_scales_with_albedo(self):
        lamp = renderer.Luminaire(self.tree, self.act,
                                  proxy=geometry.Sphere((0, 0, 0), 1.0),
                                  translation=(0.0, 0.0, 1.0))
        cfg = renderer.EstimatorConfig(spp=2, tile_size=8, seed=6)
        images = []
        for albedo in (0.0, 0.4, 0.8):
            floor = renderer.Surface(geometry.Plane((0, 0, -1), (0, 0, 1)),
                                     renderer.Lambertian(albedo))
            scene = renderer.Scene([floor], [lamp], (0.0, 0.0, 0.0),
                                   self.camera)
            images.append(renderer.render(scene, cfg)[0])
        dim, bright = images[1] - images[0], images[2] - images[0]
        self.assertTrue(np.all(dim >= 0))
        self.assertGreater(dim.max(), 0.0)
        np.testing.assert_allclose(bright, 2.0 * dim, rtol=1e-9, atol=1e-12)

    def test_variance_halves_with_twice_the_samples(self):
        lamp = renderer.Luminaire(self.tree, self.act,
                                  proxy=geometry.Sphere((0, 0, 0), 1.0),
                                  translation=(0.0, 0.0, 2.0))
        scene = renderer.Scene(luminaires=[lamp])
        trials = 4000
        normals = np.tile([0.0, 0.0, 1.0], (trials * 24, 1))
        samples = renderer.estimate_direct(scene, np.zeros_like(normals),
                                           normals, np.random.default_rng(8))
        channel = samples[:, 0]
        coarse = channel[:trials * 8].reshape(trials, 8).mean(axis=1)
        fine = channel[trials * 8:].reshape(trials, 16).mean(axis=1)
        ratio = coarse.var() / fine.var()
        self.assertGreater(ratio, 1.6)
        self.assertLess(ratio, 2.4)

    def test_matches_luminaire_renderer(self):
        camera = dataio.CameraPose.looking_at(dataio.ORTHOGRAPHIC,
                                              (0.0, -3.0, 0.0), (8, 8),
                                              width=4.0)
        scene = renderer.Scene(luminaires=[self.lamp], camera=camera)
        image, _ = renderer.render(scene, renderer.EstimatorConfig(spp=4))
        rgb, _, _ = renderer.render_luminaire(self.tree, camera, self.act,
                                              raymarch.LINEAR)
        # pixels wholly inside the silhouette or wholly outside the box
        inside = np.zeros((8, 8), dtype=bool)
        inside[3:5, 3:5] = True
        outside = np.ones((8, 8), dtype=bool)
        outside[2:6, 2:6] = False
        for mask in (inside, outside):
            np.testing.assert_allclose(image[mask], rgb[mask], rtol=1e-12,
                                       atol=1e-15)
        np.testing.assert_allclose(image[inside], 1.0, rtol=1e-12)

    def test_validate(self):
        with self.assertRaises(SceneError):
            renderer.render(renderer.Scene(luminaires=[self.lamp]),
                            renderer.EstimatorConfig())
        bright = renderer.Surface(geometry.Sphere((0, 0, 0), 1.0),
                                  renderer.Lambertian(1.5))
        with self.assertRaises(SceneError):
            renderer.Scene([bright], camera=self.camera).validate()
        with self.assertRaises(SceneError):
            renderer.Luminaire(self.tree, self.act,
                               proxy=geometry.Plane((0, 0, 0), (0, 0, 1)))

    def test_config(self):
        for kwargs in ({"spp": 0}, {"max_transparency_bounces": -1},
                       {"light_sampling": "bsdf"}, {"tile_size": 0}):
            with self.assertRaises(ConfigError):
                renderer.EstimatorConfig(**kwargs)

    def test_render_luminaire(self):
        camera = dataio.CameraPose.looking_at(dataio.ORTHOGRAPHIC,
                                              (0.0, -3.0, 0.0), (4, 4),
                                              width=4.0)
        rgb, alpha, depth = renderer.render_luminaire(self.tree, camera,
                                                      self.act,
                                                      raymarch.LINEAR)
        inner = np.zeros((4, 4), dtype=bool)
        inner[1:3, 1:3] = True
        np.testing.assert_allclose(alpha[inner], 1.0)
        np.testing.assert_array_equal(alpha[~inner], 0.0)
        np.testing.assert_allclose(rgb[inner], 1.0, rtol=1e-12)
        np.testing.assert_allclose(depth[inner], 2.25)

    def test_rmse(self):
        self.assertEqual(renderer.rmse(np.zeros((2, 2, 3)),
                                       np.ones((2, 2, 3))), 1.0)
        with self.assertRaises(ValueError):
            renderer.rmse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestLoadScene(unittest.TestCase):

    SCENE = textwrap.dedent("""\
        background = [0.1, 0.1, 0.1]

        [camera]
        kind = "perspective"
        position = [0.0, -4.0, 1.0]
        resolution = [8, 6]
        focal = 35.0
        sensor = 36.0

        [render]
        spp = 4
        seed = 7

        [[surfaces]]
        shape = "plane"
        point = [0.0, 0.0, -1.0]
        normal = [0.0, 0.0, 1.0]
        albedo = [0.5, 0.5, 0.5]

        [[luminaires]]
        octree = "lamp.plo"
        max_radiance = 4.0
        translation = [0.0, 0.0, 0.5]
        proxy = {shape = "sphere", center = [0.0, 0.0, 0.0], radius = 1.0}
        """)

    def write(self, tmp, text):
        path = os.path.join(tmp, "scene.toml")
        with open(path, "w") as handle:
            handle.write(text)
        return path

    def test_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            plenoctree.save(opaque_tree(shmath.ExtendedSigmoid(4.0)),
                            os.path.join(tmp, "lamp.plo"))
            scene, cfg = renderer.load_scene(self.write(tmp, self.SCENE))
        self.assertEqual((cfg.spp, cfg.seed), (4, 7))
        self.assertEqual(len(scene.surfaces), 1)
        self.assertEqual(scene.camera.resolution, (8, 6))
        lamp = scene.luminaires[0]
        np.testing.assert_array_equal(lamp.world_proxy.center, [0, 0, 0.5])
        self.assertEqual(lamp.act.max_radiance, 4.0)

    def test_invalid(self):
        broken = (
            self.SCENE.replace("[camera]", "[eye]"),
            self.SCENE.replace('shape = "plane"', 'shape = "torus"'),
            self.SCENE.replace("seed = 7", "colour = 7"),
        )
        with tempfile.TemporaryDirectory() as tmp:
            plenoctree.save(opaque_tree(shmath.ExtendedSigmoid(4.0)),
                            os.path.join(tmp, "lamp.plo"))
            for text in broken:
                with self.assertRaises((SceneError, FormatError)):
                    renderer.load_scene(self.write(tmp, text))


if __name__ == "__main__":
    unittest.main()
