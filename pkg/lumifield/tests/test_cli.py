"""End to end tests of the command line interface on tiny problems."""

import csv
import io
import os
import shutil
import tempfile
import textwrap
import unittest
from unittest import mock

import numpy as np

from lumifield import cli
from lumifield import dataio
from lumifield import field
from lumifield import plenoctree


def run(*argv):
    """Run the CLI and return (status, stdout, stderr)."""
    with mock.patch("sys.stdout", new_callable=io.StringIO) as stdout, \
            mock.patch("sys.stderr", new_callable=io.StringIO) as stderr:
        status = cli.main([str(arg) for arg in argv])
    return status, stdout.getvalue(), stderr.getvalue()


def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


class TestCommands(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.dataset = os.path.join(cls.tmp, "sphere")
        status, _, stderr = run(
            "gen-dataset", "--field", "sphere", "--n-views", 3, "--n-test", 2,
            "--res", 6, "--samples", 16, "--max-radiance", 4.0,
            "--out", cls.dataset, "--threads", 1)
        assert status == 0, stderr

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def test_gen_dataset(self):
        manifest = dataio.load_manifest(self.dataset)
        self.assertEqual(manifest.splits[dataio.TRAIN],
                         ["0_0000", "0_0001", "0_0002"])
        self.assertEqual(len(manifest.splits[dataio.TEST]), 2)
        self.assertAlmostEqual(manifest.near, 3.0 - np.sqrt(3.0))
        self.assertAlmostEqual(manifest.far, 3.0 + np.sqrt(3.0))
        self.assertAlmostEqual(manifest.camera["width"], 2.0 * np.sqrt(3.0))
        view = dataio.load_split(self.dataset, dataio.TEST, manifest)[0]
        self.assertEqual(view.rgb.shape, (6, 6, 3))
        self.assertTrue(np.all((view.alpha >= 0) & (view.alpha <= 1)))
        self.assertGreater(view.alpha.max(), 0.9)

    def test_gen_dataset_activations(self):
        # the opaque center ray shows half the sphere emission
        expected = 0.5 * np.array([0.9, 0.75, 0.5]) * 4.0
        for activation in ("sigmoid", "exp", "logsigmoid"):
            out = self.path("sphere-" + activation)
            status, _, stderr = run(
                "gen-dataset", "--field", "sphere", "--n-views", 1,
                "--n-test", 0, "--res", 5, "--samples", 64,
                "--max-radiance", 4.0, "--activation", activation,
                "--out", out)
            self.assertEqual(status, 0, stderr)
            view, = dataio.load_split(out, dataio.TRAIN)
            np.testing.assert_allclose(view.rgb.reshape(-1, 3).max(axis=0),
                                       expected, rtol=1e-5)

    def test_existing_output(self):
        status, _, stderr = run("gen-dataset", "--field", "sphere",
                                "--out", self.dataset)
        self.assertEqual(status, 1)
        self.assertTrue(stderr.startswith("lumifield: error: ConfigError: "))
        self.assertEqual(stderr.count("\n"), 1)

    def test_camera_inside_bbox(self):
        status, _, stderr = run("gen-dataset", "--field", "sphere",
                                "--radius", 1.5, "--out", self.path("near"))
        self.assertEqual(status, 1)
        self.assertIn("half diagonal", stderr)

    def test_fit_without_iterations(self):
        out = self.path("zero.lfg")
        status, _, _ = run("fit", "--dataset", self.dataset, "--res", 4,
                           "--lmax", 0, "--iters", 0, "--out", out)
        self.assertEqual(status, 0)
        grid = field.load_grid(out)
        self.assertEqual(grid.resolution, (4, 4, 4))
        np.testing.assert_allclose(grid.sigma, 0.1, rtol=1e-6)
        np.testing.assert_array_equal(grid.sh, 0.0)

    def test_fit_resume_and_extract(self):
        first = self.path("first.lfg")
        checkpoint = self.path("first.ckpt")
        options = ("--dataset", self.dataset, "--res", 4, "--lmax", 1,
                   "--batch-rays", 32, "--n-coarse", 8, "--n-fine", 8,
                   "--threads", 2)
        status, stdout, stderr = run("fit", *options, "--iters", 2,
                                     "--out", first, "--checkpoint",
                                     checkpoint, "--log", self.path("a.csv"))
        self.assertEqual(status, 0, stderr)
        self.assertIn("iteration 1", stdout)
        rows = read_csv(self.path("a.csv"))
        self.assertEqual(rows[0], ["iteration", "coarse", "fine", "alpha",
                                   "total", "lr"])
        self.assertEqual([row[0] for row in rows[1:]], ["0", "1"])

        status, _, stderr = run("fit", *options, "--iters", 3, "--resume",
                                checkpoint, "--out", self.path("second.lfg"),
                                "--log", self.path("b.csv"))
        self.assertEqual(status, 0, stderr)
        self.assertEqual([row[0] for row in read_csv(self.path("b.csv"))[1:]],
                         ["2"])

        tree_path = self.path("first.plo")
        status, stdout, _ = run("extract", "--grid", first, "--depth", 2,
                                "--refine-samples", 2, "--prune-sigma", 0.0,
                                "--out", tree_path)
        self.assertEqual(status, 0)
        self.assertIn("leaves", stdout)
        tree = plenoctree.load(tree_path)
        self.assertEqual((tree.max_depth, tree.l_max), (2, 1))
        self.assertEqual(tree.n_leaves, 64)

    def test_config_file(self):
        grid = field.init_grid(4, ((-1, -1, -1), (1, 1, 1)), 0,
                               field.Constant(1.0))
        grid_path = self.path("config.lfg")
        field.save_grid(grid_path, grid)
        config = self.path("lumifield.toml")
        with open(config, "w") as handle:
            handle.write("[extract]\ndepth = 1\nrefine_samples = 2\n")
        tree_path = self.path("config.plo")
        status, _, _ = run("extract", "--grid", grid_path, "--config", config,
                           "--out", tree_path)
        self.assertEqual(status, 0)
        self.assertEqual(plenoctree.load(tree_path).max_depth, 1)
        with open(config, "w") as handle:
            handle.write("[extract]\nlevels = 1\n")
        status, _, stderr = run("extract", "--grid", grid_path, "--config",
                                config, "--out", tree_path)
        self.assertEqual(status, 1)
        self.assertIn("ConfigError", stderr)

    def test_eval_identical(self):
        log = self.path("eval.csv")
        status, stdout, _ = run("eval", "--pred-dir", self.dataset, "--gt-dir",
                                self.dataset, "--log", log)
        self.assertEqual(status, 0)
        self.assertIn("mean", stdout)
        rows = read_csv(log)
        self.assertEqual(rows[0], ["view", "psnr", "ssim", "rmse",
                                   "alpha_rmse"])
        self.assertEqual([row[0] for row in rows[1:]],
                         ["2_0000", "2_0001", "mean"])
        for row in rows[1:]:
            self.assertEqual(float(row[1]), np.inf)
            self.assertAlmostEqual(float(row[2]), 1.0, places=9)
            self.assertEqual(float(row[3]), 0.0)
            self.assertEqual(float(row[4]), 0.0)

    def sphere_tree(self):
        tree_path = self.path("toy.plo")
        if not os.path.exists(tree_path):
            grid_path = self.path("toy.lfg")
            field.save_grid(grid_path, field.init_grid(
                4, ((-1, -1, -1), (1, 1, 1)), 0, field.Constant(2.0)))
            status, _, _ = run("extract", "--grid", grid_path, "--depth", 2,
                               "--refine-samples", 1, "--out", tree_path)
            self.assertEqual(status, 0)
        return tree_path

    def test_render_octree_then_eval(self):
        out = self.path("predicted")
        status, stdout, stderr = run(
            "render", "--octree", self.sphere_tree(), "--dataset",
            self.dataset, "--split", "test", "--out", out)
        self.assertEqual(status, 0, stderr)
        self.assertIn("wrote 2 views", stdout)
        self.assertEqual(dataio.load_manifest(out).splits[dataio.TEST],
                         ["2_0000", "2_0001"])
        status, stdout, _ = run("eval", "--pred-dir", out, "--gt-dir",
                                self.dataset, "--peak", 4.0)
        self.assertEqual(status, 0)
        self.assertEqual(len(stdout.strip().splitlines()), 4)

    def scene_file(self):
        scene = self.path("scene.toml")
        with open(scene, "w") as handle:
            handle.write(textwrap.dedent("""\
                [camera]
                kind = "perspective"
                position = [0.0, -4.0, 1.0]
                resolution = [5, 4]
                focal = 35.0
                sensor = 36.0

                [render]
                spp = 2
                tile_size = 3

                [[surfaces]]
                shape = "plane"
                point = [0.0, 0.0, -1.5]
                normal = [0.0, 0.0, 1.0]

                [[luminaires]]
                octree = "toy.plo"
                max_radiance = 4.0
                """))
        self.sphere_tree()
        return scene

    def test_render_scene(self):
        scene = self.scene_file()
        image = self.path("scene.pfm")
        log = self.path("tiles.csv")
        status, _, stderr = run("render", "--scene", scene, "--out", image,
                                "--preview", self.path("scene.png"),
                                "--log", log, "--spp", 1)
        self.assertEqual(status, 0, stderr)
        rendered = dataio.read_hdr(image)
        self.assertEqual(rendered.shape, (4, 5, 3))
        self.assertTrue(np.all(np.isfinite(rendered)))
        self.assertTrue(os.path.exists(self.path("scene.png")))
        self.assertEqual(len(read_csv(log)), 1 + 4)

    def test_render_scene_reads_config_table(self):
        scene = self.scene_file()
        config = self.path("render.toml")
        with open(config, "w") as handle:
            handle.write("[render]\nspp = 3\nseed = 4\n")
        images = {}
        for name, extra in (("config", ("--config", config)),
                            ("flag", ("--config", config, "--spp", 5)),
                            ("seed", ("--spp", 3, "--seed", 4))):
            images[name] = self.path("{}.pfm".format(name))
            with self.assertLogs("lumifield.renderer", "INFO") as logs:
                status, _, stderr = run("render", "--scene", scene, "--out",
                                        images[name], *extra)
            self.assertEqual(status, 0, stderr)
            spp = 5 if name == "flag" else 3
            self.assertTrue(any("at {} spp".format(spp) in line
                                for line in logs.output))
        np.testing.assert_array_equal(dataio.read_hdr(images["config"]),
                                      dataio.read_hdr(images["seed"]))

    def test_render_needs_one_source(self):
        status, _, stderr = run("render", "--out", self.path("nothing.pfm"))
        self.assertEqual(status, 1)
        self.assertIn("--scene or --octree", stderr)

    def test_bench(self):
        log = self.path("bench.csv")
        status, stdout, _ = run("bench", "--octree", self.sphere_tree(),
                                "--rays", 300, "--max-radiance", 4.0,
                                "--log", log)
        self.assertEqual(status, 0)
        self.assertIn("thresholded", stdout)
        rows = read_csv(log)
        self.assertEqual([row[0] for row in rows[1:]], ["full", "thresholded"])
        self.assertLessEqual(float(rows[2][2]), float(rows[1][2]))


if __name__ == "__main__":
    unittest.main()
