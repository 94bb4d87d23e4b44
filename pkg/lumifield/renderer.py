"""Monte Carlo direct illumination with plenoctree luminaires.

A luminaire is an octree wrapped in a convex proxy shape. Camera rays that
enter a proxy pick up the emission accumulated along the interior chord and
continue straight behind it, attenuated by one minus the chord opacity.
Surfaces are Lambertian and receive next event estimation from uniform
samples on the luminaire proxies; shadow rays are attenuated by the opacity
of other luminaires they cross.
"""

import dataclasses
import logging
import os
import time

import numpy as np

from lumifield import dataio
from lumifield import geometry
from lumifield import parallel
from lumifield import plenoctree
from lumifield import raymarch
from lumifield import settings
from lumifield import shmath
from lumifield.errors import ConfigError, FormatError, SceneError

logger = logging.getLogger(__name__)

UNIFORM_PROXY_AREA = "uniform-proxy-area"

# rays per luminaire evaluation in the luminaire-only renderer
_LUMINAIRE_CHUNK = 4096


@dataclasses.dataclass(frozen=True)
class EstimatorConfig:
    """Render settings.

    Attributes:
        spp: camera samples per pixel, each with one light sample per
            luminaire.
        max_transparency_bounces: proxies crossed by a camera ray before
            further proxies are ignored.
        light_sampling: only uniform proxy area sampling is available.
        seed: base of the per pixel random streams.
        tile_size: tile edge in pixels.
    """

    spp: int = 16
    max_transparency_bounces: int = 8
    light_sampling: str = UNIFORM_PROXY_AREA
    seed: int = 0
    tile_size: int = 16

    def __post_init__(self):
        if self.spp < 1:
            raise ConfigError("spp must be >= 1")
        if self.max_transparency_bounces < 0:
            raise ConfigError("max_transparency_bounces must be >= 0")
        if self.light_sampling != UNIFORM_PROXY_AREA:
            raise ConfigError("unknown light sampling {!r}".format(
                self.light_sampling))
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")


class Lambertian:
    """Diffuse material with optional constant emission."""

    def __init__(self, albedo, emission=(0.0, 0.0, 0.0)):
        self.albedo = np.broadcast_to(np.asarray(albedo, np.float64), (3,))
        self.emission = np.broadcast_to(np.asarray(emission, np.float64), (3,))

    def __repr__(self):
        return "Lambertian(albedo={})".format(self.albedo.tolist())


class Surface:

    def __init__(self, shape, material):
        self.shape = shape
        self.material = material

    def __repr__(self):
        return "Surface({!r}, {!r})".format(self.shape, self.material)


def _translated(proxy, offset):
    if isinstance(proxy, geometry.Sphere):
        return geometry.Sphere(proxy.center + offset, proxy.radius)
    if isinstance(proxy, geometry.Box):
        return geometry.Box(proxy.lo + offset, proxy.hi + offset)
    raise SceneError("luminaire proxies must be spheres or boxes")


class Luminaire:
    """Octree luminaire inside a proxy shape.

    The tree and the proxy live in the luminaire frame, which is placed in
    the scene by translation.
    """

    # pylint: disable=too-many-arguments

    def __init__(self, tree, act, model=raymarch.LINEAR, proxy=None,
                 sigma_min=0.0, alpha_max=1.0, translation=(0.0, 0.0, 0.0)):
        raymarch.check_model(model)
        self.tree = tree
        self.act = act
        self.model = model
        self.proxy = proxy or geometry.Box(*tree.bbox)
        self.sigma_min = sigma_min
        self.alpha_max = alpha_max
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        self.world_proxy = _translated(self.proxy, self.translation)

    def along(self, origins, dirs, t_near, t_far):
        """MarchResult of world rays restricted to [t_near, t_far]."""
        rays = raymarch.Rays(origins - self.translation, dirs, t_near, t_far)
        return plenoctree.traverse(self.tree, rays, self.act, self.model,
                                   self.sigma_min, self.alpha_max)

    def __repr__(self):
        return "Luminaire({!r}, proxy={!r})".format(self.tree, self.world_proxy)


class Scene:
    """Surfaces, luminaires, a constant background and a camera."""

    def __init__(self, surfaces=(), luminaires=(), background=(0.0, 0.0, 0.0),
                 camera=None):
        self.surfaces = list(surfaces)
        self.luminaires = list(luminaires)
        self.background = np.broadcast_to(np.asarray(background, np.float64),
                                          (3,))
        self.camera = camera

    def validate(self):
        """Raise SceneError on a missing camera, invalid albedo or a proxy
        that cannot be area sampled."""
        if self.camera is None:
            raise SceneError("scene has no camera")
        for surface in self.surfaces:
            albedo = surface.material.albedo
            if np.any(albedo < 0) or np.any(albedo > 1):
                raise SceneError("albedo must be within [0, 1]")
        for luminaire in self.luminaires:
            area = luminaire.world_proxy.area
            if not (np.isfinite(area) and area > 0):
                raise SceneError("luminaire proxy {!r} has no usable area"
                                 .format(luminaire.world_proxy))
        return self

    def intersect_surfaces(self, origins, dirs):
        """Nearest surface hit: (t, normal, surface index or -1)."""
        count = len(origins)
        t_best = np.full(count, np.inf)
        normals = np.zeros((count, 3))
        index = np.full(count, -1)
        for position, surface in enumerate(self.surfaces):
            t, normal = surface.shape.first_hit(origins, dirs)
            closer = t < t_best
            t_best = np.where(closer, t, t_best)
            normals[closer] = normal[closer]
            index[closer] = position
        return t_best, normals, index


def luminaire_radiance(lum, hit_point, outgoing):
    """Emission and opacity seen along -outgoing from points on the proxy.

    Args:
        lum: Luminaire.
        hit_point: (N, 3) or (3,) world points on the proxy surface.
        outgoing: (N, 3) or (3,) unit directions toward the viewer.

    Returns:
        (radiance (N, 3), alpha (N,)); single point inputs give (3,) and a
        float. Degenerate chords give zero.
    """
    single = np.ndim(hit_point) == 1
    points = np.atleast_2d(np.asarray(hit_point, dtype=np.float64))
    dirs = -np.atleast_2d(np.asarray(outgoing, dtype=np.float64))
    t_near, t_far, hit = lum.world_proxy.intersect(points, dirs)
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    result = lum.along(points, dirs, t_near, t_far)
    if single:
        return result.radiance[0], float(result.alpha[0])
    return result.radiance, result.alpha


def transmission(scene, origins, dirs, distance, skip=None):
    """Fraction of light passing from origins to origins + distance * dirs.

    Surfaces block completely; luminaire proxies other than skip attenuate
    by one minus their chord opacity.
    """
    visible = np.ones(len(origins))
    if scene.surfaces:
        t_surface, _, _ = scene.intersect_surfaces(origins, dirs)
        visible[t_surface < distance * (1.0 - 1e-7)] = 0.0
    for luminaire in scene.luminaires:
        if luminaire is skip:
            continue
        t_near, t_far, hit = luminaire.world_proxy.intersect(origins, dirs)
        t_far = np.minimum(t_far, distance)
        rows = np.nonzero(hit & (t_far > t_near) & (visible > 0))[0]
        if len(rows):
            result = luminaire.along(origins[rows], dirs[rows], t_near[rows],
                                     t_far[rows])
            visible[rows] *= 1.0 - result.alpha
    return visible


def estimate_direct(scene, points, normals, rng, albedo=None, uniforms=None):
    """One sample next event estimate of reflected radiance per luminaire.

    A point y is drawn uniformly on each luminaire proxy (pdf 1 / area).
    Only proxy points facing the shading point contribute, since the chord
    entering the proxy there carries all emission arriving from y's
    direction.

    Args:
        scene: Scene.
        points: (N, 3) shading points.
        normals: (N, 3) unit normals on the side of the incoming ray.
        rng: numpy Generator.
        albedo: (N, 3) or (3,) Lambertian albedo, 1 by default.
        uniforms: optional (N, n_luminaires, 2) uniforms for the proxy
            samples; drawn from rng when None.

    Returns:
        (N, 3) reflected radiance estimate.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    albedo = np.ones(3) if albedo is None else albedo
    count = len(points)
    result = np.zeros((count, 3))
    for position, luminaire in enumerate(scene.luminaires):
        proxy = luminaire.world_proxy
        u = (rng.random((count, 2)) if uniforms is None
             else uniforms[:, position])
        samples, sample_normals = proxy.sample_surface(u)
        offset = samples - points
        distance = np.linalg.norm(offset, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            to_light = offset / distance[:, None]
        cos_x = np.einsum("ij,ij->i", to_light, normals)
        cos_y = -np.einsum("ij,ij->i", to_light, sample_normals)
        rows = np.nonzero((distance > 0) & (cos_x > 0) & (cos_y > 0))[0]
        if not len(rows):
            continue
        emitted, _ = luminaire_radiance(luminaire, samples[rows],
                                        -to_light[rows])
        visible = transmission(scene, points[rows], to_light[rows],
                               distance[rows], skip=luminaire)
        geometric = cos_x[rows] * cos_y[rows] / distance[rows] ** 2
        weight = visible * geometric * proxy.area / np.pi
        reflect = albedo[rows] if np.ndim(albedo) == 2 else albedo
        result[rows] += reflect * emitted * weight[:, None]
    return result


def trace(scene, rays, rng, cfg, light_uniforms=None):
    """Radiance arriving along camera rays.

    Args:
        scene: Scene.
        rays: camera Rays.
        rng: numpy Generator for light samples; unused with light_uniforms.
        cfg: EstimatorConfig.
        light_uniforms: optional (N, n_luminaires, 2) uniforms used instead
            of rng for the light sample of each ray.
    """
    count = len(rays)
    origins = rays.origins.copy()
    dirs = rays.dirs
    radiance = np.zeros((count, 3))
    throughput = np.ones(count)
    bounces = np.zeros(count, dtype=np.int64)
    last = np.full(count, -1)
    active = np.ones(count, dtype=bool)

    while np.any(active):
        ids = np.nonzero(active)[0]
        ray_origins, ray_dirs = origins[ids], dirs[ids]
        t_surface, normals, surface_index = scene.intersect_surfaces(
            ray_origins, ray_dirs)

        t_proxy = np.full(len(ids), np.inf)
        t_exit = np.zeros(len(ids))
        proxy_index = np.full(len(ids), -1)
        may_cross = bounces[ids] < cfg.max_transparency_bounces
        for position, luminaire in enumerate(scene.luminaires):
            t_near, t_far, hit = luminaire.world_proxy.intersect(ray_origins,
                                                                 ray_dirs)
            closer = (hit & may_cross & (last[ids] != position)
                      & (t_far > t_near) & (t_near < t_proxy))
            t_proxy = np.where(closer, t_near, t_proxy)
            t_exit = np.where(closer, t_far, t_exit)
            proxy_index = np.where(closer, position, proxy_index)

        crossing = (proxy_index >= 0) & (t_proxy < t_surface)
        for position, luminaire in enumerate(scene.luminaires):
            rows = np.nonzero(crossing & (proxy_index == position))[0]
            if not len(rows):
                continue
            result = luminaire.along(ray_origins[rows], ray_dirs[rows],
                                     t_proxy[rows], t_exit[rows])
            global_rows = ids[rows]
            radiance[global_rows] += (throughput[global_rows, None]
                                      * result.radiance)
            throughput[global_rows] *= 1.0 - result.alpha
            origins[global_rows] = (ray_origins[rows]
                                    + ray_dirs[rows] * t_exit[rows, None])
            last[global_rows] = position
            bounces[global_rows] += 1
            active[global_rows] = throughput[global_rows] > 0

        surface_rows = np.nonzero(~crossing & np.isfinite(t_surface))[0]
        if len(surface_rows):
            hits = (ray_origins[surface_rows]
                    + ray_dirs[surface_rows] * t_surface[surface_rows, None])
            facing = normals[surface_rows]
            flip = np.einsum("ij,ij->i", facing, ray_dirs[surface_rows]) > 0
            facing[flip] *= -1.0
            materials = [scene.surfaces[i].material
                         for i in surface_index[surface_rows]]
            albedo = np.array([m.albedo for m in materials])
            emission = np.array([m.emission for m in materials])
            global_rows = ids[surface_rows]
            uniforms = (None if light_uniforms is None
                        else light_uniforms[global_rows])
            shaded = emission + estimate_direct(scene, hits, facing, rng,
                                                albedo, uniforms)
            radiance[global_rows] += throughput[global_rows, None] * shaded
            active[global_rows] = False

        miss_rows = ids[~crossing & ~np.isfinite(t_surface)]
        radiance[miss_rows] += throughput[miss_rows, None] * scene.background
        active[miss_rows] = False
    return radiance


def _tiles(resolution, tile_size):
    cols, rows = resolution
    return [(row, min(row + tile_size, rows), col, min(col + tile_size, cols))
            for row in range(0, rows, tile_size)
            for col in range(0, cols, tile_size)]


def _pixel_uniforms(seed, window, spp, n_luminaires):
    """Uniforms of every pixel in a window, one stream per pixel.

    Streams are keyed by (seed, row, column), so a pixel gets the same
    samples whatever the tiling. Each sample uses two uniforms for the
    pixel offset and two per luminaire for the light sample.
    """
    row0, row1, col0, col1 = window
    shape = (spp, 2 + 2 * n_luminaires)
    return np.stack([np.random.default_rng([seed, row, col]).random(shape)
                     for row in range(row0, row1)
                     for col in range(col0, col1)])


def render(scene, cfg, threads=None, progress=False, log_rows=None):
    """Render the scene from its camera.

    Tiles are rendered in parallel. Every pixel draws its samples from its
    own random stream keyed by (seed, row, column), so images do not depend
    on the tile size or thread count, and a single pixel can be re-rendered
    alone. Samples are averaged with a running mean, which reproduces a
    constant sample sequence exactly.

    Args:
        scene: Scene.
        cfg: EstimatorConfig.
        threads: worker cap.
        progress: show a progress bar.
        log_rows: optional list receiving (tile, seconds) rows.

    Returns:
        (image (h, w, 3), sample counts (h, w)).
    """
    scene.validate()
    camera = scene.camera
    cols, rows = camera.resolution
    tiles = _tiles(camera.resolution, cfg.tile_size)
    n_luminaires = len(scene.luminaires)

    def work(window):
        started = time.perf_counter()
        height = window[1] - window[0]
        width = window[3] - window[2]
        uniforms = _pixel_uniforms(cfg.seed, window, cfg.spp, n_luminaires)
        mean = np.zeros((height * width, 3))
        for sample in range(cfg.spp):
            offsets = uniforms[:, sample, :2].reshape(height, width, 2)
            rays = dataio.generate_rays(camera, offsets, window)
            light = uniforms[:, sample, 2:].reshape(len(uniforms),
                                                    n_luminaires, 2)
            radiance = trace(scene, rays, None, cfg, light)
            mean += (radiance - mean) / (sample + 1)
        return mean, time.perf_counter() - started

    results = parallel.ordered_map(work, tiles, threads,
                                   "render" if progress else None)
    image = np.zeros((rows, cols, 3))
    for index, ((row0, row1, col0, col1), (pixels, seconds)) in enumerate(
            zip(tiles, results)):
        image[row0:row1, col0:col1] = pixels.reshape(row1 - row0,
                                                     col1 - col0, 3)
        if log_rows is not None:
            log_rows.append((index, seconds))
    logger.info("Rendered %dx%d pixels at %d spp in %d tiles", cols, rows,
                cfg.spp, len(tiles))
    return image, np.full((rows, cols), cfg.spp, dtype=np.int64)


def render_luminaire(tree, camera, act, model, sigma_min=0.0, alpha_max=1.0,
                     threads=None):
    """Emission, opacity and depth of a luminaire alone seen by a camera."""
    cols, rows = camera.resolution
    rays = raymarch.clip_to_proxy(dataio.generate_rays(camera),
                                  geometry.Box(*tree.bbox))

    def work(part):
        return plenoctree.traverse(tree, rays[part], act, model, sigma_min,
                                   alpha_max)

    results = parallel.ordered_map(
        work, parallel.chunk_slices(len(rays), _LUMINAIRE_CHUNK), threads)
    rgb = np.concatenate([r.radiance for r in results]).reshape(rows, cols, 3)
    alpha = np.concatenate([r.alpha for r in results]).reshape(rows, cols)
    depth = np.concatenate([r.expected_depth for r in results])
    return rgb, alpha, depth.reshape(rows, cols)


def rmse(image_a, image_b):
    """Root mean square error over all pixels and channels."""
    image_a = np.asarray(image_a, dtype=np.float64)
    image_b = np.asarray(image_b, dtype=np.float64)
    if image_a.shape != image_b.shape:
        raise ValueError("images differ in shape: {} vs {}".format(
            image_a.shape, image_b.shape))
    return float(np.sqrt(np.mean((image_a - image_b) ** 2)))


def _vec(table, key, default=None):
    value = table.get(key, default)
    if value is None:
        raise SceneError("missing {!r}".format(key))
    value = np.asarray(value, dtype=np.float64)
    if value.shape != (3,):
        raise SceneError("{!r} must hold three numbers".format(key))
    return value


def _shape(table):
    kind = table.get("shape")
    if kind == "sphere":
        return geometry.Sphere(_vec(table, "center"), float(table["radius"]))
    if kind == "box":
        return geometry.Box(_vec(table, "min"), _vec(table, "max"))
    if kind == "plane":
        return geometry.Plane(_vec(table, "point"), _vec(table, "normal"))
    if kind == "triangles":
        return geometry.Triangles(np.asarray(table["vertices"], np.float64))
    raise SceneError("unknown shape {!r}".format(kind))


def _camera(table):
    kind = table.get("kind", dataio.PERSPECTIVE)
    intrinsics = {key: float(table[key]) for key in ("width", "focal",
                                                     "sensor") if key in table}
    try:
        return dataio.CameraPose.looking_at(
            kind, _vec(table, "position"), table.get("resolution", (64, 64)),
            _vec(table, "target", (0.0, 0.0, 0.0)),
            _vec(table, "up", (0.0, 0.0, 1.0)), **intrinsics)
    except ValueError as error:
        raise SceneError("invalid camera: {}".format(error))


def _luminaire(table, base):
    path = table.get("octree")
    if not path:
        raise SceneError("luminaire without an octree path")
    tree = plenoctree.load(os.path.join(base, path))
    try:
        act = shmath.make_activation(table.get("activation", "sigmoid"),
                                     table.get("max_radiance"),
                                     table.get("logsig_eps", 1e-6))
    except ValueError as error:
        raise SceneError(str(error))
    proxy = None
    if "proxy" in table:
        proxy = _shape(table["proxy"])
        if not isinstance(proxy, (geometry.Sphere, geometry.Box)):
            raise SceneError("luminaire proxies must be spheres or boxes")
    return Luminaire(tree, act, table.get("model", raymarch.LINEAR), proxy,
                     float(table.get("sigma_min", 0.0)),
                     float(table.get("alpha_max", 1.0)),
                     _vec(table, "translation", (0.0, 0.0, 0.0)))


def load_scene(path):
    """Read a TOML scene description.

    Returns:
        (Scene, EstimatorConfig); octree paths are relative to the scene
        file.
    """
    document = settings.load_toml(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        if "camera" not in document:
            raise SceneError("scene has no camera")
        surfaces = []
        for table in document.get("surfaces", []):
            material = Lambertian(_vec(table, "albedo", (0.8, 0.8, 0.8)),
                                  _vec(table, "emission", (0.0, 0.0, 0.0)))
            surfaces.append(Surface(_shape(table), material))
        luminaires = [_luminaire(table, base)
                      for table in document.get("luminaires", [])]
        scene = Scene(surfaces, luminaires,
                      _vec(document, "background", (0.0, 0.0, 0.0)),
                      _camera(document["camera"]))
        cfg = EstimatorConfig(**document.get("render", {}))
    except (KeyError, TypeError) as error:
        raise FormatError("invalid scene {}: {!r}".format(path, error))
    logger.info("Loaded scene %s with %d surfaces and %d luminaires", path,
                len(scene.surfaces), len(scene.luminaires))
    return scene.validate(), cfg
