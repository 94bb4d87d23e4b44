"""Cameras, HDR images, metrics and the dataset layout.

A dataset directory holds::

    manifest.txt          TOML: maximum radiance, bbox, near/far, camera
                          intrinsics and the split file lists
    rgb/<name>.pfm        linear HDR radiance
    alpha/<name>.pfm      opacity, single channel
    pose/<name>.txt       4x4 row major camera-to-world matrix
    depth/<name>.pfm      optional expected depth
    normal/<name>.pfm     optional normals

View names start with the split prefix: 0_ train, 1_ validation, 2_ test.
"""

import collections
import logging
import os
import re

import numpy as np
from PIL import Image
from skimage import metrics
from scipy.stats import qmc

from lumifield import geometry
from lumifield import parallel
from lumifield import raymarch
from lumifield import settings
from lumifield.errors import FormatError

logger = logging.getLogger(__name__)

TRAIN = "train"
VAL = "val"
TEST = "test"
SPLIT_PREFIXES = collections.OrderedDict([(TRAIN, "0_"), (VAL, "1_"),
                                          (TEST, "2_")])

ORTHOGRAPHIC = "orthographic"
PERSPECTIVE = "perspective"
CAMERA_KINDS = (ORTHOGRAPHIC, PERSPECTIVE)

MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = 1
ORTHONORMAL_TOLERANCE = 1e-9

_RENDER_CHUNK = 4096
# edge of the Gaussian SSIM window
_SSIM_WINDOW = 11

View = collections.namedtuple(
    "View", ["name", "split", "camera", "rgb", "alpha", "depth", "normal"])


def view_name(split, index):
    return "{}{:04d}".format(SPLIT_PREFIXES[split], index)


class CameraPose:
    """Camera placement and intrinsics.

    The rotation columns are the camera right, up and backward axes in world
    coordinates; the camera looks along minus the third column.

    Attributes:
        kind: ORTHOGRAPHIC or PERSPECTIVE.
        position: (3,) world position.
        rotation: (3, 3) orthonormal camera-to-world rotation.
        resolution: (width, height) in pixels.
        width: orthographic film width in world units.
        focal: perspective focal length in mm.
        sensor: perspective sensor width in mm.
    """

    # pylint: disable=too-many-arguments
    # intrinsics depend on the camera kind

    def __init__(self, kind, position, rotation, resolution, width=None,
                 focal=None, sensor=None):
        if kind not in CAMERA_KINDS:
            raise ValueError("unknown camera kind {!r}".format(kind))
        self.kind = kind
        self.position = np.asarray(position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        error = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if error > ORTHONORMAL_TOLERANCE:
            raise ValueError("camera rotation is not orthonormal")
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ValueError("camera resolution must be two positive values")
        if kind == ORTHOGRAPHIC and not (width and width > 0):
            raise ValueError("orthographic cameras need a positive width")
        if kind == PERSPECTIVE and not (focal and focal > 0
                                        and sensor and sensor > 0):
            raise ValueError("perspective cameras need focal and sensor sizes")
        self.width = width
        self.focal = focal
        self.sensor = sensor

    @classmethod
    def looking_at(cls, kind, position, resolution, target=(0.0, 0.0, 0.0),
                   up=(0.0, 0.0, 1.0), **intrinsics):
        return cls(kind, position, look_at(position, target, up), resolution,
                   **intrinsics)

    @classmethod
    def from_matrix(cls, matrix, kind, resolution, **intrinsics):
        matrix = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(kind, matrix[:3, 3], matrix[:3, :3], resolution,
                   **intrinsics)

    @property
    def view(self):
        return -self.rotation[:, 2]

    def intrinsics(self):
        if self.kind == ORTHOGRAPHIC:
            return {"width": self.width}
        return {"focal": self.focal, "sensor": self.sensor}

    def matrix(self):
        """4x4 camera-to-world matrix."""
        result = np.eye(4)
        result[:3, :3] = self.rotation
        result[:3, 3] = self.position
        return result

    def __repr__(self):
        return "CameraPose({}, position={}, resolution={})".format(
            self.kind, self.position.tolist(), self.resolution)


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Right handed camera-to-world rotation looking from position at target.

    Falls back to up = (0, 1, 0) when the view axis is parallel to up.

    Raises:
        ValueError: if position equals target.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    distance = np.linalg.norm(forward)
    if distance == 0:
        raise ValueError("camera position equals its target")
    forward = forward / distance
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(forward, (0.0, 1.0, 0.0))
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, -forward], axis=1)


def halton_points(n):
    """First n points of the unscrambled 2D Halton sequence (bases 2 and 3),
    skipping the origin."""
    sampler = qmc.Halton(d=2, scramble=False)
    sampler.fast_forward(1)
    return sampler.random(n)


def halton_sphere_cameras(n, radius):
    """Camera positions on a sphere from an equal area warp of Halton points.

    u maps to the azimuth 2 pi u and v to the height z = 2 v - 1.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    points = halton_points(n)
    phi = 2.0 * np.pi * points[:, 0]
    z = 2.0 * points[:, 1] - 1.0
    ring = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return radius * np.stack([ring * np.cos(phi), ring * np.sin(phi), z],
                             axis=-1)


def generate_rays(camera, offsets=None, window=None):
    """One ray per pixel, rows from top to bottom.

    Args:
        camera: CameraPose.
        offsets: optional (h, w, 2) sub-pixel positions in [0, 1); pixel
            centers by default.
        window: optional (row_start, row_stop, col_start, col_stop) limiting
            the rays to a tile of the image.

    Returns:
        Rays with h * w entries in row major order.
    """
    cols, rows = camera.resolution
    row_start, row_stop, col_start, col_stop = window or (0, rows, 0, cols)
    if offsets is None:
        offsets = np.full((row_stop - row_start, col_stop - col_start, 2), 0.5)
    pixel_x = ((np.arange(col_start, col_stop)[None, :] + offsets[..., 0])
               / cols - 0.5)
    pixel_y = 0.5 - ((np.arange(row_start, row_stop)[:, None]
                      + offsets[..., 1]) / rows)
    aspect = rows / cols
    right, up = camera.rotation[:, 0], camera.rotation[:, 1]
    if camera.kind == ORTHOGRAPHIC:
        plane_x = (pixel_x * camera.width).reshape(-1, 1)
        plane_y = (pixel_y * camera.width * aspect).reshape(-1, 1)
        origins = camera.position + plane_x * right + plane_y * up
        dirs = np.broadcast_to(camera.view, origins.shape)
        return raymarch.Rays(origins, dirs)
    local = np.stack([pixel_x * camera.sensor,
                      pixel_y * camera.sensor * aspect,
                      np.full(pixel_x.shape, -float(camera.focal))], axis=-1)
    local = local.reshape(-1, 3)
    dirs = geometry.normalize(local) @ camera.rotation.T
    origins = np.broadcast_to(camera.position, dirs.shape)
    return raymarch.Rays(origins, geometry.normalize(dirs))


def write_hdr(path, image):
    """Write a float image as PFM (little endian, rows bottom to top)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 3:
        kind = b"PF"
    elif image.ndim == 2 or (image.ndim == 3 and image.shape[2] == 1):
        kind = b"Pf"
        image = image.reshape(image.shape[:2])
    else:
        raise ValueError("image must be h x w x 3, h x w x 1 or h x w")
    height, width = image.shape[:2]
    with open(path, "wb") as handle:
        handle.write(kind + b"\n")
        handle.write(b"%d %d\n" % (width, height))
        handle.write(b"-1.0\n")
        handle.write(np.flipud(image).astype("<f4").tobytes())


def read_hdr(path):
    """Read a PFM written by write_hdr or any conforming writer.

    Raises:
        FormatError: on a malformed header or truncated data.
    """
    with open(path, "rb") as handle:
        kind = handle.readline().rstrip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError("{} is not a PFM file".format(path))
        dims = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", handle.readline())
        if not dims:
            raise FormatError("malformed PFM dimensions in {}".format(path))
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(handle.readline().strip())
        except ValueError:
            raise FormatError("malformed PFM scale in {}".format(path))
        if scale == 0:
            raise FormatError("PFM scale must not be zero in {}".format(path))
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        expected = width * height * channels
        payload = handle.read()
    if len(payload) != 4 * expected:
        raise FormatError("PFM {} holds {} bytes of data, expected {}".format(
            path, len(payload), 4 * expected))
    data = np.frombuffer(payload, dtype=dtype)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def psnr(a, b, peak=1.0):
    """Peak signal to noise ratio in dB; inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape: {} vs {}".format(a.shape,
                                                                   b.shape))
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return np.inf
    return 10.0 * np.log10(peak * peak / mse)


def ssim(a, b, data_range=1.0):
    """Mean structural similarity, averaged over channels.

    Uses the Gaussian weighted window (sigma 1.5, 11 pixels). Images smaller
    than that window use the largest odd uniform window that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape: {} vs {}".format(a.shape,
                                                                   b.shape))
    side = min(a.shape[:2])
    if side >= _SSIM_WINDOW:
        window = {"gaussian_weights": True, "sigma": 1.5}
    elif side >= 3:
        window = {"win_size": side if side % 2 else side - 1}
    else:
        raise ValueError("SSIM needs images of at least 3x3 pixels")
    return float(metrics.structural_similarity(
        a, b, data_range=data_range,
        channel_axis=-1 if a.ndim == 3 else None,
        use_sample_covariance=False, **window))


def tonemap(image, exposure=1.0):
    """Reinhard global operator on luminance followed by sRGB encoding."""
    image = np.maximum(np.asarray(image, dtype=np.float64) * exposure, 0.0)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    luminance = image @ np.array([0.2126, 0.7152, 0.0722])
    mapped = np.clip(image / (1.0 + luminance)[..., None], 0.0, 1.0)
    return np.where(mapped <= 0.0031308, 12.92 * mapped,
                    1.055 * mapped ** (1.0 / 2.4) - 0.055)


def write_preview(path, image, exposure=1.0):
    """8-bit PNG preview of a linear HDR image."""
    pixels = (tonemap(image, exposure) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(pixels, "RGB").save(path)
    logger.debug("Wrote preview %s", path)


class DatasetManifest:
    """Dataset level metadata stored in manifest.txt.

    Attributes:
        root: dataset directory.
        splits: mapping of split name to view names.
        max_radiance: maximum scene radiance, used as loss lambda and PSNR peak.
        bbox: (2, 3) bounds of the luminaire.
        near, far: depth range of the cameras.
        camera: dict with kind, resolution and intrinsics.
    """

    # pylint: disable=too-many-arguments

    def __init__(self, root, splits, max_radiance, bbox, near, far, camera):
        self.root = root
        self.splits = collections.OrderedDict(
            (split, list(splits.get(split, []))) for split in SPLIT_PREFIXES)
        for split, names in self.splits.items():
            for name in names:
                if not name.startswith(SPLIT_PREFIXES[split]):
                    raise FormatError("view {!r} does not carry the {} prefix "
                                      "{!r}".format(name, split,
                                                    SPLIT_PREFIXES[split]))
        self.max_radiance = float(max_radiance)
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        self.near = float(near)
        self.far = float(far)
        self.camera = dict(camera)
        if self.camera.get("kind") not in CAMERA_KINDS:
            raise FormatError("manifest camera kind must be one of {}".format(
                ", ".join(CAMERA_KINDS)))

    def camera_for(self, matrix):
        intrinsics = {k: v for k, v in self.camera.items()
                      if k in ("width", "focal", "sensor")}
        return CameraPose.from_matrix(matrix, self.camera["kind"],
                                      self.camera["resolution"], **intrinsics)

    def __repr__(self):
        return "DatasetManifest({}, {})".format(
            self.root, {k: len(v) for k, v in self.splits.items()})


def _number(value):
    return "{:.17g}".format(float(value))


def _vector(values):
    return "[{}]".format(", ".join(_number(v) for v in values))


def write_manifest(manifest):
    """Write manifest.txt into manifest.root."""
    camera = manifest.camera
    lines = [
        "format = {}".format(MANIFEST_FORMAT),
        "max_radiance = {}".format(_number(manifest.max_radiance)),
        "bbox = [{}, {}]".format(_vector(manifest.bbox[0]),
                                 _vector(manifest.bbox[1])),
        "near = {}".format(_number(manifest.near)),
        "far = {}".format(_number(manifest.far)),
        "",
        "[camera]",
        'kind = "{}"'.format(camera["kind"]),
        "resolution = [{}, {}]".format(*camera["resolution"]),
    ]
    for key in ("width", "focal", "sensor"):
        if camera.get(key) is not None:
            lines.append("{} = {}".format(key, _number(camera[key])))
    lines += ["", "[splits]"]
    for split, names in manifest.splits.items():
        lines.append("{} = [{}]".format(
            split, ", ".join('"{}"'.format(name) for name in names)))
    with open(os.path.join(manifest.root, MANIFEST_NAME), "w") as handle:
        handle.write("\n".join(lines) + "\n")


def load_manifest(root):
    """Read manifest.txt of a dataset directory."""
    document = settings.load_toml(os.path.join(root, MANIFEST_NAME))
    if document.get("format") != MANIFEST_FORMAT:
        raise FormatError("unsupported manifest format {!r}".format(
            document.get("format")))
    try:
        return DatasetManifest(root, document.get("splits", {}),
                               document["max_radiance"], document["bbox"],
                               document["near"], document["far"],
                               document["camera"])
    except (KeyError, TypeError, ValueError) as error:
        raise FormatError("invalid manifest in {}: {}".format(root, error))


def write_pose(path, camera):
    with open(path, "w") as handle:
        for row in camera.matrix():
            handle.write(" ".join(_number(v) for v in row) + "\n")


def read_pose(path):
    try:
        matrix = np.loadtxt(path, dtype=np.float64)
    except ValueError as error:
        raise FormatError("malformed pose {}: {}".format(path, error))
    if matrix.shape != (4, 4):
        raise FormatError("pose {} is not a 4x4 matrix".format(path))
    return matrix


def _image_path(root, folder, name, extension=".pfm"):
    return os.path.join(root, folder, name + extension)


def write_view(root, view):
    """Write the images and pose of one view into the dataset layout."""
    for folder in ("rgb", "alpha", "pose"):
        os.makedirs(os.path.join(root, folder), exist_ok=True)
    write_hdr(_image_path(root, "rgb", view.name), view.rgb)
    write_hdr(_image_path(root, "alpha", view.name), view.alpha)
    write_pose(_image_path(root, "pose", view.name, ".txt"), view.camera)
    for folder, image in (("depth", view.depth), ("normal", view.normal)):
        if image is not None:
            os.makedirs(os.path.join(root, folder), exist_ok=True)
            write_hdr(_image_path(root, folder, view.name), image)


def load_split(root, split, manifest=None):
    """Views of one split, with depth and normal maps when present."""
    manifest = manifest or load_manifest(root)
    views = []
    for name in manifest.splits[split]:
        camera = manifest.camera_for(read_pose(_image_path(root, "pose", name,
                                                           ".txt")))
        extras = []
        for folder in ("depth", "normal"):
            path = _image_path(root, folder, name)
            extras.append(read_hdr(path) if os.path.exists(path) else None)
        views.append(View(name, split, camera,
                          read_hdr(_image_path(root, "rgb", name)),
                          read_hdr(_image_path(root, "alpha", name)), *extras))
    logger.debug("Loaded %d %s views from %s", len(views), split, root)
    return views


def render_view(source, camera, act, model, n_samples, threads=None):
    """Ground truth images of a queryable field seen by a camera.

    Rays are clipped to the field bounding box and marched with n_samples
    stratum midpoints.

    Returns:
        (rgb, alpha, depth) with shapes (h, w, 3), (h, w) and (h, w).
    """
    cols, rows = camera.resolution
    rays = raymarch.clip_to_proxy(generate_rays(camera),
                                  geometry.Box(*np.reshape(source.bbox,
                                                           (2, 3))))

    def march(part):
        return raymarch.march(rays[part], source, model, act, n_samples)

    results = parallel.ordered_map(
        march, parallel.chunk_slices(len(rays), _RENDER_CHUNK), threads)
    rgb = np.concatenate([r.radiance for r in results]).reshape(rows, cols, 3)
    alpha = np.concatenate([r.alpha for r in results]).reshape(rows, cols)
    depth = np.concatenate([r.expected_depth for r in results])
    return rgb, alpha, depth.reshape(rows, cols)
