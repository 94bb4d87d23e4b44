"""Command defaults and the TOML configuration layer.

Every command has a frozen dataclass of defaults. A config file may hold one
table per command; values are resolved as flag > config table > default.
"""

import dataclasses
import logging

from lumifield.errors import ConfigError, FormatError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class GenDatasetSettings:
    field: str = "banded-sphere"
    n_views: int = 32
    n_val: int = 0
    n_test: int = 8
    radius: float = 3.0
    res: int = 128
    width: float = 0.0
    max_radiance: float = 10.0
    lmax: int = 0
    samples: int = 512
    model: str = "linear"
    activation: str = "sigmoid"
    camera: str = "orthographic"
    focal: float = 50.0
    sensor: float = 36.0


@dataclasses.dataclass(frozen=True)
class FitSettings:
    res: int = 32
    lmax: int = 2
    iters: int = 20000
    seed: int = 0
    batch_rays: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    lr_start: float = 0.1
    lr_end: float = 1e-3
    eps: float = 0.01
    loss: str = "hdr"
    beta: float = 1.0
    alpha_weight: float = 1.0
    denominator_gradient: bool = False
    model: str = "linear"
    activation: str = "sigmoid"
    logsig_eps: float = 1e-6
    interpolation: str = "trilinear"
    init_sigma: float = 0.1
    log_every: int = 100


@dataclasses.dataclass(frozen=True)
class ExtractSettings:
    depth: int = 7
    prune_sigma: float = 0.01
    refine_samples: int = 256
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class RenderSettings:
    spp: int = 16
    seed: int = 0
    max_transparency_bounces: int = 8
    sigma_min: float = 0.1
    alpha_max: float = 0.9
    model: str = "linear"
    activation: str = "sigmoid"
    split: str = "test"


@dataclasses.dataclass(frozen=True)
class BenchSettings:
    rays: int = 10000
    seed: int = 0
    sigma_min: float = 0.1
    alpha_max: float = 0.9
    model: str = "linear"
    activation: str = "sigmoid"
    max_radiance: float = 1.0


COMMAND_SETTINGS = {
    "gen_dataset": GenDatasetSettings,
    "fit": FitSettings,
    "extract": ExtractSettings,
    "render": RenderSettings,
    "bench": BenchSettings,
}


def load_toml(path):
    """Parse a TOML document, mapping syntax errors to FormatError."""
    with open(path, "rb") as handle:
        try:
            return tomllib.load(handle)
        except tomllib.TOMLDecodeError as error:
            raise FormatError("{}: {}".format(path, error))


def read_config(path):
    """Read a config file and check its tables and keys.

    Raises:
        ConfigError: on unknown tables or keys.
    """
    document = load_toml(path)
    for table, values in document.items():
        if table not in COMMAND_SETTINGS or not isinstance(values, dict):
            raise ConfigError("unknown config table [{}] in {}".format(table,
                                                                        path))
        known = {f.name for f in dataclasses.fields(COMMAND_SETTINGS[table])}
        unknown = set(values) - known
        if unknown:
            raise ConfigError("unknown keys in [{}]: {}".format(
                table, ", ".join(sorted(unknown))))
    logger.debug("Read config %s with tables %s", path, sorted(document))
    return document


def resolve(command, flags=None, config=None, base=None):
    """Settings of a command from flags, then config, then base, then
    defaults.

    Args:
        command: key of COMMAND_SETTINGS.
        flags: mapping of flag values; None values are treated as unset.
        config: parsed config document or None.
        base: optional mapping below the config table, such as the render
            settings stored in a scene file.

    Returns:
        The command's settings dataclass.
    """
    settings_cls = COMMAND_SETTINGS[command]
    values = {}
    table = (config or {}).get(command, {})
    for item in dataclasses.fields(settings_cls):
        if flags and flags.get(item.name) is not None:
            values[item.name] = flags[item.name]
        elif item.name in table:
            values[item.name] = table[item.name]
        elif base and item.name in base:
            values[item.name] = base[item.name]
    try:
        return settings_cls(**values)
    except TypeError as error:
        raise ConfigError(str(error))
