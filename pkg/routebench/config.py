"""
Run configuration: one table of defaults with flat dotted keys, TOML files flattened into the same keys,
and the resolved snapshot written next to every run's outputs.
"""

import os
from dataclasses import asdict
from typing import Iterable, Optional

import toml

from logger.logger import logger
from routebench.planners import IdmParams
from routebench.routegan import RouteGanConfig

OUTPUT_ROOT_VAR = "ROUTEBENCH_OUTPUT_ROOT"
RESOLVED_CONFIG = "resolved_config.toml"

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    # scenes; their pixel size is routegan.width_px x routegan.height_px
    "scene.kinds": ["StraightRoad", "Intersection", "Roundabout"],
    "scene.lane_width_px": 12,
    "scene.inner_radius": 0.3,
    "scene.outer_radius": 0.6,
    "scene.arms": 4,
    # dataset
    "data.n_safe": 500,
    "data.n_critical": 500,
    "data.r": 0.03,
    "data.margin": 0.02,
    "data.max_deform": 0.3,
    "data.mix.conflict": 1.0,
    "data.mix.realignment": 1.0,
    "data.mix.deformation": 1.0,
    # training
    "train.preview_every": 0,
    # evaluation
    "eval.episodes": 200,
    "eval.q_values": [-2.0, -1.0, 0.0, 1.0, 2.0],
    "eval.planners": ["data", "idm", "astar"],
    "eval.seeds": [0],
    "eval.t_max": 100,
    # latent sweeps; dims are 1-based style indices
    "sweep.dims": [1, 2],
    "sweep.low": -2.0,
    "sweep.high": 2.0,
    "sweep.step": 1.0,
    "sweep.joint": False,
    "sweep.scene": "Intersection",
    "sweep.case": "III",
    "sweep.t_max": 100,
    # tested planners
    "planner.astar.accel_grid": [-0.3, -0.15, 0.0, 0.15, 0.3],
    "planner.astar.horizon": 15,
    "planner.astar.v_max": 0.3,
    "planner.astar.clearance": 0.06,
    "planner.astar.w_collision": 10.0,
    "planner.astar.w_jerk": 1e-3,
    "planner.astar.s_resolution": 0.005,
    "planner.astar.v_resolution": 0.01,
}
DEFAULTS.update({f"routegan.{k}": v for k, v in asdict(RouteGanConfig()).items()})
DEFAULTS.update({f"planner.idm.{k}": v for k, v in asdict(IdmParams()).items()})


def flatten(dictionary: dict, parent_key: str = "", separator: str = ".") -> dict:
    """
    Nested tables become dotted keys; lists are values.

    EXAMPLE:
        flatten({"planner": {"idm": {"v0": 0.3}}, "seed": 1})  => {"planner.idm.v0": 0.3, "seed": 1}
    """
    items = []
    for key, value in dictionary.items():
        new_key = f"{parent_key}{separator}{key}" if parent_key else str(key)
        if isinstance(value, dict):
            items.extend(flatten(value, new_key, separator).items())
        else:
            items.append((new_key, value))
    return dict(items)


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"Setting `{key}` must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ValueError(f"Setting `{key}` must be a list, got {value!r}")
    return value


def merge(base: dict, overrides: dict) -> dict:
    """
    :return:    Copy of base updated with overrides; unknown keys raise ValueError
    """
    unknown = sorted(set(overrides) - set(DEFAULTS))
    if unknown:
        raise ValueError(f"Unknown configuration keys {unknown}")
    merged = dict(base)
    merged.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    return merged


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """
    Resolve settings with precedence DEFAULTS < config file < overrides (CLI flags; None values ignored)

    :param path:        Flat or sectioned TOML file
    :param overrides:   Dotted-key values
    :return:            Complete flat configuration
    """
    config = dict(DEFAULTS)
    if path:
        try:
            loaded = toml.load(path)
        except toml.TomlDecodeError as ex:
            raise ValueError(f"Cannot parse config file {path}: {ex}")
        config = merge(config, flatten(loaded))
        logger.debug(f"Configuration read from {path}")
    return merge(config, overrides or {})


def section(config: dict, prefix: str) -> dict:
    """
    Keys under `prefix.` with the prefix removed
    """
    prefix = prefix.rstrip(".") + "."
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def routegan_config(config: dict) -> RouteGanConfig:
    return RouteGanConfig.from_dict(section(config, "routegan"))


def scene_params(config: dict) -> dict:
    return {k: config[f"scene.{k}"] for k in ("lane_width_px", "inner_radius", "outer_radius", "arms")}


def output_root(cli_value: Optional[str] = None) -> str:
    return cli_value or os.environ.get(OUTPUT_ROOT_VAR) or os.path.join(".", "runs")


def write_resolved(config: dict, directory: str, keys: Optional[Iterable[str]] = None) -> str:
    """
    Write the resolved configuration as sectioned TOML; loading it back with load_config gives the same dict
    """
    os.makedirs(directory, exist_ok=True)
    nested = {}
    for key in sorted(keys if keys is not None else config):
        *tables, leaf = key.split(".")
        node = nested
        for table in tables:
            node = node.setdefault(table, {})
        node[leaf] = config[key]
    path = os.path.join(directory, RESOLVED_CONFIG)
    with open(path, "w") as f:
        toml.dump(nested, f)
    return path
