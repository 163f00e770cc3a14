"""Scenario and experiment files (TOML or JSON).

Example::

    [scenario]
    n_y = 4
    n_z = 4
    wavelength = 0.1          # spacing defaults to wavelength / 2
    kappa = 4.0
    snr_db = 0.0
    num_sources = 1
    num_snapshots = 50
    range_min = 0.43          # optional, default 2D
    range_max = 0.9           # optional

    [experiment]
    snapshot_counts = [25, 50, 75, 100]
    kappas = [4, 8]
    test_size = 50
    seed = 0

    [grid]
    azimuth = 60
    elevation = 60
    range = 60

    [training]
    preset = "desk"
    epochs = 150
    learning_rate = 1e-3
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .array_model import ArrayGeometry
from .bench import ExperimentConfig, GridSpec
from .dataset import ScenarioPrior
from .errors import ConfigError

SCENARIO_KEYS = {"n_y", "n_z", "d_y", "d_z", "spacing", "wavelength", "kappa", "snr_db", "num_sources",
                 "num_snapshots", "azimuth_min", "azimuth_max", "elevation_min", "elevation_max",
                 "range_min", "range_max", "seed"}
EXPERIMENT_KEYS = {"snapshot_counts", "kappas", "test_size", "seed", "model", "out_dir"}
GRID_KEYS = {"azimuth", "elevation", "range", "range_min", "range_max", "cache"}
TRAINING_KEYS = {"preset", "epochs", "learning_rate", "weight_decay", "batch_size", "seed", "dtype",
                 "dropout_rate", "input_mode", "output_activation", "count"}
SECTIONS = {"scenario": SCENARIO_KEYS, "experiment": EXPERIMENT_KEYS, "grid": GRID_KEYS, "training": TRAINING_KEYS}


@dataclass
class RunConfig:
    scenario: ScenarioPrior
    experiment: ExperimentConfig
    training: dict = field(default_factory=dict)
    seed: int = 0


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object at top level")
    return data


def _check_keys(data: dict) -> None:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name, allowed in SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        bad = set(section) - allowed
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")


def scenario_from_dict(s: dict) -> ScenarioPrior:
    try:
        wavelength = float(s.get("wavelength", 0.1))
        spacing = float(s.get("spacing", wavelength / 2))
        geom = ArrayGeometry(int(s.get("n_y", 16)), int(s.get("n_z", 8)), float(s.get("d_y", spacing)),
                             float(s.get("d_z", spacing)), wavelength)
        ang = math.pi / 3
        kwargs = dict(
            kappa=float(s.get("kappa", 4.0)),
            snr_db=float(s.get("snr_db", 0.0)),
            num_sources=int(s.get("num_sources", 3)),
            num_snapshots=int(s.get("num_snapshots", 25)),
            azimuth_bounds=(float(s.get("azimuth_min", -ang)), float(s.get("azimuth_max", ang))),
            elevation_bounds=(float(s.get("elevation_min", -ang)), float(s.get("elevation_max", ang))),
        )
        default = ScenarioPrior(geom).range_bounds
        kwargs["range_bounds"] = (float(s.get("range_min", default[0])), float(s.get("range_max", default[1])))
        prior = ScenarioPrior(geom, **kwargs)
        prior.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc
    return prior


def build_config(data: dict, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Assemble scenario, experiment and training settings; CLI overrides win."""
    _check_keys(data)
    sc = data.get("scenario", {})
    ex = data.get("experiment", {})
    gr = data.get("grid", {})
    prior = scenario_from_dict(sc)
    if seed is None:
        seed = int(ex.get("seed", sc.get("seed", 0)))
    try:
        r_bounds = None
        if "range_min" in gr or "range_max" in gr:
            r_bounds = (float(gr.get("range_min", prior.range_bounds[0])),
                        float(gr.get("range_max", prior.range_bounds[1])))
        grid = GridSpec(int(gr.get("azimuth", 60)), int(gr.get("elevation", 60)), int(gr.get("range", 60)),
                        r_bounds, gr.get("cache"))
        experiment = ExperimentConfig(
            scenario=prior,
            snapshot_counts=tuple(ex.get("snapshot_counts", (25, 50, 75, 100))),
            kappas=tuple(ex.get("kappas", (4.0, 8.0))),
            test_size=int(ex.get("test_size", 50)),
            model_path=ex.get("model"),
            grid=grid,
            out_dir=out_dir if out_dir is not None else str(ex.get("out_dir", ".")),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment settings: {exc}") from exc
    return RunConfig(prior, experiment, dict(data.get("training", {})), seed)


def load_config(path=None, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    return build_config(load_file(path) if path is not None else {}, seed, out_dir)
