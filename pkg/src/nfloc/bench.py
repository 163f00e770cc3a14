"""Experiment drivers: RMSE sweeps, runtime comparison and scatter reports.

All scenes are drawn with :func:`nfloc.dataset.simulate_scene` from seeds
``derive_seed(config.seed, l)``, so every (kappa, T) cell of a sweep sees the
same L source geometries, and both estimators consume the same covariance.
"""

from __future__ import annotations

import csv
import gc
import io
import itertools
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from .dataset import ScenarioPrior, derive_seed, simulate_scene
from .errors import ConfigError
from .music import SearchGrid, SteeringCache, estimate_locations_music
from .neural.model import ModelParams
from .neural.train import predict
from .subspace import eigendecompose, sample_covariance, split_subspaces

log = logging.getLogger(__name__)

BRUTE_FORCE_MAX_K = 6
# steering caches above this size are not built automatically
CACHE_LIMIT_BYTES = 512 * 2**20


@dataclass(frozen=True)
class GridSpec:
    """Point counts per axis; range bounds default to the scenario prior's."""

    n_azimuth: int = 60
    n_elevation: int = 60
    n_range: int = 60
    range_bounds: tuple[float, float] | None = None
    cache: bool | None = None  # None: cache when it fits in CACHE_LIMIT_BYTES

    def build(self, prior: ScenarioPrior) -> SearchGrid:
        bounds = prior.range_bounds if self.range_bounds is None else self.range_bounds
        return SearchGrid.uniform(self.n_azimuth, self.n_elevation, self.n_range, bounds,
                                  prior.azimuth_bounds, prior.elevation_bounds)

    def make_cache(self, grid: SearchGrid, prior: ScenarioPrior) -> SteeringCache | None:
        use = self.cache
        if use is None:
            use = grid.size * prior.geom.num_elements * 16 <= CACHE_LIMIT_BYTES
        return SteeringCache(grid, prior.geom) if use else None


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioPrior
    snapshot_counts: tuple[int, ...] = (25, 50, 75, 100)
    kappas: tuple[float, ...] = (4.0, 8.0)
    test_size: int = 50
    model_path: str | None = None
    grid: GridSpec = field(default_factory=GridSpec)
    out_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "snapshot_counts", tuple(int(t) for t in self.snapshot_counts))
        object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
        if not self.snapshot_counts or min(self.snapshot_counts) < 1:
            raise ConfigError("snapshot_counts must be a non-empty list of counts >= 1")
        if not self.kappas or min(self.kappas) < 0:
            raise ConfigError("kappas must be a non-empty list of non-negative values")
        if self.test_size < 1:
            raise ConfigError("test_size must be >= 1")
        try:
            self.scenario.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def test_seeds(self) -> list[int]:
        return [derive_seed(self.seed, l) for l in range(self.test_size)]


@dataclass
class RmseReport:
    rows: list[tuple[str, float, int, float, int]]  # (method, kappa, T, rmse, trials)

    HEADER = ("method", "kappa", "snapshots", "rmse_m", "trials")

    def value(self, method: str, kappa: float, snapshots: int) -> float:
        for m, k, t, r, _ in self.rows:
            if m == method and k == kappa and t == snapshots:
                return r
        raise KeyError((method, kappa, snapshots))

    def to_csv(self) -> str:
        return format_csv(self.HEADER, self.rows)


@dataclass
class RuntimeReport:
    rows: list[tuple[str, int, float, float, float, int]]  # (method, T, mean, std, median, measurements)

    HEADER = ("method", "snapshots", "mean_s", "std_s", "median_s", "measurements")

    def median(self, method: str, snapshots: int) -> float:
        for m, t, _, _, med, _ in self.rows:
            if m == method and t == snapshots:
                return med
        raise KeyError((method, snapshots))

    def to_csv(self) -> str:
        return format_csv(self.HEADER, self.rows)


def format_csv(header, rows) -> str:
    """UTF-8 friendly CSV text with LF endings; floats use repr for exact round trips."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def match_sources(estimates, truths) -> tuple[tuple[int, ...], float]:
    """Assignment of estimates to truths minimizing total squared distance.

    Returns ``(perm, cost)`` where truth ``k`` is paired with estimate ``perm[k]``.
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    tru = np.asarray(truths, dtype=float).reshape(-1, 3)
    if est.shape != tru.shape:
        raise ValueError(f"need equal source counts, got {len(est)} estimates and {len(tru)} truths")
    cost = ((tru[:, None, :] - est[None, :, :]) ** 2).sum(axis=2)
    k = len(tru)
    if k <= BRUTE_FORCE_MAX_K:
        best, best_cost = None, math.inf
        for perm in itertools.permutations(range(k)):
            c = float(sum(cost[i, perm[i]] for i in range(k)))
            if c < best_cost:
                best, best_cost = perm, c
        return tuple(best), best_cost
    rows, cols = linear_sum_assignment(cost)
    perm = tuple(int(c) for _, c in sorted(zip(rows, cols)))
    return perm, float(cost[np.arange(k), perm].sum())


def rmse(trials) -> float:
    """Per-coordinate RMSE in meters over ``[(truths, estimates), ...]`` after matching."""
    trials = list(trials)
    if not trials:
        raise ValueError("rmse needs at least one trial")
    total, count = 0.0, 0
    for truths, estimates in trials:
        _, cost = match_sources(estimates, truths)
        total += cost
        count += 3 * len(np.asarray(truths).reshape(-1, 3))
    return math.sqrt(total / count)


def _require_model(model: ModelParams | None, prior: ScenarioPrior) -> ModelParams:
    if model is None:
        raise ConfigError("this experiment needs a trained model")
    if model.arch.input_size != prior.geom.num_elements or model.arch.num_outputs != 3 * prior.num_sources:
        raise ConfigError(f"model expects N={model.arch.input_size}, 3K={model.arch.num_outputs}; scenario has "
                          f"N={prior.geom.num_elements}, 3K={3 * prior.num_sources}")
    return model


def run_rmse_experiment(config: ExperimentConfig, model: ModelParams | None,
                        methods: tuple[str, ...] = ("music", "cnn"), workers: int = 1) -> RmseReport:
    """RMSE of each method for every (kappa, T), on L paired test scenes."""
    prior = config.scenario
    if "cnn" in methods:
        _require_model(model, prior)
    k = prior.num_sources
    grid = config.grid.build(prior)
    cache = config.grid.make_cache(grid, prior)
    seeds = config.test_seeds()
    rows = []
    for kappa in config.kappas:
        channel = prior.channel_model.with_kappa(kappa)
        for t in config.snapshot_counts:
            trials = {m: [] for m in methods}
            for seed in seeds:
                scene = simulate_scene(prior, seed, kappa=kappa, num_snapshots=t, channel=channel)
                truth = scene.labels.reshape(-1, 3)
                if "music" in methods:
                    _, un = split_subspaces(scene.split, k)
                    est = estimate_locations_music(None, k, grid, prior.geom, cache=cache,
                                                   workers=workers, noise_subspace=un)
                    trials["music"].append((truth, est.as_array()))
                if "cnn" in methods:
                    trials["cnn"].append((truth, predict(model, scene.split).as_array()))
            for m in methods:
                value = rmse(trials[m])
                rows.append((m, kappa, t, value, len(seeds)))
                log.info("rmse method=%s kappa=%g T=%d rmse=%.6g", m, kappa, t, value)
    return RmseReport(rows)


def run_runtime_benchmark(config: ExperimentConfig, model: ModelParams | None, samples: int = 3,
                          repeats: int = 10) -> RuntimeReport:
    """Per-sample wall time of MUSIC (spectrum + peaks) and CNN inference for each T.

    The shared covariance + eigendecomposition step is timed separately and
    reported under method "eigen". BLAS is pinned to one thread and garbage
    collection is paused while timing; repeats cycle through every T so slow
    drift in machine load is spread evenly over the snapshot counts.
    """
    prior = config.scenario
    model = _require_model(model, prior)
    k = prior.num_sources
    grid = config.grid.build(prior)
    cache = config.grid.make_cache(grid, prior) if config.grid.cache else None
    seeds = config.test_seeds()[:samples]
    scenes = {t: [simulate_scene(prior, s, num_snapshots=t) for s in seeds] for t in config.snapshot_counts}
    times = {(m, t): [] for t in config.snapshot_counts for m in ("music", "cnn", "eigen")}
    gc_was_enabled = gc.isenabled()
    with threadpool_limits(limits=1):
        # untimed warm-up: first touches of the steering cache and weights are page faults
        warm = scenes[config.snapshot_counts[0]][0].split
        estimate_locations_music(None, k, grid, prior.geom, cache=cache, noise_subspace=split_subspaces(warm, k)[1])
        predict(model, warm)
        gc.collect()
        gc.disable()
        try:
            for _ in range(repeats):
                for t in config.snapshot_counts:
                    for scene in scenes[t]:
                        t0 = time.perf_counter()
                        split = eigendecompose(sample_covariance(scene.batch))
                        times["eigen", t].append(time.perf_counter() - t0)
                        _, un = split_subspaces(split, k)
                        times["music", t].append(estimate_locations_music(None, k, grid, prior.geom, cache=cache,
                                                                          noise_subspace=un).elapsed_seconds)
                        times["cnn", t].append(predict(model, split).elapsed_seconds)
        finally:
            if gc_was_enabled:
                gc.enable()
    rows = []
    for t in config.snapshot_counts:
        for method in ("music", "cnn", "eigen"):
            v = times[method, t]
            rows.append((method, t, statistics.fmean(v), statistics.pstdev(v), statistics.median(v), len(v)))
            log.info("runtime method=%s T=%d median=%.6g s", method, t, statistics.median(v))
    return RuntimeReport(rows)


SCATTER_HEADER = ("realization", "source", "truth_x", "truth_y", "truth_z",
                  "music_x", "music_y", "music_z", "cnn_x", "cnn_y", "cnn_z")


def scatter_report(config: ExperimentConfig, model: ModelParams | None, num_realizations: int = 12,
                   kappa: float = 4.0, num_snapshots: int = 25) -> str:
    """CSV of truth and matched MUSIC / CNN positions per source and realization."""
    prior = config.scenario
    model = _require_model(model, prior)
    k = prior.num_sources
    grid = config.grid.build(prior)
    cache = config.grid.make_cache(grid, prior)
    rows = []
    for r in range(num_realizations):
        scene = simulate_scene(prior, derive_seed(config.seed, r), kappa=kappa, num_snapshots=num_snapshots)
        truth = scene.labels.reshape(-1, 3)
        _, un = split_subspaces(scene.split, k)
        music = estimate_locations_music(None, k, grid, prior.geom, cache=cache, noise_subspace=un).as_array()
        cnn = predict(model, scene.split).as_array()
        pm, _ = match_sources(music, truth)
        pc, _ = match_sources(cnn, truth)
        for s in range(k):
            rows.append((r, s, *map(float, truth[s]), *map(float, music[pm[s]]), *map(float, cnn[pc[s]])))
    return format_csv(SCATTER_HEADER, rows)


def with_grid(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, grid=replace(config.grid, **changes))
