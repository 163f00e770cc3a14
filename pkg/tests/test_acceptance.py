"""Exit-criteria suite. Each test records one PASS/FAIL line (see conftest) and
asserts the criterion at its stated tolerance.

The desk-scale scenario shared by criteria 6-8 is a 4x4 half-wavelength
array, one source, range prior [2D, d_FA].
"""

import math
import statistics
import time

import numpy as np
import pytest

from nfloc import bench
from nfloc.array_model import ArrayGeometry, ChannelModel, SourcePosition, simulate_snapshots
from nfloc.dataset import (
    ScenarioPrior,
    dataset_from_bytes,
    dataset_to_bytes,
    derive_seed,
    generate_dataset,
    simulate_scene,
)
from nfloc.errors import FormatError
from nfloc.music import SearchGrid, SteeringCache, estimate_locations_music, spectrum_from_bytes, spectrum_to_bytes
from nfloc.music import compute_spectrum
from nfloc.neural import Architecture, TrainingConfig, init_model, model_forward, train
from nfloc.neural.layers import mse_loss
from nfloc.neural.serialize import model_from_bytes, model_to_bytes
from nfloc.neural.train import normalize_labels
from nfloc.subspace import SampleCovariance, eigendecompose, split_subspaces

import test_layers
import test_model
from test_subspace import random_psd

pytestmark = pytest.mark.acceptance

GEOM = ArrayGeometry.half_wavelength(4, 4)
RANGE = (2 * GEOM.aperture, GEOM.fraunhofer_distance)
DESK = ScenarioPrior(GEOM, kappa=4.0, num_sources=1, num_snapshots=50, range_bounds=RANGE)

TRAIN_SEED, TEST_SEED = 1, 2
TRAIN_COUNT, EPOCHS, DESK_LR = 2000, 150, 1e-3
SNAPSHOTS, KAPPAS = (25, 50, 75, 100), (4.0, 8.0)
TEST_SCENES = 50
# accepted relative slack when calling MUSIC time "non-decreasing", fixed before measuring
RUNTIME_NOISE = 0.10


def _spherical_error_cells(est: SourcePosition, truth: SourcePosition, steps) -> np.ndarray:
    return np.abs([est.azimuth - truth.azimuth, est.elevation - truth.elevation, est.range - truth.range]) / steps


# ---- 1: subspace correctness ------------------------------------------------------------


def test_criterion_1_subspace(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = np.zeros(3)
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        r = random_psd(rng, n, rank=int(rng.integers(1, n + 1)))
        split = eigendecompose(SampleCovariance(r, 1))
        u, w = split.eigenvectors, split.eigenvalues
        scale = np.linalg.norm(r)
        trace = np.trace(r).real
        worst = np.maximum(worst, [np.linalg.norm((u * w) @ u.conj().T - r) / scale,
                                   abs(w.sum() - trace) / abs(trace),
                                   np.linalg.norm(u.conj().T @ u - np.eye(n))])
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(worst <= 1e-10)) and elapsed < 30
    criterion(1, ok, f"reconstruction {worst[0]:.1e}, trace {worst[1]:.1e}, orthonormality {worst[2]:.1e} "
                     f"(limit 1e-10), {elapsed:.1f} s (limit 30 s)")
    assert ok


# ---- 2, 3: MUSIC ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def music_grid():
    grid = SearchGrid.uniform(60, 60, 40, RANGE)
    return grid, SteeringCache(grid, GEOM)


def test_criterion_2_noiseless_recovery(criterion, music_grid):
    t0 = time.perf_counter()
    grid, cache = music_grid
    channel = ChannelModel.for_geometry(GEOM, math.inf)
    exact = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        node = tuple(int(rng.integers(0, n)) for n in grid.shape)
        truth = SourcePosition.from_spherical(*grid.point(node))
        batch = simulate_snapshots(GEOM, [truth], channel, 50, math.inf, rng)
        est = estimate_locations_music(batch, 1, grid, GEOM, cache=cache).positions[0]
        exact += (est.azimuth, est.elevation, est.range) == grid.point(node)
    elapsed = time.perf_counter() - t0
    ok = exact == 50 and elapsed < 120
    criterion(2, ok, f"{exact}/50 exact on-node recoveries (60x60x40 grid), {elapsed:.1f} s (limit 120 s)")
    assert ok


def test_criterion_3_noisy_quantization(criterion, music_grid):
    t0 = time.perf_counter()
    grid, cache = music_grid
    steps = grid.steps()
    prior = ScenarioPrior(GEOM, kappa=8.0, snr_db=0.0, num_sources=1, num_snapshots=100, range_bounds=RANGE)
    errs = []
    for l in range(50):
        scene = simulate_scene(prior, derive_seed(3, l))
        est = estimate_locations_music(scene.batch, 1, grid, GEOM, cache=cache).positions[0]
        errs.append(_spherical_error_cells(est, SourcePosition.from_cartesian(*scene.labels), steps))
    errs = np.array(errs)
    hits = int(np.all(errs <= 1.5, axis=1).sum())
    per_axis = (errs <= 1.5).sum(axis=0)
    elapsed = time.perf_counter() - t0
    ok = hits >= 45 and elapsed < 300
    criterion(3, ok, f"{hits}/50 within 1.5 cells on every axis (need 45); per axis az/el/range "
                     f"{per_axis[0]}/{per_axis[1]}/{per_axis[2]}, median range error "
                     f"{np.median(errs[:, 2]):.1f} cells, {elapsed:.1f} s")
    assert ok


# ---- 4, 5: network correctness --------------------------------------------------------------


def test_criterion_4_gradients(criterion):
    t0 = time.perf_counter()
    checked, failures = [], []
    layer_checks = [(n, f) for n, f in vars(test_layers).items() if n.startswith("test_gradcheck_")]
    for name, fn in layer_checks:
        cases = ([{"mode": m, "shape": s} for m in ("train", "infer") for s in ((5, 3, 4, 4), (6, 7))]
                 if name == "test_gradcheck_batchnorm" else [{}])
        for kw in cases:
            try:
                fn(**kw)
                checked.append(name)
            except AssertionError as exc:
                failures.append(f"{name}{kw}: {exc}")
    rng = np.random.default_rng(5)
    model = test_model.desk_model(n=8, k=1, seed=6)
    results = test_model.full_model_check(model, rng.standard_normal((4, 2, 8, 8)), rng.standard_normal((4, 3)), rng)
    worst_model = max(r[-1] for r in results)
    if len(results) < 100 or worst_model > 1e-4:
        failures.append(f"full model: {len(results)} probes, worst {worst_model:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    criterion(4, ok, f"{len(checked)} layer checks x 100 probes, full desk model {len(results)} probes "
                     f"(worst {worst_model:.1e}), {elapsed:.1f} s" + (f"; failures: {failures}" if failures else ""))
    assert ok


def test_criterion_5_overfit_single_sample(criterion):
    t0 = time.perf_counter()
    ds = generate_dataset(DESK, 1, TRAIN_SEED)
    arch = Architecture.preset("desk", 16, 3)
    result = train(ds.inputs, ds.labels, DESK.label_bounds(), arch,
                   TrainingConfig(learning_rate=1e-2, epochs=200, seed=0))
    history = result.loss_history
    reached = next((i + 1 for i, v in enumerate(history) if v < 1e-3), None)
    low, high = DESK.label_bounds()
    pred, _ = model_forward(result.model, ds.inputs.astype(np.float64), "infer")
    infer_mse = mse_loss(pred, normalize_labels(ds.labels, low, high))
    elapsed = time.perf_counter() - t0
    ok = reached is not None and elapsed < 60
    criterion(5, ok, f"training MSE < 1e-3 at epoch {reached} (final {history[-1]:.1e}); "
                     f"inference-mode MSE {infer_mse:.1e} (informational), {elapsed:.1f} s")
    assert ok


# ---- 6, 7: desk-scale learning and trends ---------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    t0 = time.perf_counter()
    ds = generate_dataset(DESK, TRAIN_COUNT, TRAIN_SEED)
    arch = Architecture.preset("desk", 16, 3)
    result = train(ds.inputs, ds.labels, DESK.label_bounds(), arch,
                   TrainingConfig(learning_rate=DESK_LR, epochs=EPOCHS, seed=0, dtype="float32"))
    train_seconds = time.perf_counter() - t0
    config = bench.ExperimentConfig(DESK, SNAPSHOTS, KAPPAS, TEST_SCENES, grid=bench.GridSpec(60, 60, 60),
                                    seed=TEST_SEED)
    t1 = time.perf_counter()
    report = bench.run_rmse_experiment(config, result.model)
    return {"model": result.model, "history": result.loss_history, "report": report, "config": config,
            "train_seconds": train_seconds, "sweep_seconds": time.perf_counter() - t1}


def test_criterion_6_desk_learning(criterion, desk_run):
    report = desk_run["report"]
    cnn = report.value("cnn", DESK.kappa, DESK.num_snapshots)
    music = report.value("music", DESK.kappa, DESK.num_snapshots)
    limit = 0.1 * DESK.box_diagonal()
    # one (kappa, T) cell of the eight in the sweep
    elapsed = desk_run["train_seconds"] + desk_run["sweep_seconds"] / (len(SNAPSHOTS) * len(KAPPAS))
    ok = cnn < limit and cnn <= 1.2 * music and elapsed < 1200
    criterion(6, ok, f"CNN RMSE {cnn:.4f} m (limit {limit:.4f} m = 10% of box diagonal), MUSIC {music:.4f} m, "
                     f"ratio {cnn / music:.2f} (limit 1.2), train+eval {elapsed:.0f} s")
    assert ok


def test_criterion_7_trends(criterion, desk_run):
    report = desk_run["report"]
    checks, notes = [], []
    for m in ("music", "cnn"):
        t_lo = statistics.fmean(report.value(m, k, SNAPSHOTS[0]) for k in KAPPAS)
        t_hi = statistics.fmean(report.value(m, k, SNAPSHOTS[-1]) for k in KAPPAS)
        k_lo = statistics.fmean(report.value(m, KAPPAS[0], t) for t in SNAPSHOTS)
        k_hi = statistics.fmean(report.value(m, KAPPAS[-1], t) for t in SNAPSHOTS)
        checks += [t_hi <= t_lo, k_hi <= k_lo]
        notes.append(f"{m}: T=100 {t_hi:.4f} vs T=25 {t_lo:.4f}, kappa=8 {k_hi:.4f} vs kappa=4 {k_lo:.4f}")
    elapsed = desk_run["sweep_seconds"] + desk_run["train_seconds"]
    ok = all(checks) and elapsed < 2400
    criterion(7, ok, "; ".join(notes) + f"; {elapsed:.0f} s")
    print(report.to_csv())
    assert ok


# ---- 8: runtime asymmetry ---------------------------------------------------------------------


def test_criterion_8_runtime(criterion, desk_run):
    t0 = time.perf_counter()
    config = bench.ExperimentConfig(DESK, SNAPSHOTS, KAPPAS, 3, grid=bench.GridSpec(100, 100, 100, cache=True),
                                    seed=TEST_SEED)
    report = bench.run_runtime_benchmark(config, desk_run["model"], samples=3, repeats=10)
    music = [report.median("music", t) for t in SNAPSHOTS]
    cnn = [report.median("cnn", t) for t in SNAPSHOTS]
    ratio = min(music) / max(cnn)
    cnn_spread = (max(cnn) - min(cnn)) / min(cnn)
    music_ok = all(b >= (1 - RUNTIME_NOISE) * a for a, b in zip(music, music[1:]))
    elapsed = time.perf_counter() - t0
    ok = ratio >= 100 and cnn_spread < 0.2 and music_ok and elapsed < 600
    criterion(8, ok, f"MUSIC/CNN ratio {ratio:.0f} (need 100); CNN spread {cnn_spread:.1%} (limit 20%); "
                     f"MUSIC medians {', '.join(f'{v * 1e3:.1f}' for v in music)} ms "
                     f"(non-decreasing within {RUNTIME_NOISE:.0%}); {elapsed:.0f} s")
    assert ok


# ---- 9: determinism ---------------------------------------------------------------------------


def test_criterion_9_determinism(criterion):
    def run():
        ds = generate_dataset(DESK, 64, 9)
        res = train(ds.inputs, ds.labels, DESK.label_bounds(), Architecture.preset("desk", 16, 3),
                    TrainingConfig(learning_rate=1e-3, epochs=3, batch_size=16, seed=4))
        cfg = bench.ExperimentConfig(DESK, (25, 100), (4.0, 8.0), 4, grid=bench.GridSpec(20, 20, 10), seed=6)
        return (dataset_to_bytes(ds), repr(res.loss_history).encode(), model_to_bytes(res.model),
                bench.run_rmse_experiment(cfg, res.model).to_csv().encode(),
                bench.scatter_report(cfg, res.model, num_realizations=4).encode())

    first, second = run(), run()
    names = ("dataset", "loss history", "model", "RMSE CSV", "scatter CSV")
    same = [a == b for a, b in zip(first, second)]
    ok = all(same)
    criterion(9, ok, ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same)))
    assert ok


# ---- 10: format round trips ---------------------------------------------------------------------


def _diagnostic(fn, data):
    try:
        fn(data)
    except FormatError as exc:
        return exc
    return None


def test_criterion_10_formats(criterion):
    ds = generate_dataset(DESK, 12, 5)
    data = dataset_to_bytes(ds)
    back = dataset_from_bytes(data)
    ds_ok = (dataset_to_bytes(back) == data and back.inputs.tobytes() == ds.inputs.tobytes()
             and back.labels.tobytes() == ds.labels.tobytes() and back.seeds.tobytes() == ds.seeds.tobytes())

    model = init_model(Architecture.preset("desk", 16, 3), np.random.default_rng(0))
    model.label_low, model.label_high = DESK.label_bounds()
    blob = model_to_bytes(model)
    restored = model_from_bytes(blob)
    model_ok = model_to_bytes(restored) == blob and all(
        a.tobytes() == b.tobytes() for a, b in zip(model.named_arrays().values(), restored.named_arrays().values()))

    grid = SearchGrid.uniform(8, 6, 5, RANGE)
    _, un = split_subspaces(simulate_scene(DESK, 0).split, 1)
    spec_blob = spectrum_to_bytes(compute_spectrum(un, grid, GEOM))
    spec_ok = spectrum_to_bytes(spectrum_from_bytes(spec_blob)) == spec_blob

    corruptions = {
        "dataset magic": (dataset_from_bytes, b"X" + data[1:]),
        "dataset truncated": (dataset_from_bytes, data[:-50]),
        "dataset trailing": (dataset_from_bytes, data + b"\0"),
        "model magic": (model_from_bytes, b"X" + blob[1:]),
        "model truncated": (model_from_bytes, blob[:-100]),
        "spectrum truncated": (spectrum_from_bytes, spec_blob[:-8]),
    }
    diagnostics = {k: _diagnostic(fn, d) for k, (fn, d) in corruptions.items()}
    rejected = all(e is not None and "byte offset" in str(e) for e in diagnostics.values())
    truncated = diagnostics["dataset truncated"]
    record_named = truncated is not None and truncated.record == len(ds) - 1
    ok = ds_ok and model_ok and spec_ok and rejected and record_named
    criterion(10, ok, f"dataset {'bit-exact' if ds_ok else 'MISMATCH'}, model {'bit-exact' if model_ok else 'MISMATCH'}, "
                      f"spectrum {'bit-exact' if spec_ok else 'MISMATCH'}; {sum(e is not None for e in diagnostics.values())}"
                      f"/{len(diagnostics)} corruptions rejected with offsets; truncated dataset names record "
                      f"{getattr(truncated, 'record', None)}")
    assert ok
