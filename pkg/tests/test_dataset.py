import math

import numpy as np
import pytest
from scipy import stats

from nfloc.array_model import ArrayGeometry, cartesian_to_spherical
from nfloc.dataset import (
    ScenarioPrior,
    canonical_order,
    dataset_from_bytes,
    dataset_to_bytes,
    derive_seed,
    draw_sources,
    generate_dataset,
    read_dataset,
    simulate_scene,
    split_dataset,
    write_dataset,
)
from nfloc.errors import FormatError
from nfloc.subspace import cnn_input_tensor

GEOM = ArrayGeometry.half_wavelength(4, 4)
PRIOR = ScenarioPrior(GEOM, kappa=4, num_sources=2, num_snapshots=20,
                      range_bounds=(2 * GEOM.aperture, GEOM.fraunhofer_distance))


@pytest.fixture(scope="module")
def small():
    return generate_dataset(PRIOR, 40, 11)


def test_full_scale_prior_bounds():
    prior = ScenarioPrior(ArrayGeometry.half_wavelength(16, 8))
    d = prior.geom.aperture
    assert d == pytest.approx(math.hypot(15 * 0.05, 7 * 0.05), rel=1e-15)
    # D = hypot(0.75, 0.35) = 0.82765 m, d_FA = 2 D^2 / 0.1 = 13.700 m
    assert d == pytest.approx(0.82765, abs=1e-5)
    assert prior.geom.fraunhofer_distance == pytest.approx(13.700, abs=1e-3)
    assert prior.range_bounds[0] == pytest.approx(1.6553, abs=1e-4)
    assert prior.range_bounds[1] == pytest.approx(3.4250, abs=1e-4)
    assert prior.azimuth_bounds == pytest.approx((-math.pi / 3, math.pi / 3))
    prior.validate()


def test_small_array_default_prior_is_empty():
    with pytest.raises(ValueError, match="empty range prior"):
        ScenarioPrior(GEOM).validate()
    with pytest.raises(ValueError):
        generate_dataset(ScenarioPrior(GEOM, range_bounds=(0.2, 0.9)), 1, 0)
    with pytest.raises(ValueError):
        generate_dataset(PRIOR, 0, 0)


def test_azimuth_uniformity():
    prior = ScenarioPrior(ArrayGeometry.half_wavelength(16, 8), num_sources=1)
    rng = np.random.default_rng(2024)
    az = np.array([draw_sources(prior, rng)[0].azimuth for _ in range(100_000)])
    counts, _ = np.histogram(az, bins=20, range=(-math.pi / 3, math.pi / 3))
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_labels_inside_prior(small):
    for row in small.labels:
        for x, y, z in row.reshape(-1, 3):
            az, el, r = cartesian_to_spherical(x, y, z)
            assert -math.pi / 3 - 1e-12 <= az <= math.pi / 3 + 1e-12
            assert -math.pi / 3 - 1e-12 <= el <= math.pi / 3 + 1e-12
            assert PRIOR.range_bounds[0] - 1e-12 <= r <= PRIOR.range_bounds[1] + 1e-12
    low, high = PRIOR.label_bounds()
    assert np.all(small.labels >= low - 1e-12) and np.all(small.labels <= high + 1e-12)


def test_canonical_order(small):
    for row in small.labels:
        sph = [cartesian_to_spherical(*p) for p in row.reshape(-1, 3)]
        assert sph == sorted(sph)
    assert canonical_order([]) == []


def test_records_match_scene_simulation(small):
    for i in (0, 17, 39):
        seed = derive_seed(11, i)
        assert small.seeds[i] == seed
        scene = simulate_scene(PRIOR, seed)
        np.testing.assert_array_equal(small.inputs[i], cnn_input_tensor(scene.split, 2).astype(np.float32))
        np.testing.assert_array_equal(small.labels[i], scene.labels)


def test_full_input_mode():
    ds = generate_dataset(PRIOR, 3, 11, input_mode="full")
    scene = simulate_scene(PRIOR, derive_seed(11, 2))
    np.testing.assert_array_equal(ds.inputs[2], cnn_input_tensor(scene.split).astype(np.float32))
    assert dataset_from_bytes(dataset_to_bytes(ds)).input_mode == "full"
    with pytest.raises(ValueError):
        generate_dataset(PRIOR, 3, 11, input_mode="noise")


def test_generation_is_deterministic(small):
    again = generate_dataset(PRIOR, 40, 11)
    assert dataset_to_bytes(again) == dataset_to_bytes(small)
    assert dataset_to_bytes(generate_dataset(PRIOR, 40, 12)) != dataset_to_bytes(small)


def test_prefix_stability(small):
    head = generate_dataset(PRIOR, 10, 11)
    np.testing.assert_array_equal(head.inputs, small.inputs[:10])


def test_round_trip(small, tmp_path):
    path = tmp_path / "d.bin"
    write_dataset(small, path)
    back = read_dataset(path)
    assert back.inputs.tobytes() == small.inputs.tobytes()
    assert back.labels.tobytes() == small.labels.tobytes()
    assert back.seeds.tobytes() == small.seeds.tobytes()
    assert back.prior == small.prior and back.master_seed == 11 and back.input_mode == "signal"
    assert dataset_to_bytes(back) == path.read_bytes()


def test_header_count_matches_full_scan(small):
    data = dataset_to_bytes(small)
    header_end = data.index(b"\n", data.index(b"{")) + 1
    record = 2 * 16 * 16 * 4 + 6 * 8 + 8
    assert (len(data) - header_end) % record == 0
    assert (len(data) - header_end) // record == len(dataset_from_bytes(data)) == 40


def test_truncation_names_record(small):
    data = dataset_to_bytes(small)
    header_end = data.index(b"\n", data.index(b"{")) + 1
    record = 2 * 16 * 16 * 4 + 6 * 8 + 8
    cut = header_end + 7 * record + 100
    with pytest.raises(FormatError, match="record 7") as exc:
        dataset_from_bytes(data[:cut])
    assert exc.value.record == 7
    assert exc.value.offset == header_end + 7 * record


def test_corrupt_header_and_magic(small):
    data = dataset_to_bytes(small)
    with pytest.raises(FormatError):
        dataset_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(data.replace(b"version 1", b"version 2", 1))
    with pytest.raises(FormatError):
        dataset_from_bytes(data.replace(b'"N": 16', b'"N": 17', 1))
    with pytest.raises(FormatError):
        dataset_from_bytes(data + b"\0")


def test_split_properties(small):
    train, test = split_dataset(small, 0.75, 3)
    assert len(train) == 30 and len(test) == 10
    both = sorted(train.seeds.tolist() + test.seeds.tolist())
    assert both == sorted(small.seeds.tolist())
    again_train, _ = split_dataset(small, 0.75, 3)
    assert again_train.seeds.tobytes() == train.seeds.tobytes()
    with pytest.raises(ValueError):
        split_dataset(small, 1.0, 3)


def test_split_leaving_full_scale_test_size():
    ds = generate_dataset(ScenarioPrior(GEOM, num_sources=1, num_snapshots=5, range_bounds=PRIOR.range_bounds),
                          250, 0)
    _, test = split_dataset(ds, 0.8, 0)
    assert len(test) == 50
