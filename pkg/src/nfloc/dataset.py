"""Scenario priors, labeled dataset generation and the binary dataset format.

File layout::

    NFLOC-DATASET\\n
    version 1\\n
    {json header: N, K, T, count, master_seed, input_mode, prior}\\n
    count records of
        2*N*N little-endian float32   eigenvector tensor
        3*K   little-endian float64   labels (meters)
        1     little-endian uint64    per-record seed
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from .array_model import ArrayGeometry, ChannelModel, SnapshotBatch, SourcePosition, simulate_snapshots
from .errors import FormatError
from .subspace import INPUT_MODES, SubspaceSplit, cnn_input_tensor, eigendecompose, sample_covariance

MAGIC = b"NFLOC-DATASET\n"
VERSION = 1
DEFAULT_ANGLE_BOUNDS = (-math.pi / 3, math.pi / 3)


@dataclass(frozen=True)
class ScenarioPrior:
    """Uniform priors over source azimuth, elevation and range.

    When ``range_bounds`` is omitted it defaults to ``[2D, d_FA / 4]``; that
    interval is empty for small arrays, in which case explicit bounds are needed.
    """

    geom: ArrayGeometry
    kappa: float = 4.0
    snr_db: float = 0.0
    num_sources: int = 3
    num_snapshots: int = 25
    azimuth_bounds: tuple[float, float] = DEFAULT_ANGLE_BOUNDS
    elevation_bounds: tuple[float, float] = DEFAULT_ANGLE_BOUNDS
    range_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.range_bounds is None:
            d = self.geom.aperture
            object.__setattr__(self, "range_bounds", (2.0 * d, self.geom.fraunhofer_distance / 4.0))
        for name in ("azimuth_bounds", "elevation_bounds", "range_bounds"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    def validate(self) -> None:
        lo, hi = self.range_bounds
        if not lo < hi:
            raise ValueError(f"empty range prior [{lo:.4g}, {hi:.4g}] m")
        if lo < 2.0 * self.geom.aperture * (1 - 1e-12):
            raise ValueError(f"range_min {lo:.4g} m is below 2D = {2 * self.geom.aperture:.4g} m")
        for name in ("azimuth_bounds", "elevation_bounds"):
            a, b = getattr(self, name)
            if not (-math.pi / 2 < a < b < math.pi / 2):
                raise ValueError(f"{name} must satisfy -pi/2 < low < high < pi/2")
        if self.num_sources < 1 or self.num_snapshots < 1:
            raise ValueError("num_sources and num_snapshots must be >= 1")
        if self.num_sources >= self.geom.num_elements:
            raise ValueError("num_sources must be smaller than the number of antennas")

    @property
    def channel_model(self) -> ChannelModel:
        return ChannelModel.for_geometry(self.geom, self.kappa)

    def label_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Cartesian bounding box of the prior, tiled over the K sources."""
        self.validate()

        def candidates(bounds):
            lo, hi = bounds
            return [lo, hi] + ([0.0] if lo < 0 < hi else [])

        pts = np.array([[r * math.cos(a) * math.cos(e), r * math.sin(a) * math.cos(e), r * math.sin(e)]
                        for a, e, r in product(candidates(self.azimuth_bounds), candidates(self.elevation_bounds),
                                               self.range_bounds)])
        low, high = pts.min(axis=0), pts.max(axis=0)
        return np.tile(low, self.num_sources), np.tile(high, self.num_sources)

    def box_diagonal(self) -> float:
        low, high = self.label_bounds()
        return float(np.linalg.norm((high - low)[:3]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geom"] = asdict(self.geom)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioPrior":
        d = dict(d)
        d["geom"] = ArrayGeometry(**d["geom"])
        for name in ("azimuth_bounds", "elevation_bounds", "range_bounds"):
            if d.get(name) is not None:
                d[name] = tuple(d[name])
        return cls(**d)


def canonical_order(sources: list[SourcePosition]) -> list[SourcePosition]:
    return sorted(sources, key=lambda s: (s.azimuth, s.elevation, s.range))


def draw_sources(prior: ScenarioPrior, rng: np.random.Generator) -> list[SourcePosition]:
    """K independent uniform draws from the prior, in canonical order."""
    u = rng.random((prior.num_sources, 3))
    bounds = np.array([prior.azimuth_bounds, prior.elevation_bounds, prior.range_bounds])
    vals = bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])
    return canonical_order([SourcePosition.from_spherical(*v) for v in vals])


def derive_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for record ``index`` of a dataset."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Scene:
    sources: list[SourcePosition]
    batch: SnapshotBatch
    split: SubspaceSplit

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([s.cartesian for s in self.sources])


def simulate_scene(prior: ScenarioPrior, seed: int, kappa: float | None = None,
                   num_snapshots: int | None = None, channel: ChannelModel | None = None) -> Scene:
    """Draw sources and snapshots for one seed, then eigendecompose the covariance.

    Source positions depend only on ``seed``, so sweeping ``kappa`` or
    ``num_snapshots`` with a fixed seed keeps the geometry of the scene.
    """
    pos_rng, sim_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    sources = draw_sources(prior, pos_rng)
    kappa = prior.kappa if kappa is None else kappa
    if channel is None:
        channel = prior.channel_model
    if channel.rician_factor != kappa:
        channel = channel.with_kappa(kappa)
    t = prior.num_snapshots if num_snapshots is None else num_snapshots
    batch = simulate_snapshots(prior.geom, sources, channel, t, prior.snr_db, sim_rng, seed=seed)
    return Scene(sources, batch, eigendecompose(sample_covariance(batch)))


@dataclass
class Dataset:
    prior: ScenarioPrior
    inputs: np.ndarray  # (count, 2, N, N) float32
    labels: np.ndarray  # (count, 3K) float64
    seeds: np.ndarray  # (count,) uint64
    master_seed: int | None = None
    input_mode: str = "signal"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.prior, self.inputs[index], self.labels[index], self.seeds[index], self.master_seed,
                       self.input_mode)


def generate_dataset(prior: ScenarioPrior, count: int, master_seed: int, input_mode: str = "signal") -> Dataset:
    """Simulate ``count`` labeled scenes; record ``i`` uses seed ``derive_seed(master_seed, i)``.

    ``input_mode`` "signal" keeps only the K leading eigenvectors in each
    tensor (other columns zeroed); "full" keeps the whole eigenvector matrix.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r} (expected one of {INPUT_MODES})")
    prior.validate()
    columns = prior.num_sources if input_mode == "signal" else None
    n = prior.geom.num_elements
    channel = prior.channel_model
    inputs = np.empty((count, 2, n, n), dtype=np.float32)
    labels = np.empty((count, 3 * prior.num_sources))
    seeds = np.empty(count, dtype=np.uint64)
    for i in range(count):
        seed = derive_seed(master_seed, i)
        scene = simulate_scene(prior, seed, channel=channel)
        inputs[i] = cnn_input_tensor(scene.split, columns)
        labels[i] = scene.labels
        seeds[i] = seed
    return Dataset(prior, inputs, labels, seeds, master_seed, input_mode)


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``round(fraction * count)`` records train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def _record_layout(n: int, k: int) -> tuple[int, int, int]:
    tensor = 2 * n * n * 4
    labels = 3 * k * 8
    return tensor, labels, tensor + labels + 8


def dataset_to_bytes(ds: Dataset) -> bytes:
    n = ds.prior.geom.num_elements
    k = ds.prior.num_sources
    header = {
        "N": n, "K": k, "T": ds.prior.num_snapshots, "count": len(ds),
        "master_seed": ds.master_seed, "input_mode": ds.input_mode, "prior": ds.prior.to_dict(), "meta": ds.meta,
    }
    rec = np.zeros(len(ds), dtype=[("x", "<f4", (2 * n * n,)), ("y", "<f8", (3 * k,)), ("seed", "<u8")])
    rec["x"] = ds.inputs.reshape(len(ds), -1)
    rec["y"] = ds.labels
    rec["seed"] = ds.seeds
    return b"".join([MAGIC, f"version {VERSION}\n".encode(),
                     json.dumps(header, sort_keys=True).encode() + b"\n", rec.tobytes()])


def dataset_from_bytes(data: bytes) -> Dataset:
    if not data.startswith(MAGIC):
        raise FormatError("not a dataset file (bad magic)", 0)
    pos = len(MAGIC)
    end = data.find(b"\n", pos)
    if end < 0 or data[pos:end] != f"version {VERSION}".encode():
        raise FormatError(f"unsupported dataset version line {data[pos:end][:32]!r}", pos)
    pos = end + 1
    end = data.find(b"\n", pos)
    if end < 0:
        raise FormatError("dataset header is not terminated", pos)
    try:
        header = json.loads(data[pos:end])
        n, k, count = int(header["N"]), int(header["K"]), int(header["count"])
        prior = ScenarioPrior.from_dict(header["prior"])
        input_mode = str(header["input_mode"])
        if input_mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {input_mode!r}")
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed dataset header: {exc}", pos) from exc
    if prior.geom.num_elements != n or prior.num_sources != k:
        raise FormatError("header N/K disagree with the prior", pos)
    pos = end + 1
    _, _, rec_size = _record_layout(n, k)
    available = len(data) - pos
    if available < count * rec_size:
        bad = available // rec_size
        raise FormatError(f"payload truncated: record {bad} of {count} is incomplete",
                          pos + bad * rec_size, record=bad)
    if available > count * rec_size:
        raise FormatError(f"{available - count * rec_size} bytes beyond the {count} declared records",
                          pos + count * rec_size)
    dt = np.dtype([("x", "<f4", (2 * n * n,)), ("y", "<f8", (3 * k,)), ("seed", "<u8")])
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    return Dataset(prior, rec["x"].reshape(count, 2, n, n).astype(np.float32),
                   rec["y"].astype(np.float64), rec["seed"].astype(np.uint64),
                   header.get("master_seed"), input_mode, header.get("meta") or {})


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def read_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())

