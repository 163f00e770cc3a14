"""3D MUSIC over an (azimuth, elevation, range) grid with greedy peak extraction."""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .array_model import ArrayGeometry, SnapshotBatch, SourcePosition, steering_matrix
from .errors import FormatError
from .subspace import SampleCovariance, eigendecompose, sample_covariance, split_subspaces

DENOMINATOR_FLOOR = 1e-12
EXCLUSION_CELLS = 2


@dataclass(frozen=True)
class SearchGrid:
    azimuth: np.ndarray
    elevation: np.ndarray
    range: np.ndarray

    def __post_init__(self):
        for name in ("azimuth", "elevation", "range"):
            axis = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if axis.ndim != 1 or axis.size < 1:
                raise ValueError(f"{name} axis must be a non-empty 1D sequence")
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing")
            object.__setattr__(self, name, axis)
        if np.any(self.range <= 0):
            raise ValueError("range axis values must be positive")

    @classmethod
    def uniform(cls, n_az: int, n_el: int, n_range: int, range_bounds: tuple[float, float],
                az_bounds=(-np.pi / 3, np.pi / 3), el_bounds=(-np.pi / 3, np.pi / 3)) -> "SearchGrid":
        """Evenly spaced axes including both endpoints."""
        return cls(np.linspace(*az_bounds, n_az), np.linspace(*el_bounds, n_el),
                   np.linspace(*range_bounds, n_range))

    @classmethod
    def from_steps(cls, angle_step: float, range_step: float, range_bounds: tuple[float, float],
                   az_bounds=(-np.pi / 3, np.pi / 3), el_bounds=(-np.pi / 3, np.pi / 3)) -> "SearchGrid":
        """Axes starting at each lower bound and advancing by a fixed step while below the upper bound."""
        def axis(lo, hi, step):
            count = int(np.floor((hi - lo) / step + 1e-9))
            return lo + step * np.arange(max(count, 1))
        return cls(axis(*az_bounds, angle_step), axis(*el_bounds, angle_step), axis(*range_bounds, range_step))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.azimuth.size, self.elevation.size, self.range.size

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def steps(self) -> np.ndarray:
        """Grid step per axis; zero for single-point axes."""
        return np.array([np.diff(a).mean() if a.size > 1 else 0.0
                         for a in (self.azimuth, self.elevation, self.range)])

    def point(self, index: Sequence[int]) -> tuple[float, float, float]:
        i, j, l = index
        return float(self.azimuth[i]), float(self.elevation[j]), float(self.range[l])

    def cartesian_slice(self, range_index: int) -> np.ndarray:
        """(n_az, n_el, 3) Cartesian points at one range value."""
        az = self.azimuth[:, None]
        el = self.elevation[None, :]
        r = self.range[range_index]
        return np.stack(np.broadcast_arrays(r * np.cos(az) * np.cos(el), r * np.sin(az) * np.cos(el),
                                            r * np.sin(el)), axis=-1)


@dataclass(frozen=True)
class MusicSpectrum:
    values: np.ndarray
    grid: SearchGrid


@dataclass(frozen=True)
class PeakSelection:
    indices: list[tuple[int, int, int]]
    values: list[float]
    degenerate: bool
    grid: SearchGrid

    @property
    def coordinates(self) -> list[tuple[float, float, float]]:
        return [self.grid.point(ix) for ix in self.indices]


@dataclass(frozen=True)
class LocationEstimate:
    positions: list[SourcePosition]
    method: str
    elapsed_seconds: float
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([p.cartesian for p in self.positions])


class SteeringCache:
    """Steering vectors of a fixed grid and geometry, stored per range slice.

    Memory is ``grid.size * N * 16`` bytes, so this is meant for small grids
    evaluated against many covariance matrices.
    """

    def __init__(self, grid: SearchGrid, geom: ArrayGeometry):
        self.grid = grid
        self.geom = geom
        self._slices: dict[int, np.ndarray] = {}

    def get(self, range_index: int) -> np.ndarray:
        a = self._slices.get(range_index)
        if a is None:
            a = _slice_steering(self.grid, self.geom, range_index)
            self._slices[range_index] = a
        return a


def _slice_steering(grid: SearchGrid, geom: ArrayGeometry, range_index: int) -> np.ndarray:
    pts = grid.cartesian_slice(range_index).reshape(-1, 3)
    return steering_matrix(geom, pts)


def pseudospectrum_value(noise_subspace: np.ndarray, steering: np.ndarray) -> float:
    """1 / ||U_n^H a||^2 with the denominator floored at 1e-12 N."""
    a = np.asarray(steering)
    proj = noise_subspace.conj().T @ a
    denom = float(np.vdot(proj, proj).real)
    return 1.0 / max(denom, DENOMINATOR_FLOOR * a.size)


def _slice_values(noise_subspace: np.ndarray, steering: np.ndarray) -> np.ndarray:
    # steering rows are a^T, so a^T conj(U_n) = (U_n^H a)^T
    proj = steering @ noise_subspace.conj()
    denom = proj.real**2 + proj.imag**2
    denom = denom.sum(axis=1)
    return 1.0 / np.maximum(denom, DENOMINATOR_FLOOR * steering.shape[1])


def compute_spectrum(noise_subspace: np.ndarray, grid: SearchGrid, geom: ArrayGeometry,
                     cache: SteeringCache | None = None, workers: int = 1,
                     order: Sequence[int] | None = None) -> MusicSpectrum:
    """Evaluate the pseudospectrum on every grid node.

    Work is split into one task per range value; each task is computed the
    same way regardless of ``order`` or ``workers``, so the output is
    bit-identical across schedules.
    """
    if noise_subspace.shape[0] != geom.num_elements:
        raise ValueError("noise subspace row count does not match the array size")
    if cache is not None and (cache.grid is not grid or cache.geom != geom):
        raise ValueError("steering cache was built for a different grid or geometry")
    n_az, n_el, n_r = grid.shape
    values = np.empty((n_az, n_el, n_r))
    u_n = np.ascontiguousarray(noise_subspace)

    def task(l: int) -> None:
        a = cache.get(l) if cache is not None else _slice_steering(grid, geom, l)
        values[:, :, l] = _slice_values(u_n, a).reshape(n_az, n_el)

    schedule = list(range(n_r)) if order is None else list(order)
    if sorted(schedule) != list(range(n_r)):
        raise ValueError("order must be a permutation of the range indices")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(task, schedule))
    else:
        for l in schedule:
            task(l)
    return MusicSpectrum(values, grid)


def _is_local_max(values: np.ndarray, ix: tuple[int, int, int]) -> bool:
    box = tuple(slice(max(i - 1, 0), i + 2) for i in ix)
    return values[ix] >= values[box].max()


def find_peaks(spectrum: MusicSpectrum, k: int, exclusion: int = EXCLUSION_CELLS) -> PeakSelection:
    """Greedy peak selection with a +/- ``exclusion`` cell box suppressed around each pick.

    ``degenerate`` is set when a pick after the first is not a local maximum of
    the spectrum (a shoulder of an earlier peak) or when suppression leaves
    fewer than ``k`` cells, in which case the best unselected cells fill in.
    """
    values = spectrum.values
    if k < 1 or k > values.size:
        raise ValueError(f"cannot select {k} peaks from {values.size} cells")
    masked = values.copy()
    taken = np.zeros(values.shape, dtype=bool)
    indices, picked, degenerate = [], [], False
    for _ in range(k):
        if np.isneginf(masked).all():
            degenerate = True
            rest = np.where(taken, -np.inf, values)
            flat = int(np.argmax(rest))
        else:
            flat = int(np.argmax(masked))
        ix = tuple(int(i) for i in np.unravel_index(flat, values.shape))
        if indices and not _is_local_max(values, ix):
            degenerate = True
        indices.append(ix)
        picked.append(float(values[ix]))
        taken[ix] = True
        box = tuple(slice(max(i - exclusion, 0), i + exclusion + 1) for i in ix)
        masked[box] = -np.inf
    return PeakSelection(indices, picked, degenerate, spectrum.grid)


def estimate_locations_music(data: SnapshotBatch | SampleCovariance, k: int, grid: SearchGrid,
                             geom: ArrayGeometry, cache: SteeringCache | None = None,
                             workers: int = 1, noise_subspace: np.ndarray | None = None) -> LocationEstimate:
    """Covariance -> eigendecomposition -> noise subspace -> spectrum -> peaks -> Cartesian.

    ``elapsed_seconds`` covers the spectrum and peak search only. Pass a
    precomputed ``noise_subspace`` to share the eigendecomposition with
    another estimator.
    """
    if noise_subspace is None:
        cov = sample_covariance(data) if isinstance(data, SnapshotBatch) else data
        _, noise_subspace = split_subspaces(eigendecompose(cov), k)
    t0 = time.perf_counter()
    spectrum = compute_spectrum(noise_subspace, grid, geom, cache=cache, workers=workers)
    peaks = find_peaks(spectrum, k)
    elapsed = time.perf_counter() - t0
    positions = [SourcePosition.from_spherical(*c) for c in peaks.coordinates]
    return LocationEstimate(positions, "music", elapsed, peaks.degenerate)


def nearest_node_error(grid: SearchGrid, azimuth: float, elevation: float, range_: float) -> np.ndarray:
    """Per-axis distance from a point to the closest grid node (best achievable quantization)."""
    return np.array([np.min(np.abs(axis - v)) for axis, v in
                     zip((grid.azimuth, grid.elevation, grid.range), (azimuth, elevation, range_))])


def refine(grid: SearchGrid) -> SearchGrid:
    """Double the resolution by inserting midpoints; every original node is kept."""
    def dense(axis):
        if axis.size == 1:
            return axis
        mids = 0.5 * (axis[:-1] + axis[1:])
        return np.array(list(itertools.chain.from_iterable(zip(axis[:-1], mids))) + [axis[-1]])
    return SearchGrid(dense(grid.azimuth), dense(grid.elevation), dense(grid.range))


SPECTRUM_MAGIC = b"NFLOC-SPECTRUM\n"


def spectrum_to_bytes(spectrum: MusicSpectrum) -> bytes:
    """Text header (shape and axis values), then little-endian float64 values in C order."""
    g = spectrum.grid
    lines = [SPECTRUM_MAGIC.decode().strip(), "version 1", "shape " + " ".join(str(n) for n in g.shape)]
    for name, axis in (("azimuth", g.azimuth), ("elevation", g.elevation), ("range", g.range)):
        lines.append(name + " " + " ".join(repr(float(v)) for v in axis))
    header = ("\n".join(lines) + "\n").encode()
    return header + np.ascontiguousarray(spectrum.values, dtype="<f8").tobytes()


def spectrum_from_bytes(data: bytes) -> MusicSpectrum:
    if not data.startswith(SPECTRUM_MAGIC):
        raise FormatError("not a spectrum file (bad magic)", 0)
    pos, fields = len(SPECTRUM_MAGIC), {}
    for key in ("version", "shape", "azimuth", "elevation", "range"):
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("spectrum header is truncated", pos)
        name, _, rest = data[pos:end].decode("utf-8", "replace").partition(" ")
        if name != key:
            raise FormatError(f"expected header line {key!r}, got {name!r}", pos)
        fields[key] = rest.split()
        pos = end + 1
    if fields["version"] != ["1"]:
        raise FormatError(f"unsupported spectrum version {fields['version']}", len(SPECTRUM_MAGIC))
    try:
        shape = tuple(int(v) for v in fields["shape"])
        axes = [np.array([float(v) for v in fields[k]]) for k in ("azimuth", "elevation", "range")]
        grid = SearchGrid(*axes)
    except ValueError as exc:
        raise FormatError(f"malformed spectrum header: {exc}", len(SPECTRUM_MAGIC)) from exc
    if grid.shape != shape:
        raise FormatError("axis lengths disagree with the declared shape", pos)
    if len(data) - pos != 8 * grid.size:
        raise FormatError(f"payload holds {len(data) - pos} bytes, expected {8 * grid.size}", pos)
    values = np.frombuffer(data, dtype="<f8", offset=pos).reshape(shape).astype(float)
    return MusicSpectrum(values, grid)
