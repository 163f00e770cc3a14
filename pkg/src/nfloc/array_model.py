"""Uniform planar array geometry, near-field steering and Rician snapshot simulation.

The array lies in the y-z plane with its reference antenna at the origin.
Antenna ``n`` has zero-based grid offsets ``m_y = n % n_y`` and
``m_z = n // n_y`` so the flat index is row-major over (m_z, m_y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array layout.

    Attributes:
        n_y: number of horizontal elements.
        n_z: number of vertical elements.
        d_y: horizontal spacing in meters.
        d_z: vertical spacing in meters.
        wavelength: carrier wavelength in meters.
    """

    n_y: int
    n_z: int
    d_y: float
    d_z: float
    wavelength: float

    def __post_init__(self):
        if self.n_y < 1 or self.n_z < 1:
            raise ValueError(f"element counts must be >= 1, got n_y={self.n_y}, n_z={self.n_z}")
        if not (self.d_y > 0 and self.d_z > 0 and self.wavelength > 0):
            raise ValueError("spacings and wavelength must be positive")

    @classmethod
    def half_wavelength(cls, n_y: int, n_z: int, wavelength: float = 0.1) -> "ArrayGeometry":
        return cls(n_y, n_z, wavelength / 2, wavelength / 2, wavelength)

    @property
    def num_elements(self) -> int:
        return self.n_y * self.n_z

    @property
    def aperture(self) -> float:
        """Largest physical extent D of the array (diagonal)."""
        return math.hypot((self.n_y - 1) * self.d_y, (self.n_z - 1) * self.d_z)

    @property
    def fraunhofer_distance(self) -> float:
        """d_FA = 2 D^2 / lambda."""
        return 2.0 * self.aperture**2 / self.wavelength

    @property
    def positions(self) -> np.ndarray:
        """(N, 3) antenna positions in meters, flat-index order."""
        idx = np.arange(self.num_elements)
        out = np.zeros((self.num_elements, 3))
        out[:, 1] = (idx % self.n_y) * self.d_y
        out[:, 2] = (idx // self.n_y) * self.d_z
        return out


@dataclass(frozen=True)
class SourcePosition:
    """A point source in spherical (azimuth, elevation, range) and Cartesian form."""

    azimuth: float
    elevation: float
    range: float
    x: float
    y: float
    z: float

    @classmethod
    def from_spherical(cls, azimuth: float, elevation: float, range_: float) -> "SourcePosition":
        x, y, z = source_to_cartesian(azimuth, elevation, range_)
        return cls(float(azimuth), float(elevation), float(range_), x, y, z)

    @classmethod
    def from_cartesian(cls, x: float, y: float, z: float) -> "SourcePosition":
        az, el, r = cartesian_to_spherical(x, y, z)
        return cls(az, el, r, float(x), float(y), float(z))

    @property
    def cartesian(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def source_to_cartesian(azimuth: float, elevation: float, range_: float) -> tuple[float, float, float]:
    if not range_ > 0:
        raise ValueError(f"range must be positive, got {range_}")
    ce = math.cos(elevation)
    return (
        range_ * math.cos(azimuth) * ce,
        range_ * math.sin(azimuth) * ce,
        range_ * math.sin(elevation),
    )


def cartesian_to_spherical(x: float, y: float, z: float) -> tuple[float, float, float]:
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        raise ValueError("the origin has no spherical representation")
    return math.atan2(y, x), math.atan2(z, math.hypot(x, y)), r


def antenna_position(geom: ArrayGeometry, index: int) -> np.ndarray:
    if not 0 <= index < geom.num_elements:
        raise IndexError(f"antenna index {index} outside [0, {geom.num_elements})")
    m_y, m_z = index % geom.n_y, index // geom.n_y
    return np.array([0.0, m_y * geom.d_y, m_z * geom.d_z])


def element_distance(source: SourcePosition, geom: ArrayGeometry, index: int) -> float:
    p = antenna_position(geom, index)
    return math.sqrt(source.x**2 + (source.y - p[1]) ** 2 + (source.z - p[2]) ** 2)


def path_difference(points: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Range minus element distance, ``r_bar - r_n``, for many points at once.

    Evaluated as ``(2 p.s - |p|^2) / (r_bar + r_n)`` which avoids the
    cancellation of the direct difference at large ranges.

    Args:
        points: (..., 3) Cartesian source positions.
        positions: (N, 3) antenna positions.

    Returns:
        (..., N) array of path differences in meters.
    """
    points = np.asarray(points, dtype=float)
    r_bar = np.linalg.norm(points, axis=-1)[..., None]
    diff = points[..., None, :] - positions
    r_n = np.sqrt(np.einsum("...ij,...ij->...i", diff, diff))
    cross = 2.0 * points @ positions.T - np.einsum("ij,ij->i", positions, positions)
    return cross / (r_bar + r_n)


def steering_vector(geom: ArrayGeometry, source: SourcePosition) -> np.ndarray:
    """Near-field array response ``exp(j 2 pi / lambda (r_bar - r_n))``."""
    delta = path_difference(source.cartesian, geom.positions)
    return np.exp(1j * (2.0 * np.pi / geom.wavelength) * delta)


def steering_matrix(geom: ArrayGeometry, points: np.ndarray) -> np.ndarray:
    """Steering vectors for (..., 3) Cartesian points, shape (..., N)."""
    phase = (2.0 * np.pi / geom.wavelength) * path_difference(points, geom.positions)
    out = np.empty(phase.shape, dtype=complex)
    np.cos(phase, out=out.real)
    np.sin(phase, out=out.imag)
    return out


def nlos_correlation_matrix(geom: ArrayGeometry) -> np.ndarray:
    """Isotropic-scattering spatial correlation ``sinc(2 |p_n - p_m| / lambda)``."""
    p = geom.positions
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return np.sinc(2.0 * dist / geom.wavelength)


@dataclass(frozen=True)
class ChannelModel:
    """Rician mixture weights plus the NLoS spatial correlation.

    ``rician_factor`` is a linear power ratio; ``math.inf`` gives a pure LoS channel.
    """

    rician_factor: float
    nlos_correlation: np.ndarray = field(repr=False)
    _sqrt_corr: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.rician_factor >= 0:
            raise ValueError(f"Rician factor must be >= 0, got {self.rician_factor}")
        corr = np.asarray(self.nlos_correlation)
        if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
            raise ValueError("NLoS correlation must be a square matrix")
        if not np.allclose(corr, corr.conj().T, atol=1e-12):
            raise ValueError("NLoS correlation must be Hermitian")
        w, v = np.linalg.eigh(corr)
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise ValueError(f"NLoS correlation is not PSD (min eigenvalue {w.min():.3e})")
        sqrt_corr = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
        object.__setattr__(self, "nlos_correlation", corr)
        object.__setattr__(self, "_sqrt_corr", sqrt_corr)

    @classmethod
    def for_geometry(cls, geom: ArrayGeometry, kappa: float) -> "ChannelModel":
        return cls(kappa, nlos_correlation_matrix(geom))

    @property
    def los_weight(self) -> float:
        k = self.rician_factor
        return 1.0 if math.isinf(k) else math.sqrt(k / (k + 1.0))

    @property
    def nlos_weight(self) -> float:
        k = self.rician_factor
        return 0.0 if math.isinf(k) else math.sqrt(1.0 / (k + 1.0))

    def with_kappa(self, kappa: float) -> "ChannelModel":
        return ChannelModel(kappa, self.nlos_correlation)


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with the given variance."""
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    z = rng.standard_normal(shape + (2,))
    return math.sqrt(variance / 2.0) * (z[..., 0] + 1j * z[..., 1])


def draw_rician_channel(geom: ArrayGeometry, source: SourcePosition, model: ChannelModel,
                        rng: np.random.Generator) -> np.ndarray:
    los = steering_vector(geom, source)
    if model.nlos_weight == 0.0:
        return los
    w = complex_normal(rng, geom.num_elements)
    return model.los_weight * los + model.nlos_weight * (model._sqrt_corr @ w)


def noise_variance(snr_db: float) -> float:
    return 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True)
class SnapshotBatch:
    """T received snapshots (rows) plus the scene that generated them."""

    snapshots: np.ndarray
    snr_per_antenna_db: float
    ground_truth: tuple[SourcePosition, ...]
    seed: int | None = None

    @property
    def num_snapshots(self) -> int:
        return self.snapshots.shape[0]


def simulate_snapshots(geom: ArrayGeometry, sources: Sequence[SourcePosition], model: ChannelModel,
                       num_snapshots: int, snr_db: float, rng: np.random.Generator,
                       seed: int | None = None) -> SnapshotBatch:
    """Draw ``x(t) = sum_k h_k s_k(t) + n(t)`` for t = 1..T.

    Channels are drawn once per batch. Channels, symbols and noise come from
    three independent child streams of ``rng`` so that, for a given seed, the
    first T snapshots of a longer batch equal a T-snapshot batch and changing
    kappa only reweights the same NLoS draw.
    """
    if len(sources) == 0:
        raise ValueError("at least one source is required")
    if num_snapshots < 1:
        raise ValueError(f"num_snapshots must be >= 1, got {num_snapshots}")
    ch_rng, sym_rng, noise_rng = rng.spawn(3)
    n = geom.num_elements
    h = np.stack([draw_rician_channel(geom, s, model, ch_rng) for s in sources], axis=1)
    symbols = complex_normal(sym_rng, (num_snapshots, len(sources)))
    x = symbols @ h.T
    var = noise_variance(snr_db)
    if var > 0:
        x = x + complex_normal(noise_rng, (num_snapshots, n), var)
    return SnapshotBatch(x, float(snr_db), tuple(sources), seed)
