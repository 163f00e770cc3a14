"""Sample covariance, eigendecomposition with a deterministic phase, and the CNN input tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .array_model import SnapshotBatch


@dataclass(frozen=True)
class SampleCovariance:
    matrix: np.ndarray
    num_snapshots: int


@dataclass(frozen=True)
class SubspaceSplit:
    """Eigenvalues (descending) and matching unit eigenvectors as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    signal_dim: int | None = None

    @property
    def num_elements(self) -> int:
        return self.eigenvectors.shape[0]


def covariance_from_snapshots(snapshots: np.ndarray) -> SampleCovariance:
    """R = (1/T) sum_t x(t) x(t)^H for snapshots stacked as rows of a (T, N) array."""
    x = np.asarray(snapshots)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a (T, N) snapshot array with T >= 1, got shape {x.shape}")
    r = x.T @ x.conj() / x.shape[0]
    return SampleCovariance(0.5 * (r + r.conj().T), x.shape[0])


def sample_covariance(batch: SnapshotBatch) -> SampleCovariance:
    return covariance_from_snapshots(batch.snapshots)


def _fix_phase(vectors: np.ndarray) -> np.ndarray:
    # rotate each column so its largest-magnitude entry is real-positive;
    # argmax returns the lowest index on ties
    idx = np.argmax(np.abs(vectors), axis=0)
    pivot = vectors[idx, np.arange(vectors.shape[1])]
    mag = np.abs(pivot)
    rot = np.where(mag > 0, mag / np.where(mag > 0, pivot, 1.0), 1.0)
    out = vectors * rot
    out[idx, np.arange(vectors.shape[1])] = mag  # exactly real after rounding
    return out


def eigendecompose(cov: SampleCovariance | np.ndarray, hermitian_tol: float = 1e-10) -> SubspaceSplit:
    """Hermitian eigendecomposition sorted by descending eigenvalue.

    Equal eigenvalues are ordered by the lexicographic (real, imag) order of
    their phase-fixed eigenvectors so the result is a function of the matrix alone.

    Raises:
        ValueError: if the input deviates from Hermitian by more than
            ``hermitian_tol`` relative Frobenius norm.
    """
    r = np.asarray(cov.matrix if isinstance(cov, SampleCovariance) else cov)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {r.shape}")
    scale = np.linalg.norm(r)
    if np.linalg.norm(r - r.conj().T) > hermitian_tol * max(scale, np.finfo(float).tiny):
        raise ValueError("matrix is not Hermitian within tolerance")
    w, v = np.linalg.eigh(r)
    v = _fix_phase(v)
    # lexsort: last key is primary
    keys = [v.imag[i] for i in range(v.shape[0] - 1, -1, -1)]
    keys += [v.real[i] for i in range(v.shape[0] - 1, -1, -1)]
    keys.append(-w)
    order = np.lexsort(keys)
    return SubspaceSplit(w[order], np.ascontiguousarray(v[:, order]))


def split_subspaces(split: SubspaceSplit, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (signal, noise) eigenvector blocks for ``k`` sources."""
    n = split.num_elements
    if not 1 <= k < n:
        raise ValueError(f"source count must satisfy 1 <= k < N={n}, got {k}")
    return split.eigenvectors[:, :k], split.eigenvectors[:, k:]


INPUT_MODES = ("signal", "full")


def cnn_input_tensor(split: SubspaceSplit, columns: int | None = None) -> np.ndarray:
    """Stack real and imaginary parts of the eigenvector matrix, shape (2, N, N).

    With ``columns`` set, only the leading (largest-eigenvalue) columns are
    kept and the rest are zeroed, so the shape stays (2, N, N).
    """
    u = split.eigenvectors
    if columns is not None:
        if not 1 <= columns <= u.shape[1]:
            raise ValueError(f"columns must lie in [1, {u.shape[1]}], got {columns}")
        u = u.copy()
        u[:, columns:] = 0
    return np.stack([u.real, u.imag])


def tensor_to_eigenvectors(tensor: np.ndarray) -> np.ndarray:
    return np.asarray(tensor[0], dtype=float) + 1j * np.asarray(tensor[1], dtype=float)
