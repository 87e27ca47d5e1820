"""Single-channel singular spectrum analysis.

Delay embedding into a Hankel trajectory matrix, eigendecomposition of the
lag covariance, reconstruction by anti-diagonal averaging, rank selection by
thresholding consecutive-reconstruction differences, and multi-step
forecasting through a linear recurrence extracted from the retained
eigenvectors.

All types are immutable after construction and all operations are pure
functions, so everything here is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    DegenerateComponentError,
    DimensionError,
    NumericError,
    VerticalityError,
)

# Relative eigenvalue floor below which a component counts as zero energy.
ZERO_COMPONENT_RTOL = 1e-12


@dataclass(frozen=True)
class TimeSeries:
    """A scalar sampled signal (position channel, meters)."""

    values: np.ndarray
    sample_rate: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise DimensionError(f"series must be 1-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("series contains non-finite values")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class HankelView:
    """Trajectory matrix of a series: L rows, K = N - L + 1 columns.

    entry(i, j) = values[i + j] (0-based), so every anti-diagonal is constant.
    """

    matrix: np.ndarray
    L: int

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    @property
    def series_length(self) -> int:
        return self.L + self.K - 1


@dataclass(frozen=True)
class SpectralModel:
    """Eigendecomposition of the lag covariance X = H H^T.

    ``eigenvalues`` are sorted non-increasing and clamped at zero;
    ``eigenvectors`` columns are orthonormal with a fixed sign convention
    (largest-magnitude entry positive) so repeated runs are bit-identical.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    hankel: HankelView
    sample_rate: float = 1.0

    @property
    def L(self) -> int:
        return self.hankel.L


@dataclass(frozen=True)
class LinearRecurrence:
    """Forecasting recurrence y_next = sum_j coeffs[j-1] * y_{next-j}.

    ``coeffs[0]`` multiplies the most recent sample.  ``verticality`` is the
    squared norm of the last eigenvector components of the retained subspace;
    extraction fails when it reaches 1.
    """

    coeffs: np.ndarray
    verticality: float
    rank: int


def build_hankel(series: TimeSeries, L: int) -> HankelView:
    """Delay-embed a series into its L-row trajectory matrix."""
    values = series.values
    n = values.size
    if n < 4:
        raise DimensionError(f"need at least 4 samples, got {n}")
    if not 2 <= L <= n - 1:
        raise DimensionError(f"embedding length L={L} outside [2, {n - 1}]")
    k = n - L + 1
    # Stride trick would alias the input; an explicit copy keeps views immutable.
    idx = np.arange(L)[:, None] + np.arange(k)[None, :]
    matrix = values[idx]
    matrix.flags.writeable = False
    return HankelView(matrix=matrix, L=L)


def spectral_decompose(H: HankelView, sample_rate: float = 1.0) -> SpectralModel:
    """Eigendecompose the lag covariance H H^T (symmetric, L x L)."""
    if not np.all(np.isfinite(H.matrix)):
        raise NumericError("Hankel matrix contains non-finite entries")
    cov = H.matrix @ H.matrix.T
    lam, vecs = np.linalg.eigh(cov)
    # eigh returns ascending order.
    lam = lam[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    lam_max = max(lam[0], 0.0)
    neg_floor = -1e-10 * max(lam_max, 1.0)
    if lam[-1] < neg_floor:
        raise NumericError(f"lag covariance has eigenvalue {lam[-1]:.3e} below tolerance")
    np.maximum(lam, 0.0, out=lam)
    # Fixed sign convention: make the largest-magnitude entry of each column positive.
    flip = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])] < 0
    vecs[:, flip] *= -1.0
    lam.flags.writeable = False
    vecs.flags.writeable = False
    return SpectralModel(eigenvalues=lam, eigenvectors=vecs, hankel=H, sample_rate=sample_rate)


@lru_cache(maxsize=64)
def _antidiagonal_counts_cached(L: int, K: int) -> np.ndarray:
    s = np.arange(L + K - 1)
    out = np.minimum.reduce([s + 1, np.full_like(s, L), np.full_like(s, K), L + K - 1 - s])
    out.flags.writeable = False
    return out


def _antidiagonal_counts(L: int, K: int) -> np.ndarray:
    return _antidiagonal_counts_cached(L, K)


def hankelize(matrix: np.ndarray, sample_rate: float = 1.0) -> TimeSeries:
    """Average the anti-diagonals of a matrix into a series of length L + K - 1.

    This is the Frobenius-nearest Hankel projection: each output sample is the
    mean of the matrix entries on its anti-diagonal.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {matrix.shape}")
    values = _antidiagonal_means(matrix)
    return TimeSeries(values=values, sample_rate=sample_rate)


def _antidiagonal_means(matrix: np.ndarray) -> np.ndarray:
    # Averaging deviations from one reference entry per anti-diagonal keeps
    # the operation an exact identity on matrices that are already Hankel.
    L, K = matrix.shape
    n = L + K - 1
    ref = np.concatenate([matrix[0, :], matrix[1:, K - 1]])
    idx = np.arange(L)[:, None] + np.arange(K)[None, :]
    sums = np.bincount(idx.ravel(), weights=(matrix - ref[idx]).ravel(), minlength=n)
    return ref + sums / _antidiagonal_counts(L, K)


def _projection_sum(model: SpectralModel, components: np.ndarray) -> np.ndarray:
    """Sum of rank-1 projections mu_p mu_p^T H over the given component indices."""
    U = model.eigenvectors[:, components]
    return U @ (U.T @ model.hankel.matrix)


def reconstruct(model: SpectralModel, components) -> TimeSeries:
    """Hankelized sum of the selected components' rank-1 projections.

    ``components`` holds 0-based component indices.  Selecting a component
    whose eigenvalue is below ZERO_COMPONENT_RTOL relative to the leading one
    is rejected: such directions carry no signal energy.
    """
    comps = np.asarray(sorted(set(int(c) for c in components)), dtype=int)
    L = model.L
    if comps.size == 0 or comps.min() < 0 or comps.max() >= L:
        raise DimensionError(f"components must be within [0, {L - 1}]")
    lam1 = model.eigenvalues[0]
    weak = model.eigenvalues[comps] <= ZERO_COMPONENT_RTOL * lam1
    if np.any(weak):
        raise DegenerateComponentError(
            f"components {comps[weak].tolist()} have negligible energy"
        )
    return hankelize(_projection_sum(model, comps), sample_rate=model.sample_rate)


def _component_series(model: SpectralModel, d_max: int) -> np.ndarray:
    """Hankelized series of each rank-1 component, rows 0..d_max-1.

    The anti-diagonal sums of the outer product mu (mu' H) are exactly the
    convolution of mu with mu' H, which turns reconstruction scans from
    repeated matrix averaging into d_max short convolutions.
    """
    H = model.hankel.matrix
    L, K = H.shape
    counts = _antidiagonal_counts(L, K)
    out = np.empty((d_max, L + K - 1))
    W = model.eigenvectors[:, :d_max].T @ H  # rows: mu_d' H
    for d in range(d_max):
        out[d] = np.convolve(model.eigenvectors[:, d], W[d]) / counts
    return out


def _leading_reconstructions(model: SpectralModel, d_max: int) -> np.ndarray:
    """Stack of hankelized reconstructions Y^{1:d} for d = 1..d_max.

    Internal helper: unlike :func:`reconstruct` it tolerates zero-energy
    components (their projections vanish), which rank scanning requires.
    """
    return np.cumsum(_component_series(model, d_max), axis=0)


def select_rank(model: SpectralModel, threshold: float, n: int) -> int:
    """Smallest rank t whose consecutive-reconstruction gap falls under threshold/n.

    Scans t = 1, 2, ... and returns the first t with
    ``||Y^{1:t} - Y^{1:t+1}|| - ||Y^{1:t+1} - Y^{1:t+2}|| <= threshold / n``;
    once components beyond the signal rank only shuffle residual noise the
    two gaps agree.  Capped at L - 2 (the criterion looks two ranks ahead).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    L = model.L
    cap = max(L - 2, 1)
    # consecutive reconstructions differ by exactly one component's series
    comps = _component_series(model, min(cap + 2, L))
    gaps = np.linalg.norm(comps[1:], axis=1)  # gaps[d-1] = ||Y^{1:d} - Y^{1:d+1}||
    for t in range(1, cap):
        if gaps[t - 1] - gaps[t] <= threshold / n:
            return t
    return cap


def recurrence_coefficients(model: SpectralModel, rank: int) -> LinearRecurrence:
    """Extract the forecasting recurrence from the top ``rank`` eigenvectors.

    With pi_i the last entry of eigenvector i and v^2 = sum pi_i^2, the
    reversed coefficient vector is sum_i pi_i * mu_i[:L-1] / (1 - v^2).
    Fails when the retained subspace contains a vertical direction
    (v^2 -> 1): the recurrence is then undefined.
    """
    L = model.L
    if not 1 <= rank <= L - 1:
        raise DimensionError(f"rank must be within [1, {L - 1}]")
    U = model.eigenvectors[:, :rank]
    pi = U[-1, :]
    v2 = float(pi @ pi)
    if v2 >= 1.0 - 1e-8:
        raise VerticalityError(f"verticality v^2 = {v2:.12f} too close to 1")
    reversed_coeffs = (U[:-1, :] @ pi) / (1.0 - v2)
    coeffs = reversed_coeffs[::-1].copy()
    coeffs.flags.writeable = False
    return LinearRecurrence(coeffs=coeffs, verticality=v2, rank=rank)


def forecast(tail: np.ndarray, recurrence: LinearRecurrence, horizon: int) -> np.ndarray:
    """Iterate the recurrence ``horizon`` steps past the end of ``tail``.

    ``tail`` must be the reconstructed (denoised) series tail; feeding the raw
    noisy tail re-injects the noise the decomposition removed.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    coeffs = recurrence.coeffs
    order = coeffs.size
    tail = np.asarray(tail, dtype=float)
    if tail.size < order:
        raise DimensionError(f"tail must hold at least {order} samples")
    window = tail[-order:][::-1].copy()  # window[0] = most recent
    out = np.empty(horizon)
    for i in range(horizon):
        nxt = float(coeffs @ window)
        out[i] = nxt
        window[1:] = window[:-1]
        window[0] = nxt
    return out
