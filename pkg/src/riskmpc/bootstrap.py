"""Bootstrap ensembles of recurrence forecasters for obstacle tracks.

One model per (training-window length, retained rank) pair and measurement
axis: windows grow from ``n_train`` in steps of ``n_step`` over the most
recent history, and for each window the threshold-selected rank is relaxed
``rank_relax`` extra steps.  Members that cannot produce a recurrence fall
back to a least-squares constant-velocity extrapolation, so the ensemble
always reaches its configured size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ssa
from .errors import InsufficientDataError, NumericError, VerticalityError

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class BootstrapParams:
    """Knobs for ensemble generation.

    n_train        initial training-window length (samples)
    n_step         window growth per enumeration step (samples)
    rank_threshold threshold on consecutive-reconstruction gaps (rank pick)
    rank_relax     extra ranks kept beyond the selected one
    ensemble_size  members per axis
    window         delay-embedding length L
    horizon        forecast steps
    max_history    ring-buffer cap; defaults to 4 * n_train
    """

    n_train: int = 100
    n_step: int = 5
    rank_threshold: float = 20.0
    rank_relax: int = 8
    ensemble_size: int = 40
    window: int = 24
    horizon: int = 10
    max_history: int | None = None

    def __post_init__(self):
        if self.n_train < 4 or self.n_step < 1 or self.horizon < 1:
            raise ValueError("n_train, n_step and horizon must be positive")
        if self.rank_threshold <= 0:
            raise ValueError("rank_threshold must be positive")
        if self.rank_relax < 0:
            raise ValueError("rank_relax must be non-negative")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be at least 1")
        if self.window < 2 or self.window > self.n_train // 2:
            raise ValueError(f"window must lie in [2, n_train/2 = {self.n_train // 2}]")
        if self.ensemble_size < 2:
            warnings.warn("ensemble_size < 2 leaves no spread to estimate", stacklevel=2)
        if self.n_train < 10 * self.horizon:
            warnings.warn(
                f"n_train = {self.n_train} below the recommended 10 * horizon "
                f"= {10 * self.horizon}",
                stacklevel=2,
            )
        if self.max_history is None:
            object.__setattr__(self, "max_history", 4 * self.n_train)


class MeasurementBuffer:
    """Ring buffer of 3-D center measurements, one series per axis.

    Single-writer: the simulation loop pushes samples; ensemble generation
    reads immutable snapshots.  ``push_count`` grows monotonically even after
    the ring wraps, which lets models recognize the exact buffer state they
    were trained on.
    """

    def __init__(self, max_history: int, sample_rate: float = 20.0):
        if max_history < 4:
            raise ValueError("max_history must be at least 4")
        self.max_history = int(max_history)
        self.sample_rate = float(sample_rate)
        self._data = np.empty((self.max_history, 3))
        self._n = 0
        self._start = 0
        self.push_count = 0

    def __len__(self) -> int:
        return self._n

    def push(self, sample) -> None:
        sample = np.asarray(sample, dtype=float)
        if sample.shape != (3,) or not np.all(np.isfinite(sample)):
            raise NumericError(f"sample must be a finite 3-vector, got {sample!r}")
        end = (self._start + self._n) % self.max_history
        self._data[end] = sample
        if self._n == self.max_history:
            self._start = (self._start + 1) % self.max_history
        else:
            self._n += 1
        self.push_count += 1

    def tail(self, n: int) -> np.ndarray:
        """Most recent ``n`` samples, oldest first, shape (n, 3)."""
        if n > self._n:
            raise InsufficientDataError(f"buffer holds {self._n} samples, need {n}")
        idx = (self._start + self._n - n + np.arange(n)) % self.max_history
        return self._data[idx]

    def axis_tail(self, axis: int, n: int) -> np.ndarray:
        return self.tail(n)[:, axis]


@dataclass(frozen=True)
class AxisModel:
    """A trained single-axis forecaster: retained spectrum plus recurrence."""

    axis: int
    train_window: int
    rank: int
    eigenvalues: np.ndarray
    basis: np.ndarray  # L x rank retained eigenvectors
    recurrence: ssa.LinearRecurrence
    train_residual: float
    generated_at: int  # buffer push_count at training time
    recon_tail: np.ndarray  # cached reconstructed tail (L - 1 samples)


@dataclass(frozen=True)
class LinearTrendModel:
    """Constant-velocity fallback: least-squares line through recent samples."""

    axis: int
    last_value: float
    slope: float  # per sample

    def predict(self, horizon: int) -> np.ndarray:
        return self.last_value + self.slope * np.arange(1, horizon + 1)


@dataclass(frozen=True)
class ForecastEnsemble:
    """Member-wise center forecasts, shape (ensemble_size, horizon, 3), meters."""

    predictions: np.ndarray
    obstacle_id: int
    origin_index: int
    n_backup: int = 0


def backup_model(buffer: MeasurementBuffer, axis: int) -> LinearTrendModel:
    """Fit a line to the last up-to-10 samples of one axis by least squares."""
    n = min(10, len(buffer))
    if n < 2:
        if n == 0:
            raise InsufficientDataError("backup model needs at least one sample")
        vals = buffer.axis_tail(axis, n)
        return LinearTrendModel(axis=axis, last_value=float(vals[-1]), slope=0.0)
    vals = buffer.axis_tail(axis, n)
    t = np.arange(n, dtype=float)
    slope, intercept = np.polyfit(t, vals, 1)
    return LinearTrendModel(
        axis=axis, last_value=float(intercept + slope * (n - 1)), slope=float(slope)
    )


def _window_candidates(series_vals, axis, window_len, params, push_count):
    """All candidate models for one axis and one training window."""
    model = ssa.spectral_decompose(
        ssa.build_hankel(ssa.TimeSeries(values=series_vals), params.window)
    )
    t_sel = ssa.select_rank(model, params.rank_threshold, window_len)
    d_max = min(t_sel + params.rank_relax, params.window - 1)
    recs = np.cumsum(ssa._component_series(model, d_max), axis=0)
    out = []
    for rank in range(t_sel, d_max + 1):
        try:
            rec = ssa.recurrence_coefficients(model, rank)
        except VerticalityError:
            continue
        recon = recs[rank - 1]
        out.append(
            AxisModel(
                axis=axis,
                train_window=window_len,
                rank=rank,
                eigenvalues=model.eigenvalues[:rank].copy(),
                basis=model.eigenvectors[:, :rank].copy(),
                recurrence=rec,
                train_residual=float(np.linalg.norm(recon - series_vals)),
                generated_at=push_count,
                recon_tail=recon[-(params.window - 1):].copy(),
            )
        )
    return out


def enumerate_candidates(
    buffer: MeasurementBuffer, params: BootstrapParams, fill_target: int | None = None
) -> list[list[AxisModel]]:
    """Per-axis candidate models over the training-window grid.

    Windows are enumerated lazily, newest data first (each window is the most
    recent ``w`` samples); enumeration stops once every axis holds
    ``fill_target`` candidates.  Pass ``fill_target=None`` to walk the whole
    grid.
    """
    if len(buffer) < params.n_train:
        raise InsufficientDataError(
            f"buffer holds {len(buffer)} samples, need {params.n_train}"
        )
    per_axis: list[list[AxisModel]] = [[], [], []]
    window_len = params.n_train
    while window_len <= len(buffer):
        snapshot = buffer.tail(window_len)
        for axis in range(3):
            per_axis[axis].extend(
                _window_candidates(
                    snapshot[:, axis], axis, window_len, params, buffer.push_count
                )
            )
        if fill_target is not None and all(len(c) >= fill_target for c in per_axis):
            break
        window_len += params.n_step
    return per_axis


def generate_ensemble(buffer: MeasurementBuffer, params: BootstrapParams):
    """Train ``ensemble_size`` models per axis; back-fill with trend models.

    When a window grid yields more candidates than needed, the best-fitting
    ones (smallest training residual) are kept, ties broken by enumeration
    order.
    """
    per_axis = enumerate_candidates(buffer, params, fill_target=params.ensemble_size)
    tuples: list[list] = []
    for axis in range(3):
        cands = per_axis[axis]
        if len(cands) > params.ensemble_size:
            order = sorted(range(len(cands)), key=lambda i: (cands[i].train_residual, i))
            keep = sorted(order[: params.ensemble_size])
            cands = [cands[i] for i in keep]
        while len(cands) < params.ensemble_size:
            cands.append(backup_model(buffer, axis))
        tuples.append(cands)
    return tuples


def _axis_forecast(model, buffer: MeasurementBuffer, window: int, horizon: int):
    if isinstance(model, LinearTrendModel):
        return model.predict(horizon), True
    if model.generated_at == buffer.push_count:
        tail = model.recon_tail
    else:
        vals = buffer.axis_tail(model.axis, model.train_window)
        H = ssa.build_hankel(ssa.TimeSeries(values=vals), window)
        proj = model.basis @ (model.basis.T @ H.matrix)
        tail = ssa._antidiagonal_means(proj)[-(window - 1):]
    return ssa.forecast(tail, model.recurrence, horizon), False


def forecast_ensemble(
    tuples, buffer: MeasurementBuffer, params: BootstrapParams, obstacle_id: int = 0
) -> ForecastEnsemble:
    """Stack per-axis model forecasts into ensemble members.

    Member j pairs the j-th x, y and z models.  A model whose recurrence
    cannot be applied is silently replaced by the trend fallback and counted
    in ``n_backup``.
    """
    n = params.ensemble_size
    if len(tuples) != 3 or any(len(t) != n for t in tuples):
        raise ValueError("need exactly ensemble_size models per axis")
    preds = np.empty((n, params.horizon, 3))
    n_backup = 0
    for axis in range(3):
        for j, model in enumerate(tuples[axis]):
            try:
                vals, used_backup = _axis_forecast(model, buffer, params.window, params.horizon)
            except (VerticalityError, NumericError):
                vals = backup_model(buffer, axis).predict(params.horizon)
                used_backup = True
            # an unstable recurrence can run away within the horizon; fall
            # back rather than hand the planner a divergent member
            if not np.all(np.isfinite(vals)) or np.max(np.abs(vals)) > 1e6:
                vals = backup_model(buffer, axis).predict(params.horizon)
                used_backup = True
            preds[j, :, axis] = vals
            n_backup += int(used_backup)
    preds.flags.writeable = False
    return ForecastEnsemble(
        predictions=preds,
        obstacle_id=obstacle_id,
        origin_index=buffer.push_count,
        n_backup=n_backup,
    )
