"""Linear-prediction descriptor of the flow time series.

Each of the 2 * m_y * m_x per-cell flow series gets a k-th order linear
predictor fitted by the autocorrelation method (Levinson-Durbin recursion);
the concatenated coefficients (default 100 series x 9 = 900 values) are the
hand-designed descriptor fed to the RBF-SVM back end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .flowgrid import FeatureWindow

DEFAULT_ORDER = 9
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class LpcDescriptor:
    """Concatenated predictor coefficients, series-major.

    Layout: for series s = component * n_cells + cell (row-major cells) the
    block coeffs[s*k : (s+1)*k] holds that series' k coefficients.
    """

    coeffs: np.ndarray
    order: int

    def __post_init__(self):
        if not np.isfinite(self.coeffs).all():
            raise ValueError("descriptor values must be finite")
        if self.coeffs.ndim != 1 or self.coeffs.size % self.order != 0:
            raise ValueError("descriptor length must be a multiple of the order")


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-scoring statistics fitted on a training set."""

    mean: np.ndarray
    std: np.ndarray  # floored at STD_FLOOR

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shapes differ")
        if (self.std < STD_FLOOR).any():
            raise ValueError(f"std components must be >= {STD_FLOOR}")


def autocorrelation(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased, unnormalized autocorrelation r[j] = sum_t x[t] * x[t-j].

    Requires len(series) > max_lag >= 0.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    if max_lag < 0:
        raise ValueError("max_lag must be non-negative")
    if max_lag >= n:
        raise ValueError(f"max_lag {max_lag} >= series length {n}")
    if x.ndim == 1:
        return np.array([np.dot(x[j:], x[: n - j]) for j in range(max_lag + 1)])
    # batched: x is [n_series, F]
    return np.stack(
        [np.einsum("sf,sf->s", x[:, j:], x[:, : n - j]) for j in range(max_lag + 1)], axis=1
    )


def levinson_durbin(r: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Solve the order-k Toeplitz normal equations by the Levinson recursion.

    Returns (coeffs, residual): coeffs a such that x[t] ~ sum_j a[j]*x[t-j-1]
    minimizes the prediction-error energy in the autocorrelation formulation,
    and residual is the final error energy (>= 0 up to rounding).

    r[0] is regularized by delta = 1e-9 * max(r[0], 1) so the recursion never
    divides by zero; an all-zero r short-circuits to zero coefficients.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1 or len(r) < k + 1:
        raise ValueError(f"need at least {k + 1} autocorrelation lags, got {len(r)}")
    if r[0] == 0.0:
        return np.zeros(k), 0.0
    a = np.zeros(k)
    err = r[0] + 1e-9 * max(r[0], 1.0)
    for i in range(k):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        kappa = acc / err
        a_new = a.copy()
        a_new[i] = kappa
        a_new[:i] = a[:i] - kappa * a[i - 1 :: -1]
        a = a_new
        err *= 1.0 - kappa * kappa
    return a, float(max(err, 0.0))


def reflection_coefficients(r: np.ndarray, k: int) -> np.ndarray:
    """The recursion's k reflection coefficients (each in [-1, 1] for a
    valid autocorrelation sequence)."""
    r = np.asarray(r, dtype=np.float64)
    if r[0] == 0.0:
        return np.zeros(k)
    a = np.zeros(k)
    refl = np.zeros(k)
    err = r[0] + 1e-9 * max(r[0], 1.0)
    for i in range(k):
        kappa = (r[i + 1] - np.dot(a[:i], r[i:0:-1])) / err
        refl[i] = kappa
        a_new = a.copy()
        a_new[i] = kappa
        a_new[:i] = a[:i] - kappa * a[i - 1 :: -1]
        a = a_new
        err *= 1.0 - kappa * kappa
    return refl


def lpc_descriptor(w: FeatureWindow, k: int = DEFAULT_ORDER) -> LpcDescriptor:
    """Fit one k-th order predictor per flow series and concatenate.

    Every series is mean-subtracted before fitting, so the descriptor is
    invariant to a constant offset of any series.
    """
    n_frames = w.n_frames
    if n_frames <= k:
        raise ValueError(f"window of {n_frames} frames cannot fit order-{k} models")
    series = w.data.reshape(-1, n_frames)
    series = series - series.mean(axis=1, keepdims=True)
    coeffs = np.empty((series.shape[0], k))
    rs = autocorrelation(series, k)
    for s in range(series.shape[0]):
        coeffs[s], _ = levinson_durbin(rs[s], k)
    return LpcDescriptor(coeffs=coeffs.ravel(), order=k)


def fit_normalizer(train: list[LpcDescriptor]) -> NormStats:
    """Per-dimension mean/std over a training set, std floored at 1e-8."""
    if not train:
        raise ValueError("cannot fit a normalizer on an empty training set")
    mat = np.stack([d.coeffs for d in train])
    return NormStats(mean=mat.mean(axis=0), std=np.maximum(mat.std(axis=0), STD_FLOOR))


def apply_normalizer(stats: NormStats, d: LpcDescriptor) -> LpcDescriptor:
    return LpcDescriptor(coeffs=(d.coeffs - stats.mean) / stats.std, order=d.order)


def normalize_matrix(stats: NormStats, mat: np.ndarray) -> np.ndarray:
    """Vectorized z-scoring of stacked descriptors [n, dim]."""
    return (mat - stats.mean) / stats.std


def write_descriptor_csv(path, windows: list[FeatureWindow], descriptors: list[LpcDescriptor]) -> None:
    """Dump descriptors as CSV rows: subject_id, sequence_id, t_start, values."""
    if len(windows) != len(descriptors):
        raise ValueError("windows/descriptors length mismatch")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for w, d in zip(windows, descriptors):
            writer.writerow(
                [w.subject_id or "", w.sequence_id or "", repr(w.t_start)]
                + [repr(float(c)) for c in d.coeffs]
            )


def read_descriptor_csv(path, order: int = DEFAULT_ORDER):
    """Read a descriptor CSV; returns (subject_ids, sequence_ids, t_starts, matrix)."""
    subjects, sequences, t_starts, rows = [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            subjects.append(row[0] or None)
            sequences.append(row[1] or None)
            t_starts.append(float(row[2]))
            rows.append([float(v) for v in row[3:]])
    return subjects, sequences, np.array(t_starts), np.array(rows)
