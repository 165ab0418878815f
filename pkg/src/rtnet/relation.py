"""Cosine relation matrix between variates, plus the BIC score.

The raw matrix holds absolute cosine similarities computed on the training
split.  Entries under cos(theta) are zeroed, then each column is divided by
its own sum; the processed matrix post-multiplies input windows so variate i
receives a weighted mix of the variates related to it.  Thresholding happens
on raw values, before column standardization, so published raw-cosine tables
are directly comparable to the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, matmul_const


@dataclass
class RelationMatrix:
    raw: np.ndarray
    theta_degrees: float
    processed: np.ndarray | None = None
    column_normalized: bool = False
    names: list[str] | None = None

    def validate(self) -> None:
        n = self.raw.shape[0]
        if self.raw.shape != (n, n):
            raise DimensionError(f"relation matrix must be square, got {self.raw.shape}")
        if not np.allclose(self.raw, self.raw.T, atol=1e-12):
            raise DataError("raw relation matrix is not symmetric")
        if not np.allclose(np.diag(self.raw), 1.0, atol=1e-12):
            raise DataError("raw relation matrix diagonal is not 1")
        if self.column_normalized:
            sums = self.processed.sum(axis=0)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise DataError(f"processed columns do not sum to 1: {sums}")


def cos_relation_matrix(series: np.ndarray, names: list[str] | None = None) -> np.ndarray:
    """Raw |cos| similarity matrix of a (length m, N variates) series, m >= 2."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[0] < 2:
        raise DimensionError(f"cos_relation_matrix expects (m>=2, N), got {series.shape}")
    norms = np.linalg.norm(series, axis=0)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        labels = [names[i] if names else str(i) for i in bad.tolist()]
        raise DataError(f"zero-norm variates: {labels}")
    dots = series.T @ series
    raw = np.abs(dots) / np.outer(norms, norms)
    np.fill_diagonal(raw, 1.0)
    return raw


def threshold_and_standardize(raw: np.ndarray, theta_degrees: float) -> np.ndarray:
    """Zero raw entries below cos(theta), then divide each column by its sum."""
    if not 0.0 <= theta_degrees <= 90.0:
        raise ConfigError(f"theta must lie in [0, 90] degrees, got {theta_degrees}")
    cutoff = np.cos(np.radians(theta_degrees))
    kept = np.where(raw < cutoff, 0.0, raw)
    col_sums = kept.sum(axis=0)
    # the unit diagonal always survives the threshold, so no column can vanish
    assert np.all(col_sums > 0.0), "relation column summed to zero"
    return kept / col_sums


def apply_relation(x: Tensor, processed: np.ndarray) -> Tensor:
    """Mix variates of a (B, L_in, N) window: output variate i = sum_j x_j * w_ji."""
    processed = np.asarray(processed, dtype=np.float64)
    if x.data.ndim != 3 or x.data.shape[-1] != processed.shape[0]:
        raise DimensionError(
            f"apply_relation: window {x.data.shape} vs matrix {processed.shape}")
    return matmul_const(x, processed)


def bic_score(m: int, k: int, log_likelihood: float) -> float:
    """ln(m) * k - 2 * log_likelihood; lower is better."""
    if m < 1:
        raise ConfigError(f"bic_score: m must be >= 1, got {m}")
    if k < 0:
        raise ConfigError(f"bic_score: k must be >= 0, got {k}")
    return float(np.log(m) * k - 2.0 * log_likelihood)


def gaussian_log_likelihood(residuals: np.ndarray, var_floor: float = 1e-12) -> float:
    """Log likelihood of residuals under a zero-mean Gaussian at its MLE variance.

    Equals the direct log-density sum with sigma^2 = mean(r^2), floored for
    degenerate all-zero residuals.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise DimensionError("gaussian_log_likelihood: empty residuals")
    var = max(float(np.mean(r * r)), var_floor)
    m = r.size
    return float(-0.5 * m * (np.log(2.0 * np.pi * var) + 1.0))


def relation_csv(matrix: np.ndarray, names: list[str]) -> str:
    """Render a square matrix as CSV with variate-name header and row labels."""
    lines = ["," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
