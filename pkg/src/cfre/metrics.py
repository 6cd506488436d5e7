"""Sparsification-based uncertainty quality metrics.

A sparsification curve removes the ceil(phi * N) records ranked largest
by some key (ties broken by stable input order) and tracks the mean
error of what remains, normalized by the full-set mean.  AUSE is the
trapezoid area between the uncertainty-ranked curve and the error-ranked
oracle; AURG is the area gained over an empirical random-removal
baseline.  PCC is the plain Pearson correlation between error and
uncertainty.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class PredictionRecord:
    """One scored prediction: realized error, predicted spread, confidence."""

    error: float
    uncertainty: float
    confidence: float

    def __post_init__(self):
        for name in ("error", "uncertainty", "confidence"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InputError("PredictionRecord.%s must be finite" % name)
        if self.error < 0.0 or self.uncertainty < 0.0:
            raise InputError("error and uncertainty must be nonnegative")
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError("confidence must lie in [0, 1]")


@dataclass
class SparsificationCurve:
    """Remaining mean error as a function of the removed fraction."""

    fractions: np.ndarray
    remaining_error: np.ndarray
    normalized: bool = True
    capped: bool = False


def default_fraction_grid():
    """0.00 to 0.99 in steps of 0.01."""
    return np.round(np.arange(100) * 0.01, 2)


def _check_fractions(fractions):
    f = np.asarray(default_fraction_grid() if fractions is None else fractions,
                   dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise InputError("fractions must be a non-empty 1-D grid")
    if np.any(f < 0.0) or np.any(f >= 1.0):
        raise InputError("fractions must lie in [0, 1)")
    if np.any(np.diff(f) <= 0.0):
        raise InputError("fractions must be strictly increasing")
    return f


def _record_arrays(records):
    if len(records) == 0:
        raise InputError("need at least one record")
    err = np.array([r.error for r in records], dtype=np.float64)
    unc = np.array([r.uncertainty for r in records], dtype=np.float64)
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    return err, unc, conf


def _remaining_means(errors, order, fractions):
    """Mean error after removing the first ceil(phi*N) of `order`.

    Plain slice-and-mean per fraction: anything cleverer (suffix sums)
    changes the summation order and drifts an ulp away from a direct
    recomputation, which callers are entitled to match bit-for-bit.
    """
    n = errors.size
    sorted_err = errors[order]
    removed = np.ceil(fractions * n).astype(int)
    capped = bool(np.any(removed >= n))
    removed = np.minimum(removed, n - 1)
    means = np.array([sorted_err[m:].mean() for m in removed])
    return means, capped


def sparsification_curve(records, by="uncertainty", fractions=None):
    """Curve of normalized remaining error when pruning by a ranking key.

    by is "uncertainty", "error" (the oracle ranking) or "confidence"
    (pruning the least confident, i.e. largest 1 - confidence, first).
    If every error is zero the curve is left unnormalized and flagged.
    A fraction whose removal count would empty the set is capped at
    N - 1 removals and flagged.
    """
    fractions = _check_fractions(fractions)
    err, unc, conf = _record_arrays(records)
    if by == "uncertainty":
        key = unc
    elif by == "error":
        key = err
    elif by == "confidence":
        key = 1.0 - conf
    else:
        raise InputError("by must be uncertainty, error or confidence")
    order = np.argsort(-key, kind="stable")
    means, capped = _remaining_means(err, order, fractions)
    full_mean = err.mean()
    if full_mean == 0.0:
        return SparsificationCurve(fractions=fractions, remaining_error=means,
                                   normalized=False, capped=capped)
    return SparsificationCurve(fractions=fractions, remaining_error=means / full_mean,
                               normalized=True, capped=capped)


def oracle_curve(records, fractions=None):
    """Sparsification by realized error itself, the best achievable ranking."""
    return sparsification_curve(records, by="error", fractions=fractions)


def random_baseline_curve(records, fractions=None, n_shuffles=100, seed=0):
    """Average curve over seeded uniformly random removal orders."""
    if n_shuffles < 1:
        raise InputError("n_shuffles must be >= 1")
    fractions = _check_fractions(fractions)
    err, _, _ = _record_arrays(records)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    total = np.zeros(fractions.size)
    capped = False
    for _ in range(n_shuffles):
        order = rng.permutation(err.size)
        means, cap = _remaining_means(err, order, fractions)
        total += means
        capped = capped or cap
    means = total / n_shuffles
    full_mean = err.mean()
    if full_mean == 0.0:
        return SparsificationCurve(fractions=fractions, remaining_error=means,
                                   normalized=False, capped=capped)
    return SparsificationCurve(fractions=fractions, remaining_error=means / full_mean,
                               normalized=True, capped=capped)


def _check_pair(a, b):
    if not np.array_equal(a.fractions, b.fractions):
        raise InputError("curves must share one fraction grid")


def ause(model_curve, oracle):
    """Trapezoid area between a ranking's curve and the oracle curve."""
    _check_pair(model_curve, oracle)
    return float(_trapezoid(model_curve.remaining_error - oracle.remaining_error,
                            model_curve.fractions))


def aurg(model_curve, random_curve):
    """Trapezoid area gained below the random-removal baseline."""
    _check_pair(model_curve, random_curve)
    return float(_trapezoid(random_curve.remaining_error - model_curve.remaining_error,
                            model_curve.fractions))


def pcc(errors, uncertainties):
    """Pearson correlation; undefined (error) when either side is constant."""
    x = np.asarray(errors, dtype=np.float64)
    y = np.asarray(uncertainties, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("pcc expects two equal-length 1-D arrays")
    if x.size < 2:
        raise InputError("pcc needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise InputError("pcc is undefined for zero-variance inputs")
    return float((xc * yc).sum() / (sx * sy))


# ---------------------------------------------------------------------------
# external formats


def read_records_csv(path):
    """Read `error,uncertainty,confidence` rows (header required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError("records CSV is empty") from None
        if [h.strip() for h in header] != ["error", "uncertainty", "confidence"]:
            raise InputError("records CSV must start with header "
                             "'error,uncertainty,confidence'")
        records = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != 3:
                raise InputError("records CSV row %d has %d fields" % (i + 2, len(row)))
            try:
                records.append(PredictionRecord(float(row[0]), float(row[1]),
                                                float(row[2])))
            except ValueError as err:
                raise InputError("records CSV row %d: %s" % (i + 2, err)) from None
    return records


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        fh.write("error,uncertainty,confidence\n")
        for r in records:
            fh.write("%r,%r,%r\n" % (r.error, r.uncertainty, r.confidence))


def write_curve_csv(path, curve):
    """`fraction,remaining_error` rows with full-precision floats."""
    with open(path, "w", newline="") as fh:
        fh.write("fraction,remaining_error\n")
        for f, e in zip(curve.fractions, curve.remaining_error):
            fh.write("%r,%r\n" % (float(f), float(e)))


def metrics_payload(ause_value, aurg_value, pcc_value, normalized=True):
    """The JSON object written next to curve files."""
    return {
        "ause": float(ause_value),
        "aurg": float(aurg_value),
        "pcc": float(pcc_value),
        "curve_normalization": "relative-to-full-set" if normalized else "none",
    }
