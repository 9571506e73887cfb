"""Convergence diagnostics from meeting times and thinned samples.

The total-variation bound at iteration s is the Monte Carlo mean of
max(0, ceil((tau - lag - s) / lag)) over pairs; censored pairs enter at
their censoring iteration, making the curve a lower bound that is flagged
rather than silently optimistic.  The split-frequency comparator follows
the classical average-standard-deviation construction on sliding windows
of the most recent 75% of samples, ignoring splits at or below the
frequency floor in every chain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .treespace import parse_newick, splits


@dataclass
class TvCurve:
    lag: int
    s: np.ndarray
    bound: np.ndarray
    n_pairs: int
    censored: bool

    def first_below(self, threshold: float):
        idx = np.nonzero(self.bound < threshold)[0]
        return int(self.s[idx[0]]) if idx.size else None


def tv_bound(taus, lag: int, s: float) -> float:
    """Upper bound on d_TV(pi_s, pi) estimated from meeting times at one lag."""
    taus = np.asarray(taus, dtype=np.float64)
    if taus.size == 0:
        raise ValueError("need at least one meeting time")
    if np.any(taus < lag):
        raise ValueError("meeting times cannot precede the lag")
    return float(np.mean(np.maximum(0.0, np.ceil((taus - lag - s) / lag))))


def tv_curve(taus, lag: int, censored=None, stride: int = 1) -> TvCurve:
    """Bound evaluated on every `stride` iterations from 0 to max(tau) - lag."""
    taus = np.asarray(taus, dtype=np.float64)
    s_max = max(0, int(np.max(taus)) - lag)
    grid = np.arange(0, s_max + stride, stride)
    bounds = np.array([tv_bound(taus, lag, s) for s in grid])
    cens = bool(np.any(censored)) if censored is not None else False
    return TvCurve(lag, grid, bounds, len(taus), cens)


def tv_standard_errors(taus, lag: int, grid) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.float64)[:, None]
    vals = np.maximum(0.0, np.ceil((taus - lag - np.asarray(grid)[None, :]) / lag))
    return vals.std(axis=0, ddof=1) / math.sqrt(taus.shape[0]) if taus.shape[0] > 1 else np.zeros(len(grid))


def ecdf_survival(taus, lag: int):
    """Empirical survival of tau - lag: pairs (s, P(tau - lag > s)) at every jump."""
    gaps = np.sort(np.asarray(taus, dtype=np.float64) - lag)
    n = gaps.size
    if n == 0:
        raise ValueError("need at least one meeting time")
    points = [(0.0, float(np.mean(gaps > 0)))]
    for g in np.unique(gaps):
        if g > 0.0:
            points.append((float(g), float(np.mean(gaps > g))))
    return points


def fit_log_survival(taus, lag: int, lower_quantile: float = 0.5):
    """Least-squares slope and R^2 of log survival over the upper part of the
    support; a geometric tail shows up as a straight line."""
    pts = [(s, p) for s, p in ecdf_survival(taus, lag) if p > 0.0]
    gaps = np.asarray([s for s, _ in pts])
    logp = np.log(np.asarray([p for _, p in pts]))
    cut = np.quantile(gaps, lower_quantile)
    keep = gaps >= cut
    if keep.sum() < 3:
        keep = np.ones_like(gaps, dtype=bool)
    x, ylog = gaps[keep], logp[keep]
    slope, intercept = np.polyfit(x, ylog, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((ylog - fitted) ** 2))
    ss_tot = float(np.sum((ylog - ylog.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


# ---------------------------------------------------------------------
# split-frequency comparator
# ---------------------------------------------------------------------


def split_series(newicks) -> list[set[int]]:
    return [splits(parse_newick(nwk)) for nwk in newicks]


@dataclass
class SplitFrequencyTable:
    """Per-chain frequencies of every split seen in one sample window."""

    window: tuple[int, int]
    freqs: dict[int, np.ndarray]
    n_chains: int


def split_frequency_table(chains, lo: int, hi: int) -> SplitFrequencyTable:
    universe = set()
    for c in chains:
        for ss in c[lo:hi]:
            universe |= ss
    freqs = {
        k: np.array([np.mean([k in ss for ss in c[lo:hi]]) for c in chains]) for k in universe
    }
    return SplitFrequencyTable((lo, hi), freqs, len(chains))


def asdsf_value(freqs, min_freq: float = 0.1) -> tuple[float, int]:
    """The comparator's reduction: mean over surviving splits of the
    across-chain sample standard deviation of their frequencies.

    `freqs` maps each split to its per-chain frequency vector; splits at or
    below `min_freq` in every chain are ignored.  With nothing surviving
    the value is defined as 0 (the caller sees n_kept = 0).
    """
    kept = [k for k, f in freqs.items() if np.any(np.asarray(f) > min_freq)]
    if not kept:
        return 0.0, 0
    value = float(np.mean([np.std(np.asarray(freqs[k], dtype=np.float64), ddof=1) for k in kept]))
    return value, len(kept)


def asdsf(chains, min_freq: float = 0.1, window_rule: str = "recent75",
          step: int = 1, window_width: int | None = None):
    """Average across-chain standard deviation of split frequencies.

    `chains` holds one split-set sequence per chain (see split_series),
    aligned on a common sample grid.  Returns a list of
    (window_end_index, asdsf, n_splits) evaluated every `step` samples;
    windows hold the most recent 75% of samples, or consecutive disjoint
    blocks of `window_width` when window_rule = "disjoint".
    """
    if len(chains) < 2:
        raise ValueError("need at least two chains")
    n = min(len(c) for c in chains)
    if n == 0:
        raise ValueError("chains are empty")
    out = []
    if window_rule == "recent75":
        ends = range(step, n + 1, step)
        windows = [(int(math.floor(0.25 * t)), t) for t in ends]
    elif window_rule == "disjoint":
        if not window_width:
            raise ValueError("disjoint windows need a width")
        windows = [(s, min(s + window_width, n)) for s in range(0, n, window_width)]
    else:
        raise ValueError(f"unknown window rule {window_rule!r}")
    for lo, hi in windows:
        if hi <= lo:
            continue
        table = split_frequency_table(chains, lo, hi)
        val, n_kept = asdsf_value(table.freqs, min_freq)
        out.append((hi, val, n_kept))
    return out


# ---------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------


def lag_stability(curves: dict[int, TvCurve], taus_by_lag: dict[int, np.ndarray], z: float = 3.0) -> dict:
    """Compare bound curves across lags on the shared grid: stable when the
    pointwise differences sit inside the joint Monte Carlo noise band
    (z standard errors; the default 3 keeps the sup over the whole grid
    from tripping on single-point noise)."""
    lags = sorted(curves)
    result = {"stable": True, "pairs": []}
    for a, b in zip(lags, lags[1:]):
        ca, cb = curves[a], curves[b]
        s_hi = min(ca.s[-1], cb.s[-1])
        grid = ca.s[ca.s <= s_hi]
        ba = np.interp(grid, ca.s, ca.bound)
        bb = np.interp(grid, cb.s, cb.bound)
        se_a = tv_standard_errors(taus_by_lag[a], a, grid)
        se_b = tv_standard_errors(taus_by_lag[b], b, grid)
        band = z * np.sqrt(se_a**2 + se_b**2) + 1e-12
        gap = np.abs(ba - bb) - band
        ok = bool(np.all(gap <= 0))
        result["pairs"].append({"lags": [a, b], "stable": ok, "max_excess": float(np.max(gap))})
        result["stable"] = result["stable"] and ok
    return result


def convergence_report(records, curves: dict[int, TvCurve], asdsf_series=None,
                       thresholds=None) -> dict:
    """Merge meeting-time, bound and comparator diagnostics into one report."""
    thresholds = {"tv": 0.05, "asdsf": 0.01, **(thresholds or {})}
    taus_by_lag: dict[int, list] = {}
    censored_by_lag: dict[int, int] = {}
    for r in records:
        taus_by_lag.setdefault(r.lag, []).append(r.tau)
        censored_by_lag[r.lag] = censored_by_lag.get(r.lag, 0) + int(r.censored)
    report: dict = {"lags": {}, "thresholds": thresholds}
    for lag, curve in sorted(curves.items()):
        entry = {
            "n_pairs": curve.n_pairs,
            "censored_pairs": censored_by_lag.get(lag, 0),
            "max_tau": int(max(taus_by_lag[lag])),
            "tv_below_threshold_at": curve.first_below(thresholds["tv"]),
        }
        slope, r2 = fit_log_survival(taus_by_lag[lag], lag)
        entry["log_survival_slope"] = slope
        entry["log_survival_r2"] = r2
        report["lags"][str(lag)] = entry
    n_censored = sum(censored_by_lag.values())
    if n_censored:
        report["warning"] = (
            f"{n_censored} pair(s) never met before censoring; the bound curves are lower bounds"
        )
    if len(curves) > 1:
        report["lag_stability"] = lag_stability(curves, {l: np.asarray(t) for l, t in taus_by_lag.items()})
    if asdsf_series:
        final = asdsf_series[-1][1]
        report["asdsf"] = {
            "final": final,
            "below_threshold": bool(final < thresholds["asdsf"]),
            "n_windows": len(asdsf_series),
        }
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
