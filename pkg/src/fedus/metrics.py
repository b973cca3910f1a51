"""Paired similarity indicators between real and generated DUS beats.

All eight indicators are zero when the two signals are identical and
non-negative otherwise.  The spectral ones share one Welch configuration
(256-sample Hann segments, 50 % overlap) so that their values are
comparable across folds.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .signal_core import Waveform, welch_psd

METRIC_NAMES = ("rmse", "mae", "kld", "se", "psdd", "cd", "sf", "fd")
FS_DUS = 2000.0
WELCH_SEG = 256
KLD_BINS = 50
KLD_EPS = 1e-10
RANGE_TOL = 1e-6


class MetricError(ValueError):
    pass


def _pair(x, y, need_equal=True) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise MetricError("empty signal")
    if need_equal and x.size != y.size:
        raise MetricError(f"length mismatch: {x.size} vs {y.size}")
    return x, y


# ------------------------------------------------------------ amplitude

def rmse(x, y) -> float:
    x, y = _pair(x, y)
    return math.sqrt(float(np.mean((x - y) ** 2)))


def mae(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def amplitude_histogram(x, bins: int = KLD_BINS, eps: float = KLD_EPS) -> np.ndarray:
    """Smoothed, normalized histogram over uniform bins on [-1, 1]."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if np.any(np.abs(x) > 1.0 + RANGE_TOL):
        raise MetricError("amplitudes must lie in [-1, 1]")
    counts, _ = np.histogram(np.clip(x, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    p = counts / x.size + eps
    return p / p.sum()


def kld(real, generated, bins: int = KLD_BINS) -> float:
    """KL(P_real || P_generated) of the amplitude distributions, in nats."""
    real, generated = _pair(real, generated, need_equal=False)
    p = amplitude_histogram(real, bins)
    q = amplitude_histogram(generated, bins)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


# ------------------------------------------------------------- spectral

def _psd(x, fs: float) -> np.ndarray:
    seg = min(WELCH_SEG, x.size)
    power = welch_psd(Waveform(x, fs), seg_len=seg, overlap=0.5).power
    if not np.sum(power) > 0:
        raise MetricError("zero-power signal")
    return power


def _freqs(n: int, fs: float) -> np.ndarray:
    return np.fft.rfftfreq(min(WELCH_SEG, n), 1.0 / fs)


def entropy_of_psd(power) -> float:
    """Shannon entropy (nats) of a PSD normalized to unit sum."""
    power = np.asarray(power, dtype=np.float64)
    total = power.sum()
    if not total > 0:
        raise MetricError("zero-power spectrum")
    p = power[power > 0] / total
    return float(-np.sum(p * np.log(p)))


def spectral_entropy(x, fs: float = FS_DUS) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return entropy_of_psd(_psd(x, fs))


def spectral_entropy_diff(x, y, fs: float = FS_DUS) -> float:
    x, y = _pair(x, y, need_equal=False)
    return abs(spectral_entropy(x, fs) - spectral_entropy(y, fs))


def spectral_centroid(x, fs: float = FS_DUS) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    p = _psd(x, fs)
    return float(np.sum(_freqs(x.size, fs) * p) / np.sum(p))


def centroid_diff(x, y, fs: float = FS_DUS) -> float:
    x, y = _pair(x, y, need_equal=False)
    return abs(spectral_centroid(x, fs) - spectral_centroid(y, fs))


def flatness_of_psd(power) -> float:
    power = np.asarray(power, dtype=np.float64)
    mean = power.mean()
    if not mean > 0:
        raise MetricError("zero-power spectrum")
    if np.any(power <= 0):
        return 0.0
    return float(min(math.exp(np.mean(np.log(power))) / mean, 1.0))


def spectral_flatness(x, fs: float = FS_DUS) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return flatness_of_psd(_psd(x, fs))


def spectral_flatness_diff(x, y, fs: float = FS_DUS) -> float:
    x, y = _pair(x, y, need_equal=False)
    return abs(spectral_flatness(x, fs) - spectral_flatness(y, fs))


def mean_psd(signals, fs: float = FS_DUS) -> tuple[np.ndarray, np.ndarray]:
    """Frequencies and the linear-power PSD averaged over ``signals``."""
    signals = [np.asarray(s, dtype=np.float64).ravel() for s in signals]
    if not signals:
        raise MetricError("empty signal list")
    n = signals[0].size
    if any(s.size != n for s in signals):
        raise MetricError("all signals in a PSD average must share a length")
    acc = np.zeros(min(WELCH_SEG, n) // 2 + 1)
    for s in signals:
        acc += welch_psd(Waveform(s, fs), seg_len=min(WELCH_SEG, n), overlap=0.5).power
    return _freqs(n, fs), acc / len(signals)


def psd_difference(reals, gens, fs: float = FS_DUS) -> float:
    """RMS difference in dB between the averaged PSDs of two signal sets."""
    if len(reals) == 0 or len(gens) == 0:
        raise MetricError("empty signal list")
    _, pr = mean_psd(reals, fs)
    _, pg = mean_psd(gens, fs)
    if pr.size != pg.size:
        raise MetricError("signal sets have different lengths")
    dr = 10.0 * np.log10(pr + 1e-12)
    dg = 10.0 * np.log10(pg + 1e-12)
    return float(np.linalg.norm(dr - dg) / math.sqrt(dr.size))


def psd_peak_hz(x, fs: float = FS_DUS) -> float:
    """Frequency of the largest bin of the mean-removed Welch PSD."""
    x = np.asarray(x, dtype=np.float64).ravel()
    seg = min(WELCH_SEG, x.size)
    est = welch_psd(Waveform(x, fs), seg_len=seg, overlap=0.5, detrend=True)
    return float(est.freqs[int(np.argmax(est.power))])


# -------------------------------------------------------------- Fréchet

@numba.njit(cache=True)
def _frechet_dp(tx, x, ty, y):
    n, m = x.size, y.size
    ca = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            d = math.sqrt((tx[i] - ty[j]) ** 2 + (x[i] - y[j]) ** 2)
            if i == 0 and j == 0:
                prev = 0.0
            elif i == 0:
                prev = ca[0, j - 1]
            elif j == 0:
                prev = ca[i - 1, 0]
            else:
                prev = min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1])
            ca[i, j] = max(prev, d)
    return ca[n - 1, m - 1]


def time_axis(n: int, scale: float) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return np.arange(n) / (n - 1) * scale


def frechet_distance(x, y, time_scale: float = 1.0) -> float:
    """Discrete Fréchet distance between the curves (t_i, x_i) and (t_j, y_j).

    Time runs over [0, time_scale] for both curves regardless of length.
    """
    x, y = _pair(x, y, need_equal=False)
    return float(_frechet_dp(time_axis(x.size, time_scale), x, time_axis(y.size, time_scale), y))


# ---------------------------------------------------------- aggregation

def pair_metrics(real, gen, fs: float = FS_DUS, time_scale: float = 1.0) -> dict:
    real, gen = _pair(real, gen)
    return {
        "rmse": rmse(real, gen),
        "mae": mae(real, gen),
        "kld": kld(real, gen),
        "se": spectral_entropy_diff(real, gen, fs),
        "psdd": psd_difference([real], [gen], fs),
        "cd": centroid_diff(real, gen, fs),
        "sf": spectral_flatness_diff(real, gen, fs),
        "fd": frechet_distance(real, gen, time_scale),
    }


def _pair_metrics_chunk(args):
    reals, gens, fs, scale = args
    return [pair_metrics(r, g, fs, scale) for r, g in zip(reals, gens)]


def evaluate_pairs(reals, gens, fs: float = FS_DUS, time_scale: float = 1.0, jobs: int = 1) -> list[dict]:
    """Per-pair metric dicts, in input order."""
    if len(reals) != len(gens):
        raise MetricError(f"{len(reals)} real vs {len(gens)} generated beats")
    if jobs <= 1 or len(reals) < 64:
        return _pair_metrics_chunk((reals, gens, fs, time_scale))
    step = math.ceil(len(reals) / jobs)
    chunks = [(reals[i : i + step], gens[i : i + step], fs, time_scale) for i in range(0, len(reals), step)]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return [row for part in ex.map(_pair_metrics_chunk, chunks) for row in part]


@dataclass
class MetricsReport:
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    n_pairs: int = 0

    def row(self) -> list[float]:
        out = []
        for k in METRIC_NAMES:
            out += [self.mean[k], self.std[k]]
        return out


def aggregate(per_pair: list[dict]) -> MetricsReport:
    """Mean and population standard deviation of each metric across pairs."""
    if not per_pair:
        raise MetricError("no pairs to aggregate")
    n = len(per_pair)
    rep = MetricsReport(n_pairs=n)
    for k in METRIC_NAMES:
        vals = [float(d[k]) for d in per_pair]
        m = math.fsum(vals) / n
        rep.mean[k] = m
        rep.std[k] = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / n)
    return rep


def report_header() -> list[str]:
    cols = ["fold", "n_pairs"]
    for k in METRIC_NAMES:
        cols += [f"{k}_mean", f"{k}_std"]
    return cols


def write_report_csv(rows: list[tuple[str, MetricsReport]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(report_header())
        for label, rep in rows:
            wr.writerow([label, rep.n_pairs] + [f"{v:.9g}" for v in rep.row()])


def read_report_csv(path) -> list[tuple[str, MetricsReport]]:
    out = []
    with Path(path).open(newline="") as fh:
        rd = csv.DictReader(fh)
        for rec in rd:
            rep = MetricsReport(n_pairs=int(rec["n_pairs"]))
            for k in METRIC_NAMES:
                rep.mean[k] = float(rec[f"{k}_mean"])
                rep.std[k] = float(rec[f"{k}_std"])
            out.append((rec["fold"], rep))
    return out

