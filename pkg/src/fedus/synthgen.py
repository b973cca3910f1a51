"""Paired synthetic FECG / DUS recordings with known peaks and FHR.

The DUS of each cardiac cycle is a fixed band-limited carrier, phase-locked
to the FECG sample on which the R wave is annotated, and shaped by a
systolic and a diastolic Gaussian burst.  Given the beat interval the
mapping FECG -> DUS is deterministic up to the additive noise floor, which
keeps it learnable from a few thousand beats.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .preprocess import SEGMENT_S, SegmentAnnotation, SubjectRecord, write_manifest
from .signal_core import Waveform, analytic_signal

log = logging.getLogger(__name__)

FHR_MIN, FHR_MAX = 90.0, 200.0

# named RNG substreams; the carrier stream is shared by all subjects
_BEATS, _FECG, _DUS, _ANNOT, _CARRIER = range(5)


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_subjects: int = 5
    duration_s: float = 600.0
    fhr_base: tuple = (110.0, 160.0)  # per-subject base drawn from this range; a scalar pins it
    fhr_variability: float = 10.0
    dus_peak_hz: float = 200.0
    noise_snr_db: float = 20.0
    seed: int = 0
    n_channels: int = 3
    dus_lag_s: float = 0.10
    corruption_fraction: float = 0.0
    fs_dus: float = 2000.0
    fs_fecg: float = 250.0
    # burst morphology (seconds, relative to the R peak / beat interval)
    systole_delay: float = 0.04
    systole_width: float = 0.05
    diastole_frac: float = 0.50
    diastole_width: float = 0.05
    diastole_amp: float = 0.6

    def __post_init__(self):
        lo, hi = self.fhr_range
        if not (FHR_MIN <= lo <= hi <= FHR_MAX):
            raise SynthConfigError(f"fhr_base must lie in [{FHR_MIN}, {FHR_MAX}], got {self.fhr_base}")
        if self.duration_s < 30:
            raise SynthConfigError("duration_s must be at least 30 s")
        if not 25 < self.dus_peak_hz < 600:
            raise SynthConfigError("dus_peak_hz must lie in (25, 600)")
        if self.n_subjects < 1 or not 1 <= self.n_channels <= 7:
            raise SynthConfigError("need >= 1 subject and 1-7 channels")
        if not 0 <= self.corruption_fraction <= 1:
            raise SynthConfigError("corruption_fraction must lie in [0, 1]")

    @property
    def fhr_range(self) -> tuple[float, float]:
        if np.ndim(self.fhr_base) == 0:
            return float(self.fhr_base), float(self.fhr_base)
        lo, hi = self.fhr_base
        return float(lo), float(hi)


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ------------------------------------------------------------------ FECG

def beat_times(cfg: SynthConfig, fhr_base: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """R-peak times and the per-beat heart rate that produced each interval.

    The rate follows a mean-reverting random walk with stationary std
    ``fhr_variability``, clamped to the physiological range.
    """
    rho = 0.98
    t = 0.2 + 0.3 * rng.random()
    f = fhr_base
    peaks, rates = [t], []
    while True:
        step = rng.standard_normal()
        f = fhr_base + rho * (f - fhr_base) + math.sqrt(1 - rho**2) * cfg.fhr_variability * step
        f = min(max(f, FHR_MIN), FHR_MAX)
        t = t + 60.0 / f
        if t >= cfg.duration_s - 0.05:
            break
        peaks.append(t)
        rates.append(f)
    return np.array(peaks), np.array(rates)


# (offset from R in s, amplitude, std in s); T wave offset scales with the interval
_PQRST = (
    ("P", -0.10, 0.12, 0.015),
    ("Q", -0.018, -0.15, 0.006),
    ("R", 0.0, 1.0, 0.008),
    ("S", 0.018, -0.25, 0.006),
    ("T", 0.18, 0.30, 0.035),
)


def ecg_morphology(peaks: np.ndarray, n: int, fs: float) -> np.ndarray:
    """Sum-of-Gaussians ECG with one P-QRS-T complex per peak."""
    x = np.zeros(n)
    intervals = np.diff(peaks, append=peaks[-1] + (peaks[-1] - peaks[-2] if peaks.size > 1 else 0.43))
    half = int(0.35 * fs)
    for p, rr in zip(peaks, intervals):
        c = int(round(p * fs))
        lo, hi = max(c - half, 0), min(c + half, n)
        tt = np.arange(lo, hi) / fs - p
        for name, off, amp, sd in _PQRST:
            if name == "T":
                off *= math.sqrt(rr / 0.43)
            x[lo:hi] += amp * np.exp(-0.5 * ((tt - off) / sd) ** 2)
    return x


def gen_fecg(cfg: SynthConfig, rng: np.random.Generator, fhr_base: float | None = None):
    """Single-channel synthetic FECG at ``fs_fecg`` and its exact R-peak times."""
    if fhr_base is None:
        fhr_base = cfg.fhr_range[0]
    peaks, _ = beat_times(cfg, fhr_base, rng)
    n = int(round(cfg.duration_s * cfg.fs_fecg))
    return Waveform(ecg_morphology(peaks, n, cfg.fs_fecg), cfg.fs_fecg), peaks


# ------------------------------------------------------------------- DUS

def carrier_template(cfg: SynthConfig, n: int) -> np.ndarray:
    """Band-limited noise (150-400 Hz, peak at ``dus_peak_hz``) with unit instantaneous amplitude.

    Flattening the analytic amplitude keeps the burst envelopes, and hence
    the envelope-based lag estimate, independent of the noise draw.
    """
    rng = substream(cfg.seed, _CARRIER)
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / cfg.fs_dus)
    shape = np.exp(-0.5 * ((f - cfg.dus_peak_hz) / 60.0) ** 2)
    edge = 1.0 / (1 + np.exp(-(f - 150.0) / 5.0)) / (1 + np.exp((f - 400.0) / 10.0))
    c = np.fft.irfft(spec * shape * edge, n)
    a = analytic_signal(c)
    return np.real(a / np.abs(a))


def _fwhm_gauss(t, center, fwhm):
    sd = fwhm / (2 * math.sqrt(2 * math.log(2)))
    return np.exp(-0.5 * ((t - center) / sd) ** 2)


def gen_dus(peaks, cfg: SynthConfig, rng: np.random.Generator, lag_s: float | None = None) -> Waveform:
    """Burst-modulated DUS at ``fs_dus`` with an additive noise floor.

    Each cycle's carrier starts at its R peak snapped to the FECG sample
    grid; the whole trace is delayed by ``lag_s`` (defaults to the config).
    """
    peaks = np.asarray(peaks, dtype=np.float64)
    if peaks.size == 0:
        raise ValueError("gen_dus needs at least one peak")
    if peaks.size > 1 and np.any(np.diff(peaks) <= 0):
        raise ValueError("peaks must be ascending")
    lag = cfg.dus_lag_s if lag_s is None else lag_s
    fs = cfg.fs_dus
    n = int(round(cfg.duration_s * fs))
    pre, post = 0.1, 1.0
    tmpl = carrier_template(cfg, int(round((pre + post) * fs)))
    x = np.zeros(n)
    intervals = np.diff(peaks, append=peaks[-1] + (peaks[-1] - peaks[-2] if peaks.size > 1 else 0.43))
    for p, rr in zip(peaks, intervals):
        anchor = round(p * cfg.fs_fecg) / cfg.fs_fecg + lag
        a = int(round(anchor * fs))
        lo, hi = a - int(pre * fs), a + int(post * fs)
        clo, chi = max(lo, 0), min(hi, n)
        if clo >= chi:
            continue
        t = np.arange(clo, chi) / fs
        env = _fwhm_gauss(t, p + lag + cfg.systole_delay, cfg.systole_width)
        env += cfg.diastole_amp * _fwhm_gauss(t, p + lag + cfg.diastole_frac * rr, cfg.diastole_width)
        x[clo:chi] += env * tmpl[clo - lo : chi - lo]
    power = np.mean(x * x)
    noise_sd = math.sqrt(power / 10 ** (cfg.noise_snr_db / 10)) if power > 0 else 0.0
    x += noise_sd * rng.standard_normal(n)
    return Waveform(x, fs)


# --------------------------------------------------------------- dataset

def _segment_fhr(peaks: np.ndarray, start: float, stop: float) -> float | None:
    inside = peaks[(peaks >= start) & (peaks < stop)]
    if inside.size < 2:
        return None
    return float(np.mean(60.0 / np.diff(inside)))


def gen_subject(cfg: SynthConfig, index: int) -> SubjectRecord:
    sid = f"S{index + 1:02d}"
    lo, hi = cfg.fhr_range
    fhr_base = lo + (hi - lo) * substream(cfg.seed, index, _BEATS).random()
    ecg, peaks = gen_fecg(cfg, substream(cfg.seed, index, _BEATS, 1), fhr_base)
    dus = gen_dus(peaks, cfg, substream(cfg.seed, index, _DUS))

    rng = substream(cfg.seed, index, _FECG)
    n_f = len(ecg)
    gains = np.concatenate([[1.0], rng.uniform(0.4, 0.9, cfg.n_channels - 1) * rng.choice([-1, 1], cfg.n_channels - 1)])
    snr_db = np.sort(rng.uniform(12.0, 24.0, cfg.n_channels))[::-1]  # channel 1 cleanest
    sig_power = np.mean(ecg.samples**2)
    chans = []
    for g, snr in zip(gains, snr_db):
        noise = rng.standard_normal(n_f) * math.sqrt(g * g * sig_power / 10 ** (snr / 10))
        wander = 0.2 * abs(g) * np.sin(2 * np.pi * 0.3 * np.arange(n_f) / cfg.fs_fecg + rng.uniform(0, 2 * np.pi))
        chans.append(g * ecg.samples + noise + wander)
    rank = list(np.argsort(np.argsort(-snr_db)) + 1)

    arng = substream(cfg.seed, index, _ANNOT)
    dus_x = dus.samples.copy()
    segments = []
    n_seg = int(cfg.duration_s // SEGMENT_S)
    for k in range(n_seg):
        start = k * SEGMENT_S
        dus_sqi = (1, 1)
        fecg_sqi = [(1, 1)] * cfg.n_channels
        if arng.random() < cfg.corruption_fraction:
            dus_sqi, fecg_sqi = _corrupt(cfg, arng, dus_x, chans, start)
        seg = SegmentAnnotation(start, SEGMENT_S, dus_sqi, fecg_sqi, rank,
                                fhr_truth=_segment_fhr(peaks, start, start + SEGMENT_S))
        segments.append(seg)
    return SubjectRecord(
        sid,
        Waveform(dus_x, cfg.fs_dus),
        [Waveform(c, cfg.fs_fecg) for c in chans],
        peaks,
        segments,
    )


def _corrupt(cfg, rng, dus_x, chans, start):
    """Damage one segment in place and return labels describing the damage."""
    s, e = int(start * cfg.fs_dus), int((start + SEGMENT_S) * cfg.fs_dus)
    kind = rng.integers(3)
    if kind == 0:  # silent DUS
        dus_x[s:e] *= 0.01
        return (5, 5), [(1, 1)] * len(chans)
    if kind == 1:  # DUS interference bursts
        dus_x[s:e] += 3.0 * np.std(dus_x[s:e]) * rng.standard_normal(e - s) * (rng.random(e - s) < 0.2)
        return (3, 2), [(1, 1)] * len(chans)
    fs, fe = int(start * cfg.fs_fecg), int((start + SEGMENT_S) * cfg.fs_fecg)
    labels = []
    for c in chans:
        level = int(rng.integers(1, 6))
        if level > 1:
            c[fs:fe] += (level - 1) * 0.3 * np.std(c) * rng.standard_normal(fe - fs)
        other = int(min(5, max(1, level + rng.integers(-1, 2))))
        labels.append((level, other))
    return (1, 1), labels


def gen_dataset(cfg: SynthConfig) -> list[SubjectRecord]:
    records = []
    for i in range(cfg.n_subjects):
        log.info("generating subject %d/%d", i + 1, cfg.n_subjects)
        records.append(gen_subject(cfg, i))
    return records


def write_dataset(records: list[SubjectRecord], outdir, cfg: SynthConfig | None = None) -> list:
    extra = {"synthetic": True}
    if cfg is not None:
        extra["injected_lag_s"] = cfg.dus_lag_s
    return [write_manifest(r, outdir, extra) for r in records]
