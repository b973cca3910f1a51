"""FHR agreement between generated DUS segments and FECG-derived labels.

Per-beat generations are stitched back into 3.75 s segments, the heart
rate is estimated from each stitched segment with an envelope
autocorrelation, and the estimates are compared with the rate implied by
the FECG R peaks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as fm
from .preprocess import FS_DUS, FS_FECG, SEGMENT_S, ProcessedSubject, _idx, homomorphic_envelope
from .metrics import psd_peak_hz
from .signal_core import Waveform, minmax

CROSSFADE_S = 0.02
FHR_LAGS_S = (0.30, 0.75)
MIN_PEAK_CORR = 0.3


class UseCaseError(ValueError):
    pass


@dataclass
class FhrResult:
    segment_id: str
    fhr_label: float
    fhr_est: float  # nan when invalid
    valid: bool


@dataclass
class AgreementStats:
    bias: float
    loa_lo: float
    loa_hi: float
    bland_altman: float
    rmse_bpm: float
    mae_bpm: float
    picp_5bpm: float
    n_valid: int
    coverage: float  # valid / all results


# ------------------------------------------------------------ stitching

BeatModel = Callable[[np.ndarray], np.ndarray]


def _as_beat_fn(model) -> tuple[BeatModel, int]:
    if isinstance(model, fm.ModelParams):
        return (lambda X: fm.predict_batch(model, X)), model.arch.L_in
    fn, L_in = model
    return fn, L_in


def segment_windows(fecg: np.ndarray, peaks_s, L_in: int, n_beats: int = 1) -> tuple[np.ndarray, list]:
    """Model inputs for every peak plus the FECG sample ranges they cover."""
    starts = [_idx(p, FS_FECG) for p in peaks_s]
    X, spans = [], []
    for i, s in enumerate(starts):
        if s >= fecg.size:
            continue
        end = starts[i + n_beats] if i + n_beats < len(starts) else fecg.size
        end = min(end, s + L_in, fecg.size)
        x = np.zeros(L_in)
        piece = fecg[s:end]
        if piece.size >= 2 and piece.max() > piece.min():
            x[: piece.size] = minmax(piece)
        X.append(x)
        spans.append(s)
    return (np.stack(X) if X else np.zeros((0, L_in))), spans


def generate_segment(model, fecg: Waveform, peaks_s, n_beats: int = 1,
                     duration_s: float = SEGMENT_S, crossfade_s: float = CROSSFADE_S) -> Waveform:
    """Stitch per-beat generations into one DUS segment.

    ``model`` is trained parameters or a ``(fn, L_in)`` pair where ``fn``
    maps a [B, L_in] batch to [B, 8 * L_in].  ``peaks_s`` are relative to the
    start of ``fecg``.  Beat i occupies the DUS from its peak to the next
    one; the first ``crossfade_s`` of each following beat is blended
    linearly with the continuation of beat i.
    """
    if fecg.fs != FS_FECG:
        raise UseCaseError(f"FECG must be sampled at {FS_FECG} Hz")
    peaks_s = np.sort(np.asarray(peaks_s, dtype=np.float64))
    peaks_s = peaks_s[(peaks_s >= 0) & (peaks_s < duration_s)]
    if peaks_s.size == 0:
        raise UseCaseError("no peaks inside the segment")
    fn, L_in = _as_beat_fn(model)
    ratio = int(round(FS_DUS / FS_FECG))
    n_out = int(round(duration_s * FS_DUS))
    X, starts = segment_windows(fecg.samples, peaks_s, L_in, n_beats)
    Y = np.asarray(fn(X), dtype=np.float64) if len(X) else np.zeros((0, ratio * L_in))

    out = np.zeros(n_out)
    nf = int(round(crossfade_s * FS_DUS))
    ramp = np.arange(1, nf + 1) / (nf + 1)
    tail = np.zeros(0)
    for k, (s, y) in enumerate(zip(starts, Y)):
        a = ratio * s
        b = ratio * starts[k + 1] if k + 1 < len(starts) else n_out
        b = min(b, n_out)
        seg = np.zeros(b - a)
        m = min(b - a, y.size)
        seg[:m] = y[:m]
        n = min(tail.size, seg.size)
        if n:
            seg[:n] = (1.0 - ramp[:n]) * tail[:n] + ramp[:n] * seg[:n]
        out[a:b] = seg
        tail = np.zeros(nf)
        cont = y[b - a : b - a + nf]
        tail[: cont.size] = cont
    return Waveform(out, FS_DUS)


# --------------------------------------------------------- FHR estimate

def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Biased autocorrelation normalized to 1 at lag 0."""
    x = x - x.mean()
    n = x.size
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, nfft)
    r = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
    return r / r[0] if r[0] > 0 else np.zeros(n)


def estimate_fhr(dus: Waveform, lags_s=FHR_LAGS_S, min_corr: float = MIN_PEAK_CORR) -> float | None:
    """Heart rate (bpm) from the periodicity of the homomorphic envelope, or None."""
    if dus.samples.size < 4 or not np.ptp(dus.samples) > 0:
        return None
    env = homomorphic_envelope(dus).samples
    r = autocorrelation(env)
    lo, hi = int(math.floor(lags_s[0] * dus.fs)), int(math.ceil(lags_s[1] * dus.fs))
    hi = min(hi, r.size - 2)
    if hi <= lo:
        return None
    i = lo + int(np.argmax(r[lo : hi + 1]))
    if r[i] < min_corr:
        return None
    lag = float(i)
    den = r[i - 1] - 2 * r[i] + r[i + 1]
    if den < 0:
        lag += 0.5 * (r[i - 1] - r[i + 1]) / den
    return 60.0 * dus.fs / lag


def fhr_label(peaks_s) -> float:
    peaks_s = np.asarray(peaks_s, dtype=np.float64)
    if peaks_s.size < 2:
        raise UseCaseError("need at least two R peaks for a heart rate")
    return 60.0 / float(np.mean(np.diff(peaks_s)))


def quality_proxy(dus: Waveform, band=(150.0, 300.0)) -> bool:
    """Stand-in quality check: spectral peak in the DUS band and a periodic envelope."""
    if not np.ptp(dus.samples) > 0:
        return False
    return band[0] <= psd_peak_hz(dus.samples, dus.fs) <= band[1] and estimate_fhr(dus) is not None


# ------------------------------------------------------------ agreement

def agreement(results: list[FhrResult], tolerance_bpm: float = 5.0) -> AgreementStats:
    valid = sorted((r for r in results if r.valid), key=lambda r: r.segment_id)
    if len(valid) < 2:
        raise UseCaseError(f"need at least two valid estimates, got {len(valid)}")
    d = [r.fhr_est - r.fhr_label for r in valid]
    n = len(d)
    bias = math.fsum(d) / n
    sd = math.sqrt(math.fsum((x - bias) ** 2 for x in d) / n)
    lo, hi = bias - 1.96 * sd, bias + 1.96 * sd
    return AgreementStats(
        bias=bias,
        loa_lo=lo,
        loa_hi=hi,
        bland_altman=max(abs(lo), abs(hi)),
        rmse_bpm=math.sqrt(math.fsum(x * x for x in d) / n),
        mae_bpm=math.fsum(abs(x) for x in d) / n,
        picp_5bpm=sum(abs(x) <= tolerance_bpm for x in d) / n,
        n_valid=n,
        coverage=n / len(results),
    )


def bland_altman_points(results: list[FhrResult]) -> tuple[np.ndarray, np.ndarray]:
    """(mean, difference) of each valid estimate/label pair."""
    valid = [r for r in results if r.valid]
    est = np.array([r.fhr_est for r in valid])
    lab = np.array([r.fhr_label for r in valid])
    return (est + lab) / 2.0, est - lab


# -------------------------------------------------------------- drivers

def subject_segments(ps: ProcessedSubject):
    """Accepted segments with at least two peaks: (segment id, FECG, DUS, peaks relative to start)."""
    rec = ps.record
    for k, (seg, ch) in enumerate(zip(rec.segments, ps.selection)):
        if ch is None:
            continue
        inside = rec.peaks[(rec.peaks >= seg.start) & (rec.peaks < seg.start + seg.duration)]
        if inside.size < 2:
            continue
        f0 = _idx(seg.start, FS_FECG)
        d0 = int(round(FS_DUS / FS_FECG)) * f0
        n_f = int(math.ceil(seg.duration * FS_FECG))
        n_d = int(round(seg.duration * FS_DUS))
        fecg = rec.fecg_channels[ch].samples[f0 : f0 + n_f]
        dus = rec.dus.samples[d0 : d0 + n_d]
        if fecg.size < n_f or dus.size < n_d:
            continue
        yield f"{rec.subject_id}-{k:03d}", Waveform(fecg, FS_FECG), Waveform(dus, FS_DUS), inside - f0 / FS_FECG


def _result(seg_id, dus, peaks) -> FhrResult:
    est = estimate_fhr(dus)
    return FhrResult(seg_id, fhr_label(peaks), math.nan if est is None else est, est is not None)


def run_usecase(model, ps: ProcessedSubject, n_beats: int = 1) -> tuple[list[FhrResult], list[FhrResult], float]:
    """FHR results on generated and on real DUS, plus the quality-proxy pass fraction."""
    gen, real, passed = [], [], 0
    for seg_id, fecg, dus, peaks in subject_segments(ps):
        g = generate_segment(model, fecg, peaks, n_beats)
        gen.append(_result(seg_id, g, peaks))
        real.append(_result(seg_id, dus, peaks))
        passed += quality_proxy(g)
    return gen, real, (passed / len(gen) if gen else 0.0)


# ------------------------------------------------------------------ I/O

def write_results_csv(results: list[FhrResult], path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["segment_id", "fhr_label", "fhr_est", "valid"])
        for r in results:
            est = f"{r.fhr_est:.6f}" if r.valid else ""
            wr.writerow([r.segment_id, f"{r.fhr_label:.6f}", est, int(r.valid)])


def read_results_csv(path) -> list[FhrResult]:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            valid = rec["valid"] == "1"
            out.append(FhrResult(rec["segment_id"], float(rec["fhr_label"]),
                                 float(rec["fhr_est"]) if valid else math.nan, valid))
    return out


AGREEMENT_FIELDS = ("bias", "loa_lo", "loa_hi", "bland_altman", "rmse_bpm", "mae_bpm", "picp_5bpm", "n_valid", "coverage")


def write_agreement_csv(rows: list[tuple[str, AgreementStats]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("source",) + AGREEMENT_FIELDS)
        for label, st in rows:
            wr.writerow([label] + [f"{getattr(st, k):.9g}" for k in AGREEMENT_FIELDS])


def read_agreement_csv(path) -> list[tuple[str, AgreementStats]]:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {k: float(rec[k]) for k in AGREEMENT_FIELDS}
            vals["n_valid"] = int(vals["n_valid"])
            out.append((rec["source"], AgreementStats(**vals)))
    return out
