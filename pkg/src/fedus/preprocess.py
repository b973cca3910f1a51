"""From raw subject recordings to aligned, quality-filtered beat pairs.

Pipeline per subject: resample (DUS 2 kHz, FECG 250 Hz) -> DUS Butterworth
25-600 Hz / FECG FIR 3-45 Hz -> per-segment min-max -> envelope lag
estimate -> DUS shift -> per-beat windows.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal_core import (
    SignalError,
    Waveform,
    analytic_envelope,
    butter_bandpass,
    butter_sos,
    fir_bandpass,
    minmax,
    read_waveform_csv,
    resample,
    write_waveform_csv,
)

FS_DUS = 2000.0
FS_FECG = 250.0
SEGMENT_S = 3.75
BEAT_LEN = 160
ARCHIVE_MAGIC = b"FDPAIR1\0"


class AnnotationError(ValueError):
    pass


@dataclass
class SegmentAnnotation:
    start: float
    duration: float
    dus_sqi: tuple
    fecg_sqi: list
    auto_rank: list
    fhr_truth: float | None = None

    def __post_init__(self):
        self.dus_sqi = tuple(int(v) for v in self.dus_sqi)
        self.fecg_sqi = [tuple(int(v) for v in pair) for pair in self.fecg_sqi]
        self.auto_rank = [int(r) for r in self.auto_rank]

    def validate(self, n_channels: int | None = None) -> None:
        n = len(self.fecg_sqi)
        if len(self.dus_sqi) != 2 or any(len(p) != 2 for p in self.fecg_sqi):
            raise AnnotationError("every SQI entry needs exactly two annotator scores")
        if n == 0 or (n_channels is not None and n != n_channels):
            raise AnnotationError(f"expected scores for {n_channels} channels, got {n}")
        if abs(self.duration - SEGMENT_S) > 1e-9:
            raise AnnotationError(f"segment duration must be {SEGMENT_S} s, got {self.duration}")
        scores = list(self.dus_sqi) + [s for p in self.fecg_sqi for s in p]
        if any(not 1 <= s <= 5 for s in scores):
            raise AnnotationError(f"SQI outside 1..5: {scores}")
        if sorted(self.auto_rank) != list(range(1, n + 1)):
            raise AnnotationError(f"auto_rank must be a permutation of 1..{n}, got {self.auto_rank}")

    def to_json(self) -> dict:
        out = {
            "start": self.start,
            "duration": self.duration,
            "dus_sqi": list(self.dus_sqi),
            "fecg_sqi": [list(p) for p in self.fecg_sqi],
            "auto_rank": list(self.auto_rank),
        }
        if self.fhr_truth is not None:
            out["fhr_truth"] = self.fhr_truth
        return out


@dataclass
class SubjectRecord:
    subject_id: str
    dus: Waveform
    fecg_channels: list
    peaks: np.ndarray
    segments: list = field(default_factory=list)

    def __post_init__(self):
        self.peaks = np.asarray(self.peaks, dtype=np.float64)
        if self.peaks.size > 1 and np.any(np.diff(self.peaks) <= 0):
            raise AnnotationError(f"{self.subject_id}: peaks must be strictly ascending")
        if not 1 <= len(self.fecg_channels) <= 7:
            raise AnnotationError(f"{self.subject_id}: expected 1-7 FECG channels")
        c0 = self.fecg_channels[0]
        if any(len(c) != len(c0) or c.fs != c0.fs for c in self.fecg_channels):
            raise AnnotationError(f"{self.subject_id}: FECG channels differ in length or rate")
        if self.peaks.size and (self.peaks[0] < 0 or self.peaks[-1] >= c0.duration):
            raise AnnotationError(f"{self.subject_id}: peak outside the recording")


@dataclass
class BeatPair:
    fecg_in: np.ndarray
    dus_out: np.ndarray
    subject_id: str
    peak_time: float


def _idx(t: float, fs: float) -> int:
    return int(math.floor(t * fs + 0.5))


# ------------------------------------------------------------- envelopes

def homomorphic_envelope(dus: Waveform, lpf_hz: float = 8.0, eps: float = 1e-6) -> Waveform:
    """exp(low-pass(log(|analytic| + eps))) with a zero-phase 1st-order low-pass."""
    env = analytic_envelope(dus).samples
    sos = butter_sos(1, lpf_hz, dus.fs, "lowpass")
    b, a = sos[0, :2], sos[0, 3:5]
    logenv = np.log(env + eps)
    smooth = sps.filtfilt(b, a, logenv) if logenv.size > 9 else logenv
    return dus.with_samples(np.exp(smooth))


def pan_tompkins_envelope(fecg: Waveform, window_s: float = 0.1) -> Waveform:
    """Five-point derivative, squaring, centred moving-window integration."""
    width = max(1, int(round(window_s * fecg.fs)))
    x = fecg.samples
    if x.size < width:
        raise SignalError(f"signal shorter than the {width}-sample integration window")
    deriv = np.convolve(x, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * fecg.fs / 8.0, mode="same")
    env = np.convolve(deriv * deriv, np.ones(width) / width, mode="same")
    return fecg.with_samples(np.maximum(env, 0.0))


def estimate_lag(env_dus: Waveform, env_fecg: Waveform, max_lag_s: float = 2.0) -> float:
    """Lag (s) maximizing the normalized cross-correlation; positive = DUS trails FECG.

    The peak is refined to sub-sample precision with a parabola.
    """
    if env_dus.fs != env_fecg.fs:
        raise SignalError("envelopes must share a sampling rate")
    a, b = env_fecg.samples, env_dus.samples
    n = min(a.size, b.size)
    a, b = a[:n], b[:n]
    max_lag = int(round(max_lag_s * env_fecg.fs))
    if n < 2 * max_lag + 2:
        raise SignalError(f"envelopes ({n} samples) shorter than the 2x{max_lag}-sample lag window")
    lags = np.arange(-max_lag, max_lag + 1)
    r = np.array([_pearson(a, b, L) for L in lags])
    i = int(np.argmax(r))
    offset = 0.0
    if 0 < i < r.size - 1:
        den = r[i - 1] - 2 * r[i] + r[i + 1]
        if den < 0:
            offset = 0.5 * (r[i - 1] - r[i + 1]) / den
    return float((lags[i] + offset) / env_fecg.fs)


def _pearson(a: np.ndarray, b: np.ndarray, lag: int) -> float:
    if lag >= 0:
        x, y = a[: a.size - lag], b[lag:]
    else:
        x, y = a[-lag:], b[: b.size + lag]
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(np.dot(x, x)) * float(np.dot(y, y)))
    return float(np.dot(x, y)) / den if den > 0 else 0.0


# ----------------------------------------------------- channel selection

def select_fecg_channel(seg: SegmentAnnotation) -> int | None:
    """Index of the FECG channel to use for a segment, or None to reject it.

    Rules: keep only segments whose DUS both annotators rated 1; drop
    channels with a 5 from either annotator or a summed score above 5;
    among channels rated 1 by both annotators take the best automatic rank;
    otherwise take the lowest summed score, then the lowest single score,
    then the best automatic rank.
    """
    seg.validate()
    if seg.dus_sqi != (1, 1):
        return None
    cands = [c for c, (a, b) in enumerate(seg.fecg_sqi) if a + b <= 5 and 5 not in (a, b)]
    if not cands:
        return None
    both_one = [c for c in cands if seg.fecg_sqi[c] == (1, 1)]
    if both_one:
        return min(both_one, key=lambda c: seg.auto_rank[c])
    return min(cands, key=lambda c: (sum(seg.fecg_sqi[c]), min(seg.fecg_sqi[c]), seg.auto_rank[c]))


# -------------------------------------------------------- conditioning

@dataclass
class ProcessedSubject:
    """A record after filtering and lag removal, plus per-segment channel picks."""

    record: SubjectRecord
    selection: list  # channel index or None per segment
    lag_s: float  # estimated lag
    shift_s: float = 0.0  # lag actually removed, a whole number of FECG samples


def condition(rec: SubjectRecord) -> SubjectRecord:
    """Resample, band-pass and segment-normalize both modalities."""
    dus = butter_bandpass(resample(rec.dus, FS_DUS), 25.0, 600.0, order=2)
    chans = [fir_bandpass(resample(c, FS_FECG), 3.0, 45.0) for c in rec.fecg_channels]
    dus = dus.with_samples(_segment_normalize(dus.samples, FS_DUS, rec.segments))
    chans = [c.with_samples(_segment_normalize(c.samples, FS_FECG, rec.segments)) for c in chans]
    return SubjectRecord(rec.subject_id, dus, chans, rec.peaks, rec.segments)


def _segment_normalize(x: np.ndarray, fs: float, segments: list) -> np.ndarray:
    out = x.copy()
    for seg in segments:
        s, e = _idx(seg.start, fs), min(_idx(seg.start + seg.duration, fs), x.size)
        piece = x[s:e]
        if piece.size and piece.max() > piece.min():
            out[s:e] = minmax(piece)
    return out


def composite_fecg(rec: SubjectRecord, selection: list) -> Waveform:
    """One FECG trace taking each segment from its selected channel."""
    fs = rec.fecg_channels[0].fs
    out = rec.fecg_channels[0].samples.copy()
    for seg, ch in zip(rec.segments, selection):
        if ch is None:
            ch = int(np.argmin(seg.auto_rank))
        s, e = _idx(seg.start, fs), _idx(seg.start + seg.duration, fs)
        out[s:e] = rec.fecg_channels[ch].samples[s:e]
    return Waveform(out, fs)


def subject_lag(rec: SubjectRecord, selection: list, max_lag_s: float = 2.0) -> float:
    """Lag between DUS and FECG envelopes over the subject's accepted segments."""
    env_d = resample(homomorphic_envelope(rec.dus), FS_FECG).samples
    env_f = pan_tompkins_envelope(composite_fecg(rec, selection)).samples
    parts_d, parts_f = [], []
    for seg, ch in zip(rec.segments, selection):
        if ch is None:
            continue
        s, e = _idx(seg.start, FS_FECG), _idx(seg.start + seg.duration, FS_FECG)
        parts_d.append(env_d[s:e])
        parts_f.append(env_f[s:e])
    if not parts_d:
        return 0.0
    d, f = np.concatenate(parts_d), np.concatenate(parts_f)
    return estimate_lag(Waveform(d, FS_FECG), Waveform(f, FS_FECG), max_lag_s)


def shift_dus(dus: Waveform, lag_s: float) -> Waveform:
    """Advance the DUS by ``lag_s`` (zero-filled at the end)."""
    k = int(round(lag_s * dus.fs))
    x = dus.samples
    out = np.zeros_like(x)
    if k >= 0:
        out[: x.size - k] = x[k:]
    else:
        out[-k:] = x[: x.size + k]
    return dus.with_samples(out)


def process_subject(rec: SubjectRecord, max_lag_s: float = 2.0) -> ProcessedSubject:
    cond = condition(rec)
    selection = [select_fecg_channel(s) for s in cond.segments]
    lag = subject_lag(cond, selection, max_lag_s)
    # snapping to the FECG grid keeps every DUS window on the same 8:1 sample phase
    shift = round(lag * FS_FECG) / FS_FECG
    aligned = SubjectRecord(cond.subject_id, shift_dus(cond.dus, shift), cond.fecg_channels, cond.peaks, cond.segments)
    return ProcessedSubject(aligned, selection, lag, shift)


# ------------------------------------------------------ beat extraction

def beat_window(fecg: np.ndarray, dus: np.ndarray, start: int, end: int, n_in: int, ratio: int = 8):
    """Normalized, zero-padded (FECG, DUS) window for FECG samples [start, end).

    Returns None when either raw window has a degenerate range.
    """
    end = min(end, start + n_in, fecg.size)
    f = fecg[start:end]
    d = dus[ratio * start : ratio * end]
    if f.size < 2 or d.size < 2 or not f.max() > f.min() or not d.max() > d.min():
        return None
    fin = np.zeros(n_in)
    fin[: f.size] = minmax(f)
    dout = np.zeros(ratio * n_in)
    dout[: d.size] = minmax(d)
    return fin, dout


def extract_beat_pairs(rec: SubjectRecord, n_beats: int = 1, L_in: int = BEAT_LEN,
                       selection: list | None = None) -> list[BeatPair]:
    """Windows of ``n_beats`` consecutive peaks inside accepted segments, sliding by one beat.

    A window runs from its first peak to the peak following the run (or the
    segment end) and is capped at ``n_beats * L_in`` FECG samples.
    """
    if n_beats not in (1, 2, 3):
        raise ValueError(f"n_beats must be 1, 2 or 3, got {n_beats}")
    fs_f = rec.fecg_channels[0].fs
    ratio = int(round(rec.dus.fs / fs_f))
    n_in = n_beats * L_in
    if selection is None:
        selection = [select_fecg_channel(s) for s in rec.segments]
    pairs = []
    for seg, ch in zip(rec.segments, selection):
        if ch is None:
            continue
        fecg = rec.fecg_channels[ch].samples
        seg_end = _idx(seg.start + seg.duration, fs_f)
        inside = rec.peaks[(rec.peaks >= seg.start) & (rec.peaks < seg.start + seg.duration)]
        for i in range(len(inside) - n_beats + 1):
            start = _idx(inside[i], fs_f)
            end = _idx(inside[i + n_beats], fs_f) if i + n_beats < len(inside) else seg_end
            win = beat_window(fecg, rec.dus.samples, start, end, n_in, ratio)
            if win is None:
                continue
            pairs.append(BeatPair(win[0], win[1], rec.subject_id, float(inside[i])))
    return pairs


def loso_split(pairs: list[BeatPair], held_out: str) -> tuple[list, list]:
    subjects = {p.subject_id for p in pairs}
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    if held_out not in subjects:
        raise KeyError(f"unknown subject id {held_out!r}")
    train = [p for p in pairs if p.subject_id != held_out]
    test = [p for p in pairs if p.subject_id == held_out]
    return train, test


# ------------------------------------------------------------- file I/O

def write_pairs(path, pairs: list[BeatPair]) -> None:
    """Little-endian beat-pair archive."""
    with Path(path).open("wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", len(pairs)))
        for p in pairs:
            sid = p.subject_id.encode()
            fh.write(struct.pack("<I", len(sid)) + sid)
            fh.write(struct.pack("<d", p.peak_time))
            fh.write(struct.pack("<I", len(p.fecg_in)))
            fh.write(np.asarray(p.fecg_in, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", len(p.dus_out)))
            fh.write(np.asarray(p.dus_out, dtype="<f4").tobytes())


def read_pairs(path) -> list[BeatPair]:
    raw = Path(path).read_bytes()
    if raw[:8] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a beat-pair archive")
    (count,) = struct.unpack_from("<I", raw, 8)
    off = 12
    pairs = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        sid = raw[off + 4 : off + 4 + n].decode()
        off += 4 + n
        (peak,) = struct.unpack_from("<d", raw, off)
        off += 8
        (n_in,) = struct.unpack_from("<I", raw, off)
        fin = np.frombuffer(raw, dtype="<f4", count=n_in, offset=off + 4).astype(np.float32)
        off += 4 + 4 * n_in
        (n_out,) = struct.unpack_from("<I", raw, off)
        dout = np.frombuffer(raw, dtype="<f4", count=n_out, offset=off + 4).astype(np.float32)
        off += 4 + 4 * n_out
        pairs.append(BeatPair(fin, dout, sid, peak))
    return pairs


def write_manifest(rec: SubjectRecord, outdir, extra: dict | None = None) -> Path:
    """Write waveform CSVs and the JSON manifest for one subject."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sid = rec.subject_id
    dus_name = f"{sid}_dus.csv"
    write_waveform_csv(rec.dus, outdir / dus_name)
    fecg_names = []
    for c, w in enumerate(rec.fecg_channels):
        name = f"{sid}_fecg_ch{c + 1}.csv"
        write_waveform_csv(w, outdir / name)
        fecg_names.append(name)
    doc = {
        "subject_id": sid,
        "dus": dus_name,
        "fecg_channels": fecg_names,
        "peaks": [float(f"{p:.9g}") for p in rec.peaks],
        "segments": [s.to_json() for s in rec.segments],
    }
    if extra:
        doc.update(extra)
    path = outdir / f"{sid}.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def read_manifest(path) -> SubjectRecord:
    path = Path(path)
    doc = json.loads(path.read_text())
    try:
        base = path.parent
        dus = read_waveform_csv(base / doc["dus"])
        chans = [read_waveform_csv(base / p) for p in doc["fecg_channels"]]
        segs = [SegmentAnnotation(**s) for s in doc["segments"]]
        rec = SubjectRecord(str(doc["subject_id"]), dus, chans, doc["peaks"], segs)
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"{path}: malformed manifest ({exc})") from exc
    for s in segs:
        s.validate(len(chans))
    return rec


def list_manifests(data_dir) -> list[Path]:
    return sorted(Path(data_dir).glob("*.json"))
