"""DSP primitives shared by the preprocessing, metric and use-case code.

Every function here is a pure function of its inputs.  Waveforms carry
their own sampling rate so rate mistakes surface as errors, not as
silently mis-scaled spectra.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps


class SignalError(ValueError):
    """Invalid waveform or filter request."""


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    fs: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise SignalError("waveform needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains NaN or Inf")
        if not (self.fs > 0):
            raise SignalError(f"sampling rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.fs

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.fs)


@dataclass(frozen=True, eq=False)
class PsdEstimate:
    freqs: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0]) if self.freqs.size > 1 else 0.0


# ---------------------------------------------------------------- resampling

def _resample_ratio(fs: float, fs_target: float) -> tuple[int, int]:
    ratio = Fraction(fs_target / fs).limit_denominator(1000)
    return ratio.numerator, ratio.denominator


def antialias_fir(fs: float, fs_target: float, up: int) -> np.ndarray:
    """Kaiser windowed-sinc low-pass used by :func:`resample`.

    The -6 dB point sits at 0.45 * min(fs, fs_target); the transition band
    spans 0.40..0.50 of the slower rate with 60 dB stop-band attenuation.
    The filter runs at the interpolated rate ``up * fs``.
    """
    f_slow = min(fs, fs_target)
    fs_work = up * fs
    width = 0.1 * f_slow / (fs_work / 2.0)
    numtaps, beta = sps.kaiserord(60.0, width)
    numtaps |= 1
    return sps.firwin(numtaps, 0.45 * f_slow, window=("kaiser", beta), fs=fs_work)


def resample(w: Waveform, fs_target: float) -> Waveform:
    """Polyphase rational-rate resampling with a windowed-sinc anti-alias filter."""
    if not (fs_target > 0):
        raise SignalError(f"target rate must be positive, got {fs_target}")
    if fs_target == w.fs:
        return Waveform(w.samples.copy(), w.fs)
    up, down = _resample_ratio(w.fs, fs_target)
    h = antialias_fir(w.fs, fs_target, up)
    y = sps.resample_poly(w.samples, up, down, window=h, padtype="line")
    return Waveform(y, fs_target)


# ---------------------------------------------------------- Butterworth IIR

def _butter_prototype_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _prewarp(f: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f / fs)


def _bilinear(p: np.ndarray, fs: float) -> np.ndarray:
    return (2.0 * fs + p) / (2.0 * fs - p)


def _pole_sections(zpoles: np.ndarray) -> list[np.ndarray]:
    """Group digital poles into second-order denominators (real coefficients)."""
    tol = 1e-10
    upper = [p for p in zpoles if p.imag > tol]
    real = sorted(p.real for p in zpoles if abs(p.imag) <= tol)
    dens = [np.array([1.0, -2.0 * p.real, abs(p) ** 2]) for p in upper]
    for i in range(0, len(real) - 1, 2):
        a, b = real[i], real[i + 1]
        dens.append(np.array([1.0, -(a + b), a * b]))
    if len(real) % 2:
        dens.append(np.array([1.0, -real[-1], 0.0]))
    return dens


def sos_response(sos: np.ndarray, freqs, fs: float) -> np.ndarray:
    """Complex frequency response of a second-order-section cascade."""
    z = np.exp(1j * 2 * np.pi * np.atleast_1d(np.asarray(freqs, dtype=float)) / fs)
    zi = 1.0 / z
    h = np.ones_like(z)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * zi + b2 * zi**2) / (a0 + a1 * zi + a2 * zi**2)
    return h


def butter_sos(order: int, cutoff, fs: float, btype: str = "bandpass") -> np.ndarray:
    """Digital Butterworth design as biquads via the bilinear transform.

    ``cutoff`` is a (lo, hi) pair for ``bandpass`` and a scalar for
    ``lowpass``.  Edges are pre-warped so the -3 dB points land exactly on
    the requested frequencies.  Returns an (n_sections, 6) array in the
    ``[b0, b1, b2, 1, a1, a2]`` layout.
    """
    if order < 1:
        raise SignalError("filter order must be >= 1")
    nyq = fs / 2.0
    proto = _butter_prototype_poles(order)
    if btype == "bandpass":
        f_lo, f_hi = cutoff
        if not (0 < f_lo < f_hi < nyq):
            raise SignalError(f"band edges must satisfy 0 < lo < hi < fs/2, got {cutoff}")
        w_lo, w_hi = _prewarp(f_lo, fs), _prewarp(f_hi, fs)
        w0, bw = math.sqrt(w_lo * w_hi), w_hi - w_lo
        # s -> (s^2 + w0^2) / (bw s): each prototype pole splits in two
        apoles = []
        for p in proto:
            half = p * bw / 2.0
            disc = np.sqrt(half**2 - w0**2 + 0j)
            apoles += [half + disc, half - disc]
        zpoles = _bilinear(np.array(apoles), fs)
        dens = _pole_sections(zpoles)
        # order zeros at z=+1 (from s=0) and order zeros at z=-1 (from s=inf)
        nums = [np.array([1.0, 0.0, -1.0]) for _ in dens]
        f_ref = 2.0 * fs * math.atan(w0 / (2.0 * fs)) / (2 * math.pi)
    elif btype == "lowpass":
        fc = float(cutoff)
        if not (0 < fc < nyq):
            raise SignalError(f"cutoff must satisfy 0 < fc < fs/2, got {fc}")
        wc = _prewarp(fc, fs)
        zpoles = _bilinear(proto * wc, fs)
        dens = _pole_sections(zpoles)
        nums = [np.array([1.0, 2.0, 1.0]) if d[2] != 0 else np.array([1.0, 1.0, 0.0]) for d in dens]
        f_ref = 0.0
    else:
        raise SignalError(f"unsupported filter type {btype!r}")
    sos = np.array([np.concatenate([n, d]) for n, d in zip(nums, dens)])
    gain = abs(sos_response(sos, [f_ref], fs)[0])
    sos[0, :3] /= gain
    return sos


def butter_bandpass(w: Waveform, f_lo: float, f_hi: float, order: int = 2) -> Waveform:
    """Single-pass causal Butterworth band-pass with zero initial conditions."""
    sos = butter_sos(order, (f_lo, f_hi), w.fs, "bandpass")
    return w.with_samples(sps.sosfilt(sos, w.samples))


# ------------------------------------------------------------------ FIR

def fir_bandpass_taps(pass_lo: float, pass_hi: float, fs: float, transition: float = 1.0) -> np.ndarray:
    """Hamming windowed-sinc band-pass; length 4*fs/transition rounded to odd."""
    if not (0 < pass_lo < pass_hi < fs / 2):
        raise SignalError(f"band must satisfy 0 < lo < hi < fs/2, got ({pass_lo}, {pass_hi})")
    numtaps = int(round(4.0 * fs / transition)) | 1
    n = np.arange(numtaps) - (numtaps - 1) / 2
    ideal = 2 * pass_hi / fs * np.sinc(2 * pass_hi / fs * n) - 2 * pass_lo / fs * np.sinc(2 * pass_lo / fs * n)
    h = ideal * np.hamming(numtaps)
    fc = math.sqrt(pass_lo * pass_hi)
    h /= abs(np.sum(h * np.exp(-2j * np.pi * fc / fs * n)))
    return h


def fir_bandpass(w: Waveform, pass_lo: float, pass_hi: float, transition: float = 1.0) -> Waveform:
    """Linear-phase FIR band-pass, delay-compensated so output aligns with input."""
    h = fir_bandpass_taps(pass_lo, pass_hi, w.fs, transition)
    y = sps.fftconvolve(w.samples, h, mode="full")
    d = (h.size - 1) // 2
    return w.with_samples(y[d : d + w.samples.size])


# ------------------------------------------------------- normalization etc.

def minmax_normalize(w: Waveform) -> Waveform:
    return w.with_samples(minmax(w.samples))


def minmax(x: np.ndarray) -> np.ndarray:
    """Affine map of ``x`` onto [-1, 1]; raises on a constant input."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        raise SignalError("cannot min-max normalize a constant signal")
    if lo == -1.0 and hi == 1.0:
        return x.copy()
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def analytic_signal(x: np.ndarray) -> np.ndarray:
    n = x.size
    spec = np.fft.fft(x)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return np.fft.ifft(spec * h)


def analytic_envelope(w: Waveform) -> Waveform:
    """Magnitude of the FFT-based analytic signal."""
    if w.samples.size < 4:
        raise SignalError("analytic envelope needs at least 4 samples")
    return w.with_samples(np.abs(analytic_signal(w.samples)))


# ------------------------------------------------------------------ Welch

def welch_psd(w: Waveform, seg_len: int = 256, overlap: float = 0.5, detrend: bool = False) -> PsdEstimate:
    """Averaged Hann-windowed periodograms, one-sided power per Hz."""
    x = w.samples
    if seg_len > x.size:
        raise SignalError(f"segment length {seg_len} exceeds signal length {x.size}")
    if not (0 <= overlap < 1):
        raise SignalError("overlap must lie in [0, 1)")
    step = seg_len - int(round(overlap * seg_len))
    win = np.hanning(seg_len + 1)[:-1]  # periodic Hann
    starts = np.arange(0, x.size - seg_len + 1, step)
    segs = np.stack([x[s : s + seg_len] for s in starts])
    if detrend:
        segs = segs - segs.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(segs * win, axis=1)
    power = (np.abs(spec) ** 2).mean(axis=0) / (w.fs * np.sum(win**2))
    if seg_len % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.fft.rfftfreq(seg_len, 1.0 / w.fs)
    return PsdEstimate(freqs, power)


# --------------------------------------------------------------- CSV I/O

def write_waveform_csv(w: Waveform, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# fs={w.fs:.12g}\n")
        np.savetxt(fh, w.samples, fmt="%.9g")


def read_waveform_csv(path) -> Waveform:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header.startswith("#") or "fs=" not in header:
            raise SignalError(f"{path}: missing '# fs=<Hz>' header")
        fs = float(header.split("fs=", 1)[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=1)
    return Waveform(data, fs)
