import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from fedus.signal_core import (
    SignalError,
    Waveform,
    analytic_envelope,
    butter_bandpass,
    butter_sos,
    fir_bandpass,
    fir_bandpass_taps,
    minmax,
    minmax_normalize,
    read_waveform_csv,
    resample,
    sos_response,
    welch_psd,
    write_waveform_csv,
)


def tone(f, fs, dur=1.0, amp=1.0):
    t = np.arange(int(round(dur * fs))) / fs
    return amp * np.sin(2 * np.pi * f * t)


def db(x):
    return 20 * math.log10(x)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


# ------------------------------------------------------------ Waveform

@pytest.mark.parametrize("samples,fs", [([], 10.0), ([1.0, np.nan], 10.0), ([1.0, np.inf], 10.0), ([1.0], 0.0), ([1.0], -5)])
def test_waveform_rejects_invalid(samples, fs):
    with pytest.raises(SignalError):
        Waveform(np.array(samples, dtype=float), fs)


def test_waveform_duration():
    assert Waveform(np.zeros(500), 250).duration == 2.0


# ---------------------------------------------------------- resampling

def test_resample_tone_amplitude():
    out = resample(Waveform(tone(100, 2000), 2000), 500)
    assert out.fs == 500 and abs(len(out) - 500) <= 1
    ref = tone(100, 500)
    mid = slice(20, -20)
    assert abs(db(rms(out.samples[mid]) / rms(ref[mid]))) < 0.5
    assert np.max(np.abs(out.samples[mid] - ref[mid])) < 0.01


def test_resample_constant_and_identity():
    w = Waveform(np.ones(1000), 2000)
    out = resample(w, 250)
    assert np.allclose(out.samples[10:-10], 1.0, atol=1e-6)
    same = resample(w, 2000)
    assert np.array_equal(same.samples, w.samples)


def test_resample_rejects_bad_rate():
    with pytest.raises(SignalError):
        resample(Waveform(np.ones(10), 100), 0)


@pytest.mark.parametrize("f_alias", [140.0, 180.0, 230.0])
def test_resample_alias_rejection(f_alias):
    # tones above the new Nyquist (125 Hz) must not fold back
    x = tone(f_alias, 2000, dur=2.0)
    out = resample(Waveform(x, 2000), 250)
    assert db(rms(out.samples[50:-50]) / rms(x)) <= -40


def test_resample_round_trip():
    rng = np.random.default_rng(3)
    t = np.arange(2000) / 500
    x = sum(rng.uniform(0.2, 1) * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (3, 17, 41, 90))
    back = resample(resample(Waveform(x, 500), 1000), 500)
    err = rms(back.samples[50:-50] - x[50:-50]) / rms(x)
    assert err < 0.01


# --------------------------------------------------------- Butterworth

def test_butter_matches_scipy_design():
    ours = butter_sos(2, (25, 600), 2000, "bandpass")
    ref = sps.butter(2, [25, 600], btype="bandpass", fs=2000, output="sos")
    f = np.linspace(1, 999, 400)
    assert np.allclose(np.abs(sos_response(ours, f, 2000)), np.abs(sps.sosfreqz(ref, f, fs=2000)[1]), atol=1e-10)
    lp = butter_sos(1, 8.0, 2000, "lowpass")
    ref_lp = sps.butter(1, 8.0, fs=2000, output="sos")
    assert np.allclose(np.abs(sos_response(lp, f, 2000)), np.abs(sps.sosfreqz(ref_lp, f, fs=2000)[1]), atol=1e-10)


def test_butter_edges_and_midband():
    sos = butter_sos(2, (25, 600), 2000)
    h = np.abs(sos_response(sos, [25, 600, math.sqrt(25 * 600)], 2000))
    assert abs(db(h[0]) + 3.0103) < 0.5
    assert abs(db(h[1]) + 3.0103) < 0.5
    assert abs(db(h[2])) < 1.0


def test_butter_tone_sweep():
    def gain(f):
        x = tone(f, 2000, dur=2.0)
        y = butter_bandpass(Waveform(x, 2000), 25, 600).samples
        return db(rms(y[1000:]) / rms(x[1000:]))

    assert abs(gain(400)) < 1.0
    assert gain(5) <= -15
    assert gain(900) <= -15


def test_butter_rejects_nyquist():
    with pytest.raises(SignalError):
        butter_sos(2, (25, 1000), 2000)
    with pytest.raises(SignalError):
        butter_sos(0, (25, 600), 2000)


def test_filters_zero_in_zero_out():
    assert not np.any(butter_bandpass(Waveform(np.zeros(300), 2000), 25, 600).samples)
    assert not np.any(fir_bandpass(Waveform(np.zeros(300), 250), 3, 45).samples)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_filters_are_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(400), rng.standard_normal(400)
    for fn, fs in ((lambda w: butter_bandpass(w, 25, 600), 2000), (lambda w: fir_bandpass(w, 3, 45), 250)):
        lhs = fn(Waveform(a * x + b * y, fs)).samples
        rhs = a * fn(Waveform(x, fs)).samples + b * fn(Waveform(y, fs)).samples
        assert np.allclose(lhs, rhs, atol=1e-9)


# ------------------------------------------------------------------ FIR

def test_fir_design_length_and_symmetry():
    h = fir_bandpass_taps(3, 45, 250)
    assert h.size == 1001 and h.size % 2 == 1
    assert np.allclose(h, h[::-1])


def test_fir_passband_and_stopband():
    def gain(f):
        x = tone(f, 250, dur=20.0)
        y = fir_bandpass(Waveform(x, 250), 3, 45).samples
        return db(rms(y[1000:-1000]) / rms(x[1000:-1000]))

    assert abs(gain(20)) < 1.0
    assert gain(60) <= -30


def test_fir_rejects_dc_and_is_time_aligned():
    rng = np.random.default_rng(0)
    x = fir_bandpass(Waveform(rng.standard_normal(5000), 250), 5, 40).samples
    y0 = fir_bandpass(Waveform(x, 250), 3, 45).samples
    y5 = fir_bandpass(Waveform(x + 5.0, 250), 3, 45).samples
    mid = slice(1000, -1000)
    assert db(rms(y5[mid] - y0[mid]) / 5.0) <= -30
    # zero group delay: the filtered band-limited signal lines up with its input
    lag = np.argmax(np.correlate(y0[mid], x[mid], mode="full")) - (x[mid].size - 1)
    assert lag == 0


# -------------------------------------------------------- normalization

def test_minmax_examples():
    assert np.allclose(minmax(np.array([0, 5, 10.0])), [-1, 0, 1])
    assert np.allclose(minmax(np.array([-3, -1.0])), [-1, 1])
    x = np.array([-1, 0.3, 1.0])
    assert np.array_equal(minmax(x), x)
    with pytest.raises(SignalError):
        minmax(np.full(4, 2.0))
    assert minmax_normalize(Waveform(np.array([0, 5, 10.0]), 3)).fs == 3


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50).filter(lambda v: max(v) - min(v) > 1e-3))
def test_minmax_range_and_idempotence(vals):
    y = minmax(np.array(vals))
    assert y.min() == -1.0 and y.max() == 1.0
    assert np.array_equal(minmax(y), y)


# ------------------------------------------------------------ envelope

def test_envelope_of_tone_is_flat():
    env = analytic_envelope(Waveform(tone(50, 1000, dur=2.0), 1000)).samples
    assert np.all(np.abs(env[100:-100] - 1.0) < 0.02)


def test_envelope_tracks_am():
    fs = 2000
    t = np.arange(4 * fs) / fs
    a = 1.0 + 0.5 * np.sin(2 * np.pi * 1.5 * t)
    env = analytic_envelope(Waveform(a * np.sin(2 * np.pi * 200 * t), fs)).samples
    mid = slice(400, -400)
    assert np.all(np.abs(env[mid] - a[mid]) / a[mid] < 0.05)


def test_envelope_zero_and_short():
    assert not np.any(analytic_envelope(Waveform(np.zeros(16), 100)).samples)
    with pytest.raises(SignalError):
        analytic_envelope(Waveform(np.ones(3), 100))


# --------------------------------------------------------------- Welch

def test_welch_white_noise_flat_and_parseval():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(256 * 65 // 2 + 128)
    est = welch_psd(Waveform(x, 2000), 256, 0.5)
    inner = est.power[1:-1]
    assert inner.max() / inner.min() < 10
    assert abs(np.sum(est.power) * est.df / np.var(x) - 1) < 0.1
    assert est.freqs[0] == 0 and np.allclose(np.diff(est.freqs), 2000 / 256)


def test_welch_tone_peak_and_zero():
    est = welch_psd(Waveform(tone(200, 2000), 2000), 256)
    assert abs(est.freqs[np.argmax(est.power)] - 200) <= est.df
    assert not np.any(welch_psd(Waveform(np.zeros(512), 2000)).power)


def test_welch_errors():
    w = Waveform(np.ones(100), 100)
    with pytest.raises(SignalError):
        welch_psd(w, 256)
    with pytest.raises(SignalError):
        welch_psd(w, 50, overlap=1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_welch_nonnegative(seed):
    x = np.random.default_rng(seed).standard_normal(700) * 10
    assert np.all(welch_psd(Waveform(x, 500), 128).power >= 0)


# ---------------------------------------------------------------- CSV

def test_csv_round_trip(tmp_path):
    w = Waveform(np.random.default_rng(1).standard_normal(50), 250)
    write_waveform_csv(w, tmp_path / "w.csv")
    text = (tmp_path / "w.csv").read_text().splitlines()
    assert text[0] == "# fs=250"
    back = read_waveform_csv(tmp_path / "w.csv")
    assert back.fs == 250 and np.allclose(back.samples, w.samples, rtol=1e-8)


def test_csv_missing_header(tmp_path):
    (tmp_path / "bad.csv").write_text("1\n2\n")
    with pytest.raises(SignalError):
        read_waveform_csv(tmp_path / "bad.csv")
