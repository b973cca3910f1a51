"""The nine acceptance criteria at their stated tolerances and time budgets.

Each test records one PASS/FAIL line; the lines are printed together at
the end of the session.  Criteria 6, 8 and 9 share one run of the
reduced-width desk configuration on the default synthetic dataset.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fedus import autograd as ag
from fedus import metrics as mt
from fedus import model as fm
from fedus import pipeline as pl
from fedus import usecase as uc
from fedus.config import load_config, parse_overrides
from fedus.model import ArchConfig
from fedus.preprocess import (
    SegmentAnnotation,
    process_subject,
    read_pairs,
    select_fecg_channel,
)
from fedus.signal_core import Waveform, butter_sos, fir_bandpass, resample, sos_response
from fedus.synthgen import SynthConfig, gen_subject
from fedus.usecase import FhrResult

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
MICRO = ArchConfig(n_filters=4, kernel=3, dilations=(1, 2), L_in=32, L_out=256)


def verdict(n, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed <= budget
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f} s of {budget:.0f} s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def desk_config(root: Path, extra=()):
    sets = [f"paths.{k}={root / v}" for k, v in
            (("data_dir", "data"), ("work_dir", "work"), ("checkpoint_dir", "ck"), ("report_dir", "rep"))]
    return load_config(DESK, parse_overrides(sets + list(extra)))


def full_pipeline(cfg):
    """synth -> preprocess -> LOSO training -> eval; returns elapsed seconds."""
    t0 = time.perf_counter()
    pl.run_synth(cfg)
    pl.run_preprocess(cfg)
    pl.run_train(cfg, loso=True)
    pl.run_eval(cfg)
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    cfg = desk_config(tmp_path_factory.mktemp("desk"))
    return cfg, full_pipeline(cfg)


# ------------------------------------------------------------------ 1

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    params = fm.init_params(MICRO, 7, dtype=np.float64)
    rng = np.random.default_rng(0)
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.1 * rng.standard_normal(params.tensors[k].shape)
    x = np.tanh(rng.standard_normal((2, 32)))
    y = np.tanh(rng.standard_normal((2, 256)))
    _, grads = fm.loss_and_grads(params, x, y)

    def loss():
        return float(ag.mse_loss(fm.forward_graph(fm._leaves(params, False), MICRO, fm._as_input(params, x)), y).data)

    names = sorted(params.tensors)
    sizes = np.array([params.tensors[k].size for k in names], dtype=float)
    worst, h = 0.0, 1e-5
    for _ in range(200):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        arr = params.tensors[k]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        up = loss()
        arr[idx] = old - h
        down = loss()
        arr[idx] = old
        num, ana = (up - down) / (2 * h), grads[k][idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    verdict(1, worst < 1e-4, f"200 coordinates, worst relative error {worst:.2e}", time.perf_counter() - t0, 60)


# ------------------------------------------------------------------ 2

def test_criterion_2_causality_and_receptive_field():
    t0 = time.perf_counter()
    params = fm.init_params(MICRO, 1, dtype=np.float64)
    rng = np.random.default_rng(1)
    causal = True
    for _ in range(100):
        x = rng.uniform(-1, 1, 32)
        t = int(rng.integers(32))
        x2 = x.copy()
        x2[t:] += rng.standard_normal(32 - t)
        a, b = fm.conv_stack(params, x), fm.conv_stack(params, x2)
        causal &= bool(np.array_equal(a[:t], b[:t]))

    # default kernel and dilations on a window longer than the receptive field
    probe = ArchConfig(n_filters=2, L_in=1024, L_out=8192)
    pp = fm.init_params(probe, 2, dtype=np.float64)
    x = np.zeros(1024)
    base = fm.conv_stack(pp, x)
    x[0] = 1.0
    changed = np.flatnonzero(np.any(fm.conv_stack(pp, x) != base, axis=1))
    rf = int(changed.max()) + 1
    ok = causal and rf == 609 == probe.receptive_field and changed.min() == 0
    verdict(2, ok, f"causal in 100 trials: {causal}; measured receptive field {rf}", time.perf_counter() - t0, 60)


# ------------------------------------------------------------------ 3

def _brute_kld(x, y, bins=50, eps=1e-10):
    def hist(v):
        c = np.zeros(bins)
        for a in v:
            c[min(int((min(max(a, -1.0), 1.0) + 1.0) / 2.0 * bins), bins - 1)] += 1
        p = c / len(v) + eps
        return p / p.sum()

    p, q = hist(x), hist(y)
    return float(sum(a * math.log(a / b) for a, b in zip(p, q)))


def _brute_frechet(x, y):
    tx, ty = mt.time_axis(len(x), 1.0), mt.time_axis(len(y), 1.0)

    def best(i, j):
        d = math.hypot(tx[i] - ty[j], x[i] - y[j])
        if (i, j) == (len(x) - 1, len(y) - 1):
            return d
        steps = [(i + a, j + b) for a, b in ((1, 0), (0, 1), (1, 1)) if i + a < len(x) and j + b < len(y)]
        return max(d, min(best(a, b) for a, b in steps))

    return best(0, 0)


def test_criterion_3_metric_identity_and_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = np.tanh(rng.standard_normal(1280))
    identity = all(v == 0.0 for v in mt.pair_metrics(x, x).values())
    kld_err = max(abs(mt.kld(a, b) - _brute_kld(a, b)) for a, b in
                  ((np.tanh(rng.standard_normal(int(rng.integers(10, 400)))),
                    np.tanh(0.5 * rng.standard_normal(int(rng.integers(10, 400))))) for _ in range(100)))
    fd_err = 0.0
    for _ in range(500):
        a, b = rng.uniform(-1, 1, int(rng.integers(1, 7))), rng.uniform(-1, 1, int(rng.integers(1, 7)))
        fd_err = max(fd_err, abs(mt.frechet_distance(a, b) - _brute_frechet(a, b)))
    dominated = all(mt.rmse(a, b) >= mt.mae(a, b) for a, b in
                    ((rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)) for n in rng.integers(1, 200, 1000)))
    ok = identity and kld_err <= 1e-9 and fd_err <= 1e-12 and dominated
    verdict(3, ok, f"identity {identity}; KLD oracle error {kld_err:.1e}; Frechet oracle error {fd_err:.1e}; "
                   f"rmse >= mae {dominated}", time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 4

def _db(x):
    return 20 * math.log10(x)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def test_criterion_4_preprocessing_fidelity():
    t0 = time.perf_counter()
    errs = []
    for seed in range(3):
        l0 = process_subject(gen_subject(SynthConfig(n_subjects=1, duration_s=120, seed=seed, dus_lag_s=0.0), 0)).lag_s
        l1 = process_subject(gen_subject(SynthConfig(n_subjects=1, duration_s=120, seed=seed, dus_lag_s=0.10), 0)).lag_s
        errs.append(abs((l1 - l0) - 0.10))
    lag_ok = max(errs) <= 0.004

    h = np.abs(sos_response(butter_sos(2, (25, 600), 2000), [25.0, 600.0], 2000))
    edges = [_db(v) for v in h]
    edge_ok = all(abs(e + 3.0103) <= 0.5 for e in edges)

    rng = np.random.default_rng(0)
    sig = fir_bandpass(Waveform(rng.standard_normal(5000), 250), 5, 40).samples
    y0 = fir_bandpass(Waveform(sig, 250), 3, 45).samples[1000:-1000]
    y5 = fir_bandpass(Waveform(sig + 5.0, 250), 3, 45).samples[1000:-1000]
    dc = -_db(_rms(y5 - y0) / 5.0)

    t = np.arange(4000) / 2000
    alias = -math.inf
    for f in (140.0, 180.0, 230.0):
        tone = np.sin(2 * np.pi * f * t)
        out = resample(Waveform(tone, 2000), 250).samples[50:-50]
        alias = max(alias, _db(_rms(out) / _rms(tone)))
    ok = lag_ok and edge_ok and dc >= 30 and alias <= -40
    verdict(4, ok, f"lag error {max(errs) * 1000:.2f} ms; -3 dB edges {edges[0]:.2f}/{edges[1]:.2f} dB; "
                   f"DC rejection {dc:.1f} dB; alias {alias:.1f} dB", time.perf_counter() - t0, 120)


# ------------------------------------------------------------------ 5

def test_criterion_5_sqi_fusion():
    t0 = time.perf_counter()

    def pick(sqi, rank):
        return select_fecg_channel(SegmentAnnotation(0.0, 3.75, (1, 1), sqi, rank))

    got = (
        pick([(1, 1), (1, 1), (2, 2)], [3, 1, 2]),
        pick([(2, 2), (1, 3), (2, 3)], [1, 2, 3]),
        pick([(1, 5), (2, 2)], [1, 2]),
        pick([(1, 5), (5, 1)], [1, 2]),
    )
    ok = got == (1, 1, 1, None)
    verdict(5, ok, f"selections {got} (expected (1, 1, 1, None))", time.perf_counter() - t0, 5)


# ------------------------------------------------------------------ 6

def test_criterion_6_end_to_end_learning(desk_run):
    cfg, elapsed = desk_run
    pairs = read_pairs(cfg.pairs_path)
    model = dict(mt.read_report_csv(pl.metrics_path(cfg)))
    base = dict(mt.read_report_csv(pl.metrics_path(cfg, "baseline")))
    folds = sorted(k for k in model if k != "all")
    m_rmse = float(np.mean([model[k].mean["rmse"] for k in folds]))
    b_rmse = float(np.mean([base[k].mean["rmse"] for k in folds]))
    gen = read_pairs(pl.generated_path(cfg))
    in_band = float(np.mean([150 <= mt.psd_peak_hz(g.dus_out) <= 300 for g in gen]))
    ratio = m_rmse / b_rmse
    ok = len(pairs) >= 3000 and len(folds) == 5 and ratio < 0.7 and in_band >= 0.9
    verdict(6, ok, f"{len(pairs)} pairs, {len(folds)} folds; RMSE {m_rmse:.4f} vs baseline {b_rmse:.4f} "
                   f"(ratio {ratio:.3f}); PSD peak in band {in_band:.1%}", elapsed, 15 * 60)


# ------------------------------------------------------------------ 7

def test_criterion_7_multi_beat_ablation(tmp_path):
    t0 = time.perf_counter()
    small = ["synth.n_subjects=3", "synth.duration_s=60", "arch.n_filters=4", "train.max_epochs=2", "train.patience=1"]
    lengths_ok = True
    for nb in (2, 3):
        cfg = desk_config(tmp_path, small + [f"preprocess.n_beats={nb}"])
        if nb == 2:
            pl.run_synth(cfg)
        pl.run_preprocess(cfg)
        pl.run_train(cfg, loso=True)
        pl.run_eval(cfg)
        for g in read_pairs(pl.generated_path(cfg)):
            lengths_ok &= len(g.fecg_in) == 160 * nb and len(g.dus_out) == 8 * len(g.fecg_in)
    for nb in (1, 2, 3):
        arch = ArchConfig.for_beats(nb, n_filters=2)
        lengths_ok &= fm.forward(fm.init_params(arch), np.zeros(arch.L_in)).size == 8 * arch.L_in
    pl.run_report(cfg)
    with open(cfg.report_dir / "report_table2.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    labels = [r[0] for r in rows[1:]]
    shaped = labels == ["generator, 2 beats", "generator, 3 beats"] and all(len(r) == 17 for r in rows)
    verdict(7, lengths_ok and shaped, f"table rows {labels}; output = 8 x input everywhere: {lengths_ok}",
            time.perf_counter() - t0, 20 * 60)


# ------------------------------------------------------------------ 8

def test_criterion_8_fhr_use_case(desk_run):
    cfg, _ = desk_run
    t0 = time.perf_counter()
    pl.run_usecase_stage(cfg)
    gen = dict(uc.read_agreement_csv(cfg.report_dir / "agreement_nb1.csv"))["generated"]
    n_seg = len(uc.read_results_csv(cfg.report_dir / "usecase_nb1_generated.csv"))
    two = uc.agreement([FhrResult("a", 140.0, 141.0, True), FhrResult("b", 140.0, 139.0, True)])
    hand = (two.bias, two.loa_lo, two.loa_hi, two.bland_altman, two.picp_5bpm) == (0.0, -1.96, 1.96, 1.96, 1.0)
    ok = n_seg >= 100 and gen.picp_5bpm >= 0.9 and abs(gen.bias) <= 2.0 and hand
    verdict(8, ok, f"{n_seg} segments ({gen.n_valid} valid); PICP {gen.picp_5bpm:.3f}; bias {gen.bias:+.2f} bpm; "
                   f"two-point example exact: {hand}", time.perf_counter() - t0, 5 * 60)


# ------------------------------------------------------------------ 9

def _artifacts(cfg):
    files = [cfg.pairs_path, pl.generated_path(cfg), pl.metrics_path(cfg), pl.metrics_path(cfg, "baseline")]
    files += sorted(cfg.fold_dir().glob("*.fedus"))
    files += sorted(cfg.report_dir.glob("*.csv"))
    return {p.relative_to(cfg.work_dir.parent): p.read_bytes() for p in files}


def test_criterion_9_determinism(desk_run, tmp_path):
    cfg1, first = desk_run
    if not (cfg1.report_dir / "agreement_nb1.csv").is_file():
        pl.run_usecase_stage(cfg1)
    pl.run_report(cfg1)
    cfg2 = desk_config(tmp_path)
    t0 = time.perf_counter()
    full_pipeline(cfg2)
    pl.run_usecase_stage(cfg2)
    pl.run_report(cfg2)
    elapsed = time.perf_counter() - t0
    a, b = _artifacts(cfg1), _artifacts(cfg2)
    differ = sorted(str(k) for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differ
    verdict(9, ok, f"{len(a)} artifacts compared, {len(differ)} differ {differ[:3]}", elapsed, 2 * first)
