"""Pipeline stages behind the command-line interface.

Each stage reads the artifacts of the previous one from the directories
named in the config and writes its own; running a stage twice with the
same config reproduces its outputs byte for byte.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import model as fm
from . import plots
from . import usecase as uc
from .config import PipelineConfig
from .preprocess import (
    BeatPair,
    ProcessedSubject,
    extract_beat_pairs,
    list_manifests,
    loso_split,
    process_subject,
    read_manifest,
    read_pairs,
    write_pairs,
)
from .synthgen import gen_dataset, write_dataset

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """A stage's inputs are missing or inconsistent."""


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- synth

def run_synth(cfg: PipelineConfig) -> list[Path]:
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    records = gen_dataset(cfg.synth)
    paths = write_dataset(records, cfg.data_dir, cfg.synth)
    log.info("wrote %d subjects to %s", len(paths), cfg.data_dir)
    return paths


# ----------------------------------------------------------- preprocess

def _manifests(cfg: PipelineConfig) -> list[Path]:
    paths = list_manifests(cfg.data_dir)
    if not paths:
        raise DataError(f"no subject manifests in {cfg.data_dir}; run 'fedus synth' first")
    return paths


def _process(args) -> ProcessedSubject:
    path, max_lag = args
    return process_subject(read_manifest(path), max_lag)


def processed_subjects(cfg: PipelineConfig, jobs: int = 1, only: set | None = None) -> list[ProcessedSubject]:
    paths = _manifests(cfg)
    if only is not None:
        paths = [p for p in paths if p.stem in only]
    return _map(_process, [(p, cfg.max_lag_s) for p in paths], jobs)


def run_preprocess(cfg: PipelineConfig, jobs: int = 1) -> Path:
    subjects = processed_subjects(cfg, jobs)
    pairs = []
    for ps in subjects:
        got = extract_beat_pairs(ps.record, cfg.n_beats, cfg.beat_len, ps.selection)
        log.info("%s: lag %.4f s (removed %.3f s), %d pairs", ps.record.subject_id, ps.lag_s, ps.shift_s, len(got))
        pairs += got
    if not pairs:
        raise DataError("no beat pairs survived channel selection")
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    write_pairs(cfg.pairs_path, pairs)
    with (cfg.work_dir / "lags.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["subject_id", "lag_s", "shift_s"])
        for ps in subjects:
            wr.writerow([ps.record.subject_id, f"{ps.lag_s:.9g}", f"{ps.shift_s:.9g}"])
    log.info("wrote %d pairs to %s", len(pairs), cfg.pairs_path)
    return cfg.pairs_path


def load_pairs(cfg: PipelineConfig) -> list[BeatPair]:
    if not cfg.pairs_path.is_file():
        raise DataError(f"{cfg.pairs_path} missing; run 'fedus preprocess' first")
    pairs = read_pairs(cfg.pairs_path)
    for p in pairs:
        if len(p.fecg_in) != cfg.arch.L_in or len(p.dus_out) != cfg.arch.L_out:
            raise DataError(f"{cfg.pairs_path} holds {len(p.fecg_in)}-sample windows, config expects {cfg.arch.L_in}")
    return pairs


def subjects_of(pairs: list[BeatPair]) -> list[str]:
    return sorted({p.subject_id for p in pairs})


# ---------------------------------------------------------------- train

def fold_checkpoint(cfg: PipelineConfig, held_out: str | None) -> Path:
    name = "all" if held_out is None else f"fold_{held_out}"
    return cfg.fold_dir() / f"{name}.fedus"


def _train_fold(args) -> Path:
    cfg, held_out, pairs = args
    train_pairs = pairs if held_out is None else loso_split(pairs, held_out)[0]
    log.info("training %s on %d pairs", held_out or "all subjects", len(train_pairs))
    params, hist = fm.train(train_pairs, cfg.arch, cfg.train)
    path = fold_checkpoint(cfg, held_out)
    fm.save(params, path)
    hist.write_csv(path.with_name(path.stem + "_history.csv"))
    return path


def run_train(cfg: PipelineConfig, loso: bool = False, folds: list[str] | None = None, jobs: int = 1) -> list[Path]:
    pairs = load_pairs(cfg)
    cfg.fold_dir().mkdir(parents=True, exist_ok=True)
    if not loso:
        return [_train_fold((cfg, None, pairs))]
    subjects = subjects_of(pairs)
    if folds:
        unknown = set(folds) - set(subjects)
        if unknown:
            raise DataError(f"unknown subjects {sorted(unknown)}")
        subjects = [s for s in subjects if s in folds]
    return _map(_train_fold, [(cfg, s, pairs) for s in subjects], jobs)


def load_fold(cfg: PipelineConfig, held_out: str) -> fm.ModelParams:
    path = fold_checkpoint(cfg, held_out)
    if not path.is_file():
        raise DataError(f"{path} missing; run 'fedus train --loso' first")
    return fm.load(path, expected_arch=cfg.arch)


# ------------------------------------------------------------- generate

def loso_predictions(cfg: PipelineConfig, pairs: list[BeatPair] | None = None) -> list[BeatPair]:
    """Held-out predictions of every fold model, in archive order."""
    pairs = load_pairs(cfg) if pairs is None else pairs
    out = []
    for sid in subjects_of(pairs):
        params = load_fold(cfg, sid)
        test = [p for p in pairs if p.subject_id == sid]
        Y = fm.predict_batch(params, np.stack([p.fecg_in for p in test]))
        out += [BeatPair(p.fecg_in, y.astype(np.float32), sid, p.peak_time) for p, y in zip(test, Y)]
    return out


def generated_path(cfg: PipelineConfig) -> Path:
    return cfg.work_dir / f"generated_{cfg.tag}.bin"


def run_generate(cfg: PipelineConfig) -> Path:
    gen = loso_predictions(cfg)
    write_pairs(generated_path(cfg), gen)
    log.info("wrote %d generated beats to %s", len(gen), generated_path(cfg))
    return generated_path(cfg)


# ----------------------------------------------------------------- eval

def _match(real: list[BeatPair], gen: list[BeatPair]) -> list[tuple[BeatPair, BeatPair]]:
    index = {(p.subject_id, p.peak_time): p for p in gen}
    out = []
    for r in real:
        g = index.get((r.subject_id, r.peak_time))
        if g is None:
            raise DataError(f"generated archive lacks beat {r.subject_id}@{r.peak_time:.4f}s")
        if len(g.dus_out) != len(r.dus_out):
            raise DataError("generated and real beats differ in length")
        out.append((r, g))
    return out


def _fold_reports(cfg, matched, jobs) -> list[tuple[str, mt.MetricsReport]]:
    rows = []
    for sid in sorted({r.subject_id for r, _ in matched}):
        sub = [(r, g) for r, g in matched if r.subject_id == sid]
        vals = mt.evaluate_pairs([r.dus_out for r, _ in sub], [g.dus_out for _, g in sub],
                                 time_scale=cfg.frechet_time_scale, jobs=jobs)
        rows.append((sid, mt.aggregate(vals)))
    return rows


def _summary_row(rows) -> mt.MetricsReport:
    """Mean and population std of the per-fold means."""
    rep = mt.MetricsReport(n_pairs=sum(r.n_pairs for _, r in rows))
    for k in mt.METRIC_NAMES:
        vals = [r.mean[k] for _, r in rows]
        m = math.fsum(vals) / len(vals)
        rep.mean[k] = m
        rep.std[k] = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))
    return rep


def mean_beat_baseline(pairs: list[BeatPair]) -> list[BeatPair]:
    """Per fold, predict every held-out beat with the mean training beat."""
    out = []
    for sid in subjects_of(pairs):
        train, test = loso_split(pairs, sid)
        mean = np.mean(np.stack([p.dus_out for p in train]).astype(np.float64), axis=0)
        out += [BeatPair(p.fecg_in, mean, sid, p.peak_time) for p in test]
    return out


def metrics_path(cfg: PipelineConfig, kind: str = "metrics") -> Path:
    return cfg.report_dir / f"{kind}_{cfg.tag}.csv"


def run_eval(cfg: PipelineConfig, generated: Path | None = None, jobs: int = 1, baseline: bool = True) -> Path:
    real = load_pairs(cfg)
    if generated is not None:
        if not Path(generated).is_file():
            raise DataError(f"{generated} not found")
        gen = read_pairs(generated)
    else:
        gen = loso_predictions(cfg, real)
        cfg.work_dir.mkdir(parents=True, exist_ok=True)
        write_pairs(generated_path(cfg), gen)
    matched = _match(real, gen)
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    rows = _fold_reports(cfg, matched, jobs)
    mt.write_report_csv(rows + [("all", _summary_row(rows))], metrics_path(cfg))
    if baseline and len(subjects_of(real)) > 1:
        base = _match(real, mean_beat_baseline(real))
        brows = _fold_reports(cfg, base, jobs)
        mt.write_report_csv(brows + [("all", _summary_row(brows))], metrics_path(cfg, "baseline"))
    freqs, p_real = mt.mean_psd([r.dus_out for r, _ in matched])
    _, p_gen = mt.mean_psd([g.dus_out for _, g in matched])
    plots.psd_overlay(freqs, p_real, p_gen, cfg.report_dir / f"psd_{cfg.tag}.svg")
    log.info("wrote %s", metrics_path(cfg))
    return metrics_path(cfg)


# -------------------------------------------------------------- usecase

def _usecase_fold(args):
    cfg, ps = args
    params = load_fold(cfg, ps.record.subject_id)
    return uc.run_usecase(params, ps, cfg.n_beats)


def run_usecase_stage(cfg: PipelineConfig, jobs: int = 1) -> Path:
    subjects = processed_subjects(cfg, jobs)
    outs = _map(_usecase_fold, [(cfg, ps) for ps in subjects], jobs)
    gen = [r for g, _, _ in outs for r in g]
    real = [x for _, rr, _ in outs for x in rr]
    n_seg = len(gen)
    quality = math.fsum(q * len(g) for g, _, q in outs) / n_seg if n_seg else 0.0
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    uc.write_results_csv(gen, cfg.report_dir / f"usecase_{cfg.tag}_generated.csv")
    uc.write_results_csv(real, cfg.report_dir / f"usecase_{cfg.tag}_real.csv")
    st_gen, st_real = uc.agreement(gen), uc.agreement(real)
    path = cfg.report_dir / f"agreement_{cfg.tag}.csv"
    uc.write_agreement_csv([("real", st_real), ("generated", st_gen)], path)
    (cfg.report_dir / f"quality_{cfg.tag}.csv").write_text(
        f"segments,quality_pass_fraction\n{n_seg},{quality:.9g}\n")
    m, d = uc.bland_altman_points(gen)
    plots.bland_altman(m, d, st_gen.bias, st_gen.loa_lo, st_gen.loa_hi, cfg.report_dir / f"bland_altman_{cfg.tag}.svg")
    log.info("use case: %d segments, bias %.2f bpm, PICP %.3f", n_seg, st_gen.bias, st_gen.picp_5bpm)
    return path


# --------------------------------------------------------------- report

_LABELS = {"rmse": "RMSE", "mae": "MAE", "kld": "KLD", "se": "SE", "psdd": "PSDD", "cd": "CD", "sf": "SF", "fd": "FD"}
_AGREE_LABELS = (("bland_altman", "Bland-Altman (bpm)"), ("rmse_bpm", "RMSE (bpm)"), ("mae_bpm", "MAE (bpm)"),
                 ("picp_5bpm", "PICP (±5 bpm)"))


def _summary(path: Path) -> mt.MetricsReport | None:
    if not path.is_file():
        return None
    rows = dict(mt.read_report_csv(path))
    return rows.get("all")


def _metric_cells(rep: mt.MetricsReport) -> list[str]:
    return [f"{rep.mean[k]:.4f} ± {rep.std[k]:.4f}" for k in mt.METRIC_NAMES]


def _md_table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def run_report(cfg: PipelineConfig) -> Path:
    rd = cfg.report_dir
    if not rd.is_dir():
        raise DataError(f"{rd} missing; run 'fedus eval' first")
    header = ["model"] + [_LABELS[k] for k in mt.METRIC_NAMES]
    md = ["# Generation results", ""]
    tables = {"table1": [], "table2": [], "table3": []}

    t1 = []
    for label, kind in (("generator, 1 beat", "metrics"), ("mean-beat baseline", "baseline")):
        rep = _summary(rd / f"{kind}_nb1.csv")
        if rep is not None:
            t1.append([label] + _metric_cells(rep))
            tables["table1"].append([label] + [f"{v:.9g}" for v in rep.row()])
    md += ["## Similarity of generated and real DUS (leave-one-subject-out)", ""]
    md += _md_table(header, t1) if t1 else ["(no single-beat evaluation found)"]

    t2 = []
    for nb in (1, 2, 3):
        rep = _summary(rd / f"metrics_nb{nb}.csv")
        if rep is not None:
            label = f"generator, {nb} beat" + ("s" if nb > 1 else "")
            t2.append([label] + _metric_cells(rep))
            tables["table2"].append([label] + [f"{v:.9g}" for v in rep.row()])
    md += ["", "## Input length ablation", ""]
    md += _md_table(header, t2) if t2 else ["(no evaluations found)"]

    t3 = []
    for nb in (1, 2, 3):
        path = rd / f"agreement_nb{nb}.csv"
        if not path.is_file():
            continue
        for source, st in uc.read_agreement_csv(path):
            if source == "real" and any(r[0] == "real DUS" for r in t3):
                continue
            label = "real DUS" if source == "real" else f"generated DUS, {nb} beat" + ("s" if nb > 1 else "")
            t3.append([label] + [f"{getattr(st, k):.4f}" for k, _ in _AGREE_LABELS])
            tables["table3"].append([label] + [f"{getattr(st, k):.9g}" for k, _ in _AGREE_LABELS])
    md += ["", "## FHR agreement with FECG-derived labels", ""]
    md += _md_table(["source"] + [h for _, h in _AGREE_LABELS], t3) if t3 else ["(no use-case results found)"]

    (rd / "report.md").write_text("\n".join(md) + "\n")
    metric_cols = ["model"] + mt.report_header()[2:]
    agree_cols = ["source"] + [k for k, _ in _AGREE_LABELS]
    for name, rows in tables.items():
        with (rd / f"report_{name}.csv").open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(agree_cols if name == "table3" else metric_cols)
            wr.writerows(rows)
    return rd / "report.md"
