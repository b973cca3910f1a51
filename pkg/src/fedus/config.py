"""INI pipeline configuration.

Grammar: standard ``[section]`` headers with ``key = value`` lines; ``#``
and ``;`` start comments.  Sections and keys:

    [synth]       n_subjects, duration_s, fhr_base ("140" or "110, 160"),
                  fhr_variability, dus_peak_hz, noise_snr_db, seed,
                  n_channels, dus_lag_s, corruption_fraction
    [preprocess]  n_beats (1-3), beat_len, max_lag_s
    [arch]        n_filters, kernel, dilations ("1, 2, 4, 8, 16"),
                  post_skip_convs, L_in, L_out (both optional, derived from
                  beat_len * n_beats; if given, L_out must be 8 * L_in)
    [train]       lr, batch_size, max_epochs, patience, seed, val_fraction
    [eval]        frechet_time_scale
    [paths]       data_dir, work_dir, checkpoint_dir, report_dir

Relative paths are resolved against the directory holding the config file
(the working directory when no file is given).  Unknown sections or keys
are errors so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ArchConfig, ConfigError, TrainConfig
from .synthgen import SynthConfig, SynthConfigError

_SYNTH_KEYS = ("n_subjects", "duration_s", "fhr_base", "fhr_variability", "dus_peak_hz", "noise_snr_db",
               "seed", "n_channels", "dus_lag_s", "corruption_fraction")
_SECTIONS = {
    "synth": _SYNTH_KEYS,
    "preprocess": ("n_beats", "beat_len", "max_lag_s"),
    "arch": ("n_filters", "kernel", "dilations", "post_skip_convs", "L_in", "L_out"),
    "train": ("lr", "batch_size", "max_epochs", "patience", "seed", "val_fraction"),
    "eval": ("frechet_time_scale",),
    "paths": ("data_dir", "work_dir", "checkpoint_dir", "report_dir"),
}
_PATH_DEFAULTS = {"data_dir": "data", "work_dir": "work", "checkpoint_dir": "checkpoints", "report_dir": "reports"}


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_beats: int = 1
    beat_len: int = 160
    max_lag_s: float = 2.0
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frechet_time_scale: float = 1.0
    data_dir: Path = Path("data")
    work_dir: Path = Path("work")
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")

    @property
    def tag(self) -> str:
        return f"nb{self.n_beats}"

    @property
    def pairs_path(self) -> Path:
        return self.work_dir / f"pairs_{self.tag}.bin"

    def fold_dir(self) -> Path:
        return self.checkpoint_dir / self.tag


def _num(section: str, key: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from exc


def _floats(raw: str) -> tuple:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _typed(section: str, key: str, raw: str, template):
    """Parse ``raw`` to the type of the default value ``template``."""
    if key == "fhr_base":
        vals = _num(section, key, raw, _floats)
        if len(vals) == 1:
            return vals[0]
        if len(vals) != 2:
            raise ConfigError("[synth] fhr_base: give one value or a 'lo, hi' range")
        return vals
    if key == "dilations":
        return tuple(int(v) for v in _num(section, key, raw, _floats))
    if isinstance(template, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return _num(section, key, raw, int)
    return _num(section, key, raw, float)


def _apply(obj, section: str, values: dict):
    defaults = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kw = {k: _typed(section, k, v, defaults[k]) for k, v in values.items()}
    return replace(obj, **kw)


def parse_overrides(pairs: list[str]) -> dict:
    """``section.key=value`` strings to ``{section: {key: value}}``."""
    out: dict = {}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI file (optional), apply ``overrides`` and validate."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys like L_in are case-sensitive
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    for section, kv in (overrides or {}).items():
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in kv.items():
            cp.set(section, k, v)

    raw = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
        raw[section] = dict(cp.items(section))

    try:
        synth = _apply(SynthConfig(), "synth", raw.get("synth", {}))
    except SynthConfigError as exc:
        raise ConfigError(str(exc)) from exc

    pre = raw.get("preprocess", {})
    n_beats = _num("preprocess", "n_beats", pre.get("n_beats", "1"), int)
    beat_len = _num("preprocess", "beat_len", pre.get("beat_len", "160"), int)
    max_lag = _num("preprocess", "max_lag_s", pre.get("max_lag_s", "2.0"), float)
    if n_beats not in (1, 2, 3):
        raise ConfigError("[preprocess] n_beats must be 1, 2 or 3")
    if beat_len < 8 or max_lag <= 0:
        raise ConfigError("[preprocess] beat_len must be >= 8 and max_lag_s positive")

    arch_raw = dict(raw.get("arch", {}))
    L_in = _num("arch", "L_in", arch_raw.pop("L_in"), int) if "L_in" in arch_raw else beat_len * n_beats
    L_out = _num("arch", "L_out", arch_raw.pop("L_out"), int) if "L_out" in arch_raw else 8 * L_in
    if L_in != beat_len * n_beats:
        raise ConfigError(f"[arch] L_in = {L_in} disagrees with beat_len * n_beats = {beat_len * n_beats}")
    arch = _apply(ArchConfig(L_in=L_in, L_out=L_out), "arch", arch_raw)

    train_raw = raw.get("train", {})
    train = _apply(TrainConfig(n_beats=n_beats), "train", train_raw)
    if not train.lr > 0 or not 0 < train.val_fraction < 1:
        raise ConfigError("[train] lr must be positive and val_fraction in (0, 1)")

    ev = raw.get("eval", {})
    scale = _num("eval", "frechet_time_scale", ev.get("frechet_time_scale", "1.0"), float)
    if scale < 0:
        raise ConfigError("[eval] frechet_time_scale must be >= 0")

    paths = {k: base / raw.get("paths", {}).get(k, d) for k, d in _PATH_DEFAULTS.items()}
    return PipelineConfig(synth=synth, n_beats=n_beats, beat_len=beat_len, max_lag_s=max_lag, arch=arch,
                          train=train, frechet_time_scale=scale, **paths)
