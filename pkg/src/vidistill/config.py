"""Run configuration: typed sections, INI files, env and flag overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

ENV_PREFIX = "VIDISTILL_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 512
    n_val: int = 64
    frames: int = 8
    channels: int = 1
    height: int = 16
    width: int = 16
    n_classes: int = 4
    sprite_size: int = 6
    speed: int = 2
    flicker: float = 0.1


@dataclass
class ModelConfig:
    width: int = 16
    emb_dim: int = 64
    shift: float = 5.0
    n_train_steps: int = 1000


@dataclass
class TeacherConfig:
    steps: int = 20000
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    max_grad_norm: float = 10.0
    null_prob: float = 0.1
    log_every: int = 100
    ckpt_every: int = 5000


@dataclass
class DistillConfig:
    steps: int = 4000  # generator updates
    batch: int = 8
    lr: float = 2.0e-6
    fake_lr: float = 2.0e-6
    weight_decay: float = 0.01
    max_grad_norm: float = 10.0
    update_ratio: int = 5
    q: int = 4
    w_reg: float = 2.0
    w_temp: float = 0.05
    k: float = 3.0
    ema_alpha: float = 0.95
    temp_clip: float = 0.6
    temp_eps: float = 1e-6
    cfg_scale: float = 5.0
    t_lo: float = 0.02
    t_hi: float = 0.98
    temporal: bool = True
    regression: str = "adaptive"  # adaptive | naive | none
    grad_all_steps: bool = True
    ckpt_every: int = 1000
    sample_every: int = 1000
    teacher: str = ""


@dataclass
class InterpTrainConfig:
    width: int = 32
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-4
    frames: int = 9
    n_train: int = 512
    n_val: int = 64


@dataclass
class SampleConfig:
    n: int = 64
    half_rate: bool = False
    split: int = 2
    frames: int = 0  # 0 means the data frame count
    generator: str = ""
    interp: str = ""
    trace: bool = False


@dataclass
class FilterSection:
    min_width: int = 1280
    min_height: int = 720
    hue_entropy_min: float = 0.60
    laplacian_min: float = 20.0
    flow_min: float = 0.2
    keep_fraction: float = 0.5


@dataclass
class EvalConfig:
    flow_threshold: float = 0.2
    samples: str = ""
    reference: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    interp: InterpTrainConfig = field(default_factory=InterpTrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    filter: FilterSection = field(default_factory=FilterSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "model", "teacher", "distill", "interp", "sample", "filter", "eval")

    def validate(self) -> "RunConfig":
        d, m, t, s = self.data, self.model, self.teacher, self.distill
        checks = [
            (self.threads >= 1, "threads must be >= 1"),
            (d.frames >= 2, "data.frames must be >= 2"),
            (d.height % 2 == 0 and d.width % 2 == 0, "data.height/width must be even"),
            (0 < d.sprite_size <= min(d.height, d.width), "data.sprite_size out of range"),
            (d.n_classes >= 1 and d.n_train >= 1 and d.n_val >= 1, "data sizes must be positive"),
            (m.shift > 0 and m.width >= 1, "model.shift and model.width must be positive"),
            (t.steps >= 0 and t.batch >= 1 and t.lr > 0, "teacher steps/batch/lr out of range"),
            (0 <= t.null_prob < 1, "teacher.null_prob must be in [0, 1)"),
            (s.steps >= 0 and s.batch >= 1 and s.lr > 0 and s.fake_lr > 0, "distill steps/batch/lr out of range"),
            (s.update_ratio >= 1 and s.q >= 1, "distill.update_ratio and q must be >= 1"),
            (0 <= s.ema_alpha < 1, "distill.ema_alpha must be in [0, 1)"),
            (min(s.w_reg, s.w_temp, s.cfg_scale) >= 0 and s.k > 0 and s.temp_eps > 0, "loss weights must be non-negative"),
            (0 < s.t_lo < s.t_hi < 1, "distill t range must satisfy 0 < t_lo < t_hi < 1"),
            (s.regression in ("adaptive", "naive", "none"), "distill.regression must be adaptive|naive|none"),
            (self.interp.frames >= 3 and self.interp.frames % 2 == 1, "interp.frames must be odd and >= 3"),
            (self.interp.steps >= 0 and self.interp.lr > 0, "interp steps/lr out of range"),
            (self.sample.n >= 1 and self.sample.split >= 1, "sample.n and sample.split must be >= 1"),
            (0 < self.filter.keep_fraction <= 1, "filter.keep_fraction must be in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return {"int": int, "float": float, "str": str}.get(typ, typ)(value)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def section_fields(section) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(section)}


def set_value(cfg: RunConfig, section: str | None, key: str, value: str) -> None:
    target = cfg if section is None else getattr(cfg, section, None)
    if target is None or not dataclasses.is_dataclass(target):
        raise ConfigError(f"unknown section {section!r}")
    types = section_fields(target)
    if key not in types or (section is None and key in RunConfig.SECTIONS):
        raise ConfigError(f"unknown key {section + '.' if section else ''}{key}")
    setattr(target, key, _coerce(value, types[key]))


def load_config(path=None, env: dict | None = None) -> RunConfig:
    """Defaults, then the INI file (top-level keys under [run]), then env overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config {path}")
        for sect in parser.sections():
            for key, value in parser.items(sect):
                set_value(cfg, None if sect == "run" else sect, key, value)
    env = os.environ if env is None else env
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        sect, _, key = rest.partition("_")
        if sect in RunConfig.SECTIONS and key:
            set_value(cfg, sect, key, value)
        elif sect in ("seed", "out", "threads") and not key:
            set_value(cfg, None, sect, value)
        else:
            raise ConfigError(f"unknown override {name}")
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out, "threads": str(cfg.threads)}
    for sect in RunConfig.SECTIONS:
        parser[sect] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, sect)).items()}
    with Path(path).open("w") as fh:
        parser.write(fh)
