"""Run configuration: an INI-style ``key = value`` file with one section per area.

Every key is validated against the dataclass field types below; unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .abstractor import AbstractorConfig
from .errors import ConfigError
from .lm import LMConfig
from .model import ModelConfig
from .training import PretrainConfig
from .vision import VisionConfig


@dataclass(frozen=True)
class TrainingSection:
    profile: str = "paper"
    seed: int = 0
    stage1_epochs: int = 3
    stage1_batch_size: int = 8
    stage2_epochs: int = 2
    stage2_batch_size: int = 10
    learning_rate: float | None = None  # None = profile default (paper 1e-5, toy 1e-3)
    weight_decay: float = 0.05
    grad_clip: float | None = None
    pretrain_steps: int = 2500
    pretrain_batch_size: int = 16
    pretrain_learning_rate: float = 2e-3
    pretrain_scatter_prob: float = 0.5
    pretrain_prefix_noise: float = 0.0


@dataclass(frozen=True)
class DataSection:
    seed: int = 7
    lm_corpus_size: int = 4000
    lm_corpus_seed: int = 100
    caption_size: int = 512
    qa_size: int = 1000
    test_size: int = 300
    task_mix: str = "count=0.25,color=0.25,glyph_read=0.25,exist=0.25"
    max_objects: int = 3
    max_glyph_len: int = 3
    glyph_prob: float = 0.5
    expand_answers: bool = False


@dataclass(frozen=True)
class EvalSection:
    judge: str = "exact"
    max_new_tokens: int = 24
    variants: str = "dual_path,qformer_only,mlp_only"
    seeds: str = "1,2,3,4,5"


@dataclass(frozen=True)
class RunConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    abstractor: AbstractorConfig = field(default_factory=AbstractorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.model_config()  # cross-section dimension checks

    def model_config(self, variant: str | None = None) -> ModelConfig:
        mc = ModelConfig(self.vision, self.abstractor, self.lm, self.eval.max_new_tokens)
        return mc.with_variant(variant) if variant else mc

    def pretrain_config(self) -> PretrainConfig:
        t = self.training
        return PretrainConfig(steps=t.pretrain_steps, batch_size=t.pretrain_batch_size,
                              learning_rate=t.pretrain_learning_rate, scatter_prob=t.pretrain_scatter_prob,
                              prefix_noise=t.pretrain_prefix_noise, seed=self.lm.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def stage_overrides(self, stage: int) -> dict:
        t = self.training
        over = {
            "epochs": getattr(t, f"stage{stage}_epochs"),
            "batch_size": getattr(t, f"stage{stage}_batch_size"),
            "weight_decay": t.weight_decay,
            "seed": t.seed,
            "grad_clip": t.grad_clip,
        }
        if t.learning_rate is not None:
            over["learning_rate"] = t.learning_rate
        return over


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _convert(raw: str, typ, key: str):
    raw = raw.strip()
    optional = "None" in str(typ)
    if optional and raw.lower() in ("none", "unlimited", ""):
        return None
    base = str(typ).replace(" | None", "")
    try:
        if "bool" in base:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if "int" in base:
            return int(raw)
        if "float" in base:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from exc


def _section_class(name: str):
    default = SECTIONS[name].default_factory()  # type: ignore[misc]
    return type(default), default


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    if path is None and text is None:
        return RunConfig()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keep key case
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls, default = _section_class(section)
        hints = get_type_hints(cls)
        updates = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {section}.{key}")
            updates[key] = _convert(raw, hints[key], f"{section}.{key}")
        try:
            values[section] = replace(default, **updates)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    try:
        return RunConfig(**{**{k: _section_class(k)[1] for k in SECTIONS}, **values})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def render_reference(cfg: RunConfig = RunConfig()) -> str:
    lines = ["# Default run configuration (generated by `dualpath-vlm dump-config`).",
             "# Every key is optional; unknown keys are rejected.", ""]
    for name in SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            v = getattr(section, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
