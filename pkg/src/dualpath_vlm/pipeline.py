"""End-to-end experiment driver: data, LM fixture, two stages, ablation.

The vision encoder and language model are shared across every variant and
seed (built once from fixed seeds and cached); only the abstractor
initialization and data order vary per trial.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import (GeneratorConfig, QAExample, augment_answer, dataset_hash, dedupe_and_rephrase,
                   generate_dataset, parse_task_mix)
from .errors import CheckpointError, ConfigError
from .evaluation import AblationResult, Judge, ablation_report, exact_judge
from .model import VisionLanguageModel
from .training import LossCurve, apply_freeze, configure_stage, pretrain_lm, train_stage

log = logging.getLogger(__name__)

DEFAULT_CACHE = Path(os.environ.get("DUALPATH_CACHE", Path.cwd() / ".cache"))
LM_CORPUS_MIX = {"caption": 0.2, "count": 0.2, "color": 0.2, "glyph_read": 0.2, "exist": 0.2}


@dataclass(frozen=True)
class PipelineData:
    captions: list[QAExample]
    qa_train: list[QAExample]
    test: list[QAExample]

    def hashes(self) -> dict[str, str]:
        return {k: dataset_hash(getattr(self, k))[:16] for k in ("captions", "qa_train", "test")}


def generator_config(cfg: RunConfig) -> GeneratorConfig:
    d = cfg.data
    return GeneratorConfig(max_objects=d.max_objects, glyph_prob=d.glyph_prob, max_glyph_len=d.max_glyph_len)


def unique_examples(size: int, mix: dict[str, float], seed: int, gen: GeneratorConfig) -> list[QAExample]:
    """Exactly ``size`` examples after dedupe: oversample, then keep the (index-stable) prefix."""
    n = size
    while True:
        out = dedupe_and_rephrase(generate_dataset(n, mix, seed, gen))
        if len(out) >= size:
            return out[:size]
        if n > 20 * size:
            raise ConfigError(f"cannot draw {size} distinct examples from this generator config")
        n *= 2


def build_data(cfg: RunConfig) -> PipelineData:
    d, gen = cfg.data, generator_config(cfg)
    captions = unique_examples(d.caption_size, {"caption": 1.0}, d.seed, gen)
    mix = parse_task_mix(d.task_mix)
    qa = unique_examples(d.qa_size, mix, d.seed + 1, gen)
    if d.expand_answers:
        qa = [augment_answer(ex) for ex in qa]
    train_scenes = {ex.scene_hash for ex in qa} | {ex.scene_hash for ex in captions}
    test = [replace(ex, split="test") for ex in generate_dataset(d.test_size, mix, d.seed + 2, gen)
            if ex.scene_hash not in train_scenes]
    return PipelineData(captions, qa, test)


def lm_corpus(cfg: RunConfig) -> list[QAExample]:
    """Text-only corpus for the LM fixture, curated like the training data so it covers every paraphrase."""
    return unique_examples(cfg.data.lm_corpus_size, LM_CORPUS_MIX, cfg.data.lm_corpus_seed, generator_config(cfg))


def fixture_path(cfg: RunConfig, cache_dir: str | Path = DEFAULT_CACHE) -> Path:
    key = f"{cfg.model_config().to_dict()}|{cfg.pretrain_config()}|{cfg.data.lm_corpus_size}|" \
          f"{cfg.data.lm_corpus_seed}|{generator_config(cfg)}"
    import hashlib

    return Path(cache_dir) / f"lm_fixture_{hashlib.sha256(key.encode()).hexdigest()[:16]}.vglm"


def build_lm_fixture(cfg: RunConfig, on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    """A dual-path model whose vision encoder is fresh and whose LM has been pre-trained."""
    model = VisionLanguageModel(cfg.model_config("dual_path"))
    pretrain_lm(model, lm_corpus(cfg), cfg.pretrain_config(), on_step=on_step)
    return Checkpoint.from_model(model)


def load_or_build_fixture(cfg: RunConfig, cache_dir: str | Path = DEFAULT_CACHE,
                          on_step: Callable[[int, float], None] | None = None) -> Checkpoint:
    path = fixture_path(cfg, cache_dir)
    if path.exists():
        return Checkpoint.load(path)
    log.info("building LM fixture at %s", path)
    ckpt = build_lm_fixture(cfg, on_step)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    ckpt.save(tmp)
    tmp.replace(path)
    return ckpt


def model_from_fixture(fixture: Checkpoint, cfg: RunConfig, variant: str, seed: int) -> VisionLanguageModel:
    """Fresh abstractor for (variant, seed) on top of the fixture's encoder and LM."""
    mc = cfg.model_config(variant)
    mc = replace(mc, abstractor=replace(mc.abstractor, seed=seed))
    model = VisionLanguageModel(mc)
    params = model.param_dict()
    for name, p in params.items():
        if name.startswith(("vision.", "lm.")):
            if name not in fixture.tensors or fixture.tensors[name].shape != p.shape:
                raise CheckpointError(f"fixture does not match model config at {name}")
            p.tensor.data = fixture.tensors[name].copy()
    model.provenance = [r for r in fixture.metadata.get("provenance", []) if r.get("stage") == "lm_pretrain"]
    return model


@dataclass
class TrialResult:
    model: VisionLanguageModel
    stage1: LossCurve
    stage2: LossCurve
    checkpoint: Checkpoint


def run_two_stage(model: VisionLanguageModel, data: PipelineData, cfg: RunConfig, seed: int,
                  on_epoch: Callable[[int, int, float], None] | None = None) -> TrialResult:
    profile = cfg.training.profile
    curves = []
    ckpt = None
    for stage, dataset in ((1, data.captions), (2, data.qa_train)):
        over = cfg.stage_overrides(stage)
        over["seed"] = seed
        sc = configure_stage(stage, profile, **over)
        apply_freeze(model, sc.freeze_set)
        cb = (lambda e, l, s=stage: on_epoch(s, e, l)) if on_epoch else None
        ckpt, curve = train_stage(model, dataset, sc, on_epoch=cb)
        curves.append(curve)
    return TrialResult(model, curves[0], curves[1], ckpt)


def trainer(cfg: RunConfig, data: PipelineData, fixture: Checkpoint,
            on_epoch: Callable[[str, int, int, int, float], None] | None = None):
    """``train_fn(variant, seed)`` for :func:`ablation_report`."""

    def train_fn(variant: str, seed: int) -> VisionLanguageModel:
        model = model_from_fixture(fixture, cfg, variant, seed)
        cb = (lambda stage, e, l: on_epoch(variant, seed, stage, e, l)) if on_epoch else None
        return run_two_stage(model, data, cfg, seed, cb).model

    return train_fn


def run_ablation(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int], fixture: Checkpoint,
                 data: PipelineData | None = None, judge: Judge = exact_judge,
                 on_epoch=None) -> AblationResult:
    data = data or build_data(cfg)
    result = ablation_report(variants, seeds, trainer(cfg, data, fixture, on_epoch), data.test, judge)
    result.report.metadata.update({"config_digest": cfg.digest(), "data": data.hashes(),
                                   "fixture_checksum": fixture.checksum})
    return result
