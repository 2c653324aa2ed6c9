"""Two-stage freeze/train schedule, plus the one-off LM fixture pre-training.

Stage 1 trains only the three projection layers on caption pairs. Stage 2
trains everything except the language model and vision encoder on QA data.
Both use AdamW with a constant learning rate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, tensor_digest
from .data import QAExample, scene_code
from .errors import CheckpointError, ConfigError, NumericError
from .lm import VOCAB, make_text_batch, tokenize
from .optim import OptimizerConfig, adamw_step, clip_grad_norm, zero_grad
from .tensor import Tensor

log = logging.getLogger(__name__)

PROFILES = ("paper", "toy")
TOY_LEARNING_RATE = 1e-3
STAGE_DEFAULTS = {1: {"epochs": 3, "batch_size": 8}, 2: {"epochs": 2, "batch_size": 10}}
FREEZE_SETS = {
    1: frozenset({"vision.", "abstractor.qformer.", "lm."}),
    2: frozenset({"vision.", "lm."}),
}
STAGE1_TRAINABLE = ("abstractor.proj_pre_qformer.", "abstractor.proj_mlp_path.", "abstractor.proj_post_qformer.")
DATASET_ROLES = {1: "captioning", 2: "instruction_qa"}


@dataclass(frozen=True)
class TrainingStageConfig:
    stage: int
    freeze_set: frozenset[str]
    epochs: int
    batch_size: int
    optimizer: OptimizerConfig
    dataset_role: str
    seed: int = 0
    grad_clip: float | None = None
    profile: str = "paper"
    allow_from_scratch: bool = False

    def banner(self) -> str:
        o = self.optimizer
        return (f"stage={self.stage} profile={self.profile} epochs={self.epochs} batch={self.batch_size} "
                f"lr={o.learning_rate!r} wd={o.weight_decay!r} optimizer={o.name} seed={self.seed}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze_set"] = sorted(self.freeze_set)
        return d


def configure_stage(stage: int, profile: str = "paper", **overrides) -> TrainingStageConfig:
    """Defaults for a stage. ``paper`` keeps lr 1e-5; ``toy`` raises it for desk-scale runs."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage!r}")
    if profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
    lr = 1e-5 if profile == "paper" else TOY_LEARNING_RATE
    opt_keys = {"learning_rate", "beta1", "beta2", "epsilon", "weight_decay"}
    opt_over = {k: overrides.pop(k) for k in list(overrides) if k in opt_keys}
    optimizer = OptimizerConfig(**{"learning_rate": lr, "weight_decay": 0.05, **opt_over})
    base = dict(STAGE_DEFAULTS[stage], seed=0)
    unknown = set(overrides) - {"epochs", "batch_size", "seed", "grad_clip", "allow_from_scratch"}
    if unknown:
        raise ConfigError(f"unknown stage overrides: {sorted(unknown)}")
    base.update(overrides)
    if base["epochs"] < 0 or base["batch_size"] < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    return TrainingStageConfig(stage=stage, freeze_set=FREEZE_SETS[stage], optimizer=optimizer,
                               dataset_role=DATASET_ROLES[stage], profile=profile, **base)


def is_frozen_name(name: str, freeze_set) -> bool:
    return any(name.startswith(prefix) for prefix in freeze_set)


def apply_freeze(model, freeze_set) -> None:
    for name, p in model.named_parameters():
        p.freeze(is_frozen_name(name, freeze_set))


def freeze_mismatches(model, freeze_set) -> list[str]:
    return [n for n, p in model.named_parameters() if p.frozen != is_frozen_name(n, freeze_set)]


@dataclass
class LossCurve:
    records: list[tuple[int, int, float]] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "loss"])
            for step, stage, loss in self.records:
                w.writerow([step, stage, repr(loss)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([(int(r["step"]), int(r["stage"]), float(r["loss"])) for r in rows])


def _fisher_yates(n: int, rng: np.random.Generator) -> list[int]:
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def encode_dataset(model, dataset: Sequence[QAExample], batch_size: int = 64) -> np.ndarray:
    """Frozen vision features for every example, [len, N, d_v]."""
    feats = [model.encode_images(np.stack([ex.image for ex in dataset[s: s + batch_size]])).data
             for s in range(0, len(dataset), batch_size)]
    return np.concatenate(feats) if feats else np.zeros((0,))


def train_stage(model, dataset: Sequence[QAExample], config: TrainingStageConfig,
                on_epoch: Callable[[int, float], None] | None = None) -> tuple[Checkpoint, LossCurve]:
    mismatched = freeze_mismatches(model, config.freeze_set)
    if mismatched:
        raise ConfigError(f"model freeze flags disagree with stage {config.stage} freeze set: {mismatched[:5]}")
    if config.stage == 1 and any(ex.task_tag != "caption" for ex in dataset):
        raise ConfigError("stage 1 expects a captioning dataset")
    provenance = list(getattr(model, "provenance", []))
    if config.stage == 2 and not config.allow_from_scratch and not any(p.get("stage") == 1 for p in provenance):
        raise CheckpointError("stage 2 needs a stage-1 checkpoint (or an explicit from-scratch override)")

    params = model.parameters()
    frozen_before = {p.name: tensor_digest(p.data) for p in params if p.frozen}
    for p in params:
        p.optimizer_state = None  # fresh optimizer state at every stage boundary
    curve = LossCurve()
    feats = encode_dataset(model, dataset) if config.epochs and len(dataset) else None
    rng = np.random.default_rng([config.seed, config.stage, 1234])
    step = 0
    for epoch in range(config.epochs):
        order = _fisher_yates(len(dataset), rng)
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s: s + config.batch_size]
            batch = [dataset[i] for i in idx]
            zero_grad(params)
            loss = model.loss(Tensor(feats[idx]), [ex.instruction for ex in batch], [ex.answer for ex in batch])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at stage {config.stage} step {step} "
                                   f"batch ids {[ex.id for ex in batch]}")
            T.backward(loss)
            if config.grad_clip:
                clip_grad_norm(params, config.grad_clip)
            adamw_step(params, config.optimizer)
            curve.records.append((step, config.stage, value))
            losses.append(value)
            step += 1
        curve.epoch_means.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("stage %d epoch %d mean loss %.4f", config.stage, epoch + 1, curve.epoch_means[-1])
        if on_epoch:
            on_epoch(epoch + 1, curve.epoch_means[-1])
    zero_grad(params)

    changed = [n for n, d in frozen_before.items() if tensor_digest(model.param_dict()[n].data) != d]
    if changed:
        raise NumericError(f"frozen parameters changed during training: {changed[:5]}")
    from .data import dataset_hash

    model.provenance = provenance + [{
        "stage": config.stage,
        "config": config.to_dict(),
        "dataset_hash": dataset_hash(dataset),
        "steps": step,
        "optimizer_state": "reinitialized",
    }] if config.epochs else provenance
    return Checkpoint.from_model(model), curve


@dataclass
class FreezeReport:
    changed_frozen: list[str]
    unchanged_trainable: list[str]

    @property
    def ok(self) -> bool:
        return not self.changed_frozen

    def render(self) -> str:
        lines = []
        lines += [f"ERROR frozen parameter changed: {n}" for n in self.changed_frozen]
        lines += [f"WARN trainable parameter unchanged: {n}" for n in self.unchanged_trainable]
        return "\n".join(lines)


def verify_freeze(before: Checkpoint, after: Checkpoint, freeze_set) -> FreezeReport:
    if set(before.tensors) != set(after.tensors):
        raise CheckpointError("checkpoints do not share a parameter namespace")
    changed, dead = [], []
    for name in before.tensors:
        same = before.tensors[name].tobytes() == after.tensors[name].tobytes()
        if is_frozen_name(name, freeze_set):
            if not same:
                changed.append(name)
        elif same:
            dead.append(name)
    return FreezeReport(changed, dead)


# -- LM fixture pre-training ---------------------------------------------------
@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    max_prefix: int = 48
    expand_prob: float = 0.0
    scatter_prob: float = 0.5  # place code segments at random prefix slots instead of right-aligned
    prefix_noise: float = 0.0  # std of Gaussian noise added to prefix embeddings
    seed: int = 0


def _pretrain_rows(examples, P, rng, cfg: PretrainConfig):
    from .data import augment_answer

    prefixes, instrs, answers = [], [], []
    for ex in examples:
        code = tokenize(scene_code(ex.scene))[-P:] if P else []
        if rng.random() < cfg.scatter_prob and len(code) < P:
            prefixes.append(_scatter(scene_code(ex.scene).split(" "), P, rng))
        else:
            prefixes.append([VOCAB.pad] * (P - len(code)) + code)
        instrs.append(tokenize(ex.instruction))
        ans = augment_answer(ex).answer if rng.random() < cfg.expand_prob else ex.answer
        answers.append(tokenize(ans))
    return np.array(prefixes, dtype=np.int64), instrs, answers


def _scatter(segments: list[str], P: int, rng) -> list[int]:
    """Segments in random order at random offsets, pads in between."""
    segs = [tokenize(segments[i]) for i in rng.permutation(len(segments))]
    free = P - sum(len(s) for s in segs)
    if free < 0:
        return tokenize(" ".join(segments))[-P:]
    cuts = np.sort(rng.integers(0, free + 1, size=len(segs)))
    out, used = [], 0
    for cut, seg in zip(cuts, segs):
        out += [VOCAB.pad] * (int(cut) - used) + seg
        used = int(cut)
    return out + [VOCAB.pad] * (P - len(out))


def pretrain_lm(model, examples: Sequence[QAExample], cfg: PretrainConfig = PretrainConfig(),
                on_step: Callable[[int, float], None] | None = None) -> LossCurve:
    """Teach the LM to answer from a textual scene code placed where the soft prompt goes.

    The prefix length varies per batch so the LM sees answer tokens at the
    positions every abstractor variant will use. The LM is frozen afterwards.
    """
    lm = model.lm
    model.lm_frozen(False)
    params = lm.parameters()
    opt = OptimizerConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 4321])
    codes = [len(tokenize(scene_code(ex.scene))) for ex in examples]
    curve = LossCurve()
    try:
        for step in range(cfg.steps):
            idx = rng.integers(len(examples), size=cfg.batch_size)
            batch = [examples[i] for i in idx]
            longest = max(codes[i] for i in idx)
            P = int(rng.integers(min(longest, cfg.max_prefix), cfg.max_prefix + 1))
            prefix_ids, instrs, answers = _pretrain_rows(batch, P, rng, cfg)
            text = make_text_batch(instrs, answers, P, lm.cfg.max_seq_len)
            zero_grad(params)
            prefix = lm.embed_tokens(prefix_ids)
            if cfg.prefix_noise:
                prefix = prefix + Tensor(rng.normal(0.0, cfg.prefix_noise, prefix.shape))
            logits = lm.forward_embeddings(lm.build_inputs(prefix, text.token_ids))
            loss = T.cross_entropy(logits, text.targets)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite LM pre-training loss at step {step}")
            T.backward(loss)
            adamw_step(params, opt)
            curve.records.append((step, 0, loss.item()))
            if on_step:
                on_step(step, loss.item())
    finally:
        zero_grad(params)
        model.lm_frozen(True)
        for p in params:
            p.optimizer_state = None
    model.provenance = list(getattr(model, "provenance", [])) + [
        {"stage": "lm_pretrain", "config": asdict(cfg), "examples": len(examples)}]
    return curve
