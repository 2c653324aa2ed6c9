"""The assembled vision-language model: frozen encoder -> abstractor -> frozen LM."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .abstractor import AbstractorConfig, SoftPromptSequence, VisualAbstractor
from .errors import ConfigError, ShapeError
from .lm import VOCAB, AssembledSequence, DecoderLM, LMConfig, assemble_input, detokenize, greedy_generate, make_text_batch, tokenize
from .nn import Module
from .optim import Parameter
from .tensor import Tensor, no_grad
from .vision import VisionConfig, VisionEncoder


@dataclass(frozen=True)
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    abstractor: AbstractorConfig = field(default_factory=AbstractorConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    max_new_tokens: int = 24

    def __post_init__(self):
        if self.abstractor.d_v != self.vision.d_v:
            raise ConfigError(f"abstractor d_v={self.abstractor.d_v} != vision d_v={self.vision.d_v}")
        if self.abstractor.d_lm != self.lm.d_lm:
            raise ConfigError(f"abstractor d_lm={self.abstractor.d_lm} != lm d_lm={self.lm.d_lm}")
        if self.abstractor.vocab_size != self.lm.vocab_size:
            raise ConfigError("abstractor and LM vocabularies differ")

    @property
    def variant(self) -> str:
        return self.abstractor.variant

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, abstractor=self.abstractor.for_variant(variant))

    def with_seed(self, seed: int) -> "ModelConfig":
        return replace(
            self,
            vision=replace(self.vision, seed=seed),
            abstractor=replace(self.abstractor, seed=seed),
            lm=replace(self.lm, seed=seed),
        )

    @property
    def prompt_length(self) -> int:
        a = self.abstractor
        return a.num_queries * a.use_qformer + self.vision.num_patches * a.use_mlp

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(VisionConfig(**d["vision"]), AbstractorConfig(**d["abstractor"]), LMConfig(**d["lm"]),
                   d.get("max_new_tokens", 24))


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = VOCAB.pad) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a [B, L] array; returns (ids, is_pad)."""
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    is_pad = np.ones((len(seqs), width), dtype=bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
        is_pad[b, : len(s)] = False
    return ids, is_pad


class VisionLanguageModel(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.vision = VisionEncoder(config.vision)
        self.abstractor = VisualAbstractor(config.abstractor)
        self.lm = DecoderLM(config.lm)
        self.assign_names()
        self.lm_frozen(True)

    # -- parameters ---------------------------------------------------------
    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def lm_frozen(self, frozen: bool) -> None:
        for p in self.lm.parameters():
            p.freeze(frozen)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.frozen]

    @property
    def prompt_length(self) -> int:
        return self.config.prompt_length

    # -- forward pieces -----------------------------------------------------
    def encode_images(self, images: np.ndarray) -> Tensor:
        """Frozen features [B, N, d_v]; never recorded on the tape."""
        return self.vision.encode_images(images)

    def soft_prompt(self, features: Tensor, instructions: Sequence[str]) -> SoftPromptSequence:
        ids = [tokenize(s) for s in instructions]
        instr_ids = instr_pad = None
        if self.config.abstractor.instruction_conditioning and self.config.abstractor.use_qformer:
            instr_ids, instr_pad = pad_ids(ids)
        return self.abstractor(features, instr_ids, instr_pad)

    def loss(self, features: Tensor, instructions: Sequence[str], answers: Sequence[str]) -> Tensor:
        """Masked LM loss (mean over answer + eos tokens of the batch)."""
        if features.shape[0] != len(instructions) or len(instructions) != len(answers):
            raise ShapeError("features, instructions and answers disagree on batch size")
        sp = self.soft_prompt(features, instructions)
        batch = make_text_batch([tokenize(s) for s in instructions], [tokenize(a) for a in answers],
                                sp.length, self.config.lm.max_seq_len)
        logits = self.lm.forward_embeddings(self.lm.build_inputs(sp.values, batch.token_ids))
        return T.cross_entropy(logits, batch.targets, ignore_index=-100)

    def generate(self, soft_prompt: SoftPromptSequence, instruction: str, max_new: int) -> str:
        values = soft_prompt.values if soft_prompt.values.ndim == 3 else soft_prompt.values.reshape(
            1, *soft_prompt.values.shape)
        return detokenize(greedy_generate(self.lm, values, [tokenize(instruction)], max_new)[0])

    def answer_images(self, images: np.ndarray, instructions: Sequence[str], max_new: int | None = None,
                      batch_size: int = 64) -> list[str]:
        max_new = self.config.max_new_tokens if max_new is None else max_new
        out: list[str] = []
        with no_grad():
            for s in range(0, len(instructions), batch_size):
                feats = self.encode_images(images[s: s + batch_size])
                instr = list(instructions[s: s + batch_size])
                sp = self.soft_prompt(feats, instr)
                gen = greedy_generate(self.lm, sp.values, [tokenize(i) for i in instr], max_new)
                out.extend(detokenize(g) for g in gen)
        return out

    def answer_batch(self, examples) -> list[str]:
        images = np.stack([ex.image for ex in examples]) if examples else np.zeros((0, 48, 48, 3))
        return self.answer_images(images, [ex.instruction for ex in examples])

    def assemble(self, features: Tensor, instruction: str, answer: str) -> AssembledSequence:
        sp = self.soft_prompt(features, [instruction])
        single = SoftPromptSequence(sp.values[0], sp.segment_ids)
        return assemble_input(single, tokenize(instruction), tokenize(answer), self.config.lm.max_seq_len)
