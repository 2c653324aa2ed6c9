"""Byte-level decoder LM with grouped-query and sliding-window attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .abstractor import SoftPromptSequence
from .errors import ConfigError, SequenceLengthError, ShapeError
from .nn import MLP, Attention, LayerNorm, Linear, Module, _param
from .tensor import Tensor, no_grad

IGNORE = -100


@dataclass(frozen=True)
class Vocabulary:
    """256 byte symbols followed by pad, bos and eos."""

    n_bytes: int = 256

    @property
    def pad(self) -> int:
        return self.n_bytes

    @property
    def bos(self) -> int:
        return self.n_bytes + 1

    @property
    def eos(self) -> int:
        return self.n_bytes + 2

    @property
    def size(self) -> int:
        return self.n_bytes + 3


VOCAB = Vocabulary()


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids, vocab: Vocabulary = VOCAB) -> str:
    return bytes(i for i in ids if i < vocab.n_bytes).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class LMConfig:
    d_lm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    sliding_window: int | None = 32  # None = unlimited
    max_seq_len: int = 128
    vocab_size: int = VOCAB.size
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_lm % self.n_heads:
            raise ConfigError(f"d_lm={self.d_lm} not divisible by n_heads={self.n_heads}")
        if self.sliding_window is not None and self.sliding_window < 1:
            raise ConfigError("sliding_window must be >= 1 or unlimited")


@dataclass
class AssembledSequence:
    """Soft prompt followed by ``[bos] instruction answer [eos]`` tokens."""

    prefix: Tensor  # [P, d_lm]
    token_ids: np.ndarray  # [T]
    loss_mask: np.ndarray  # [P+T] bool
    position_ids: np.ndarray  # [P+T]

    @property
    def prompt_length(self) -> int:
        return self.prefix.shape[-2]

    def __len__(self) -> int:
        return len(self.position_ids)

    def targets(self) -> np.ndarray:
        """Next-token targets aligned with logits; IGNORE outside the loss mask."""
        P = self.prompt_length
        tgt = np.full(len(self), IGNORE, dtype=np.int64)
        for i in np.nonzero(self.loss_mask)[0]:
            tgt[i - 1] = self.token_ids[i - P]
        return tgt


def assemble_input(soft_prompt: SoftPromptSequence, instruction_ids, answer_ids,
                   max_seq_len: int = 128, vocab: Vocabulary = VOCAB) -> AssembledSequence:
    """Order: [soft prompt][bos][instruction][answer][eos].

    ``eos`` is appended only when an answer is given, so an empty answer is
    an inference-mode assembly with no loss positions.
    """
    P = soft_prompt.length
    instruction_ids, answer_ids = list(instruction_ids), list(answer_ids)
    text = [vocab.bos] + instruction_ids + answer_ids + ([vocab.eos] if answer_ids else [])
    n = P + len(text)
    if n > max_seq_len:
        raise SequenceLengthError(f"sequence too long: P={P} + T={len(text)} > max_seq_len={max_seq_len}")
    mask = np.zeros(n, dtype=bool)
    start = P + 1 + len(instruction_ids)
    mask[start:n] = bool(answer_ids)
    return AssembledSequence(soft_prompt.values, np.array(text, dtype=np.int64), mask, np.arange(n))


def attention_blocked(n: int, window: int | None) -> np.ndarray:
    """True where position i may NOT attend to j: j > i, or j <= i - window."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    blocked = j > i
    if window is not None:
        blocked |= j <= i - window
    return blocked


class DecoderLayer(Module):
    def __init__(self, rng, cfg: LMConfig):
        self.ln_attn = LayerNorm(cfg.d_lm)
        self.attn = Attention(rng, cfg.d_lm, cfg.n_heads, cfg.n_kv_heads, bias=False)
        self.ln_mlp = LayerNorm(cfg.d_lm)
        self.mlp = MLP(rng, cfg.d_lm, cfg.mlp_ratio * cfg.d_lm, cfg.d_lm, bias=False)

    def __call__(self, x: Tensor, blocked: np.ndarray) -> Tensor:
        x = x + self.attn(self.ln_attn(x), blocked=blocked)
        return x + self.mlp(self.ln_mlp(x))


class DecoderLM(Module):
    def __init__(self, cfg: LMConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 3])
        self.tok_embed = _param(rng, (cfg.vocab_size, cfg.d_lm), 1.0)
        self.pos_embed = _param(rng, (cfg.max_seq_len, cfg.d_lm), 0.1)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_lm)
        self.head = Linear(rng, cfg.d_lm, cfg.vocab_size, bias=False)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.tok_embed.tensor, ids)

    def forward_embeddings(self, x: Tensor) -> Tensor:
        """x [B, L, d_lm] (prefix + token embeddings) -> logits [B, L, V]."""
        L = x.shape[1]
        if L > self.cfg.max_seq_len:
            raise SequenceLengthError(f"sequence length {L} exceeds max_seq_len {self.cfg.max_seq_len}")
        if x.shape[-1] != self.cfg.d_lm:
            raise ShapeError(f"LM expects d_lm={self.cfg.d_lm}, got {x.shape}")
        h = x + self.pos_embed.tensor[:L]
        blocked = attention_blocked(L, self.cfg.sliding_window)
        for layer in self.layers:
            h = layer(h, blocked)
        return self.head(self.ln_f(h))

    def build_inputs(self, prefix: Tensor | None, token_ids: np.ndarray) -> Tensor:
        """Concatenate prefix [B, P, d] (may be None) with embedded ids [B, T]."""
        tok = self.embed_tokens(np.asarray(token_ids, dtype=np.int64))
        if prefix is None or prefix.shape[1] == 0:
            return tok
        return T.concat([prefix, tok], axis=1)

    def decoder_forward(self, seq: AssembledSequence) -> Tensor:
        """Single assembled sequence -> logits [P+T, V]."""
        prefix = seq.prefix if seq.prefix.ndim == 3 else seq.prefix.reshape(1, *seq.prefix.shape)
        logits = self.forward_embeddings(self.build_inputs(prefix, seq.token_ids[None]))
        return logits[0]


@dataclass
class TextBatch:
    """Right-padded batch of ``[bos] instruction answer [eos]`` rows.

    Right padding is safe under causal attention: real positions never see
    the pad tail, and pad positions carry no loss.
    """

    token_ids: np.ndarray  # [B, T]
    targets: np.ndarray  # [B, P + T], IGNORE outside answers
    lengths: np.ndarray  # real text lengths
    prompt_length: int


def make_text_batch(instructions: list[list[int]], answers: list[list[int]], prompt_length: int,
                    max_seq_len: int, vocab: Vocabulary = VOCAB) -> TextBatch:
    rows, tgts = [], []
    for ins, ans in zip(instructions, answers):
        text = [vocab.bos] + list(ins) + list(ans) + ([vocab.eos] if ans else [])
        if prompt_length + len(text) > max_seq_len:
            raise SequenceLengthError(
                f"sequence too long: P={prompt_length} + T={len(text)} > max_seq_len={max_seq_len}")
        rows.append(text)
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), vocab.pad, dtype=np.int64)
    targets = np.full((len(rows), prompt_length + width), IGNORE, dtype=np.int64)
    for b, (text, ins, ans) in enumerate(zip(rows, instructions, answers)):
        ids[b, : len(text)] = text
        start = 1 + len(ins)  # first answer position within text
        for t in range(start, len(text)):
            if ans:
                targets[b, prompt_length + t - 1] = text[t]
    return TextBatch(ids, targets, np.array([len(r) for r in rows]), prompt_length)


def greedy_generate(lm: DecoderLM, prefix: Tensor | None, instructions: list[list[int]], max_new: int,
                    vocab: Vocabulary = VOCAB) -> list[list[int]]:
    """Batched greedy decoding by full recomputation at each step (no KV cache).

    ``prefix`` is [B, P, d_lm] (or None). Each row stops at eos or ``max_new``.
    """
    B = len(instructions)
    P = 0 if prefix is None else prefix.shape[1]
    rows = [[vocab.bos] + list(ins) for ins in instructions]
    longest = max(len(r) for r in rows)
    if P + longest + max_new > lm.cfg.max_seq_len:
        raise SequenceLengthError(
            f"prefix P={P} + T={longest} + max_new={max_new} exceeds max_seq_len={lm.cfg.max_seq_len}")
    out: list[list[int]] = [[] for _ in range(B)]
    done = [max_new == 0] * B
    with no_grad():
        for _ in range(max_new):
            live = [b for b in range(B) if not done[b]]
            if not live:
                break
            width = max(len(rows[b]) for b in live)
            ids = np.full((len(live), width), vocab.pad, dtype=np.int64)
            for i, b in enumerate(live):
                ids[i, : len(rows[b])] = rows[b]
            pre = None if prefix is None else Tensor(prefix.data[live])
            logits = lm.forward_embeddings(lm.build_inputs(pre, ids)).data
            for i, b in enumerate(live):
                nxt = int(np.argmax(logits[i, P + len(rows[b]) - 1]))
                if nxt == vocab.eos:
                    done[b] = True
                    continue
                rows[b].append(nxt)
                out[b].append(nxt)
                if len(out[b]) >= max_new:
                    done[b] = True
    return out
