"""Dual-path visual abstractor.

Patch features go through a shared input projection, then split:

* the Q-Former path: learned queries (optionally conditioned on the
  instruction text) cross-attend to the projected patches and emit K tokens,
  which a second linear maps into the LM embedding space;
* the MLP path: a two-layer GELU MLP maps every projected patch to one LM
  token.

Both outputs are concatenated, Q-Former tokens first, into the soft prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import MLP, Attention, LayerNorm, Linear, Module, _param
from .tensor import Tensor

QFORMER, MLP_SEGMENT = "qformer", "mlp"
VARIANTS = ("dual_path", "qformer_only", "mlp_only")
FUSION_ORDER = (QFORMER, MLP_SEGMENT)


@dataclass(frozen=True)
class AbstractorConfig:
    d_v: int = 64
    d_q: int = 64
    d_lm: int = 64
    num_queries: int = 8
    qformer_blocks: int = 2
    qformer_heads: int = 4
    mlp_hidden: int = 256
    instruction_conditioning: bool = True
    # "projected": MLP path reads the shared projection output;
    # "encoder": MLP path reads raw encoder features.
    mlp_source: str = "projected"
    use_qformer: bool = True
    use_mlp: bool = True
    vocab_size: int = 259
    max_instruction_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for f in ("d_v", "d_q", "d_lm", "qformer_heads", "mlp_hidden"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.num_queries < 1 and self.use_qformer:
            raise ConfigError("num_queries must be >= 1 when the Q-Former path is enabled")
        if self.d_q % self.qformer_heads:
            raise ConfigError(f"d_q={self.d_q} not divisible by qformer_heads={self.qformer_heads}")
        if self.mlp_source not in ("projected", "encoder"):
            raise ConfigError(f"mlp_source must be 'projected' or 'encoder', got {self.mlp_source!r}")
        if not (self.use_qformer or self.use_mlp):
            raise ConfigError("at least one abstractor path must be enabled")

    @property
    def variant(self) -> str:
        if self.use_qformer and self.use_mlp:
            return "dual_path"
        return "qformer_only" if self.use_qformer else "mlp_only"

    def for_variant(self, variant: str) -> "AbstractorConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        return replace(self, use_qformer=variant != "mlp_only", use_mlp=variant != "qformer_only")


@dataclass
class SoftPromptSequence:
    values: Tensor  # [P, d_lm] or [B, P, d_lm]
    segment_ids: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.segment_ids)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def segment(self, tag: str) -> Tensor:
        idx = [i for i, s in enumerate(self.segment_ids) if s == tag]
        if not idx:
            return Tensor(np.zeros(self.values.shape[:-2] + (0, self.dim)))
        return self.values[..., idx[0]: idx[-1] + 1, :]


def fuse_soft_prompt(qformer_tokens: Tensor | None, mlp_tokens: Tensor | None) -> SoftPromptSequence:
    """Concatenate along the token axis, Q-Former tokens first. Either side may be absent."""
    parts, segs = [], []
    for toks, tag in ((qformer_tokens, QFORMER), (mlp_tokens, MLP_SEGMENT)):
        if toks is None or toks.shape[-2] == 0:
            continue
        parts.append(toks)
        segs.extend([tag] * toks.shape[-2])
    if not parts:
        raise ShapeError("soft prompt needs at least one non-empty segment")
    if len(parts) == 2:
        a, b = parts
        if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"cannot fuse tokens of shapes {a.shape} and {b.shape}")
        return SoftPromptSequence(T.concat(parts, axis=-2), tuple(segs))
    return SoftPromptSequence(parts[0], tuple(segs))


class QFormerBlock(Module):
    def __init__(self, rng, d: int, n_heads: int):
        self.ln_self = LayerNorm(d)
        self.self_attn = Attention(rng, d, n_heads)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = Attention(rng, d, n_heads)
        self.ln_mlp = LayerNorm(d)
        self.mlp = MLP(rng, d, 4 * d, d)

    def __call__(self, queries: Tensor, instr: Tensor | None, patches: Tensor,
                 instr_blocked: np.ndarray | None) -> tuple[Tensor, Tensor | None]:
        K = queries.shape[1]
        h = queries if instr is None else T.concat([queries, instr], axis=1)
        h = h + self.self_attn(self.ln_self(h), blocked=instr_blocked)
        q = h[:, :K] if instr is not None else h
        # queries are the only sources of cross-attention; no positions over patches
        q = q + self.cross_attn(self.ln_cross(q), ctx=patches)
        q = q + self.mlp(self.ln_mlp(q))
        if instr is None:
            return q, None
        rest = h[:, K:]
        return q, rest + self.mlp(self.ln_mlp(rest))


class QFormer(Module):
    def __init__(self, rng, cfg: AbstractorConfig):
        self.cfg = cfg
        self.queries = _param(rng, (cfg.num_queries, cfg.d_q), 1.0)
        self.text_embed = _param(rng, (cfg.vocab_size, cfg.d_q), 1.0)
        self.text_pos = _param(rng, (cfg.max_instruction_len, cfg.d_q), 0.1)
        self.blocks = [QFormerBlock(rng, cfg.d_q, cfg.qformer_heads) for _ in range(cfg.qformer_blocks)]
        self.ln_out = LayerNorm(cfg.d_q)

    def embed_instruction(self, ids: np.ndarray) -> Tensor:
        """Padded ids [B, L] -> instruction tokens [B, L, d_q]."""
        ids = np.asarray(ids, dtype=np.int64)
        L = ids.shape[1]
        if L > self.cfg.max_instruction_len:
            raise ShapeError(f"instruction of {L} tokens exceeds max_instruction_len {self.cfg.max_instruction_len}")
        return T.embedding(self.text_embed.tensor, ids) + self.text_pos.tensor[:L]

    def forward_tokens(self, projected: Tensor, instruction_tokens: Tensor | None = None,
                       instruction_pad: np.ndarray | None = None) -> Tensor:
        """projected [B, N, d_q] + optional instruction tokens [B, L, d_q] -> [B, K, d_q]."""
        if projected.shape[-1] != self.cfg.d_q:
            raise ShapeError(f"Q-Former expects d_q={self.cfg.d_q}, got {projected.shape}")
        if self.cfg.instruction_conditioning and instruction_tokens is None:
            raise ContractError("instruction conditioning is enabled but no instruction tokens were given")
        if not self.cfg.instruction_conditioning and instruction_tokens is not None:
            raise ContractError("instruction tokens given but instruction conditioning is disabled")
        B, K = projected.shape[0], self.cfg.num_queries
        q = T.embedding(self.queries.tensor, np.broadcast_to(np.arange(K), (B, K)))
        blocked = None
        if instruction_tokens is not None and instruction_pad is not None and instruction_pad.any():
            keys_blocked = np.concatenate([np.zeros((B, K), bool), np.asarray(instruction_pad, bool)], axis=1)
            blocked = keys_blocked[:, None, None, :]
        instr = instruction_tokens
        for block in self.blocks:
            q, instr = block(q, instr, projected, blocked)
        return self.ln_out(q)


class VisualAbstractor(Module):
    def __init__(self, cfg: AbstractorConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 2])
        self.proj_pre_qformer = Linear(rng, cfg.d_v, cfg.d_q)
        if cfg.use_qformer:
            self.qformer = QFormer(rng, cfg)
            self.proj_post_qformer = Linear(rng, cfg.d_q, cfg.d_lm)
        if cfg.use_mlp:
            d_in = cfg.d_q if cfg.mlp_source == "projected" else cfg.d_v
            self.proj_mlp_path = MLP(rng, d_in, cfg.mlp_hidden, cfg.d_lm)

    def project_pre_qformer(self, patches: Tensor) -> Tensor:
        if patches.shape[-1] != self.cfg.d_v:
            raise ShapeError(f"patch dim {patches.shape[-1]} != d_v {self.cfg.d_v}")
        return self.proj_pre_qformer(patches)

    def project_mlp_path(self, x: Tensor) -> Tensor:
        return self.proj_mlp_path(x)

    def project_post_qformer(self, qformer_out: Tensor) -> Tensor:
        return self.proj_post_qformer(qformer_out)

    def __call__(self, features: Tensor, instruction_ids: np.ndarray | None = None,
                 instruction_pad: np.ndarray | None = None) -> SoftPromptSequence:
        """features [B, N, d_v] -> soft prompt [B, K+N, d_lm]."""
        projected = self.project_pre_qformer(features)
        q_tokens = m_tokens = None
        if self.cfg.use_qformer:
            instr = None
            if self.cfg.instruction_conditioning:
                if instruction_ids is None:
                    raise ContractError("instruction ids required when conditioning is enabled")
                instr = self.qformer.embed_instruction(instruction_ids)
            q_tokens = self.project_post_qformer(self.qformer.forward_tokens(projected, instr, instruction_pad))
        if self.cfg.use_mlp:
            src = projected if self.cfg.mlp_source == "projected" else features
            m_tokens = self.project_mlp_path(src)
        return fuse_soft_prompt(q_tokens, m_tokens)

