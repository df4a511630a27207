"""Looped decoder-only Transformer with shortcut-modulated conditioning.

A single stack of `blocks_per_loop` Transformer blocks is applied up to
`max_loops` times; each loop i is conditioned on its position in the
trajectory through zero-initialized adaLN modulation. Baseline variants
reuse the same blocks with reduced (or no) conditioning:

  loopformer  condition on (t_{i-1}, delta_i)
  tmlt        condition on the loop index only
  base_loop   no conditioning, plain weight-shared looping
  base        unshared stack of blocks_per_loop * max_loops layers, one pass
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditioning import (
    FourierSpec,
    ModulationHead,
    ScalarEmbedder,
    conditioning_signal,
    embed_scalar,
    modulate,
)
from .tensor import Tensor, embedding, get_default_dtype, matmul, gelu, rmsnorm, softmax_lastdim
from .trajectory import Trajectory

VARIANTS = ("loopformer", "tmlt", "base_loop", "base")


@dataclass
class ModelConfig:
    vocab_size: int = 256
    context_length: int = 256
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 320
    blocks_per_loop: int = 2
    max_loops: int = 4
    fourier_width: int = 256
    rmsnorm_eps: float = 1e-5
    weight_tying: bool = True
    variant: str = "loopformer"
    tmlt_raw_index: bool = False

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be positive, got {self.vocab_size}")
        if self.context_length < 1:
            raise ValueError(f"context_length must be positive, got {self.context_length}")
        if self.d_model < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})"
            )
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be positive, got {self.d_ff}")
        if self.blocks_per_loop < 1:
            raise ValueError(f"blocks_per_loop must be >= 1, got {self.blocks_per_loop}")
        if self.max_loops < 1:
            raise ValueError(f"max_loops must be >= 1, got {self.max_loops}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def conditioned(self) -> bool:
        return self.variant in ("loopformer", "tmlt")


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape).astype(get_default_dtype()), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


class Linear:
    """y = x @ w + b with w stored [fan_in, fan_out]."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, std: float = 0.02):
        self.w = _normal(rng, (fan_in, fan_out), std)
        self.b = _zeros(fan_out)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


_MASK_CACHE: dict = {}


def _causal_bias(t_len: int, dtype) -> Tensor:
    """[T, T] additive bias, -inf strictly above the diagonal."""
    key = (t_len, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        bias = np.triu(np.full((t_len, t_len), -np.inf, dtype=dtype), k=1)
        _MASK_CACHE[key] = Tensor(bias)
    return _MASK_CACHE[key]


class LoopFormerBlock:
    """Pre-norm attention + FFN with optional adaLN-zero modulation.

    x <- x + gate_msa * MHSA(RMSNorm(x) * (1 + scale_msa))
    x <- x + gate_mlp * FFN(RMSNorm(x) * (1 + scale_mlp))

    Without a modulation head (base variants) the gates are 1 and the
    scales 0, i.e. a standard pre-norm block.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        d = config.d_model
        self.n_heads = config.n_heads
        self.eps = config.rmsnorm_eps
        # residual-output projections get a 1/sqrt(2 * total depth) shrink
        resid_std = 0.02 / math.sqrt(2.0 * config.blocks_per_loop * config.max_loops)
        self.attn_qkv = Linear(d, 3 * d, rng)
        self.attn_proj = Linear(d, d, rng, std=resid_std)
        self.ffn_fc = Linear(d, config.d_ff, rng)
        self.ffn_proj = Linear(config.d_ff, d, rng, std=resid_std)
        self.mod = ModulationHead(d) if config.conditioned else None

    def parameters(self):
        named = []
        for prefix, layer in (
            ("attn_qkv", self.attn_qkv),
            ("attn_proj", self.attn_proj),
            ("ffn_fc", self.ffn_fc),
            ("ffn_proj", self.ffn_proj),
        ):
            named.extend((f"{prefix}.{n}", p) for n, p in layer.parameters())
        if self.mod is not None:
            named.extend((f"mod.{n}", p) for n, p in self.mod.parameters())
        return named

    def _attention(self, x: Tensor) -> Tensor:
        b, t_len, d = x.shape
        nh, dh = self.n_heads, d // self.n_heads
        qkv = self.attn_qkv(x)
        q = qkv[..., 0:d].reshape(b, t_len, nh, dh).transpose((0, 2, 1, 3))
        k = qkv[..., d : 2 * d].reshape(b, t_len, nh, dh).transpose((0, 2, 1, 3))
        v = qkv[..., 2 * d :].reshape(b, t_len, nh, dh).transpose((0, 2, 1, 3))
        scores = matmul(q, k.swap_last()) * (1.0 / math.sqrt(dh))
        att = softmax_lastdim(scores + _causal_bias(t_len, x.dtype))
        y = matmul(att, v).transpose((0, 2, 1, 3)).reshape(b, t_len, d)
        return self.attn_proj(y)

    def _ffn(self, x: Tensor) -> Tensor:
        return self.ffn_proj(gelu(self.ffn_fc(x)))

    def __call__(self, x: Tensor, c: Tensor | None) -> Tensor:
        if self.mod is None:
            x = x + self._attention(rmsnorm(x, self.eps))
            x = x + self._ffn(rmsnorm(x, self.eps))
            return x
        m = modulate(c, self.mod)
        x = x + m.gate_msa * self._attention(rmsnorm(x, self.eps) * (1.0 + m.scale_msa))
        x = x + m.gate_mlp * self._ffn(rmsnorm(x, self.eps) * (1.0 + m.scale_mlp))
        return x


class LoopFormerModel:
    """Embeddings, the shared stack, and the (tied) LM head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.tok_emb = _normal(rng, (config.vocab_size, d), 0.02)
        self.pos_emb = _normal(rng, (config.context_length, d), 0.02)
        self.head_w = None if config.weight_tying else _normal(rng, (d, config.vocab_size), 0.02)

        spec = FourierSpec(width=config.fourier_width)
        self.time_emb = ScalarEmbedder(d, spec, rng) if config.conditioned else None
        self.step_emb = ScalarEmbedder(d, spec, rng) if config.variant == "loopformer" else None

        n_blocks = config.blocks_per_loop
        if config.variant == "base":
            n_blocks = config.blocks_per_loop * config.max_loops
        self.blocks = [LoopFormerBlock(config, rng) for _ in range(n_blocks)]

    # ---------------------------------------------------------------- params

    def parameters(self):
        named = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        if self.head_w is not None:
            named.append(("head.w", self.head_w))
        if self.time_emb is not None:
            named.extend((f"time_emb.{n}", p) for n, p in self.time_emb.parameters())
        if self.step_emb is not None:
            named.extend((f"step_emb.{n}", p) for n, p in self.step_emb.parameters())
        for i, block in enumerate(self.blocks):
            named.extend((f"blocks.{i}.{n}", p) for n, p in block.parameters())
        return named

    def num_params(self) -> int:
        return sum(p.size for _, p in self.parameters())

    # --------------------------------------------------------------- forward

    def embed(self, tokens: np.ndarray) -> Tensor:
        """h^(0) = E_tok(tokens) + E_pos, added once before any loop."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be [batch, time], got shape {tokens.shape}")
        t_len = tokens.shape[1]
        if t_len > self.config.context_length:
            raise ValueError(
                f"sequence length {t_len} exceeds context_length {self.config.context_length}"
            )
        return embedding(self.tok_emb, tokens) + embedding(self.pos_emb, np.arange(t_len))

    def _signal(self, t: float, delta: float, loop_index: int) -> Tensor | None:
        variant = self.config.variant
        if variant == "loopformer":
            return conditioning_signal(t, delta, self.time_emb, self.step_emb)
        if variant == "tmlt":
            tau = float(loop_index) if self.config.tmlt_raw_index else loop_index / self.config.max_loops
            return embed_scalar(tau, self.time_emb)
        return None

    def stack_forward(self, h: Tensor, t: float, delta: float, loop_index: int = 1) -> Tensor:
        """One loop: compute c once, apply all blocks with it."""
        c = self._signal(t, delta, loop_index)
        for block in self.blocks:
            h = block(h, c)
        return h

    def lm_head(self, h: Tensor) -> Tensor:
        w = self.tok_emb.swap_last() if self.head_w is None else self.head_w
        return matmul(h, w)

    def forward(self, tokens: np.ndarray, trajectory: Trajectory, keep_hiddens: bool = True):
        """Run a trajectory; returns (hiddens, logits).

        hiddens[0] is the embedding sum and hiddens[i] the state after loop
        i (length budget+1); with keep_hiddens=False only the first and
        last states are retained.
        """
        config = self.config
        if trajectory.budget > config.max_loops:
            raise ValueError(
                f"trajectory budget {trajectory.budget} exceeds max_loops {config.max_loops}"
            )
        if config.variant == "base" and trajectory.budget != 1:
            raise ValueError("base variant runs exactly one pass; use a budget-1 trajectory")

        h = self.embed(tokens)
        hiddens = [h]
        if config.variant == "base":
            for block in self.blocks:
                h = block(h, None)
            hiddens.append(h)
        else:
            for i, (t, delta) in enumerate(trajectory.pairs(), start=1):
                h = self.stack_forward(h, t, delta, loop_index=i)
                if keep_hiddens or i == trajectory.budget:
                    hiddens.append(h)
        return hiddens, self.lm_head(h)


def init_model(config: ModelConfig, seed: int) -> LoopFormerModel:
    """Deterministic construction: same (config, seed) -> identical weights."""
    return LoopFormerModel(config, np.random.default_rng(seed))
