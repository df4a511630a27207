"""Scalar conditioning: Fourier features, time/step embedders, adaLN modulation.

Each loop iteration is described by two scalars — elapsed time t and step
size Δt. Both pass through the same Fourier-feature map followed by separate
2-layer SiLU MLPs, and their sum c = φ_time(t) + φ_step(Δt) drives the
per-block modulation heads. Heads are zero-initialized so a fresh model is
exactly the unmodulated backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, get_default_dtype, matmul, silu


@dataclass(frozen=True)
class FourierSpec:
    """Width and frequency range of the scalar feature map."""

    width: int = 256
    max_period: float = 10000.0

    def __post_init__(self):
        if self.width <= 0 or self.width % 2 != 0:
            raise ValueError(f"fourier width must be a positive even integer, got {self.width}")
        if not self.max_period > 1.0:
            raise ValueError(f"fourier max_period must exceed 1, got {self.max_period}")

    @property
    def frequencies(self) -> np.ndarray:
        """omega_k = exp(-(k-1)/(width/2) * ln max_period), k = 1..width/2."""
        half = self.width // 2
        return np.exp(np.arange(half) * (-math.log(self.max_period) / half))


def fourier_features(tau: float, spec: FourierSpec) -> np.ndarray:
    """Interleaved (cos, sin) pairs of tau * omega_k; shape [width]."""
    angles = tau * spec.frequencies
    out = np.empty(spec.width, dtype=get_default_dtype())
    out[0::2] = np.cos(angles)
    out[1::2] = np.sin(angles)
    return out


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape).astype(get_default_dtype()), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


class ScalarEmbedder:
    """phi: scalar -> R^d. Fourier features, then affine/SiLU/affine."""

    def __init__(self, d: int, spec: FourierSpec, rng: np.random.Generator, std: float = 0.02):
        self.d = d
        self.fourier = spec
        self.fc1_w = _normal(rng, (spec.width, d), std)
        self.fc1_b = _zeros(d)
        self.fc2_w = _normal(rng, (d, d), std)
        self.fc2_b = _zeros(d)

    def parameters(self):
        return [
            ("fc1.w", self.fc1_w),
            ("fc1.b", self.fc1_b),
            ("fc2.w", self.fc2_w),
            ("fc2.b", self.fc2_b),
        ]

    def __call__(self, tau: float) -> Tensor:
        return embed_scalar(tau, self)


def embed_scalar(tau: float, embedder: ScalarEmbedder) -> Tensor:
    """mlp(fourier_features(tau)); differentiable w.r.t. the mlp parameters."""
    feats = Tensor(fourier_features(tau, embedder.fourier).reshape(1, -1))
    h = silu(matmul(feats, embedder.fc1_w) + embedder.fc1_b)
    out = matmul(h, embedder.fc2_w) + embedder.fc2_b
    return out.reshape(embedder.d)


def conditioning_signal(
    t: float, delta: float, time_emb: ScalarEmbedder, step_emb: ScalarEmbedder
) -> Tensor:
    """c = phi_time(t) + phi_step(delta), shape [d]."""
    return embed_scalar(t, time_emb) + embed_scalar(delta, step_emb)


class ModulationHead:
    """SiLU then affine d -> 4d, zero-initialized (weights and bias).

    The output splits, in order, into (gate_msa, gate_mlp, scale_msa,
    scale_mlp); all four are exactly zero until training moves the head.
    """

    def __init__(self, d: int):
        self.d = d
        self.w = _zeros((d, 4 * d))
        self.b = _zeros(4 * d)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


@dataclass
class ModulationParams:
    gate_msa: Tensor
    gate_mlp: Tensor
    scale_msa: Tensor
    scale_mlp: Tensor


def modulate(c: Tensor, head: ModulationHead) -> ModulationParams:
    """Map a conditioning vector to the four per-block modulation vectors."""
    d = head.d
    if c.shape[-1] != d:
        raise ValueError(f"conditioning width {c.shape[-1]} does not match head width {d}")
    x = silu(c)
    flat = x.ndim == 1
    if flat:
        x = x.reshape(1, d)
    out = matmul(x, head.w) + head.b
    if flat:
        out = out.reshape(4 * d)
    return ModulationParams(
        gate_msa=out[..., 0:d],
        gate_mlp=out[..., d : 2 * d],
        scale_msa=out[..., 2 * d : 3 * d],
        scale_mlp=out[..., 3 * d : 4 * d],
    )
