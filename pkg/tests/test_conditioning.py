import math

import numpy as np
import pytest

from loopformer import tensor as T
from loopformer.conditioning import (
    FourierSpec,
    ModulationHead,
    ScalarEmbedder,
    conditioning_signal,
    embed_scalar,
    fourier_features,
    modulate,
)
from loopformer.tensor import Tensor

from oracles import finite_diff_grads, max_rel_err


def test_fourier_spec_validation():
    FourierSpec()  # defaults are valid
    with pytest.raises(ValueError):
        FourierSpec(width=7)
    with pytest.raises(ValueError):
        FourierSpec(width=0)
    with pytest.raises(ValueError):
        FourierSpec(max_period=1.0)


def test_frequencies():
    spec = FourierSpec(width=256, max_period=10000.0)
    w = spec.frequencies
    assert w[0] == 1.0
    assert abs(w[127] - math.exp(-(127 / 128) * math.log(1e4))) < 1e-12
    assert abs(w[127] - 1.0746e-4) < 1e-8
    assert np.all(np.diff(w) < 0)  # strictly decreasing
    assert abs(w[-1] - 10000.0 ** (-(127 / 128))) < 1e-12


def test_fourier_features_tau_zero():
    spec = FourierSpec(width=8)
    f = fourier_features(0.0, spec)
    assert np.array_equal(f, np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=f.dtype))


def test_fourier_features_interleaving():
    spec = FourierSpec(width=6, max_period=100.0)
    tau = 0.37
    f = fourier_features(tau, spec)
    ang = tau * spec.frequencies
    assert np.allclose(f[0::2], np.cos(ang), atol=1e-7)
    assert np.allclose(f[1::2], np.sin(ang), atol=1e-7)


def test_embed_scalar_contracts():
    spec = FourierSpec(width=32)
    for d in (32, 128):
        emb = ScalarEmbedder(d, spec, np.random.default_rng(0))
        out = emb(0.3)
        assert out.shape == (d,)
        again = emb(0.3)
        assert np.array_equal(out.data, again.data)

    zeroed = ScalarEmbedder(16, spec, np.random.default_rng(1))
    for _, p in zeroed.parameters():
        p.data[...] = 0.0
    for tau in (0.0, 0.25, 1.0, 3.0):
        assert np.all(zeroed(tau).data == 0.0)


def test_conditioning_signal_additive():
    spec = FourierSpec(width=16)
    rng = np.random.default_rng(2)
    time_emb = ScalarEmbedder(8, spec, rng)
    step_emb = ScalarEmbedder(8, spec, rng)

    for _, p in step_emb.parameters():
        p.data[...] = 0.0
    c = conditioning_signal(0.5, 0.25, time_emb, step_emb)
    assert np.allclose(c.data, embed_scalar(0.5, time_emb).data, atol=1e-7)

    # c(t, d1) - c(t, d2) must not depend on t
    step_emb2 = ScalarEmbedder(8, spec, np.random.default_rng(3))
    diffs = []
    for t in (0.0, 0.25, 0.5, 0.75):
        d1 = conditioning_signal(t, 0.25, time_emb, step_emb2).data
        d2 = conditioning_signal(t, 0.5, time_emb, step_emb2).data
        diffs.append(d1 - d2)
    for other in diffs[1:]:
        assert np.allclose(diffs[0], other, atol=1e-6)


def test_modulation_head_zero_init():
    head = ModulationHead(8)
    c = Tensor(np.random.default_rng(4).normal(size=8).astype(np.float32))
    params = modulate(c, head)
    for slice_ in (params.gate_msa, params.gate_mlp, params.scale_msa, params.scale_mlp):
        assert slice_.shape == (8,)
        assert np.all(slice_.data == 0.0)


def test_modulate_chunk_order():
    d = 5
    head = ModulationHead(d)
    head.b.data[...] = np.arange(1, 4 * d + 1)
    params = modulate(Tensor(np.zeros(d)), head)
    assert np.array_equal(params.gate_msa.data, np.arange(1, d + 1))
    assert np.array_equal(params.gate_mlp.data, np.arange(d + 1, 2 * d + 1))
    assert np.array_equal(params.scale_msa.data, np.arange(2 * d + 1, 3 * d + 1))
    assert np.array_equal(params.scale_mlp.data, np.arange(3 * d + 1, 4 * d + 1))


def test_modulate_width_mismatch():
    head = ModulationHead(8)
    with pytest.raises(ValueError):
        modulate(Tensor(np.zeros(7)), head)


def test_conditioning_gradients_match_finite_differences():
    with T.default_dtype(np.float64):
        spec = FourierSpec(width=12)
        rng = np.random.default_rng(5)
        d = 6
        time_emb = ScalarEmbedder(d, spec, rng, std=0.5)
        step_emb = ScalarEmbedder(d, spec, rng, std=0.5)
        head = ModulationHead(d)
        head.w.data[...] = rng.normal(0.0, 0.5, head.w.shape)
        head.b.data[...] = rng.normal(0.0, 0.5, head.b.shape)
        probe = [Tensor(rng.normal(size=d)) for _ in range(4)]

        params = {f"time.{n}": p for n, p in time_emb.parameters()}
        params.update({f"step.{n}": p for n, p in step_emb.parameters()})
        params.update({f"head.{n}": p for n, p in head.parameters()})

        def forward():
            c = conditioning_signal(0.4, 0.3, time_emb, step_emb)
            m = modulate(c, head)
            parts = (m.gate_msa, m.gate_mlp, m.scale_msa, m.scale_mlp)
            total = sum(((part * q).sum() for part, q in zip(parts, probe)), start=Tensor(0.0))
            return total * total + total

        loss = forward()
        loss.backward()
        analytic = {name: p.grad.copy() for name, p in params.items()}
        numeric = finite_diff_grads(lambda: forward().item(), params, h=1e-5)
        for name in params:
            assert max_rel_err(analytic[name], numeric[name]) < 1e-3, name
