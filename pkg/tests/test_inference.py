"""Inference: elastic forward, perplexity windows, sweeps, generation, FLOPs."""

import csv
import math

import numpy as np
import pytest

from loopformer import tensor as T
from loopformer.inference import (
    FlopsModel,
    elastic_forward,
    flops_model,
    generate,
    perplexity,
    trajectory_sweep,
    training_overhead,
)
from loopformer.model import ModelConfig, init_model
from loopformer.trajectory import (
    ScheduleGrid,
    Trajectory,
    max_trajectory,
    uniform_trajectory,
)


def tiny_config(**kw):
    base = dict(
        vocab_size=17,
        context_length=16,
        d_model=16,
        n_heads=2,
        d_ff=24,
        blocks_per_loop=2,
        max_loops=4,
        fourier_width=16,
    )
    base.update(kw)
    return ModelConfig(**base)


def randomize(model, seed=0, scale=0.05):
    """Perturb every parameter so modulation is active (a stand-in for training)."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        for _, p in model.parameters():
            p.data += (scale * rng.standard_normal(p.data.shape)).astype(p.data.dtype)
    return model


# -------------------------------------------------------------- elastic forward


def test_elastic_forward_matches_training_path():
    model = randomize(init_model(tiny_config(), seed=1))
    rng = np.random.default_rng(0)
    x = rng.integers(0, 17, size=(2, 16))
    traj = max_trajectory(4)
    logits = elastic_forward(model, x, traj)
    hiddens, ref = model.forward(x, traj, keep_hiddens=True)
    assert logits.shape == (2, 16, 17)
    assert np.array_equal(logits.data, ref.data)
    assert len(hiddens) == 5


def test_elastic_forward_init_budget_agnostic():
    model = init_model(tiny_config(), seed=2)
    rng = np.random.default_rng(1)
    x = rng.integers(0, 17, size=(1, 12))
    ref = elastic_forward(model, x, uniform_trajectory(1)).data
    for m in (2, 3, 4):
        got = elastic_forward(model, x, uniform_trajectory(m)).data
        assert np.max(np.abs(got - ref)) <= 1e-6


def test_base_loop_schedule_permutation_invariance():
    model = randomize(init_model(tiny_config(variant="base_loop"), seed=3))
    rng = np.random.default_rng(2)
    x = rng.integers(0, 17, size=(2, 10))
    a = elastic_forward(model, x, Trajectory((0.5, 0.25, 0.25))).data
    b = elastic_forward(model, x, Trajectory((0.25, 0.5, 0.25))).data
    assert np.array_equal(a, b)


# ------------------------------------------------------------------- perplexity


def test_perplexity_uniform_logits_equals_vocab():
    model = init_model(tiny_config(), seed=4)
    with T.no_grad():
        model.tok_emb.data[:] = 0.0  # tied head: all logits become exactly zero
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 17, size=100)
    for stride in (16, 8, 5):
        assert perplexity(model, ids, max_trajectory(4), stride=stride) == pytest.approx(
            17.0, rel=1e-9
        )


def test_perplexity_nonoverlapping_oracle():
    model = randomize(init_model(tiny_config(), seed=5))
    rng = np.random.default_rng(4)
    ids = rng.integers(0, 17, size=50)
    traj = uniform_trajectory(2)
    total, count = 0.0, 0
    for s in range(0, 49, 16):
        e = min(s + 16, 49)
        z = elastic_forward(model, ids[None, s:e], traj).data[0].astype(np.float64)
        y = ids[s + 1 : e + 1]
        for i in range(e - s):
            total += math.log(np.exp(z[i] - z[i].max()).sum()) + z[i].max() - z[i, y[i]]
            count += 1
    assert count == 49
    expect = math.exp(total / count)
    assert perplexity(model, ids, traj, stride=16) == pytest.approx(expect, rel=1e-6)


def test_perplexity_batching_invariance():
    model = randomize(init_model(tiny_config(), seed=6))
    rng = np.random.default_rng(5)
    ids = rng.integers(0, 17, size=200)
    traj = uniform_trajectory(3)
    vals = [perplexity(model, ids, traj, stride=8, batch_size=bs) for bs in (1, 4, 7, 64)]
    for v in vals[1:]:
        assert v == pytest.approx(vals[0], rel=1e-5)


def test_perplexity_overlap_scored_once():
    model = randomize(init_model(tiny_config(), seed=7))
    rng = np.random.default_rng(6)
    ids = rng.integers(0, 17, size=2 * 16 + 3)
    traj = uniform_trajectory(2)
    # oracle replays the window rule one window at a time: targets s+1..e,
    # skipping any position an earlier window already scored
    total, count, last, s = 0.0, 0, 0, 0
    while last < ids.size - 1:
        e = min(s + 16, ids.size - 1)
        z = elastic_forward(model, ids[None, s:e], traj).data[0].astype(np.float64)
        for i in range(max(0, last - s), e - s):
            p = s + 1 + i
            total += math.log(np.exp(z[i] - z[i].max()).sum()) + z[i].max() - z[i, ids[p]]
            count += 1
        last = e
        s += 8
    assert count == ids.size - 1
    got = perplexity(model, ids, traj, stride=8, batch_size=3)
    assert got == pytest.approx(math.exp(total / count), rel=1e-6)


def test_perplexity_input_validation():
    model = init_model(tiny_config(), seed=8)
    traj = uniform_trajectory(1)
    with pytest.raises(ValueError, match="2 tokens"):
        perplexity(model, np.array([3]), traj)
    with pytest.raises(ValueError, match="stride"):
        perplexity(model, np.arange(10) % 17, traj, stride=0)
    with pytest.raises(ValueError, match="stride"):
        perplexity(model, np.arange(10) % 17, traj, stride=17)
    assert perplexity(model, np.array([1, 2]), traj) > 0


# ------------------------------------------------------------------------ sweep


def test_sweep_budget2_three_records_sorted():
    model = randomize(init_model(tiny_config(), seed=9))
    rng = np.random.default_rng(7)
    ids = rng.integers(0, 17, size=400)
    result = trajectory_sweep(model, ids, budget=2, eval_tokens=300, diag_prompts=2)
    assert result.budget == 2
    assert len(result.records) == 3  # C(L-1, M-1) at L=4, M=2
    ppls = [r.ppl for r in result.records]
    assert ppls == sorted(ppls)
    assert result.spread == pytest.approx(result.worst.ppl - result.best.ppl)
    assert result.spread >= 0
    schedules = {r.schedule for r in result.records}
    assert schedules == {"0.25,0.75", "0.5,0.5", "0.75,0.25"}
    uniform_ppl = next(r.ppl for r in result.records if r.schedule == "0.5,0.5")
    assert result.best.ppl <= uniform_ppl


def test_sweep_at_init_spread_is_zero():
    model = init_model(tiny_config(), seed=10)
    rng = np.random.default_rng(8)
    ids = rng.integers(0, 17, size=300)
    result = trajectory_sweep(model, ids, budget=3, eval_tokens=200, diag_prompts=1)
    assert len(result.records) == 3
    assert result.spread <= 1e-9


def test_sweep_csv_round_trip(tmp_path):
    model = randomize(init_model(tiny_config(), seed=11))
    rng = np.random.default_rng(9)
    ids = rng.integers(0, 17, size=300)
    result = trajectory_sweep(model, ids, budget=2, eval_tokens=200, diag_prompts=1)
    path = tmp_path / "sweep.csv"
    result.write_csv(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["schedule", "ppl", "anisotropy", "curvature", "entropy", "offdiag_cka"]
    assert len(rows) == 4
    for row, rec in zip(rows[1:], result.records):
        assert row[0] == rec.schedule
        assert float(row[1]) == pytest.approx(rec.ppl, rel=1e-6)
        assert float(row[5]) == pytest.approx(rec.offdiag_cka, rel=1e-6)


def test_sweep_budget_exceeds_loops():
    model = init_model(tiny_config(), seed=12)
    with pytest.raises(ValueError, match="max_loops"):
        trajectory_sweep(model, np.arange(50) % 17, budget=5)


# --------------------------------------------------------------------- generate


def test_generate_greedy_deterministic_and_lengths():
    model = randomize(init_model(tiny_config(), seed=13))
    traj = uniform_trajectory(2)
    prompt = np.array([1, 2, 3])
    a = generate(model, prompt, traj, max_new=5, temperature=0.0)
    b = generate(model, prompt, traj, max_new=5, temperature=0.0)
    assert np.array_equal(a, b)
    assert a.size == 8
    assert np.array_equal(a[:3], prompt)
    assert np.array_equal(generate(model, prompt, traj, max_new=0), prompt)


def test_generate_greedy_matches_manual_argmax():
    model = randomize(init_model(tiny_config(), seed=14))
    traj = uniform_trajectory(2)
    prompt = np.array([5, 11])
    out = generate(model, prompt, traj, max_new=2, temperature=0.0)
    z1 = elastic_forward(model, prompt[None, :], traj).data[0, -1]
    n1 = int(np.argmax(z1))
    z2 = elastic_forward(model, np.array([[5, 11, n1]]), traj).data[0, -1]
    assert out.tolist() == [5, 11, n1, int(np.argmax(z2))]


def test_generate_sampling_seeded():
    model = randomize(init_model(tiny_config(), seed=15))
    traj = uniform_trajectory(1)
    prompt = np.array([2, 4])
    a = generate(model, prompt, traj, 6, temperature=0.9, rng=np.random.default_rng(0))
    b = generate(model, prompt, traj, 6, temperature=0.9, rng=np.random.default_rng(0))
    c = generate(model, prompt, traj, 6, temperature=0.9, rng=np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert a.size == 8 and c.size == 8


def test_generate_long_prompt_truncates_with_warning():
    model = randomize(init_model(tiny_config(), seed=16))
    traj = uniform_trajectory(1)
    long_prompt = np.arange(25) % 17
    with pytest.warns(UserWarning, match="truncating"):
        out = generate(model, long_prompt, traj, max_new=1, temperature=0.0)
    assert out.size == 26
    assert np.array_equal(out[:25], long_prompt)


def test_generate_validation():
    model = init_model(tiny_config(), seed=17)
    traj = uniform_trajectory(1)
    with pytest.raises(ValueError, match="nonempty"):
        generate(model, np.array([], dtype=int), traj, 1)
    with pytest.raises(ValueError, match="temperature"):
        generate(model, np.array([1]), traj, 1, temperature=-0.5)
    with pytest.raises(ValueError, match="max_new"):
        generate(model, np.array([1]), traj, -1)


# ------------------------------------------------------------------------ flops


def test_training_overhead_closed_forms():
    for L in range(2, 13):
        for c1 in (1.0, 3.5, 1e9):
            assert training_overhead(L, 0.0, c1) == 1.5
            assert training_overhead(L, L * c1, c1) == pytest.approx(1.75)
    rng = np.random.default_rng(0)
    for _ in range(50):
        L = int(rng.integers(2, 13))
        c_io = float(rng.uniform(0.01, 100.0))
        c_1 = float(rng.uniform(0.01, 100.0))
        v = training_overhead(L, c_io, c_1)
        assert 1.5 < v < 2.0
    # the ratio grows toward 2 as io cost dominates the loop cost
    assert training_overhead(4, 0.5, 1.0) < training_overhead(4, 5.0, 1.0)
    with pytest.raises(ValueError):
        training_overhead(1, 1.0, 1.0)


def test_flops_affine_identity():
    fm = flops_model(ModelConfig(), batch_size=4)
    for ell in (1, 2, 3, 5):
        assert fm.flops(2 * ell) - fm.flops(ell) == pytest.approx(ell * fm.c_1)
    with pytest.raises(ValueError):
        fm.flops(0)
    with pytest.raises(ValueError):
        FlopsModel(c_io=0.0, c_1=1.0)


def test_flops_model_matches_meter_loopformer():
    cfg = tiny_config()
    model = init_model(cfg, seed=18)
    rng = np.random.default_rng(10)
    x = rng.integers(0, 17, size=(3, 16))
    fm = flops_model(cfg, batch_size=3)
    for ell in (1, 2, 4):
        T.reset_matmul_flops()
        model.forward(x, uniform_trajectory(ell), keep_hiddens=False)
        assert T.matmul_flops() == fm.flops(ell)


def test_flops_model_matches_meter_variants_and_short_seq():
    rng = np.random.default_rng(11)
    for variant in ("tmlt", "base_loop"):
        cfg = tiny_config(variant=variant)
        model = init_model(cfg, seed=19)
        x = rng.integers(0, 17, size=(2, 16))
        fm = flops_model(cfg, batch_size=2)
        T.reset_matmul_flops()
        model.forward(x, uniform_trajectory(3), keep_hiddens=False)
        assert T.matmul_flops() == fm.flops(3)
    cfg = tiny_config()
    model = init_model(cfg, seed=20)
    x = rng.integers(0, 17, size=(2, 9))
    fm = flops_model(cfg, batch_size=2, seq_len=9)
    T.reset_matmul_flops()
    model.forward(x, uniform_trajectory(2), keep_hiddens=False)
    assert T.matmul_flops() == fm.flops(2)


def test_flops_model_base_variant_full_stack():
    cfg = tiny_config(variant="base")
    model = init_model(cfg, seed=21)
    rng = np.random.default_rng(12)
    x = rng.integers(0, 17, size=(2, 16))
    fm = flops_model(cfg, batch_size=2)
    T.reset_matmul_flops()
    model.forward(x, uniform_trajectory(1), keep_hiddens=False)
    # budget 1 runs the whole unshared stack: k*max_loops blocks
    assert T.matmul_flops() == fm.c_io + cfg.max_loops * fm.c_1


def test_desk_preset_overhead_in_range():
    fm = flops_model(ModelConfig())
    v = training_overhead(ModelConfig().max_loops, fm.c_io, fm.c_1)
    assert 1.5 < v < 2.0
