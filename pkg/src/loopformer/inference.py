"""Elastic-depth inference, perplexity, trajectory sweeps, generation, FLOPs.

One trained model serves any inference budget M <= max_loops: pick a
trajectory of M steps summing to 1, run the shared stack once per step, and
read logits off the final state. `trajectory_sweep` enumerates every grid
schedule at a budget and ranks them by held-out perplexity;  `FlopsModel`
gives the affine compute model C(l) = C_io + l*C_1 together with the
training-overhead ratio of the dual-trajectory objective.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diagnostics import collect_snapshots, mean_offdiag, report
from .model import LoopFormerModel, ModelConfig
from .trajectory import ScheduleGrid, Trajectory, enumerate_schedules

__all__ = [
    "elastic_forward",
    "perplexity",
    "SweepRecord",
    "SweepResult",
    "trajectory_sweep",
    "generate",
    "FlopsModel",
    "flops_model",
    "training_overhead",
]


def elastic_forward(model: LoopFormerModel, tokens, trajectory: Trajectory) -> T.Tensor:
    """Logits [B, T, V] after running `trajectory` on a token batch."""
    _, logits = model.forward(np.asarray(tokens), trajectory, keep_hiddens=False)
    return logits


def _window_nll(model, ids, trajectory, windows, batch_size):
    """Sum of token NLLs (and count) over (start, end, first_scored) windows."""
    total, count = 0.0, 0
    by_len = {}
    for s, e, k in windows:
        by_len.setdefault(e - s, []).append((s, e, k))
    for w_len, group in by_len.items():
        for i in range(0, len(group), batch_size):
            chunk = group[i : i + batch_size]
            x = np.stack([ids[s:e] for s, e, _ in chunk])
            y = np.stack([ids[s + 1 : e + 1] for s, e, _ in chunk])
            with T.no_grad():
                _, logits = model.forward(x, trajectory, keep_hiddens=False)
            z = logits.data.astype(np.float64)
            m = z.max(axis=-1, keepdims=True)
            lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
            picked = np.take_along_axis(z, y[..., None].astype(np.int64), axis=-1)[..., 0]
            nll = lse - picked
            for row, (_, _, k) in enumerate(chunk):
                total += float(nll[row, k:].sum())
                count += w_len - k
    return total, count


def perplexity(
    model: LoopFormerModel,
    ids,
    trajectory: Trajectory,
    stride: int | None = None,
    batch_size: int = 8,
) -> float:
    """exp(mean token NLL) over sliding context windows.

    Windows of length `context_length` advance by `stride` (default half a
    window); a token in the overlap of two windows is scored only once, in
    the window that sees it with the most context. The result is invariant
    to `batch_size`.
    """
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValueError(f"corpus must be a 1-D token array, got shape {ids.shape}")
    n = ids.size
    if n < 2:
        raise ValueError(f"corpus must hold at least 2 tokens, got {n}")
    t_max = model.config.context_length
    if stride is None:
        stride = max(1, t_max // 2)
    if not 1 <= stride <= t_max:
        raise ValueError(f"stride must be in [1, {t_max}], got {stride}")
    windows = []
    last_scored = 0  # absolute position of the newest target already scored
    s = 0
    while last_scored < n - 1:
        e = min(s + t_max, n - 1)  # window predicts targets at s+1 .. e
        windows.append((s, e, max(0, last_scored - s)))
        last_scored = e
        s += stride
    total, count = _window_nll(model, ids, trajectory, windows, batch_size)
    return float(np.exp(total / count))


@dataclass
class SweepRecord:
    """Held-out quality and mean diagnostics of one trajectory."""

    schedule: str
    ppl: float
    anisotropy: float
    curvature: float
    entropy: float
    offdiag_cka: float


@dataclass
class SweepResult:
    """Per-schedule records of a full budget-M sweep, sorted by perplexity."""

    budget: int
    records: list

    @property
    def best(self) -> SweepRecord:
        return self.records[0]

    @property
    def worst(self) -> SweepRecord:
        return self.records[-1]

    @property
    def spread(self) -> float:
        return self.worst.ppl - self.best.ppl

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["schedule", "ppl", "anisotropy", "curvature", "entropy", "offdiag_cka"]
            )
            for r in self.records:
                writer.writerow(
                    [
                        r.schedule,
                        f"{r.ppl:.8g}",
                        f"{r.anisotropy:.8g}",
                        f"{r.curvature:.8g}",
                        f"{r.entropy:.8g}",
                        f"{r.offdiag_cka:.8g}",
                    ]
                )


def trajectory_sweep(
    model: LoopFormerModel,
    ids,
    budget: int,
    stride: int | None = None,
    eval_tokens: int = 65536,
    diag_prompts: int = 4,
    tail_tokens: int = 64,
    batch_size: int = 8,
) -> SweepResult:
    """Evaluate every budget-M schedule on one fixed held-out shard.

    All schedules see identical data (the first `eval_tokens` tokens of
    `ids`), so perplexity differences reflect the trajectory alone. Each
    record also carries step-mean diagnostics from `diag_prompts` prompts.
    """
    config = model.config
    if budget > config.max_loops:
        raise ValueError(f"budget {budget} exceeds max_loops {config.max_loops}")
    ids = np.asarray(ids)
    shard = ids[: max(eval_tokens, 2)]
    t_max = config.context_length
    n_prompts = min(diag_prompts, max(1, shard.size // t_max))
    starts = np.linspace(0, max(0, shard.size - t_max), n_prompts).astype(int)
    prompts = [shard[s : s + t_max] for s in starts]
    records = []
    for traj in enumerate_schedules(budget, ScheduleGrid(config.max_loops)):
        ppl = perplexity(model, shard, traj, stride=stride, batch_size=batch_size)
        series = report(collect_snapshots(model, prompts, traj, tail_tokens=tail_tokens))
        records.append(
            SweepRecord(
                schedule=str(traj),
                ppl=ppl,
                anisotropy=float(np.mean(series["anisotropy"].values)),
                curvature=float(np.mean(series["curvature"].values)),
                entropy=float(np.mean(series["entropy"].values)),
                offdiag_cka=mean_offdiag(series["cka"].values),
            )
        )
    records.sort(key=lambda r: (r.ppl, r.schedule))
    return SweepResult(budget=budget, records=records)


def generate(
    model: LoopFormerModel,
    prompt,
    trajectory: Trajectory,
    max_new: int,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
):
    """Sample `max_new` tokens autoregressively, re-running the loop each step.

    temperature 0 decodes greedily; otherwise logits are divided by the
    temperature before sampling. Prompts longer than the context are
    truncated from the left (the model cannot attend further back anyway).
    """
    ids = list(np.asarray(prompt).ravel())
    if not ids:
        raise ValueError("prompt must be nonempty")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if max_new < 0:
        raise ValueError(f"max_new must be >= 0, got {max_new}")
    t_max = model.config.context_length
    if len(ids) > t_max:
        warnings.warn(f"prompt length {len(ids)} exceeds context {t_max}; truncating from left")
    if rng is None:
        rng = np.random.default_rng()
    for _ in range(max_new):
        window = np.asarray(ids[-t_max:])[None, :]
        with T.no_grad():
            _, logits = model.forward(window, trajectory, keep_hiddens=False)
        z = logits.data[0, -1].astype(np.float64)
        if temperature == 0.0:
            nxt = int(np.argmax(z))
        else:
            z = z / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(p.size, p=p))
        ids.append(nxt)
    return np.asarray(ids, dtype=np.int64)


@dataclass(frozen=True)
class FlopsModel:
    """Affine compute model C(l) = C_io + l*C_1 of one forward pass.

    c_io counts the loop-independent unembedding matmul; c_1 one application
    of the shared stack including its conditioning. Both follow the meter's
    convention of 2 FLOPs per multiply-add of every dense matmul (attention
    scores and value aggregation included; normalizations, activations, and
    embedding gathers ignored).
    """

    c_io: float
    c_1: float

    def __post_init__(self):
        if self.c_io <= 0 or self.c_1 <= 0:
            raise ValueError("c_io and c_1 must both be positive")

    def flops(self, ell: int) -> float:
        """Total forward FLOPs at inference budget `ell`."""
        if ell < 1:
            raise ValueError(f"ell must be >= 1, got {ell}")
        return self.c_io + ell * self.c_1


def flops_model(config: ModelConfig, batch_size: int = 1, seq_len: int | None = None) -> FlopsModel:
    """Closed-form dense-layer FLOP counts for one batch.

    Enumerates exactly the matmuls the forward pass executes, so the model
    matches the runtime FLOP meter to rounding.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    b = batch_size
    t = config.context_length if seq_len is None else seq_len
    if not 1 <= t <= config.context_length:
        raise ValueError(f"seq_len must be in [1, {config.context_length}], got {t}")
    d, dff, v, k = config.d_model, config.d_ff, config.vocab_size, config.blocks_per_loop
    c_io = 2.0 * b * t * d * v  # unembedding; token/position lookups are gathers
    per_block = (
        2.0 * b * t * d * 3 * d  # qkv projection
        + 2.0 * b * t * t * d  # attention scores (all heads)
        + 2.0 * b * t * t * d  # value aggregation
        + 2.0 * b * t * d * d  # output projection
        + 2.0 * b * t * d * dff * 2  # ffn up + down
    )
    if config.conditioned:
        per_block += 2.0 * d * 4 * d  # modulation head on the shared signal
    embedder = 2.0 * config.fourier_width * d + 2.0 * d * d
    signals = {"loopformer": 2, "tmlt": 1}.get(config.variant, 0)
    c_1 = k * per_block + signals * embedder
    return FlopsModel(c_io=c_io, c_1=c_1)


def training_overhead(L: int, c_io: float, c_1: float) -> float:
    """Forward-FLOP ratio of dual-trajectory training to a single full pass.

    Training runs the max trajectory (L loops) plus a sampled shortcut
    (L/2 loops in expectation), paying the IO cost twice:
    (2*C_io + 1.5*L*C_1) / (C_io + L*C_1). Equals 1.5 when C_io = 0 and
    approaches 2 as C_io dominates.
    """
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    if c_io < 0 or c_1 <= 0:
        raise ValueError("need c_io >= 0 and c_1 > 0")
    # same quantity as (2*C_io + 1.5*L*C_1) / (C_io + L*C_1), written so the
    # C_io = 0 case is exactly 1.5 in floating point
    return 1.5 + 0.5 * c_io / (c_io + L * c_1)
