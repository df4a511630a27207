"""Dual-trajectory training with the shortcut-consistency objective.

Every step runs the full L-loop trajectory for the LM loss and one sampled
shorter trajectory whose endpoint is pulled toward a stop-gradient copy of
the full route's endpoint:

    L = L_L + lambda1 * L_S + lambda2 * L_cons

L_cons admits two readings, selected by TrainConfig.cons_target. "logits"
(the default) distills the short route's per-token distribution toward the
frozen long route's via KL; its gradient is bounded by construction.
"hidden" takes the elementwise-mean squared error between the final hidden
states directly. The hidden reading has no scale anchor — nothing bounds
the states it compares — and at small scale the two routes can enter a
magnitude chase that diverges within a few hundred steps, which is why it
is not the default.

Baselines train through the same loop: early-exit recipes average the CE
over every loop step, and non-loopformer variants fall back to plain CE at
the maximum trajectory.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    cross_entropy,
    log_softmax_lastdim,
    mse,
    no_grad,
    stop_gradient,
)
from .trajectory import Trajectory, max_trajectory, sample_shortcut, uniform_trajectory

EE_MODES = ("none", "naive_ee", "ee_cons")
CONS_TARGETS = ("hidden", "logits")


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    peak_lr: float = 6e-4
    min_lr: float = 6e-5
    warmup_steps: int = 400
    total_steps: int = 5000
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 4
    seed: int = 0
    ee_mode: str = "none"
    cons_target: str = "logits"
    val_interval: int = 500
    val_batches: int = 8
    checkpoint_interval: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if not 0.0 < self.min_lr <= self.peak_lr:
            raise ValueError(f"need 0 < min_lr <= peak_lr, got {self.min_lr}, {self.peak_lr}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.ee_mode not in EE_MODES:
            raise ValueError(f"unknown ee_mode {self.ee_mode!r}, expected one of {EE_MODES}")
        if self.cons_target not in CONS_TARGETS:
            raise ValueError(
                f"unknown cons_target {self.cons_target!r}, expected one of {CONS_TARGETS}"
            )


@dataclass
class LossBreakdown:
    loss_L: float
    loss_S: float
    loss_cons: float
    total: float
    budget: int
    schedule: str


class NonFiniteGradient(RuntimeError):
    """Raised before any state is touched when a gradient goes non-finite."""


class AdamW:
    """Decoupled-weight-decay Adam with bias correction and global-norm clip.

    Weight decay applies only to parameters of ndim >= 2 (weight matrices
    and embedding tables), never to biases.
    """

    def __init__(self, named_params, config: TrainConfig):
        self.named_params = list(named_params)
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for name, p in self.named_params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, lr: float) -> float:
        """One update over all parameters; returns the pre-clip grad norm."""
        cfg = self.config
        norm = self.grad_norm()
        scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for i, (_, p) in enumerate(self.named_params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * np.square(g)
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + cfg.adam_eps)
            if p.ndim >= 2 and cfg.weight_decay > 0.0:
                update = update + cfg.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype, copy=False)
        return norm

    def state_dict(self):
        return {
            "t": self.t,
            "m": {name: m for (name, _), m in zip(self.named_params, self.m)},
            "v": {name: v for (name, _), v in zip(self.named_params, self.v)},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for i, (name, p) in enumerate(self.named_params):
            m, v = state["m"][name], state["v"][name]
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"optimizer buffer shape mismatch for {name!r}")
            self.m[i] = m.astype(p.dtype, copy=True)
            self.v[i] = v.astype(p.dtype, copy=True)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, cosine decay to min_lr, then constant."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    if step >= config.total_steps:
        return config.min_lr
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.min_lr + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + math.cos(math.pi * progress))


def run_loops(model, h0: Tensor, trajectory: Trajectory) -> Tensor:
    """Apply the shared stack along a trajectory, starting from a given h^(0)."""
    h = h0
    for i, (t, delta) in enumerate(trajectory.pairs(), start=1):
        h = model.stack_forward(h, t, delta, loop_index=i)
    return h


def _consistency(model, h_long: Tensor, h_short: Tensor, target: str) -> Tensor:
    if target == "hidden":
        return mse(stop_gradient(h_long), h_short)
    # KL of the frozen long-route token distribution against the short
    # route's: the short route is distilled toward the long route's
    # predictions, with gradient p_short - p_long on the short logits
    log_p = log_softmax_lastdim(model.lm_head(h_short))
    log_q = log_softmax_lastdim(stop_gradient(model.lm_head(h_long)))
    q = log_q.exp()
    return (q * (log_q - log_p)).sum(axis=-1).mean()


def compute_losses(model, batch, config: TrainConfig, rng: np.random.Generator):
    """The Algorithm 1 objective; returns (total Tensor, LossBreakdown)."""
    x, y = batch
    L = model.config.max_loops
    h0 = model.embed(x)
    traj_l = max_trajectory(L)
    h_long = run_loops(model, h0, traj_l)
    loss_l = cross_entropy(model.lm_head(h_long), y)

    if L < 2:
        return loss_l, LossBreakdown(loss_l.item(), 0.0, 0.0, loss_l.item(), L, str(traj_l))

    traj_s = sample_shortcut(L, rng)
    h_short = run_loops(model, h0, traj_s)
    loss_s = cross_entropy(model.lm_head(h_short), y)
    loss_cons = _consistency(model, h_long, h_short, config.cons_target)
    total = loss_l + config.lambda1 * loss_s + config.lambda2 * loss_cons
    return total, LossBreakdown(
        loss_l.item(), loss_s.item(), loss_cons.item(), total.item(), traj_s.budget, str(traj_s)
    )


def compute_plain_loss(model, batch):
    """Plain max-trajectory CE (base: its single pass)."""
    x, y = batch
    budget = 1 if model.config.variant == "base" else model.config.max_loops
    traj = max_trajectory(budget)
    _, logits = model.forward(x, traj, keep_hiddens=False)
    loss = cross_entropy(logits, y)
    return loss, LossBreakdown(loss.item(), 0.0, 0.0, loss.item(), budget, str(traj))


def compute_ee_losses(model, batch, config: TrainConfig):
    """Early-exit baselines: CE averaged over the logits of every loop step.

    ee_cons additionally pulls every intermediate state toward a frozen copy
    of the final state, weighted by lambda2.
    """
    x, y = batch
    L = model.config.max_loops
    traj = max_trajectory(L)
    hiddens, _ = model.forward(x, traj, keep_hiddens=True)
    ce_terms = [cross_entropy(model.lm_head(h), y) for h in hiddens[1:]]
    loss_l = ce_terms[0] * (1.0 / L)
    for term in ce_terms[1:]:
        loss_l = loss_l + term * (1.0 / L)

    if config.ee_mode == "naive_ee" or L < 2:
        return loss_l, LossBreakdown(loss_l.item(), 0.0, 0.0, loss_l.item(), L, str(traj))

    frozen = stop_gradient(hiddens[-1])
    cons_terms = [mse(frozen, h) for h in hiddens[1:-1]]
    loss_cons = cons_terms[0] * (1.0 / len(cons_terms))
    for term in cons_terms[1:]:
        loss_cons = loss_cons + term * (1.0 / len(cons_terms))
    total = loss_l + config.lambda2 * loss_cons
    return total, LossBreakdown(
        loss_l.item(), 0.0, loss_cons.item(), total.item(), L, str(traj)
    )


def training_step(model, batch, config: TrainConfig, opt: AdamW, rng: np.random.Generator):
    """One optimizer update; dispatches on ee_mode and model variant."""
    if config.ee_mode != "none":
        total, breakdown = compute_ee_losses(model, batch, config)
    elif model.config.variant == "loopformer" and model.config.max_loops >= 2:
        total, breakdown = compute_losses(model, batch, config, rng)
    else:
        total, breakdown = compute_plain_loss(model, batch)
    opt.zero_grad()
    total.backward()
    lr = lr_schedule(opt.t + 1, config)
    opt.step(lr)
    return breakdown


def sample_batch(tokens: np.ndarray, batch_size: int, t_len: int, rng: np.random.Generator):
    """Random contiguous windows; Y is X shifted one token left."""
    if len(tokens) < t_len + 2:
        raise ValueError(f"corpus of {len(tokens)} tokens is too short for windows of {t_len}")
    starts = rng.integers(0, len(tokens) - t_len - 1, size=batch_size)
    x = np.stack([tokens[s : s + t_len] for s in starts]).astype(np.int64)
    y = np.stack([tokens[s + 1 : s + t_len + 1] for s in starts]).astype(np.int64)
    return x, y


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)  # LossBreakdown per step
    val: list = field(default_factory=list)  # (step, budget, mean val CE)


def _val_budgets(max_loops: int, variant: str):
    if variant == "base":
        return [1]
    return sorted({1, max(1, max_loops // 2), max_loops})


def evaluate_ce(model, batches, budget: int) -> float:
    """Mean CE over fixed batches at a uniform schedule of the given budget."""
    traj = uniform_trajectory(budget)
    losses = []
    with no_grad():
        for x, y in batches:
            _, logits = model.forward(x, traj, keep_hiddens=False)
            losses.append(cross_entropy(logits, y).item())
    return float(np.mean(losses))


def train(model, corpus, config: TrainConfig, run_dir: str | None = None, log_every: int = 100):
    """Run the full training loop; returns a TrainLog.

    Writes metrics.csv (one row per step) and val.csv under run_dir when
    given, checkpoints periodically, and halts with an emergency checkpoint
    if the loss or a gradient stops being finite.
    """
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), config)
    log = TrainLog()
    t_len = model.config.context_length

    val_rng = np.random.default_rng(config.seed + 1)
    val_batches = [
        sample_batch(corpus.val, config.batch_size, t_len, val_rng)
        for _ in range(config.val_batches)
    ]
    budgets = _val_budgets(model.config.max_loops, model.config.variant)

    metrics_file = val_file = None
    metrics_writer = val_writer = None
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        metrics_file = open(os.path.join(run_dir, "metrics.csv"), "w", newline="")
        metrics_writer = csv.writer(metrics_file)
        metrics_writer.writerow(["step", "lr", "loss_L", "loss_S", "loss_cons", "total", "S", "schedule"])
        val_file = open(os.path.join(run_dir, "val.csv"), "w", newline="")
        val_writer = csv.writer(val_file)
        val_writer.writerow(["step", "budget", "val_ce"])

    def save(name: str, step: int):
        if run_dir is None:
            return
        from .checkpoint import save_checkpoint

        save_checkpoint(os.path.join(run_dir, name), model, optimizer=opt, step=step)

    try:
        for step in range(1, config.total_steps + 1):
            batch = sample_batch(corpus.train, config.batch_size, t_len, rng)
            lr = lr_schedule(step, config)
            try:
                breakdown = training_step(model, batch, config, opt, rng)
            except NonFiniteGradient as err:
                save("emergency.ckpt", step)
                raise RuntimeError(f"step {step}: {err}; emergency checkpoint saved") from err
            log.steps.append(breakdown)
            if metrics_writer is not None:
                metrics_writer.writerow(
                    [step, f"{lr:.8g}", f"{breakdown.loss_L:.6f}", f"{breakdown.loss_S:.6f}",
                     f"{breakdown.loss_cons:.6f}", f"{breakdown.total:.6f}",
                     breakdown.budget, breakdown.schedule]
                )
            if not math.isfinite(breakdown.total):
                save("emergency.ckpt", step)
                raise RuntimeError(f"step {step}: non-finite loss {breakdown.total}; emergency checkpoint saved")
            if log_every and step % log_every == 0:
                print(f"step {step}: loss {breakdown.total:.4f} (lr {lr:.2e})")
            if config.val_interval and step % config.val_interval == 0:
                for budget in budgets:
                    ce = evaluate_ce(model, val_batches, budget)
                    log.val.append((step, budget, ce))
                    if val_writer is not None:
                        val_writer.writerow([step, budget, f"{ce:.6f}"])
                if val_file is not None:
                    val_file.flush()
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                save(f"step{step:06d}.ckpt", step)
        save("model.ckpt", config.total_steps)
    finally:
        for fh in (metrics_file, val_file):
            if fh is not None:
                fh.close()
    return log
