"""Representation-dynamics diagnostics over per-loop-step hidden states.

Four metrics distinguish refinement from stagnation across loop steps:
anisotropy (mean pairwise cosine similarity among token states), curvature
(mean turning angle of the token-position trajectory), prompt entropy
(normalized von Neumann entropy of the token Gram matrix), and linear CKA
between the states at different loop steps. All four are pure functions of
[T, d] matrices; `collect_snapshots` + `report` run them over a model's
retained hidden states and average over prompts.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .trajectory import Trajectory

__all__ = [
    "RepresentationSnapshot",
    "MetricSeries",
    "anisotropy",
    "curvature",
    "prompt_entropy",
    "cka",
    "mean_offdiag",
    "collect_snapshots",
    "report",
    "write_metrics_csv",
    "write_cka_csv",
]


def _as_matrix(h, name: str) -> np.ndarray:
    a = np.asarray(h, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D [T, d] matrix, got shape {a.shape}")
    return a


def anisotropy(h) -> float:
    """Mean pairwise cosine similarity over all row pairs i < j of h [T, d].

    Zero-norm rows carry no direction; they are excluded with a warning. If
    fewer than two nonzero rows remain the metric is defined as 0.0.
    """
    a = _as_matrix(h, "anisotropy input")
    if a.shape[0] < 2:
        raise ValueError(f"anisotropy needs at least 2 rows, got {a.shape[0]}")
    norms = np.linalg.norm(a, axis=1)
    keep = norms > 0.0
    if not keep.all():
        warnings.warn(f"anisotropy: excluding {int((~keep).sum())} zero-norm row(s)")
        a, norms = a[keep], norms[keep]
    t = a.shape[0]
    if t < 2:
        warnings.warn("anisotropy: fewer than 2 nonzero rows; returning 0.0")
        return 0.0
    unit = a / norms[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(t, k=1)
    return float(np.mean(gram[iu]))


def curvature(h) -> float:
    """Mean turning angle (radians) between consecutive position differences.

    With v_i = h[i+1] − h[i], averages angle(v_i, v_{i+1}) over i. Pairs where
    either difference is zero carry no angle and are skipped with a warning.
    """
    a = _as_matrix(h, "curvature input")
    if a.shape[0] < 3:
        raise ValueError(f"curvature needs at least 3 rows, got {a.shape[0]}")
    v = np.diff(a, axis=0)
    norms = np.linalg.norm(v, axis=1)
    left, right = norms[:-1], norms[1:]
    keep = (left > 0.0) & (right > 0.0)
    if not keep.all():
        warnings.warn(f"curvature: skipping {int((~keep).sum())} zero-difference pair(s)")
    if not keep.any():
        warnings.warn("curvature: no nonzero difference pairs; returning 0.0")
        return 0.0
    dots = np.sum(v[:-1] * v[1:], axis=1)
    cos = dots[keep] / (left[keep] * right[keep])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def prompt_entropy(h) -> float:
    """Normalized spectral entropy of the token Gram matrix, in [0, 1].

    The Gram K = h·hᵀ is normalized to unit trace; the entropy of its
    eigenvalue distribution, −Σ λ ln λ, is divided by ln T. Rank-1 states give
    0 (fully collapsed), orthonormal rows give 1 (maximally spread). An
    all-zero input has no spectrum and is defined as 0.0.
    """
    a = _as_matrix(h, "prompt_entropy input")
    t = a.shape[0]
    if t < 2:
        raise ValueError(f"prompt_entropy needs at least 2 rows, got {t}")
    gram = a @ a.T
    trace = float(np.trace(gram))
    if trace <= 0.0:
        warnings.warn("prompt_entropy: all-zero states; returning 0.0")
        return 0.0
    lam = np.linalg.eigvalsh(gram / trace)
    lam = lam[lam > 0.0]
    return float(-np.sum(lam * np.log(lam)) / math.log(t))


def cka(x, y) -> float:
    """Linear centered kernel alignment between x [T, d] and y [T, d'].

    Columns of each argument are mean-centered; the score is
    ‖ȳᵀx̄‖²_F / (‖x̄ᵀx̄‖_F · ‖ȳᵀȳ‖_F), invariant to orthogonal transforms and
    isotropic scaling of either side. Degenerate (zero-variance) inputs are
    defined as 0.0.
    """
    a = _as_matrix(x, "cka first input")
    b = _as_matrix(y, "cka second input")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"cka row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError(f"cka needs at least 2 rows, got {a.shape[0]}")
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    denom = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if denom == 0.0:
        warnings.warn("cka: zero-variance input; returning 0.0")
        return 0.0
    return float(np.linalg.norm(b.T @ a) ** 2 / denom)


def mean_offdiag(matrix) -> float:
    """Mean of the off-diagonal entries of a square similarity matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = m.shape[0]
    if n < 2:
        raise ValueError("off-diagonal mean needs a matrix of size >= 2")
    return float((m.sum() - np.trace(m)) / (n * (n - 1)))


@dataclass
class RepresentationSnapshot:
    """Per-loop-step token states h^(0)..h^(M) of one prompt, each [T, d]."""

    states: list  # M+1 float64 matrices sharing (T, d)
    prompt_id: int
    trajectory: Trajectory

    def __post_init__(self) -> None:
        if len(self.states) != self.trajectory.budget + 1:
            raise ValueError(
                f"expected {self.trajectory.budget + 1} step matrices, got {len(self.states)}"
            )
        shapes = {s.shape for s in self.states}
        if len(shapes) != 1:
            raise ValueError(f"step matrices disagree on shape: {sorted(shapes)}")


@dataclass
class MetricSeries:
    """One diagnostic aggregated over prompts.

    `values` is a length-(M+1) vector for per-step metrics or an
    (M+1)×(M+1) matrix for CKA; `times` is the normalized depth axis
    t_0=0..t_M=1 of the trajectory the snapshots were collected under.
    """

    name: str
    values: np.ndarray
    times: tuple = field(default_factory=tuple)


def collect_snapshots(model, prompts, trajectory: Trajectory, tail_tokens: int = 64):
    """Run the model on each prompt and retain all per-step hidden states.

    `prompts` is a sequence of 1-D token-id arrays (or a 2-D [P, T] array).
    Only the last `tail_tokens` positions are kept, avoiding early-position
    artifacts where little context exists. Returns one RepresentationSnapshot
    per prompt.
    """
    if tail_tokens < 2:
        raise ValueError(f"tail_tokens must be >= 2, got {tail_tokens}")
    if isinstance(prompts, np.ndarray) and prompts.ndim == 2:
        prompts = list(prompts)
    snapshots = []
    for pid, ids in enumerate(prompts):
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise ValueError(f"prompt {pid} must be 1-D, got shape {ids.shape}")
        ids = ids[-model.config.context_length :]
        if ids.size < 2:
            raise ValueError(f"prompt {pid} too short: {ids.size} token(s)")
        with T.no_grad():
            hiddens, _ = model.forward(ids[None, :], trajectory, keep_hiddens=True)
        tail = min(tail_tokens, ids.size)
        states = [h.data[0, -tail:, :].astype(np.float64) for h in hiddens]
        snapshots.append(RepresentationSnapshot(states, pid, trajectory))
    return snapshots


def report(snapshots) -> dict:
    """Compute all four metrics per loop step, averaged over prompts.

    Returns {"anisotropy", "curvature", "entropy"} as length-(M+1) series and
    "cka" as a symmetric (M+1)×(M+1) matrix with unit diagonal comparing the
    states at every pair of loop steps.
    """
    if not snapshots:
        raise ValueError("no snapshots to report on")
    traj = snapshots[0].trajectory
    n_steps = traj.budget + 1
    for snap in snapshots:
        if snap.trajectory.budget != traj.budget:
            raise ValueError("snapshots mix different budgets")
    aniso = np.zeros(n_steps)
    curv = np.zeros(n_steps)
    entropy = np.zeros(n_steps)
    cka_mat = np.zeros((n_steps, n_steps))
    for snap in snapshots:
        for s, h in enumerate(snap.states):
            aniso[s] += anisotropy(h)
            curv[s] += curvature(h)
            entropy[s] += prompt_entropy(h)
        for i in range(n_steps):
            cka_mat[i, i] += 1.0
            for j in range(i + 1, n_steps):
                v = cka(snap.states[i], snap.states[j])
                cka_mat[i, j] += v
                cka_mat[j, i] += v
    n = len(snapshots)
    times = traj.times
    return {
        "anisotropy": MetricSeries("anisotropy", aniso / n, times),
        "curvature": MetricSeries("curvature", curv / n, times),
        "entropy": MetricSeries("entropy", entropy / n, times),
        "cka": MetricSeries("cka", cka_mat / n, times),
    }


def write_metrics_csv(path, series: dict) -> None:
    """Write the per-step metrics as CSV columns step, t, anisotropy, curvature, entropy."""
    aniso = series["anisotropy"]
    n_steps = len(aniso.values)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "t", "anisotropy", "curvature", "entropy"])
        for s in range(n_steps):
            writer.writerow(
                [
                    s,
                    f"{aniso.times[s]:.6g}",
                    f"{aniso.values[s]:.8g}",
                    f"{series['curvature'].values[s]:.8g}",
                    f"{series['entropy'].values[s]:.8g}",
                ]
            )


def write_cka_csv(path, series: MetricSeries) -> None:
    """Write the step×step CKA matrix as CSV with a leading step column."""
    mat = np.asarray(series.values)
    n_steps = mat.shape[0]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step"] + [f"cka_{j}" for j in range(n_steps)])
        for i in range(n_steps):
            writer.writerow([i] + [f"{mat[i, j]:.8g}" for j in range(n_steps)])
