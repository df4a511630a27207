"""Independent numeric oracles shared across the test suite.

Everything here recomputes quantities from first principles (finite
differences, brute-force enumeration, direct formula evaluation) without
touching the library's own code paths.
"""

import numpy as np

from loopformer import tensor as T


def finite_diff_grads(loss_fn, params, h=1e-3):
    """Central-difference gradients of a scalar loss_fn() w.r.t. each tensor.

    loss_fn is re-evaluated with individual entries of each parameter's
    data perturbed in place; it must not cache state between calls.
    """
    grads = {}
    with T.no_grad():
        for name, p in params.items():
            g = np.zeros(p.data.shape, dtype=np.float64)
            flat = p.data.ravel()
            gflat = g.ravel()
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_fn()
                flat[i] = old - h
                fm = loss_fn()
                flat[i] = old
                gflat[i] = (fp - fm) / (2.0 * h)
            grads[name] = g
    return grads


def max_rel_err(analytic, numeric, atol=1e-6):
    """max over entries of |a-n| / max(atol/rtol-floor, |a|, |n|) style error.

    Returns the largest ratio |a-n| / max(|a|, |n|) over entries where the
    absolute difference exceeds atol; 0.0 if none do.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    mask = diff > atol
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(diff[mask] / denom))


def brute_force_attention(x, w_qkv, b_qkv, w_o, b_o, n_heads):
    """Single-sequence causal attention computed position by position.

    x: [T, d] numpy. Returns [T, d]. Used to cross-check the vectorized
    block implementation.
    """
    t_len, d = x.shape
    dh = d // n_heads
    qkv = x @ w_qkv + b_qkv
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    out = np.zeros_like(x)
    for h in range(n_heads):
        qh = q[:, h * dh : (h + 1) * dh]
        kh = k[:, h * dh : (h + 1) * dh]
        vh = v[:, h * dh : (h + 1) * dh]
        for i in range(t_len):
            scores = np.array([qh[i] @ kh[j] / np.sqrt(dh) for j in range(i + 1)])
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[i, h * dh : (h + 1) * dh] = sum(w[j] * vh[j] for j in range(i + 1))
    return out @ w_o + b_o


def count_compositions(total, parts):
    """Number of ways to write `total` as an ordered sum of `parts` positive
    integers, by explicit recursion."""
    if parts == 1:
        return 1 if total >= 1 else 0
    return sum(count_compositions(total - first, parts - 1) for first in range(1, total - parts + 2))


def enumerate_compositions(total, parts):
    """All ordered positive-integer compositions, recursively."""
    if parts == 1:
        return [(total,)] if total >= 1 else []
    out = []
    for first in range(1, total - parts + 2):
        out.extend((first,) + rest for rest in enumerate_compositions(total - first, parts - 1))
    return out


def anisotropy_direct(h):
    """Mean pairwise cosine over i<j, straight from the definition."""
    rows = [r for r in h if np.linalg.norm(r) > 0]
    vals = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            vals.append(rows[i] @ rows[j] / (np.linalg.norm(rows[i]) * np.linalg.norm(rows[j])))
    return float(np.mean(vals))


def curvature_direct(h):
    """Mean angle between consecutive token-position differences."""
    diffs = [h[i + 1] - h[i] for i in range(len(h) - 1)]
    diffs = [d for d in diffs if np.linalg.norm(d) > 0]
    angles = []
    for a, b in zip(diffs[:-1], diffs[1:]):
        c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
    return float(np.mean(angles))


def prompt_entropy_direct(h):
    """Normalized von Neumann entropy of the trace-normalized Gram matrix."""
    k = h @ h.T
    tr = np.trace(k)
    if tr == 0:
        return 0.0
    lam = np.linalg.eigvalsh(k / tr)
    lam = lam[lam > 1e-15]
    return float(-(lam * np.log(lam)).sum() / np.log(h.shape[0]))


def cka_direct(x, y):
    """Linear CKA via explicitly centered kernels: HSIC/sqrt(HSIC*HSIC)."""
    n = x.shape[0]
    hmat = np.eye(n) - np.ones((n, n)) / n
    kx = hmat @ (x @ x.T) @ hmat
    ky = hmat @ (y @ y.T) @ hmat
    num = np.sum(kx * ky)
    den = np.sqrt(np.sum(kx * kx) * np.sum(ky * ky))
    if den == 0:
        return 0.0
    return float(num / den)
