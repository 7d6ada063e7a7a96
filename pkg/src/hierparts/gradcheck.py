"""Finite-difference checks of the loss kernels on random, kink-free inputs.

Hinges, L1 norms and the radius max are only piecewise smooth. Random
cases are built so every such switch sits at least ``MARGIN`` away from the
sampled point; a central difference with step ``eps`` well below the margin
then never straddles a kink.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import (DiscriminativeParams, SepParams, discriminative_loss, grad_check,
                     instance_total_loss, separation_loss, weighted_cross_entropy)

MARGIN = 1e-2
DIMS = (2, 8, 32)
KS = (1, 2, 5)
KERNELS = ("cross_entropy", "discriminative", "separation", "total")
# the separation term is piecewise linear, so a wider step is exact and keeps
# round-off in the numeric derivative well below the tolerance
STEPS = {"cross_entropy": 1e-4, "discriminative": 1e-4, "separation": 1e-3, "total": 1e-4}


@dataclass
class Case:
    dim: int
    k: int
    emb: np.ndarray
    ids: np.ndarray
    bg: np.ndarray


def _part_offsets(rng, n, dim):
    """``n`` offsets summing to zero, every component at least 0.1 from 0."""
    o = rng.uniform(0.2, 0.6, size=(n - 1, dim)) * rng.choice([-1.0, 1.0], size=(n - 1, dim))
    last = -o.sum(axis=0)
    for d in np.flatnonzero(np.abs(last) < 0.1):
        o[0, d] = -o[0, d]
        last[d] = -o[:, d].sum()
    return np.vstack([o, last])


def _margins_ok(case: Case, d: DiscriminativeParams, delta_sep: float) -> bool:
    ids, e = case.ids, case.emb
    mus = []
    for i in np.unique(ids):
        x = e[ids == i]
        mu = x.mean(axis=0)
        mus.append(mu)
        off = x - mu
        if np.min(np.abs(off)) < MARGIN:
            return False
        if np.min(np.abs(np.linalg.norm(off, axis=1) - d.delta_v)) < MARGIN:
            return False
        l1 = np.sort(np.abs(off).sum(axis=1))
        if len(l1) > 1 and l1[-1] - l1[-2] < MARGIN:
            return False
        boff = case.bg - mu
        if np.min(np.abs(boff)) < MARGIN:
            return False
        hinge = l1[-1] - np.abs(boff).sum(axis=1) + delta_sep
        if np.min(np.abs(hinge)) < MARGIN:
            return False
    mus = np.array(mus)
    if len(mus) > 1:
        pd = np.linalg.norm(mus[:, None] - mus[None], axis=2)[np.triu_indices(len(mus), 1)]
        if np.min(pd) < MARGIN or np.min(np.abs(pd - 2 * d.delta_d)) < MARGIN:
            return False
    return bool(np.min(np.linalg.norm(mus, axis=1)) >= MARGIN)


def random_case(seed: int, dim: int, k: int, d_params: DiscriminativeParams | None = None,
                s_params: SepParams | None = None, max_tries: int = 200) -> Case:
    """Embeddings for ``k`` parts of 3-4 points each plus 4 background rows.

    Part means sit on the half-integer lattice and background coordinates
    near integers, so L1 offsets never vanish.
    """
    d = d_params or DiscriminativeParams()
    s = s_params or SepParams()
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(max_tries):
        rows, ids = [], []
        for part in range(1, k + 1):
            n = int(rng.integers(3, 5))
            mu = rng.integers(-2, 2, size=dim) + 0.5
            rows.append(mu + _part_offsets(rng, n, dim))
            ids += [part] * n
        bg = rng.integers(-2, 3, size=(4, dim)) + rng.uniform(-0.3, 0.3, size=(4, dim))
        case = Case(dim, k, np.vstack(rows), np.array(ids, dtype=np.int64), bg)
        if _margins_ok(case, d, s.delta):
            return case
    raise RuntimeError(f"no kink-free case found for seed {seed}")


def check_kernel(name: str, case: Case, seed: int) -> float:
    """Max relative error of one kernel's analytic gradient on ``case``."""
    eps = STEPS[name]
    if name == "cross_entropy":
        rng = np.random.Generator(np.random.PCG64(seed))
        n = 6 + case.k
        sizes = (max(2, case.k), max(2, case.dim // 2), case.dim)
        scores = [rng.normal(size=(n, c)) for c in sizes]
        labels = [rng.integers(0, c + 1, size=n) for c in sizes]
        alpha = (0.1, 0.2, 0.7)
        weights = [rng.uniform(0.5, 2.0, size=c) for c in sizes]
        flat = np.concatenate([s.ravel() for s in scores])
        splits = np.cumsum([s.size for s in scores])[:-1]

        def f(x):
            parts = [p.reshape(n, c) for p, c in zip(np.split(x, splits), sizes)]
            loss, grads = weighted_cross_entropy(parts, labels, alpha, weights)
            return loss, np.concatenate([g.ravel() for g in grads])
        return grad_check(f, flat, eps)

    if name == "discriminative":
        return grad_check(lambda x: (lambda r: (r[0], r[2]))(discriminative_loss(x, case.ids)), case.emb, eps)

    parts_rows = [np.flatnonzero(case.ids == i) for i in np.unique(case.ids)]
    n_fg = len(case.emb)

    def unpack(x):
        x = x.reshape(-1, case.dim)
        return x[:n_fg], x[n_fg:]

    stacked = np.vstack([case.emb, case.bg])
    if name == "separation":
        def f(x):
            e, bg = unpack(x)
            loss, (fg_g, bg_g) = separation_loss([e[r] for r in parts_rows], bg, SepParams().delta)
            g = np.zeros_like(e)
            for r, gr in zip(parts_rows, fg_g):
                g[r] = gr
            return loss, np.vstack([g, bg_g])
        return grad_check(f, stacked, eps)

    if name == "total":
        def f(x):
            e, bg = unpack(x)
            loss, _, (ge, gb) = instance_total_loss(e, case.ids, bg)
            return loss, np.vstack([ge, gb])
        return grad_check(f, stacked, eps)
    raise ValueError(f"unknown kernel {name!r}")


def gradient_suite(seeds: int = 20, start: int = 0, kernels=KERNELS) -> dict[str, list[tuple]]:
    """Run every kernel on ``seeds`` cases cycling through all (D, K) pairs.

    Returns ``{kernel: [(seed, D, K, max_rel_err), ...]}``.
    """
    combos = [(d, k) for d in DIMS for k in KS]
    out: dict[str, list[tuple]] = {name: [] for name in kernels}
    for seed in range(start, start + seeds):
        dim, k = combos[seed % len(combos)]
        case = random_case(seed, dim, k)
        for name in kernels:
            out[name].append((seed, dim, k, check_kernel(name, case, seed)))
    return out
