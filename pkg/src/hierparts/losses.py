"""Training objectives as numpy kernels returning ``(value, gradient)``.

Nothing here trains a network; the kernels exist so the objectives can be
evaluated on stored score/embedding fields and checked against finite
differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from ._validation import check_embeddings, check_labels

# Level-weight presets (alpha_1, alpha_2, alpha_3) for the multi-level CE objective.
ALPHA_PRESETS = {
    "base-coarse": (1.0, 0.0, 0.0),
    "base-middle": (0.0, 1.0, 0.0),
    "base-fine": (0.0, 0.0, 1.0),
    "mtt-12": (0.5, 0.5, 0.0),
    "mtt-123-coarse": (0.7, 0.2, 0.1),
    "mtt-123-fine": (0.1, 0.2, 0.7),
}


def parse_alpha(text: str) -> tuple[float, ...]:
    if text in ALPHA_PRESETS:
        return ALPHA_PRESETS[text]
    alpha = tuple(float(v) for v in text.split(","))
    if any(a < 0 for a in alpha) or not any(a > 0 for a in alpha):
        raise ValueError("level weights must be non-negative with at least one positive")
    return alpha


@dataclass(frozen=True)
class DiscriminativeParams:
    delta_v: float = 0.5
    delta_d: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.001

    def __post_init__(self):
        vals = (self.delta_v, self.delta_d, self.alpha, self.beta, self.gamma)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("discriminative parameters must be finite and non-negative")


@dataclass(frozen=True)
class SepParams:
    alpha_intra: float = 1.0
    alpha_inter: float = 1.0
    alpha_reg: float = 1e-3
    alpha_sep: float = 1e-3
    delta: float = 0.5
    reduction: str = "mean"

    def __post_init__(self):
        vals = (self.alpha_intra, self.alpha_inter, self.alpha_reg, self.alpha_sep, self.delta)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("separation parameters must be finite and non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


def inverse_frequency_weights(labels, n_classes: int, clamp=(0.1, 10.0)) -> np.ndarray:
    """Class weights ``N / (C * n_c)`` clamped and rescaled to mean 1.

    ``labels`` are 1-based class indices (0 ignored). The mean is taken over
    classes that occur; absent classes get weight 1.
    """
    labels = check_labels(labels)
    counts = np.bincount(labels[labels > 0] - 1, minlength=n_classes)[:n_classes].astype(float)
    w = np.ones(n_classes)
    present = counts > 0
    if not present.any():
        return w
    raw = counts[present].sum() / (present.sum() * counts[present])
    raw = np.clip(raw, *clamp)
    w[present] = raw / raw.mean()
    return w


def weighted_cross_entropy(scores: Sequence, labels: Sequence, alpha: Sequence[float],
                           class_weights: Sequence | None = None):
    """Level-weighted sum of (class-weighted) softmax cross-entropies.

    ``scores[k]`` holds logits of shape ``(N, C_k)``; ``labels[k]`` holds
    1-based class indices with 0 meaning "ignore". Each level contributes
    ``alpha[k]`` times the mean over its labeled voxels of
    ``w[y] * -log softmax(z)[y]``.

    Returns ``(loss, grads)`` with one gradient array per level.
    """
    if not (len(scores) == len(labels) == len(alpha)):
        raise ValueError("scores, labels and alpha must have one entry per level")
    total = 0.0
    grads = []
    for k, (z, y, a) in enumerate(zip(scores, labels, alpha)):
        z = np.asarray(z, dtype=float)
        y = check_labels(y, n=len(z), name=f"labels[{k}]")
        C = z.shape[1]
        if y.size and (y.min() < 0 or y.max() > C):
            raise ValueError(f"labels[{k}] outside 0..{C}")
        w = np.ones(C) if class_weights is None or class_weights[k] is None \
            else np.asarray(class_weights[k], dtype=float)
        grad = np.zeros_like(z)
        mask = y > 0
        n = int(mask.sum())
        if n and a != 0:
            zl, yl = z[mask], y[mask] - 1
            logp = log_softmax(zl, axis=1)
            wy = w[yl]
            total += a * float(np.sum(-wy * logp[np.arange(n), yl])) / n
            g = softmax(zl, axis=1)
            g[np.arange(n), yl] -= 1.0
            grad[mask] = (a / n) * wy[:, None] * g
        grads.append(grad)
    return total, grads


def _groups(instance_ids):
    ids, inv, counts = np.unique(instance_ids, return_inverse=True, return_counts=True)
    return ids, inv, counts


def discriminative_loss(emb, instance_ids, params: DiscriminativeParams | None = None):
    """Pull / push / regularisation embedding loss.

    ``emb`` is ``(N, D)``; ``instance_ids`` holds a positive id per row.
    Returns ``(loss, {"pull", "push", "reg"}, grad)``. With a single
    instance the push term is 0. Hinge kinks take the zero subgradient.
    """
    p = params or DiscriminativeParams()
    e = check_embeddings(emb)
    ids_arr = check_labels(instance_ids, n=len(e), name="instance_ids")
    if np.any(ids_arr <= 0):
        raise ValueError("instance ids must be positive")
    ids, inv, counts = _groups(ids_arr)
    K = len(ids)
    sums = np.zeros((K, e.shape[1]))
    np.add.at(sums, inv, e)
    mu = sums / counts[:, None]

    diff = e - mu[inv]
    dist = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(dist - p.delta_v, 0.0)
    per_k = np.bincount(inv, weights=hinge ** 2, minlength=K)
    pull = float(np.mean(per_k / counts))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    g = (2.0 * hinge / (K * counts[inv]))[:, None] * unit
    gsum = np.zeros_like(mu)
    np.add.at(gsum, inv, g)
    grad_pull = g - gsum[inv] / counts[inv][:, None]

    dmu = np.zeros_like(mu)
    push = 0.0
    if K > 1:
        pair = mu[:, None, :] - mu[None, :, :]
        pd = np.linalg.norm(pair, axis=2)
        ph = np.maximum(2.0 * p.delta_d - pd, 0.0)
        np.fill_diagonal(ph, 0.0)
        push = float(np.sum(ph ** 2) / (K * (K - 1)))
        with np.errstate(invalid="ignore", divide="ignore"):
            pu = np.where(pd[:, :, None] > 0, pair / pd[:, :, None], 0.0)
        dmu += p.beta * (-4.0 / (K * (K - 1))) * np.einsum("km,kmd->kd", ph, pu)

    norms = np.linalg.norm(mu, axis=1)
    reg = float(np.mean(norms))
    with np.errstate(invalid="ignore", divide="ignore"):
        dmu += p.gamma * np.where(norms[:, None] > 0, mu / norms[:, None], 0.0) / K

    grad = p.alpha * grad_pull + (dmu / counts[:, None])[inv]
    loss = p.alpha * pull + p.beta * push + p.gamma * reg
    return loss, {"pull": pull, "push": push, "reg": reg}, grad


def separation_loss(fg_parts: Sequence, bg, delta: float, reduction: str = "mean"):
    """Foreground/background separation hinge in the L1 metric.

    For each part with mean embedding ``mu`` and L1 radius
    ``R = max_i |x_i - mu|_1``, the part contributes the mean over
    background rows ``b`` of ``[R - |b - mu|_1 + delta]_+``. Parts are
    averaged (``reduction="mean"``) or summed.

    Returns ``(loss, (fg_grads, bg_grad))``.
    """
    parts = [check_embeddings(x, name="fg part") for x in fg_parts]
    bg = check_embeddings(bg, name="bg", allow_empty=True)
    if parts:
        bg = bg.reshape(-1, parts[0].shape[1])
    fg_grads = [np.zeros_like(x) for x in parts]
    bg_grad = np.zeros_like(bg)
    M = len(bg)
    if M == 0 or not parts:
        return 0.0, (fg_grads, bg_grad)
    scale = 1.0 / len(parts) if reduction == "mean" else 1.0
    total = 0.0
    for x, gx in zip(parts, fg_grads):
        N = len(x)
        mu = x.mean(axis=0)
        r = np.abs(x - mu).sum(axis=1)
        star = int(np.argmax(r))
        off_star = x[star] - mu
        off_bg = bg - mu
        # |p-m| - |q-m| == sign * (p-q) when both offsets share a sign; using
        # that form keeps rounding in mu out of the value.
        same = np.sign(off_bg) == np.sign(off_star)
        terms = np.where(same, np.sign(off_star) * (x[star] - bg), np.abs(off_star) - np.abs(off_bg))
        a = terms.sum(axis=1) + delta
        act = a > 0
        n_act = int(act.sum())
        total += scale * float(a[act].sum()) / M
        if n_act == 0:
            continue
        sgn_star = np.sign(x[star] - mu)
        sgn_bg = np.sign(bg[act] - mu)
        bg_grad[act] -= scale * sgn_bg / M
        dR = scale * n_act / M
        gx[star] += dR * sgn_star
        dmu = -dR * sgn_star + scale * sgn_bg.sum(axis=0) / M
        gx += dmu / N
    return total, (fg_grads, bg_grad)


def instance_total_loss(emb, instance_ids, bg=None, d_params: DiscriminativeParams | None = None,
                        s_params: SepParams | None = None):
    """Weighted intra / inter / reg / sep objective for part instances.

    Foreground parts are the rows of ``emb`` grouped by ``instance_ids``;
    ``bg`` holds background embeddings. The intra, inter and reg terms are
    the pull, push and reg terms of :func:`discriminative_loss` (margins
    from ``d_params``), the sep term is :func:`separation_loss`.

    Returns ``(loss, components, (grad_emb, grad_bg))``.
    """
    d = d_params or DiscriminativeParams()
    s = s_params or SepParams()
    e = check_embeddings(emb)
    ids = check_labels(instance_ids, n=len(e), name="instance_ids")
    bg = np.zeros((0, e.shape[1])) if bg is None else check_embeddings(bg, allow_empty=True).reshape(-1, e.shape[1])

    weighted = DiscriminativeParams(d.delta_v, d.delta_d, s.alpha_intra, s.alpha_inter, s.alpha_reg)
    disc, comp, grad_emb = discriminative_loss(e, ids, weighted)

    uniq = np.unique(ids)
    rows = [np.flatnonzero(ids == i) for i in uniq]
    sep, (fg_grads, grad_bg) = separation_loss([e[r] for r in rows], bg, s.delta, s.reduction)
    for r, g in zip(rows, fg_grads):
        grad_emb[r] += s.alpha_sep * g
    grad_bg = s.alpha_sep * grad_bg

    components = {"intra": comp["pull"], "inter": comp["push"], "reg": comp["reg"], "sep": sep}
    return disc + s.alpha_sep * sep, components, (grad_emb, grad_bg)


def grad_check(f: Callable, x, eps: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    ``f(x)`` must return ``(value, grad)`` with ``grad`` shaped like ``x``;
    the numeric gradient uses central differences.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=float)
    value, grad = f(x)
    if not np.isfinite(value):
        raise ValueError("kernel returned a non-finite value")
    grad = np.asarray(grad, dtype=float).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)[0]
        flat[i] = old - eps
        fm = f(x)[0]
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("kernel returned a non-finite value")
        num = (fp - fm) / (2.0 * eps)
        ana = grad.reshape(-1)[i]
        err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
        worst = max(worst, err)
    return worst
