"""Path similarity and the path-discrimination loss.

A sample's hierarchy of projected vectors is scored against a prototype path
level by level: each cosine is mapped to ``(1 + cos) / 2`` in ``[0, 1]`` and
the per-level scores multiply into one path similarity, also in ``[0, 1]``.
The loss treats the positive path as class 1 and each sampled negative path
as class 0, binary-cross-entropy style, averaging the negative terms so the
two sides stay balanced regardless of how many negatives are drawn:

    loss = mean_i [ -log s_plus_i - (1/K) * sum_k log(1 - s_minus_ik) ]

Similarities are clamped to ``[eps, 1 - eps]`` before the logs; a clamped
similarity contributes zero gradient. All math runs in float64 regardless
of input dtype, and gradients flow to the projected vectors only; prototype
paths are constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MathError, ShapeError

DEFAULT_EPS = 1e-7


@dataclass
class HierRep:
    """Per-sample vectors: ``z0`` is the raw encoding, ``z`` one row per level."""

    z0: np.ndarray
    z: np.ndarray


@dataclass
class SpdBatchLoss:
    loss: float
    grad_z: np.ndarray
    pos_scores: np.ndarray
    neg_scores: list


@dataclass
class GradCheckReport:
    trials: int
    max_rel_error: float
    tolerance: float
    step: float
    passed: bool
    worst: dict = field(default_factory=dict)


def _normalize_rows(x, what):
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise MathError(f"zero-norm vector in {what}")
    return x / norms, norms


def _loo_products(a, axis):
    """Leave-one-out products along ``axis`` without dividing by zero factors."""
    a = np.moveaxis(a, axis, -1)
    ones = np.ones(a.shape[:-1] + (1,), dtype=a.dtype)
    prefix = np.concatenate([ones, np.cumprod(a[..., :-1], axis=-1)], axis=-1)
    rev = np.cumprod(a[..., ::-1], axis=-1)[..., ::-1]
    suffix = np.concatenate([rev[..., 1:], ones], axis=-1)
    return np.moveaxis(prefix * suffix, -1, axis)


def path_similarity(rep, path):
    """Similarity of one sample's level vectors to one prototype path."""
    z = np.asarray(rep.z, dtype=np.float64)
    c = np.asarray(path.vectors, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"rep.z must be (L, d), got shape {z.shape}")
    if c.shape != z.shape:
        raise ShapeError(f"path vectors {c.shape} do not match rep {z.shape}")
    zn, _ = _normalize_rows(z, "rep.z")
    cn, _ = _normalize_rows(c, "path vectors")
    cos = np.clip((zn * cn).sum(axis=1), -1.0, 1.0)
    return float(np.clip((1.0 + cos) / 2.0, 0.0, 1.0).prod())


def spd_loss_core(z, pos_vecs, neg_vecs, eps=DEFAULT_EPS):
    """Array form of the loss.

    ``z``: (B, L, d) projected vectors. ``pos_vecs``: (B, L, d) positive path
    per sample. ``neg_vecs``: (B, K, L, d) negative paths. Returns
    ``(loss, grad_z, pos_scores, neg_scores)`` where ``grad_z`` is the
    gradient of the returned batch-mean loss, shape (B, L, d), float64.
    """
    if not (0.0 < eps < 0.5):
        raise ConfigError(f"eps must lie in (0, 0.5), got {eps}")
    z = np.asarray(z, dtype=np.float64)
    cp = np.asarray(pos_vecs, dtype=np.float64)
    cn = np.asarray(neg_vecs, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"z must be (B, L, d), got shape {z.shape}")
    b, L, d = z.shape
    if cp.shape != (b, L, d):
        raise ShapeError(f"pos_vecs must be {(b, L, d)}, got {cp.shape}")
    if cn.ndim != 4 or cn.shape[0] != b or cn.shape[2:] != (L, d):
        raise ShapeError(f"neg_vecs must be (B, K, L, d) = ({b}, K, {L}, {d}), got {cn.shape}")
    k = cn.shape[1]
    if k < 1:
        raise ConfigError("each sample needs at least one negative path")
    if not (np.isfinite(z).all() and np.isfinite(cp).all() and np.isfinite(cn).all()):
        raise MathError("non-finite input to the loss")

    zn, znorm = _normalize_rows(z, "z")
    pn, _ = _normalize_rows(cp, "positive paths")
    nn, _ = _normalize_rows(cn, "negative paths")

    cos_p = np.clip((zn * pn).sum(-1), -1.0, 1.0)              # (B, L)
    cos_n = np.clip((zn[:, None] * nn).sum(-1), -1.0, 1.0)     # (B, K, L)
    a_p = (1.0 + cos_p) / 2.0
    a_n = (1.0 + cos_n) / 2.0
    s_p = a_p.prod(axis=1)                                     # (B,)
    s_n = a_n.prod(axis=2)                                     # (B, K)

    s_p_cl = np.clip(s_p, eps, 1.0 - eps)
    s_n_cl = np.clip(s_n, eps, 1.0 - eps)
    live_p = (s_p > eps) & (s_p < 1.0 - eps)
    live_n = (s_n > eps) & (s_n < 1.0 - eps)

    per_sample = -np.log(s_p_cl) - np.log1p(-s_n_cl).mean(axis=1)
    loss = float(per_sample.mean())

    # d cos / d z = (c_hat - cos * z_hat) / ||z||; d a / d z halves that.
    dcos_p = (pn - cos_p[..., None] * zn) / znorm              # (B, L, d)
    dcos_n = (nn - cos_n[..., None] * zn[:, None]) / znorm[:, None]

    loo_p = _loo_products(a_p, axis=1)                         # (B, L)
    loo_n = _loo_products(a_n, axis=2)                         # (B, K, L)

    w_p = np.where(live_p, -1.0 / s_p_cl, 0.0)                 # (B,)
    w_n = np.where(live_n, 1.0 / (1.0 - s_n_cl), 0.0) / k      # (B, K)

    grad = (w_p[:, None] * loo_p)[..., None] * dcos_p / 2.0
    grad += ((w_n[..., None] * loo_n)[..., None] * dcos_n / 2.0).sum(axis=1)
    grad /= b
    return loss, grad, s_p, s_n


def spd_loss(reps, pos, negs, eps=DEFAULT_EPS):
    """Object form over batches of :class:`HierRep` and ``SemanticPath``.

    ``negs`` holds one list of negative paths per sample; lists may differ in
    length. Returns an :class:`SpdBatchLoss` whose ``grad_z`` stacks the
    per-sample gradients of the batch-mean loss.
    """
    b = len(reps)
    if b < 1 or len(pos) != b or len(negs) != b:
        raise ConfigError(
            f"batch sizes disagree: {b} reps, {len(pos)} positives, {len(negs)} negative lists"
        )
    sizes = {len(group) for group in negs}
    if min(sizes, default=0) < 1:
        raise ConfigError("each sample needs at least one negative path")

    def stack(idx):
        z = np.stack([np.asarray(reps[i].z, dtype=np.float64) for i in idx])
        p = np.stack([np.asarray(pos[i].vectors, dtype=np.float64) for i in idx])
        n = np.stack(
            [
                np.stack([np.asarray(sp.vectors, dtype=np.float64) for sp in negs[i]])
                for i in idx
            ]
        )
        return z, p, n

    if len(sizes) == 1:
        z, p, n = stack(range(b))
        loss, grad, s_p, s_n = spd_loss_core(z, p, n, eps=eps)
        return SpdBatchLoss(
            loss=loss, grad_z=grad, pos_scores=s_p, neg_scores=list(s_n)
        )

    # ragged negative counts: per-sample passes, averaged
    losses = []
    grads = []
    pos_scores = []
    neg_scores = []
    for i in range(b):
        z, p, n = stack([i])
        loss_i, grad_i, s_p, s_n = spd_loss_core(z, p, n, eps=eps)
        losses.append(loss_i)
        grads.append(grad_i[0])
        pos_scores.append(s_p[0])
        neg_scores.append(s_n[0])
    loss = float(np.mean(losses))
    grad = np.stack(grads) / b
    return SpdBatchLoss(
        loss=loss,
        grad_z=grad,
        pos_scores=np.asarray(pos_scores),
        neg_scores=neg_scores,
    )


def finite_difference_grad(z, pos_vecs, neg_vecs, eps=DEFAULT_EPS, step=1e-5):
    """Central-difference gradient of the batch-mean loss, entry by entry.

    Differentiates only the forward loss value, so it stays independent of
    the analytic gradient path it is used to check.
    """
    z = np.asarray(z, dtype=np.float64)
    grad = np.zeros_like(z)
    it = np.nditer(z, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        zp = z.copy()
        zp[idx] += step
        lp, _, _, _ = spd_loss_core(zp, pos_vecs, neg_vecs, eps=eps)
        zm = z.copy()
        zm[idx] -= step
        lm, _, _, _ = spd_loss_core(zm, pos_vecs, neg_vecs, eps=eps)
        grad[idx] = (lp - lm) / (2.0 * step)
        it.iternext()
    return grad


def spd_grad_check(
    trials=100,
    levels=(1, 2, 3),
    dims=(4, 8, 16),
    neg_counts=(1, 8),
    tolerance=1e-4,
    step=1e-5,
    seed=0,
):
    """Compare analytic gradients against central differences on random inputs.

    Each trial draws a random configuration (level count, width, negative
    count, batch of 1..3) and standard-normal vectors. The reported error is
    ``|analytic - fd| / max(1, |analytic|, |fd|)``, maximized over entries
    and trials. ``tolerance = 0`` can never pass in floating point.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst = {}
    start = time.perf_counter()
    for t in range(trials):
        L = int(rng.choice(list(levels)))
        d = int(rng.choice(list(dims)))
        k = int(rng.choice(list(neg_counts)))
        b = int(rng.integers(1, 4))
        z = rng.standard_normal((b, L, d))
        cp = rng.standard_normal((b, L, d))
        cn = rng.standard_normal((b, k, L, d))
        _, analytic, _, _ = spd_loss_core(z, cp, cn)
        fd = finite_difference_grad(z, cp, cn, step=step)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
        err = float((np.abs(analytic - fd) / denom).max())
        if err > max_err:
            max_err = err
            worst = {"trial": t, "levels": L, "dim": d, "negatives": k, "batch": b}
    elapsed = time.perf_counter() - start
    worst["seconds"] = elapsed
    return GradCheckReport(
        trials=trials,
        max_rel_error=max_err,
        tolerance=tolerance,
        step=step,
        passed=bool(max_err <= tolerance),
        worst=worst,
    )
