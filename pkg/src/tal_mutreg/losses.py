"""Training objectives: per-phase cross-entropy, boundary SmoothL1, and the two
consistency regularizers (within a phase, and between phases)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class PairMasks:
    m_u: np.ndarray
    m_v: np.ndarray
    m_uv: np.ndarray
    n_u: int
    n_v: int
    n_uv: int


def pair_masks(g) -> PairMasks:
    """Masks over ordered pairs (i, j): both positive, both negative, positive->negative.

    The diagonal belongs to m_u / m_v; n_u + n_v + 2 * n_uv == T**2.
    """
    pos = np.asarray(g) > 0.5
    neg = ~pos
    m_u = np.outer(pos, pos).astype(np.float64)
    m_v = np.outer(neg, neg).astype(np.float64)
    m_uv = np.outer(pos, neg).astype(np.float64)
    return PairMasks(m_u, m_v, m_uv, int(m_u.sum()), int(m_v.sum()), int(m_uv.sum()))


def _check_lengths(*vectors):
    shapes = {np.shape(v.data if isinstance(v, Tensor) else v) for v in vectors}
    if len(shapes) != 1 or len(next(iter(shapes))) != 1:
        raise ShapeError(f"expected equal-length vectors, got shapes {sorted(shapes)}")


def intra_consistency(p, g) -> Tensor:
    """Pairwise l1 form over the full T x T adjacency matrix, O(T^2)."""
    _check_lengths(p, g)
    m = pair_masks(g)
    a = ad.pairwise_absdiff(p)
    loss = Tensor(0.0)
    if m.n_u:
        loss = loss + ad.sum(a * m.m_u) / m.n_u
    if m.n_v:
        loss = loss + ad.sum(a * m.m_v) / m.n_v
    if m.n_uv:
        loss = loss + (1.0 - ad.sum(a * m.m_uv) / m.n_uv)
    return loss


def _sign_counts(x, ref_sorted):
    """For each x_i: #(ref < x_i) - #(ref > x_i)."""
    less = np.searchsorted(ref_sorted, x, side="left")
    greater = len(ref_sorted) - np.searchsorted(ref_sorted, x, side="right")
    return (less - greater).astype(np.float64)


def intra_consistency_fast(p, g) -> Tensor:
    """Same value and subgradient as :func:`intra_consistency` in O(T log T).

    Uses sum_{i,j} |x_i - y_j| = sum_i x_i c_i - sum_j y_j d_j, where c_i and
    d_j count sign(x_i - y_j) over the other index; the counts are also the
    gradient since the function is piecewise linear.
    """
    _check_lengths(p, g)
    p = ad.as_tensor(p)
    pos = np.asarray(g) > 0.5
    u = p.data[pos]
    v = p.data[~pos]
    n_u, n_v, n_uv = len(u) ** 2, len(v) ** 2, len(u) * len(v)
    u_sorted, v_sorted = np.sort(u), np.sort(v)

    value = 0.0
    grad = np.zeros_like(p.data)
    if n_u:
        c = _sign_counts(u, u_sorted)
        value += 2.0 * np.dot(u, c) / n_u
        grad[pos] += 2.0 * c / n_u
    if n_v:
        c = _sign_counts(v, v_sorted)
        value += 2.0 * np.dot(v, c) / n_v
        grad[~pos] += 2.0 * c / n_v
    if n_uv:
        cu = _sign_counts(u, v_sorted)
        cv = _sign_counts(v, u_sorted)
        value += 1.0 - (np.dot(u, cu) + np.dot(v, cv)) / n_uv
        grad[pos] -= cu / n_uv
        grad[~pos] -= cv / n_uv

    def bw(gr):
        return (gr * grad,)

    if ad.kinks_active():
        d = p.data[:, None] - p.data[None, :]
        ad.note_kink(d[~np.eye(len(p.data), dtype=bool)])
    return ad.custom_op(np.asarray(value), (p,), bw, "intra_consistency_fast")


def inter_consistency(p_c, p_s, p_e) -> Tensor:
    """Mean l1 gap between the rise / drop of p_c and the start / end phases.

    The T-1 first differences p_c[t+1] - p_c[t] are compared with p_s[t] and
    p_e[t] for t = 0..T-2; the last start/end frame takes no part.
    """
    _check_lengths(p_c, p_s, p_e)
    p_c, p_s, p_e = ad.as_tensor(p_c), ad.as_tensor(p_s), ad.as_tensor(p_e)
    T = p_c.shape[0]
    if T < 2:
        raise ValueError("inter_consistency needs T >= 2")
    diff = p_c[1:] - p_c[:-1]
    rise = ad.max_with_zero(diff)
    drop = ad.neg_min_with_zero(diff)
    total = ad.sum(ad.absolute(rise - p_s[:-1])) + ad.sum(ad.absolute(drop - p_e[:-1]))
    return total / (T - 1)


def phase_cls_loss(p, g) -> Tensor:
    """Class-balanced binary cross-entropy: positive and negative frames weigh 1:1."""
    _check_lengths(p, g)
    g = np.asarray(g, dtype=np.float64)
    pc = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    n_pos = g.sum()
    n_neg = len(g) - n_pos
    loss = Tensor(0.0)
    if n_pos:
        loss = loss - ad.sum(ad.log(pc) * g) / n_pos
    if n_neg:
        loss = loss - ad.sum(ad.log(1.0 - pc) * (1.0 - g)) / n_neg
    return loss


def regression_loss(o_s_hat, o_e_hat, targets) -> Tensor:
    _check_lengths(o_s_hat, o_e_hat, targets.o_s, targets.o_e)
    loss = Tensor(0.0)
    for pred, target, mask in ((o_s_hat, targets.o_s, targets.mask_s), (o_e_hat, targets.o_e, targets.mask_e)):
        n = mask.sum()
        if n:
            loss = loss + ad.sum(ad.smooth_l1(ad.as_tensor(pred) - target) * mask) / n
    return loss


@dataclass(frozen=True)
class LossReport:
    """Per-window loss components. Components are unweighted; ``total`` is the
    weighted objective that was minimized."""

    cls_c: float
    cls_s: float
    cls_e: float
    cls: float
    reg: float
    intra_c: float
    intra_s: float
    intra_e: float
    intra: float
    inter: float
    total: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def mean(cls, reports):
        reports = list(reports)
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in cls.names()})


DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)


def total_loss(outputs, labels, targets, weights=DEFAULT_WEIGHTS, fast_intra=True):
    """Weighted objective w_cls*L_cls + w_reg*L_reg + w_intra*L_Intra + w_inter*L_Inter.

    Returns ``(loss_tensor, LossReport)``. Terms with weight 0 are evaluated
    outside the graph so they cost no backward work but still get reported.
    """
    if len(weights) != 4:
        raise ValueError(f"expected 4 loss weights, got {len(weights)}")
    w_cls, w_reg, w_intra, w_inter = (float(w) for w in weights)
    intra_fn = intra_consistency_fast if fast_intra else intra_consistency

    def maybe_detached(w, *xs):
        return xs if w else tuple(Tensor(ad.as_tensor(x).data) for x in xs)

    p_c, p_s, p_e = maybe_detached(w_cls, outputs.p_c, outputs.p_s, outputs.p_e)
    cls_terms = [phase_cls_loss(p, g) for p, g in ((p_c, labels.g_c), (p_s, labels.g_s), (p_e, labels.g_e))]
    o_s, o_e = maybe_detached(w_reg, outputs.o_s, outputs.o_e)
    reg = regression_loss(o_s, o_e, targets)
    p_c, p_s, p_e = maybe_detached(w_intra, outputs.p_c, outputs.p_s, outputs.p_e)
    intra_terms = [intra_fn(p, g) for p, g in ((p_c, labels.g_c), (p_s, labels.g_s), (p_e, labels.g_e))]
    p_c, p_s, p_e = maybe_detached(w_inter, outputs.p_c, outputs.p_s, outputs.p_e)
    inter = inter_consistency(p_c, p_s, p_e)

    cls = cls_terms[0] + cls_terms[1] + cls_terms[2]
    intra = intra_terms[0] + intra_terms[1] + intra_terms[2]
    total = Tensor(0.0)
    for w, term in ((w_cls, cls), (w_reg, reg), (w_intra, intra), (w_inter, inter)):
        if w:
            total = total + term * w

    report = LossReport(
        cls_c=cls_terms[0].item(),
        cls_s=cls_terms[1].item(),
        cls_e=cls_terms[2].item(),
        cls=cls.item(),
        reg=reg.item(),
        intra_c=intra_terms[0].item(),
        intra_s=intra_terms[1].item(),
        intra_e=intra_terms[2].item(),
        intra=intra.item(),
        inter=inter.item(),
        total=total.item(),
    )
    return total, report
