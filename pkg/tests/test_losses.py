import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tal_mutreg import autodiff as ad
from tal_mutreg import losses as L
from tal_mutreg.autodiff import ShapeError, Tensor
from tal_mutreg.labels import AnnotationSet, Instance, OffsetTargets, PhaseLabels, make_offset_targets, make_phase_labels
from tal_mutreg.model import PhaseOutputs

import oracles


@st.composite
def prob_label_pairs(draw, min_T=1, max_T=40):
    T = draw(st.integers(min_T, max_T))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, T), (rng.uniform(size=T) < draw(st.floats(0, 1))).astype(float)


def grad_of(fn, p):
    t = Tensor(p.copy(), requires_grad=True)
    ad.backward(fn(t))
    return t.grad if t.grad is not None else np.zeros_like(p)


# --- pair masks -----------------------------------------------------------------


@given(prob_label_pairs())
def test_pair_mask_counts(pg):
    _, g = pg
    m = L.pair_masks(g)
    T = len(g)
    assert m.n_u + m.n_v + 2 * m.n_uv == T * T
    pos = g > 0.5
    assert m.n_u == pos.sum() ** 2 and m.n_uv == pos.sum() * (~pos).sum()
    assert np.array_equal(m.m_uv, np.outer(pos, ~pos))


# --- intra-phase consistency ----------------------------------------------------


def test_intra_perfect_separation_is_zero():
    assert L.intra_consistency(np.array([1.0, 1, 0, 0]), np.array([1.0, 1, 0, 0])).item() == 0.0


def test_intra_hand_example():
    p, g = np.array([0.8, 0.8, 0.1, 0.1]), np.array([1.0, 1, 0, 0])
    assert oracles.intra_pairs(p, g) == pytest.approx(0.3, abs=1e-12)
    assert L.intra_consistency(p, g).item() == pytest.approx(0.3, abs=1e-12)
    assert L.intra_consistency_fast(p, g).item() == pytest.approx(0.3, abs=1e-12)


def test_intra_all_positive_is_mean_pairwise_gap():
    p = np.array([0.1, 0.5, 0.9, 0.3])
    mean_gap = sum(abs(a - b) for a in p for b in p) / 16
    for fn in (L.intra_consistency, L.intra_consistency_fast):
        assert fn(p, np.ones(4)).item() == pytest.approx(mean_gap, abs=1e-12)


def test_intra_fast_matches_naive_random_T64():
    rng = np.random.default_rng(0)
    p, g = rng.uniform(size=64), (rng.uniform(size=64) < 0.4).astype(float)
    assert abs(L.intra_consistency_fast(p, g).item() - L.intra_consistency(p, g).item()) <= 1e-9


@pytest.mark.parametrize("g", [[0.0], [1.0]])
def test_intra_single_frame(g):
    p = np.array([0.4])
    assert L.intra_consistency_fast(p, g).item() == L.intra_consistency(p, g).item() == 0.0


def test_intra_constant_p_only_cross_term():
    p, g = np.full(6, 0.3), np.array([1.0, 0, 1, 0, 0, 1])
    assert L.intra_consistency_fast(p, g).item() == pytest.approx(1.0)


def test_intra_length_mismatch():
    with pytest.raises(ShapeError):
        L.intra_consistency(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        L.intra_consistency_fast(np.zeros(3), np.zeros(4))


@given(prob_label_pairs())
def test_intra_naive_matches_pair_enumeration(pg):
    p, g = pg
    assert abs(L.intra_consistency(p, g).item() - oracles.intra_pairs(p.tolist(), g.tolist())) <= 1e-9


@given(prob_label_pairs(max_T=128))
def test_intra_fast_equals_naive_value_and_gradient(pg):
    p, g = pg
    assert abs(L.intra_consistency_fast(p, g).item() - L.intra_consistency(p, g).item()) <= 1e-9
    ga = grad_of(lambda t: L.intra_consistency_fast(t, g), p)
    gb = grad_of(lambda t: L.intra_consistency(t, g), p)
    assert np.max(np.abs(ga - gb)) <= 1e-7


@given(prob_label_pairs(), st.randoms())
def test_intra_permutation_invariant(pg, rnd):
    p, g = pg
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert abs(L.intra_consistency(p[perm], g[perm]).item() - L.intra_consistency(p, g).item()) <= 1e-12


@given(prob_label_pairs())
def test_intra_range(pg):
    v = L.intra_consistency_fast(*pg).item()
    assert -1e-12 <= v <= 3.0


@given(st.integers(1, 64), st.integers(0, 2**31))
def test_intra_zero_when_prediction_equals_label(T, seed):
    g = (np.random.default_rng(seed).uniform(size=T) < 0.5).astype(float)
    assert L.intra_consistency_fast(g, g).item() <= 1e-12


# --- inter-phase consistency ----------------------------------------------------


def test_inter_consistent_step():
    v = L.inter_consistency(np.array([0.0, 1, 1, 0]), np.array([1.0, 0, 0, 0.7]), np.array([0.0, 0, 1, 0.2]))
    assert v.item() == 0.0


def test_inter_constant_phase():
    assert L.inter_consistency(np.full(5, 0.4), np.zeros(5), np.zeros(5)).item() == 0.0


def test_inter_hand_example():
    v = L.inter_consistency(np.array([0.0, 0.5, 1.0]), np.zeros(3), np.zeros(3))
    assert v.item() == pytest.approx(0.5, abs=1e-12)


def test_inter_needs_two_frames():
    with pytest.raises(ValueError):
        L.inter_consistency(np.zeros(1), np.zeros(1), np.zeros(1))


@given(st.integers(2, 64), st.integers(0, 2**31))
def test_inter_matches_loops_and_range(T, seed):
    rng = np.random.default_rng(seed)
    pc, ps, pe = rng.uniform(size=(3, T))
    v = L.inter_consistency(pc, ps, pe).item()
    assert abs(v - oracles.inter_loops(pc, ps, pe)) <= 1e-12
    assert 0 <= v <= 2


@given(st.integers(2, 64), st.integers(0, 2**31))
def test_inter_self_consistency_fixed_point(T, seed):
    pc = np.random.default_rng(seed).uniform(size=T)
    d = np.diff(pc)
    ps = np.append(np.maximum(d, 0), 0.0)
    pe = np.append(-np.minimum(d, 0), 0.0)
    assert L.inter_consistency(pc, ps, pe).item() <= 1e-12


# --- classification -------------------------------------------------------------


def test_cls_perfect_prediction_near_zero():
    g = np.array([1.0, 0, 1, 1, 0])
    v = L.phase_cls_loss(g.copy(), g).item()
    # clamping at 1e-7 leaves -2 ln(1 - 1e-7) = 2.0000001e-7
    assert v == pytest.approx(-2 * math.log1p(-1e-7), rel=1e-9)
    assert v == pytest.approx(2e-7, rel=1e-6)


def test_cls_half_probability_mixed_labels():
    assert L.phase_cls_loss(np.full(6, 0.5), np.array([1.0, 0, 0, 1, 0, 0])).item() == pytest.approx(2 * math.log(2))
    assert L.phase_cls_loss(np.full(6, 0.5), np.zeros(6)).item() == pytest.approx(math.log(2))


@given(prob_label_pairs())
def test_cls_matches_loops(pg):
    p, g = pg
    assert abs(L.phase_cls_loss(p, g).item() - oracles.cls_loops(p, g)) <= 1e-9


# --- regression -----------------------------------------------------------------


def _targets(o_s, o_e, m_s, m_e):
    return OffsetTargets(*(np.asarray(a, dtype=float) for a in (o_s, o_e, m_s, m_e)))


def test_regression_exact_is_zero():
    tgt = _targets([1, 0, -1, 0], [0, 0, 1, 0], [1, 1, 1, 0], [0, 0, 1, 0])
    assert L.regression_loss(tgt.o_s, tgt.o_e, tgt).item() == 0.0


@pytest.mark.parametrize("diff,want", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
def test_regression_single_frame(diff, want):
    tgt = _targets([0, 0, 0], [0, 0, 0], [0, 1, 0], [0, 0, 0])
    assert L.regression_loss(np.array([0, diff, 5.0]), np.zeros(3), tgt).item() == pytest.approx(want)


def test_regression_empty_masks():
    tgt = _targets(np.zeros(4), np.zeros(4), np.zeros(4), np.zeros(4))
    assert L.regression_loss(np.ones(4), np.ones(4), tgt).item() == 0.0


# --- total ----------------------------------------------------------------------


def _random_case(T, seed):
    rng = np.random.default_rng(seed)
    outs = PhaseOutputs(*(Tensor(rng.uniform(0.01, 0.99, T), requires_grad=True) for _ in range(3)),
                        *(Tensor(rng.normal(size=T), requires_grad=True) for _ in range(2)))
    ann = AnnotationSet(T, [Instance(3, 12), Instance(18, 28)])
    return outs, make_phase_labels(ann, T), make_offset_targets(ann, T)


def test_total_matches_scripted_oracle():
    outs, lab, tgt = _random_case(32, 0)
    _, rep = L.total_loss(outs, lab, tgt)
    p = [o.data.tolist() for o in outs]
    cls = [oracles.cls_loops(p[i], g) for i, g in enumerate((lab.g_c, lab.g_s, lab.g_e))]
    intra = [oracles.intra_pairs(p[i], g) for i, g in enumerate((lab.g_c, lab.g_s, lab.g_e))]
    reg = oracles.reg_loops(p[3], p[4], tgt.o_s, tgt.o_e, tgt.mask_s, tgt.mask_e)
    inter = oracles.inter_loops(p[0], p[1], p[2])
    assert abs(rep.total - (sum(cls) + reg + sum(intra) + inter)) <= 1e-9
    assert abs(rep.cls_s - cls[1]) <= 1e-9 and abs(rep.intra_e - intra[2]) <= 1e-9
    assert abs(rep.reg - reg) <= 1e-9 and abs(rep.inter - inter) <= 1e-9


def test_baseline_weights_drop_regularizers():
    outs, lab, tgt = _random_case(32, 1)
    loss, rep = L.total_loss(outs, lab, tgt, (1, 1, 0, 0))
    assert loss.item() == pytest.approx(rep.cls + rep.reg, abs=1e-12)
    assert rep.intra > 0 and rep.inter > 0  # still reported


def test_zero_weight_terms_do_not_contribute_gradient():
    outs, lab, tgt = _random_case(32, 2)
    loss_a, _ = L.total_loss(outs, lab, tgt, (1, 1, 0, 0))
    ad.backward(loss_a)
    ga = [o.grad.copy() for o in outs]
    outs2 = PhaseOutputs(*(Tensor(o.data.copy(), requires_grad=True) for o in outs))
    cls = sum((L.phase_cls_loss(p, g) for p, g in zip(outs2[:3], (lab.g_c, lab.g_s, lab.g_e))), Tensor(0.0))
    ad.backward(cls + L.regression_loss(outs2.o_s, outs2.o_e, tgt))
    for a, o in zip(ga, outs2):
        assert np.allclose(a, o.grad, atol=1e-12)


def test_perfect_predictions_on_consistent_instance():
    # labels built so that starts sit where p_c rises and ends where it drops
    T = 20
    g_c = np.zeros(T)
    g_c[5:12] = 1
    g_s = np.zeros(T)
    g_s[4] = 1
    g_e = np.zeros(T)
    g_e[11] = 1
    o = np.zeros(T)
    tgt = OffsetTargets(o.copy(), o.copy(), g_s.copy(), g_e.copy())
    outs = PhaseOutputs(*(Tensor(a) for a in (g_c, g_s, g_e, o, o)))
    _, rep = L.total_loss(outs, PhaseLabels(g_c, g_s, g_e), tgt)
    assert all(v <= 1e-6 for v in rep.to_dict().values())


@given(st.integers(4, 48), st.integers(0, 2**31))
def test_report_components_nonnegative_and_summed(T, seed):
    rng = np.random.default_rng(seed)
    outs = PhaseOutputs(*(Tensor(rng.uniform(size=T)) for _ in range(3)), *(Tensor(rng.normal(size=T) * 3) for _ in range(2)))
    s = int(rng.integers(0, T - 2))
    e = int(rng.integers(s + 1, T))
    ann = AnnotationSet(T, [Instance(s, e)] if rng.uniform() < 0.8 else [])
    _, rep = L.total_loss(outs, make_phase_labels(ann, T), make_offset_targets(ann, T))
    d = rep.to_dict()
    assert all(v >= 0 and math.isfinite(v) for v in d.values())
    assert rep.cls == pytest.approx(rep.cls_c + rep.cls_s + rep.cls_e)
    assert rep.intra == pytest.approx(rep.intra_c + rep.intra_s + rep.intra_e)
    assert rep.total == pytest.approx(rep.cls + rep.reg + rep.intra + rep.inter)


def test_report_mean_and_names():
    a = L.LossReport(*range(11))
    b = L.LossReport(*range(2, 13))
    m = L.LossReport.mean([a, b])
    assert m.total == 11.0 and len(L.LossReport.names()) == 11
