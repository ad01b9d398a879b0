"""Central finite-difference checks of reverse-mode gradients.

Each suite draws random points, evaluates the analytic gradient with
:func:`autodiff.backward`, and compares it against
(f(x + h e_k) - f(x - h e_k)) / 2h coordinate by coordinate. A point whose
forward pass has any kink argument within ``KINK_MARGIN`` of its kink is
redrawn; a coordinate whose +-h evaluations change the kink sign pattern is
skipped and replaced.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import model as M
from .labels import AnnotationSet, make_offset_targets, make_phase_labels

H = 1e-5
RTOL = 1e-4
ATOL = 1e-7
KINK_MARGIN = 1e-6


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    points: int
    coords: int
    skipped: int
    seconds: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and self.points > 0


def _kink_signs(log):
    if not log:
        return np.zeros(0)
    return np.sign(np.concatenate(log))


def _near_kink(log):
    if not log:
        return False
    d = np.abs(np.concatenate(log))
    return bool(np.any((d > 0) & (d < KINK_MARGIN)))


def _evaluate(fn, arrays):
    with ad.record_kinks() as log:
        value = fn({k: ad.Tensor(v) for k, v in arrays.items()}).item()
    return value, _kink_signs(log)


def gradient_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, ATOL / RTOL).

    Above ATOL / RTOL this is the plain relative error; below it the check
    degrades to |a - n| <= ATOL, which is where finite-difference roundoff
    (about eps * |f| / h) would otherwise dominate.
    """
    err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), ATOL / RTOL)
    return err, err <= RTOL


def check_point(fn, arrays, coords, flip_sign=False):
    """Compare gradients of scalar ``fn(dict_of_tensors)`` at ``arrays``.

    ``coords`` is a list of (name, flat_index). Returns (max_err, failures,
    skipped) or None when the point sits too close to a kink.
    """
    with ad.record_kinks() as log:
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        out = fn(tensors)
    if _near_kink(log):
        return None
    base_signs = _kink_signs(log)
    ad.backward(out)

    max_err, failures, skipped = 0.0, [], 0
    for name, idx in coords:
        grad = tensors[name].grad
        analytic = 0.0 if grad is None else float(np.ravel(grad)[idx])
        if flip_sign:
            analytic = -analytic
        target = arrays[name]
        orig = target.flat[idx]
        target.flat[idx] = orig + H
        f_plus, s_plus = _evaluate(fn, arrays)
        target.flat[idx] = orig - H
        f_minus, s_minus = _evaluate(fn, arrays)
        target.flat[idx] = orig
        if not (np.array_equal(s_plus, base_signs) and np.array_equal(s_minus, base_signs)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * H)
        err, ok = gradient_error(analytic, numeric)
        max_err = max(max_err, err)
        if not ok:
            failures.append((name, idx, analytic, numeric, err))
    return max_err, failures, skipped


def run_suite(name, sample_point, n_points, rng, coord_fraction=1.0, flip_sign=False, max_tries=20):
    """``sample_point(rng) -> (fn, arrays)``; checks every coordinate unless
    ``coord_fraction`` < 1, in which case that fraction is drawn at random."""
    t0 = time.perf_counter()
    result = SuiteResult(name, 0.0, 0, 0, 0, 0.0)
    tries = 0
    while result.points < n_points:
        fn, arrays = sample_point(rng)
        all_coords = [(k, i) for k, v in arrays.items() for i in range(v.size)]
        if coord_fraction < 1.0:
            n = max(1, int(round(coord_fraction * len(all_coords))))
            picks = rng.choice(len(all_coords), size=n, replace=False)
            coords = [all_coords[i] for i in sorted(picks)]
        else:
            coords = all_coords
        checked = check_point(fn, arrays, coords, flip_sign=flip_sign)
        if checked is None:
            tries += 1
            if tries > max_tries * n_points:
                raise RuntimeError(f"{name}: could not draw points away from kinks")
            continue
        err, failures, skipped = checked
        result.points += 1
        result.coords += len(coords) - skipped
        result.skipped += skipped
        result.max_rel_err = max(result.max_rel_err, err)
        result.failures.extend(failures)
    result.seconds = time.perf_counter() - t0
    return result


# --- point samplers -----------------------------------------------------------


def _conv_point(rng):
    T = int(rng.integers(4, 13))
    c_in, c_out = 3, 2
    K = int(rng.choice([1, 3, 5]))
    arrays = {
        "x": rng.uniform(-2, 2, size=(T, c_in)),
        "kernel": rng.uniform(-2, 2, size=(K * c_in, c_out)),
        "bias": rng.uniform(-2, 2, size=c_out),
    }
    w = rng.uniform(-1, 1, size=(T, c_out))
    return (lambda t: ad.sum(ad.conv1d(t["x"], t["kernel"], t["bias"]) * w)), arrays


def _unary_point(op):
    def sample(rng):
        n = int(rng.integers(3, 9))
        w = rng.uniform(-1, 1, size=n)
        return (lambda t: ad.sum(ad.elementwise(op, t["x"]) * w)), {"x": rng.uniform(-2, 2, size=n)}

    return sample


def _binary_point(op):
    def sample(rng):
        n = int(rng.integers(3, 9))
        w = rng.uniform(-1, 1, size=n)
        arrays = {"a": rng.uniform(-2, 2, size=n), "b": rng.uniform(-2, 2, size=n)}
        return (lambda t: ad.sum(ad.elementwise(op, t["a"], t["b"]) * w)), arrays

    return sample


def _reduce_point(op):
    def sample(rng):
        shape = (int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        return (lambda t: ad.reduce(op, t["x"]) * 1.7), {"x": rng.uniform(-2, 2, size=shape)}

    return sample


def _random_labels(rng, T):
    g = (rng.random(T) < rng.uniform(0.2, 0.8)).astype(float)
    if rng.random() < 0.1:
        g[:] = 1.0
    return g


def _intra_point(fast):
    fn_impl = L.intra_consistency_fast if fast else L.intra_consistency

    def sample(rng):
        T = int(rng.integers(2, 25))
        g = _random_labels(rng, T)
        return (lambda t: fn_impl(t["p"], g)), {"p": rng.uniform(0.01, 0.99, size=T)}

    return sample


def _inter_point(rng):
    T = int(rng.integers(2, 25))
    arrays = {k: rng.uniform(0.01, 0.99, size=T) for k in ("p_c", "p_s", "p_e")}
    return (lambda t: L.inter_consistency(t["p_c"], t["p_s"], t["p_e"])), arrays


def _cls_point(rng):
    T = int(rng.integers(2, 25))
    g = _random_labels(rng, T)
    return (lambda t: L.phase_cls_loss(t["p"], g)), {"p": rng.uniform(0.01, 0.99, size=T)}


def _random_annotations(rng, T):
    insts = []
    t = int(rng.integers(0, 3))
    while t < T - 4:
        d = int(rng.integers(2, max(3, T // 2)))
        if t + d >= T:
            break
        insts.append((t, t + d, 0))
        t += d + int(rng.integers(1, 5))
    return AnnotationSet(T, insts)


def _reg_point(rng):
    T = int(rng.integers(8, 33))
    targets = make_offset_targets(_random_annotations(rng, T), T)
    arrays = {"o_s": rng.uniform(-3, 3, size=T), "o_e": rng.uniform(-3, 3, size=T)}
    return (lambda t: L.regression_loss(t["o_s"], t["o_e"], targets)), arrays


def _network_point(config, T=16, weights=L.DEFAULT_WEIGHTS):
    def sample(rng):
        params = M.init_params(config, int(rng.integers(2**31)))
        arrays = {k: v.data.copy() for k, v in params.items()}
        # nonzero biases so no pre-activation is structurally zero
        for k in arrays:
            if k.endswith(".bias"):
                arrays[k] = rng.uniform(-0.1, 0.1, size=arrays[k].shape)
        x = rng.uniform(-2, 2, size=(T, config.input_channels))
        ann = _random_annotations(rng, T)
        labels = make_phase_labels(ann, T)
        targets = make_offset_targets(ann, T)

        def fn(t):
            out = M.forward(t, x, config)
            return L.total_loss(out, labels, targets, weights)[0]

        return fn, arrays

    return sample


def _suite_table(n_points):
    net = M.NetworkConfig()
    table = {
        "conv1d": (_conv_point, 1.0),
        "reduce.sum": (_reduce_point("sum"), 1.0),
        "reduce.mean": (_reduce_point("mean"), 1.0),
        "intra_consistency": (_intra_point(False), 1.0),
        "intra_consistency_fast": (_intra_point(True), 1.0),
        "inter_consistency": (_inter_point, 1.0),
        "phase_cls_loss": (_cls_point, 1.0),
        "regression_loss": (_reg_point, 1.0),
        "total_loss": (_network_point(net), 0.01),
    }
    for op in ("relu", "sigmoid", "abs", "max_with_zero", "neg_min_with_zero"):
        table[f"elementwise.{op}"] = (_unary_point(op), 1.0)
    for op in ("add", "sub", "mul"):
        table[f"elementwise.{op}"] = (_binary_point(op), 1.0)
    return table


SUITES = tuple(_suite_table(1))


def select_suites(ops=None):
    """Suite names matching ``ops``; an entry matches itself and its dotted children."""
    if not ops:
        return list(SUITES)
    chosen = []
    for name in SUITES:
        if any(name == op or name.startswith(op + ".") for op in ops):
            chosen.append(name)
    unknown = [op for op in ops if not any(n == op or n.startswith(op + ".") for n in SUITES)]
    if unknown:
        raise ValueError(f"unknown gradcheck ops: {', '.join(unknown)}")
    return chosen


def run_all(ops=None, n_points=50, seed=0, inject_fault=()):
    """Run the selected suites. ``inject_fault`` names suites whose analytic
    gradient is sign-flipped (negative control for the harness)."""
    table = _suite_table(n_points)
    results = []
    for name in select_suites(ops):
        sample, frac = table[name]
        # keyed by the suite's global index so --ops subsets see the same points
        rng = np.random.default_rng([seed, SUITES.index(name)])
        results.append(run_suite(name, sample, n_points, rng, coord_fraction=frac, flip_sign=name in inject_fault))
    return results
