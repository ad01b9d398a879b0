import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tal_mutreg import autodiff as ad
from tal_mutreg import model as M
from tal_mutreg import trainer as T
from tal_mutreg.labels import AnnotationSet, Instance
from tal_mutreg.synthetic import SyntheticSpec, generate

NET = M.NetworkConfig(input_channels=4, base_channels=8, head_channels=4, window_length=32)


def tiny_windows(n=6, seed=0):
    spec = SyntheticSpec(seed=seed, num_train=n, num_test=0, length=32, channels=4, num_classes=2, instances_per_video=(1, 2), duration=(4, 10))
    return T.make_windows([(v.features, v.annotations) for v in generate(spec)], 32)


def test_lr_zero_leaves_params_bitwise():
    params = M.init_params(NET, 0)
    res = T.train(params, tiny_windows(), NET, T.TrainConfig(epochs=1, switch_epoch=1, lr_early=0.0, lr_late=0.0, batch_size=4))
    assert all(res.params[k].data.tobytes() == params[k].data.tobytes() for k in params)


def test_same_seeds_same_history():
    cfg = T.TrainConfig(epochs=3, switch_epoch=2, batch_size=4, seed=5)
    a = T.train(M.init_params(NET, 1), tiny_windows(), NET, cfg)
    b = T.train(M.init_params(NET, 1), tiny_windows(), NET, cfg)
    assert a.history == b.history
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_threads_do_not_change_result():
    cfg = T.TrainConfig(epochs=2, switch_epoch=1, batch_size=3)
    a = T.train(M.init_params(NET, 1), tiny_windows(), NET, cfg, threads=1)
    b = T.train(M.init_params(NET, 1), tiny_windows(), NET, cfg, threads=3)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_history_length_and_finite():
    res = T.train(M.init_params(NET, 0), tiny_windows(), NET, T.TrainConfig(epochs=4, switch_epoch=2, batch_size=4))
    assert len(res.history) == 4
    assert all(np.isfinite(v) for r in res.history for v in r.to_dict().values())


def test_single_window_overfits_on_desk_config():
    net = M.NetworkConfig()
    spec = SyntheticSpec(num_train=1, num_test=0)
    v = generate(spec)[0]
    windows = T.make_windows([(v.features, v.annotations)], 128)
    res = T.train(M.init_params(net, 0), windows, net, T.TrainConfig(epochs=200, switch_epoch=200, batch_size=1))
    totals = [r.total for r in res.history]
    assert all(b < a for a, b in zip(totals[2:], totals[3:]))


def test_resume_matches_uninterrupted_run():
    cfg = T.TrainConfig(epochs=4, switch_epoch=2, batch_size=4)
    w = tiny_windows()
    full = T.train(M.init_params(NET, 2), w, NET, cfg)
    half = T.train(M.init_params(NET, 2), w, NET, T.TrainConfig(epochs=2, switch_epoch=2, batch_size=4))
    rest = T.train(half.params, w, NET, cfg, start_epoch=2, velocity=half.velocity)
    assert rest.epoch == 4 and len(rest.history) == 2
    assert all(full.params[k].data.tobytes() == rest.params[k].data.tobytes() for k in full.params)


def test_on_step_records_carry_global_step():
    steps = []
    w = tiny_windows(6)
    cfg = T.TrainConfig(epochs=3, switch_epoch=1, batch_size=4)
    T.train(M.init_params(NET, 0), w, NET, cfg, start_epoch=1, on_step=steps.append)
    assert [s["step"] for s in steps] == [2, 3, 4, 5]
    assert [s["epoch"] for s in steps] == [1, 1, 2, 2]
    assert steps[0]["lr"] == cfg.lr_late and len(steps[0]) == 3 + 11


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_component():
    w = tiny_windows(2)
    params = M.init_params(NET, 0)
    params["regr_s.1.bias"] = ad.Tensor(np.array([np.inf]), requires_grad=True)
    with pytest.raises(T.NumericalError, match="reg"):
        T.train(params, w, NET, T.TrainConfig(epochs=1, switch_epoch=1))


def test_empty_or_misshapen_dataset_rejected():
    with pytest.raises(ValueError):
        T.train(M.init_params(NET, 0), [], NET, T.TrainConfig())
    bad = tiny_windows(1)
    bad[0].features = bad[0].features[:10]
    with pytest.raises(ValueError):
        T.train(M.init_params(NET, 0), bad, NET, T.TrainConfig(epochs=1, switch_epoch=1))


@pytest.mark.parametrize(
    "kw",
    [dict(switch_epoch=30), dict(momentum=1.0), dict(batch_size=0), dict(loss_weights=(1, 1, 1)), dict(lr_early=-1.0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        T.TrainConfig(**kw)


def test_lr_schedule():
    cfg = T.TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 9, 10, 19)] == [1e-3, 1e-3, 1e-4, 1e-4]


@given(st.integers(0, 2**31), st.floats(0.001, 0.4), st.integers(1, 6))
def test_zero_momentum_is_gradient_descent_on_quadratic(seed, lr, steps):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, size=5)
    x0 = rng.normal(size=5)
    params = {"x": ad.Tensor(x0.copy(), requires_grad=True)}
    vel = {"x": np.zeros(5)}
    x = x0.copy()
    for _ in range(steps):
        grad = a * params["x"].data  # d/dx of 0.5 * sum(a x^2)
        T.sgd_momentum_step(params, {"x": grad}, vel, lr, 0.0)
        x = x - lr * a * x
    assert np.allclose(params["x"].data, x, rtol=0, atol=1e-12)


def test_momentum_update_rule():
    params = {"x": ad.Tensor(np.array([1.0]), requires_grad=True)}
    vel = {"x": np.array([0.5])}
    T.sgd_momentum_step(params, {"x": np.array([2.0])}, vel, 0.1, 0.9)
    assert vel["x"][0] == pytest.approx(0.9 * 0.5 - 0.2) and params["x"].data[0] == pytest.approx(1.25)


def test_dataset_stats():
    anns = [AnnotationSet(50, [Instance(0, 10, 0), Instance(20, 45, 1)]), AnnotationSet(50, [Instance(5, 9, 1)])]
    feats = [np.zeros((50, 2)), np.ones((50, 2))]
    st_ = T.dataset_stats(anns, feats, 3)
    assert st_["max_duration"] == 25
    c = np.array(st_["class_centroids"])
    assert np.allclose(c[0], 0) and np.allclose(c[1], 5 / (26 + 5)) and np.allclose(c[2], 0)
