import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdnkit import optim
from mdnkit.mdn import build_model
from mdnkit.nn import ParamStore
from mdnkit.optim import AdamW, LrSchedule, TrainConfig, TrainingDiverged, agc_clip, lr_at


def store(**arrays):
    return ParamStore.from_arrays({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


# ------------------------------------------------------------------ schedule
def test_schedule_examples():
    s = LrSchedule(warmup_steps=100, peak_lr=1e-3, decay_rate=0.9, decay_every=1000)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 50) == 5e-4
    assert lr_at(s, 100) == 1e-3
    assert math.isclose(lr_at(s, 1100), 9e-4, rel_tol=1e-15)
    assert math.isclose(lr_at(s, 600), 1e-3 * 0.9 ** 0.5, rel_tol=1e-15)


def test_schedule_floor_and_staircase():
    s = LrSchedule(warmup_steps=0, peak_lr=1.0, decay_rate=0.5, decay_every=10, floor_lr=0.1, staircase=True)
    assert lr_at(s, 9) == 1.0 and lr_at(s, 10) == 0.5
    assert lr_at(s, 10_000) == 0.1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 500), st.integers(1, 500), st.floats(0.1, 0.99), st.integers(0, 5000))
def test_property_schedule_bounded_and_monotone_after_warmup(warm, every, rate, step):
    s = LrSchedule(warmup_steps=warm, peak_lr=2e-3, decay_rate=rate, decay_every=every)
    a, b = lr_at(s, step), lr_at(s, step + 1)
    assert 0 <= a <= 2e-3
    if step >= warm:
        assert b <= a


# ------------------------------------------------------------------ AdamW
def test_zero_gradient_no_decay_leaves_params():
    p = store(w=[1.0, -2.0])
    opt = AdamW(p)
    for _ in range(3):
        opt.step(p, {"w": np.zeros(2)}, 1e-2)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_decoupled_decay_factor():
    p = store(w=[1.0, -2.0, 0.5])
    AdamW(p, weight_decay=0.1).step(p, {"w": np.zeros(3)}, 0.01)
    assert np.allclose(p["w"].data, np.array([1.0, -2.0, 0.5]) * (1 - 0.01 * 0.1), rtol=0, atol=1e-15)


def test_three_steps_match_formula(rng):
    w0 = rng.normal(size=5)
    gs = [rng.normal(size=5) for _ in range(3)]
    lr, wd, b1, b2, eps = 3e-3, 0.02, 0.9, 0.999, 1e-8
    p = store(w=w0)
    opt = AdamW(p, weight_decay=wd)
    for g in gs:
        opt.step(p, {"w": g}, lr)
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(gs, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * ((m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps) + wd * w)
    assert np.max(np.abs(p["w"].data - w)) < 1e-12


def test_first_step_moves_by_lr():
    # bias correction: |m_hat / sqrt(v_hat)| = 1 on step one
    p = store(w=[0.0, 0.0])
    AdamW(p).step(p, {"w": np.array([5.0, -1e-3])}, 0.01)
    assert np.allclose(p["w"].data, [-0.01, 0.01], rtol=1e-5)


# ------------------------------------------------------------------ AGC
def test_agc_halves_large_gradient():
    p = store(w=[3.0, 4.0])                      # |w| = 5, rate 0.1 -> limit 0.5
    out = agc_clip(p, {"w": np.array([0.6, 0.8])}, 0.1)["w"]
    assert np.allclose(out, [0.3, 0.4], rtol=0, atol=1e-15)


def test_agc_small_gradient_untouched():
    p = store(w=[3.0, 4.0])
    g = np.array([0.03, 0.04])
    assert np.array_equal(agc_clip(p, {"w": g}, 0.1)["w"], g)


def test_agc_floor_for_zero_weights():
    p = store(b=np.zeros(2))
    out = agc_clip(p, {"b": np.array([1.0, 0.0])}, 0.1)["b"]
    assert np.allclose(out, [0.1 * optim.AGC_FLOOR, 0.0], rtol=0, atol=1e-18)


def test_agc_bad_rate():
    with pytest.raises(ValueError):
        agc_clip(store(w=[1.0]), {"w": np.ones(1)}, 0.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, 4, elements=st.floats(-100, 100)), st.floats(1e-3, 1.0))
def test_property_agc_never_increases_norm(w, g, rate):
    out = agc_clip(store(w=w), {"w": g}, rate)["w"]
    assert np.linalg.norm(out) <= np.linalg.norm(g) * (1 + 1e-12)
    assert np.linalg.norm(out) <= rate * max(np.linalg.norm(w), optim.AGC_FLOOR) * (1 + 1e-12) \
        or np.array_equal(out, g)


# ------------------------------------------------------------------ training loops
def toy_regression(rng, n=256):
    X = rng.uniform(-1, 1, size=(n, 1))
    return X, 2.0 * X - 0.5


def cfg(**kw):
    base = dict(iterations=300, batch_size=32, seed=0,
                schedule=LrSchedule(warmup_steps=10, peak_lr=1e-2, decay_every=1000))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_leave_params(rng):
    m = build_model("mse", 1, 1, width=4, layers=1, seed=2)
    before = m.params.arrays()
    res = optim.train(m, *toy_regression(rng), cfg(iterations=0))
    assert res.history.shape == (0, 3)
    assert all(np.array_equal(before[k], v) for k, v in m.params.arrays().items())


def test_linear_regression_converges(rng):
    m = build_model("mse", 1, 1, width=16, layers=1, seed=0)
    X, Y = toy_regression(rng)
    res = optim.train(m, X, Y, cfg(iterations=600))
    assert res.losses()[-50:].mean() < 0.01 < res.losses()[0]


def test_training_is_seed_deterministic(rng):
    X, Y = toy_regression(rng)
    runs = []
    for seed in (4, 4, 5):
        m = build_model("mdn", 1, 1, K=2, width=8, layers=1, seed=0)
        runs.append((optim.train(m, X, Y, cfg(iterations=40, seed=seed)).history, m.params.arrays()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])
    assert not np.array_equal(runs[0][0], runs[2][0])


def test_divergence_raises(rng):
    X, Y = toy_regression(rng)
    m = build_model("mdn", 1, 1, K=2, width=8, layers=1, seed=0)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="step"):
        optim.train(m, X, Y * 1e300, cfg(iterations=50))


def test_train_rejects_empty_or_mismatched():
    m = build_model("mse", 1, 1, width=4, layers=1)
    with pytest.raises(ValueError):
        optim.train(m, np.zeros((0, 1)), np.zeros((0, 1)), cfg())
    with pytest.raises(ValueError):
        optim.train(m, np.zeros((3, 1)), np.zeros((2, 1)), cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip=0.0)
    with pytest.raises(ValueError):
        TrainConfig(on_nonfinite_grad="retry")
    assert TrainConfig(schedule={"peak_lr": 0.5}).schedule.peak_lr == 0.5


def test_window_sampler_shapes_and_targets(rng):
    traj = np.cumsum(rng.normal(size=(3, 20, 2)), axis=1)
    x, dy = optim.window_sampler(traj, 5, 4)(rng)
    assert x.shape == dy.shape == (5, 4, 2)
    assert np.allclose(x[1:] - x[:-1], dy[:-1], rtol=0, atol=1e-12)


def test_window_too_long():
    with pytest.raises(ValueError):
        optim.window_sampler(np.zeros((2, 10, 3)), 10, 4)


def test_rnn_training_checks_kind_and_count(rng):
    traj = rng.normal(size=(2, 30, 3))
    with pytest.raises(ValueError):
        optim.train_rnn_mdn(build_model("mdn", 3, 3, K=2, width=4, layers=1), traj, cfg(window=5))
    m = build_model("rnn_mdn", 3, 3, K=2, width=4, layers=1)
    with pytest.raises(ValueError, match="expected"):
        optim.train_rnn_mdn(m, traj, cfg(window=5), expected_params=1)
    res = optim.train_rnn_mdn(m, traj, cfg(iterations=3, window=5, batch_size=2))
    assert np.all(np.isfinite(res.losses()))


def _make(seed):
    return build_model("mdn", 1, 1, K=2, width=4, layers=1, seed=seed)


def _fit(model, seed):
    X = np.linspace(-1, 1, 64)[:, None]
    return optim.train(model, X, np.sin(3 * X), cfg(iterations=20, seed=seed))


def test_ensemble_members_differ():
    outs = optim.train_ensemble(_make, _fit, [0, 1])
    assert all(o.ok for o in outs)
    a, b = (o.model.params.arrays() for o in outs)
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def _fit_failing(model, seed):
    if seed == 1:
        raise TrainingDiverged("boom")
    return _fit(model, seed)


def test_ensemble_reports_failed_member():
    outs = optim.train_ensemble(_make, _fit_failing, [0, 1, 2])
    assert [o.ok for o in outs] == [True, False, True]
    assert "TrainingDiverged" in outs[1].error
    with pytest.raises(ValueError):
        optim.train_ensemble(_make, _fit, [])


def test_ensemble_parallel_matches_serial():
    serial = optim.train_ensemble(_make, _fit, [0, 1], workers=1)
    par = optim.train_ensemble(_make, _fit, [0, 1], workers=2)
    for s, p in zip(serial, par):
        assert np.array_equal(s.result.history, p.result.history)
