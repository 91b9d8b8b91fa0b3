import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdnkit import diffcore as dc
from mdnkit import mdn
from mdnkit.diffcore import DimensionError, Tensor
from mdnkit.mdn import MixtureParams


def mix(alpha, mu, sigma):
    """Mixture with one input row from weights, means ``[K, d]`` and scales ``[K, d]``."""
    a = np.asarray(alpha, dtype=np.float64)[None]
    return MixtureParams(np.log(a), np.asarray(mu, dtype=np.float64)[None], np.asarray(sigma, np.float64)[None])


def inv_softplus(s):
    return np.log(np.expm1(s))


def raw_from(alpha, mu, sigma, eps=1e-6):
    """Head vector reproducing (alpha, mu, sigma) after the softplus+eps transform."""
    mu, sigma = np.atleast_2d(mu), np.atleast_2d(sigma)
    return np.concatenate([np.log(alpha), mu.ravel(), inv_softplus(sigma - eps).ravel()])[None]


# ------------------------------------------------------------------ transform_head
def test_equal_logits_uniform_weights():
    raw = np.zeros((2, mdn.head_width(4, 1)))
    assert np.allclose(mdn.transform_head(raw, 4, 1).alpha, 0.25, rtol=0, atol=1e-15)


def test_softplus_zero_plus_eps():
    p = mdn.transform_head(np.zeros((1, 3)), 1, 1)
    assert p.sigma.data[0, 0, 0] == math.log(2.0) + 1e-6


def test_softmax_values():
    raw = np.array([[1.0, 2.0, 3.0, 0, 0, 0, 0, 0, 0]])
    assert np.allclose(mdn.transform_head(raw, 3, 1).alpha[0], [0.09003, 0.24473, 0.66524], atol=5e-6)


def test_elu_scale_option():
    p = mdn.transform_head(np.array([[0.0, 0.0, -2.0]]), 1, 1, elu=True)
    assert np.isclose(p.sigma.data[0, 0, 0], 1 + math.expm1(-2.0) + 1e-6, rtol=0, atol=1e-15)


def test_head_width_checked():
    with pytest.raises(DimensionError):
        mdn.transform_head(np.zeros((1, 8)), 3, 1)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 5, elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_property_softmax_shift_invariance(z, c):
    raw = np.concatenate([z, np.zeros(10)])[None]
    a = mdn.transform_head(raw, 5, 1).alpha
    raw[0, :5] += c
    b = mdn.transform_head(raw, 5, 1).alpha
    assert np.allclose(a, b, rtol=1e-12, atol=1e-15)
    assert abs(a.sum() - 1) < 1e-12 and np.all(a >= 0)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-40, 40)))
def test_property_scales_positive(zs):
    raw = np.concatenate([np.zeros((3, 2)), np.zeros((3, 6)), zs], axis=1)
    assert np.all(mdn.transform_head(raw, 2, 3).sigma.data >= 1e-6)


# ------------------------------------------------------------------ logsumexp
def test_logsumexp_single_element():
    assert mdn.logsumexp(np.array([[3.25]]), axis=1).data[0] == 3.25


def test_logsumexp_equal_values():
    assert np.isclose(mdn.logsumexp(np.full((1, 7), -2.0), axis=1).data[0], -2.0 + math.log(7), rtol=0, atol=1e-15)


def test_logsumexp_overflow_case():
    v = mdn.logsumexp(np.array([[1000.0, 1001.0]]), axis=1).data[0]
    assert v == 1001.0 + math.log1p(math.exp(-1.0))
    assert abs(v - 1001.3133) < 1e-4


def test_logsumexp_all_neg_inf():
    t = Tensor(np.array([[-np.inf, -np.inf, -np.inf]]), requires_grad=True)
    out = mdn.logsumexp(t, axis=1)
    dc.backward(dc.reduce_sum(out))
    assert out.data[0] == -np.inf and np.array_equal(t.grad, np.zeros((1, 3)))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(-700, 700)))
def test_property_logsumexp_bounds(a):
    v = mdn.logsumexp(a[None], axis=1).data[0]
    assert a.max() <= v <= a.max() + math.log(len(a)) + 1e-12


# ------------------------------------------------------------------ NLL
def test_nll_standard_normal_at_mode():
    v = mdn.mdn_nll(mix([1.0], [[0.0]], [[1.0]]), np.array([[0.0]])).data
    assert abs(v - 0.5 * math.log(2 * math.pi)) < 1e-15


def test_nll_two_components_high_precision():
    mpmath.mp.dps = 50
    p = mix([0.3, 0.7], [[-1.0], [1.0]], [[0.5], [0.5]])
    got = float(mdn.mdn_nll(p, np.array([[0.2]])).data)

    def npdf(y, m, s):
        return mpmath.exp(-(mpmath.mpf(y) - m) ** 2 / (2 * mpmath.mpf(s) ** 2)) / (mpmath.mpf(s) * mpmath.sqrt(2 * mpmath.pi))
    want = float(-mpmath.log(mpmath.mpf("0.3") * npdf(0.2, -1, 0.5) + mpmath.mpf("0.7") * npdf(0.2, 1, 0.5)))
    assert abs(got - want) < 1e-14


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(-3, 3), st.floats(0.1, 3), st.floats(-5, 5))
def test_property_duplicate_components_collapse(w, m, s, y):
    single = mdn.mdn_nll(mix([1.0], [[m]], [[s]]), np.array([[y]])).data
    split = mdn.mdn_nll(mix([w, 1 - w], [[m], [m]], [[s], [s]]), np.array([[y]])).data
    assert abs(single - split) < 1e-12 * max(1, abs(single))


def test_fused_matches_composed(rng):
    K, d, B = 4, 3, 16
    raw = rng.normal(size=(B, mdn.head_width(K, d))) * 2
    y = rng.normal(size=(B, d))
    for elu in (False, True):
        a, b = Tensor(raw.copy(), requires_grad=True), Tensor(raw.copy(), requires_grad=True)
        la = mdn.mdn_nll_fused(a, y, K, d, elu=elu)
        lb = mdn.mdn_nll(mdn.transform_head(b, K, d, elu=elu), y)
        dc.backward(la)
        dc.backward(lb)
        assert abs(la.data - lb.data) < 1e-12
        assert np.allclose(a.grad, b.grad, rtol=1e-10, atol=1e-13)


def test_nll_gradient_matches_fd(rng):
    K, d = 3, 2
    raw = rng.normal(size=(5, mdn.head_width(K, d)))
    y = rng.normal(size=(5, d))
    t = Tensor(raw.copy(), requires_grad=True)
    dc.backward(mdn.mdn_nll(mdn.transform_head(t, K, d), y))
    num = dc.numerical_grad(lambda: float(mdn.mdn_nll(mdn.transform_head(Tensor(raw), K, d), y).data), raw)
    assert np.allclose(t.grad, num, rtol=1e-5, atol=1e-8)


def test_nll_stress_envelope_finite():
    rows = []
    for za in (-500.0, 0.0, 500.0):
        for zs in (-40.0, 0.0, 40.0):
            rows.append([za, -za, -3.0, 2.0, zs, zs])
    raw = np.array(rows)
    for off in (0.0, 1e3):
        y = np.full((len(raw), 1), off)
        t = Tensor(raw.copy(), requires_grad=True)
        loss = mdn.mdn_nll_fused(t, y, 2, 1)
        dc.backward(loss)
        assert np.isfinite(loss.data) and np.all(np.isfinite(t.grad))


def test_k1_analytic_gaussian(rng):
    for _ in range(50):
        mu, zs, y = rng.normal(size=3) * 2
        s = np.logaddexp(0, zs) + 1e-6
        want = 0.5 * math.log(2 * math.pi) + math.log(s) + 0.5 * ((y - mu) / s) ** 2
        got = float(mdn.mdn_nll_fused(np.array([[0.0, mu, zs]]), np.array([[y]]), 1, 1).data)
        assert abs(got - want) < 1e-12 * max(1, abs(want))


def test_degenerate_limit():
    # perfect single-component fit on constant data: sigma -> eps
    eps, d = 1e-6, 2
    raw = np.array([[0.0, 1.0, 2.0, -60.0, -60.0]])
    got = float(mdn.mdn_nll_fused(raw, np.array([[1.0, 2.0]]), 1, d, eps=eps).data)
    want = d * math.log(eps * math.sqrt(2 * math.pi))
    assert abs(got - want) < 1e-8


def test_nll_equals_negative_log_density(rng):
    K, d = 3, 2
    raw = rng.normal(size=(20, mdn.head_width(K, d)))
    y = rng.normal(size=(20, d))
    p = mdn.transform_head(raw, K, d)
    per = mdn.per_sample_nll(p, y).data
    assert np.allclose(per, -np.log(mdn.mdn_density(p, y)), rtol=0, atol=1e-8)
    assert np.allclose(per, mdn.nll_values(raw, y, K, d), rtol=0, atol=1e-12)


# ------------------------------------------------------------------ density
def test_density_integrates_to_one():
    p = mix([0.2, 0.5, 0.3], [[-2.0], [0.0], [3.0]], [[0.3], [1.0], [0.5]])
    ys = np.linspace(-20, 20, 40001)
    dens = mdn.mdn_density(MixtureParams(*(np.repeat(a, len(ys), axis=0) for a in (p.logits, p.mu, p.sigma))),
                           ys[:, None])
    assert abs(np.trapezoid(dens, ys) - 1) < 1e-3


def test_density_symmetric_mixture():
    p = mix([0.5, 0.5], [[-1.0], [3.0]], [[0.7], [0.7]])
    for off in (0.1, 0.8, 2.5):
        a = mdn.mdn_density(p, np.array([[1.0 + off]]))
        b = mdn.mdn_density(p, np.array([[1.0 - off]]))
        assert abs(a - b) < 1e-15


def test_density_at_separated_mean():
    p = mix([0.25, 0.75], [[-10.0], [10.0]], [[0.5], [0.4]])
    assert abs(mdn.mdn_density(p, np.array([[-10.0]]))[0] - 0.25 / (0.5 * math.sqrt(2 * math.pi))) < 1e-12


# ------------------------------------------------------------------ sampling / pruning
def test_one_hot_samples_single_component(rng):
    p = mix([0.0 + 1e-300, 1.0], [[-5.0], [5.0]], [[0.1], [0.1]])
    _, comp = mdn.mdn_sample(p, rng, 1000, return_components=True)
    assert np.all(comp == 1)


def test_component_frequencies_binomial(rng):
    alpha = np.array([0.1, 0.6, 0.3])
    p = mix(alpha, [[0.0]] * 3, [[1.0]] * 3)
    n = 10_000
    _, comp = mdn.mdn_sample(p, rng, n, return_components=True)
    freq = np.bincount(comp.ravel(), minlength=3)
    sd = np.sqrt(n * alpha * (1 - alpha))
    assert np.all(np.abs(freq - n * alpha) < 3 * sd)


def test_prune_threshold_sampling(rng):
    p = mix([0.995, 0.005], [[0.0], [100.0]], [[1.0], [1.0]])
    _, comp = mdn.mdn_sample(p, rng, 5000, prune=0.01, return_components=True)
    assert np.all(comp == 0)


def test_sample_mean_matches_mixture_mean(rng):
    p = mix([0.2, 0.8], [[-1.0, 2.0], [3.0, 0.0]], [[0.5, 0.5], [1.0, 0.2]])
    s = mdn.mdn_sample(p, rng, 40_000)[0]
    se = s.std(axis=0) / math.sqrt(len(s))
    assert np.all(np.abs(s.mean(axis=0) - mdn.mixture_mean(p)[0]) < 4 * se)


def test_prune_weights_examples():
    a = np.array([[0.5, 0.49, 0.01]])
    assert np.array_equal(mdn.prune_weights(a, 0.0), a)
    assert np.allclose(mdn.prune_weights(a, 0.02), [[0.5 / 0.99, 0.49 / 0.99, 0.0]], rtol=0, atol=1e-15)
    one_hot = np.array([[0.0, 1.0, 0.0]])
    assert np.array_equal(mdn.prune_weights(one_hot, 0.9), one_hot)
    with pytest.raises(ValueError):
        mdn.prune_weights(a, 0.5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 6, elements=st.floats(0.001, 1.0)), st.floats(0, 0.15))
def test_property_pruned_weights_on_simplex(w, tau):
    a = (w / w.sum())[None]
    if tau >= a.max():
        return
    out = mdn.prune_weights(a, tau)
    assert abs(out.sum() - 1) < 1e-12 and np.all(out[a < tau] == 0)


# ------------------------------------------------------------------ entropy / report
def test_entropy_examples():
    assert np.isclose(mdn.mixture_entropy(np.full(8, 0.125))[0], math.log(8), rtol=0, atol=1e-15)
    assert mdn.mixture_entropy([0.0, 1.0, 0.0])[0] == 0.0
    assert abs(mdn.mixture_entropy([0.5, 0.25, 0.25])[0] - 1.5 * math.log(2)) < 1e-15


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, 5, elements=st.floats(0, 1)))
def test_property_entropy_bounds(w):
    if w.sum() == 0:
        return
    h = mdn.mixture_entropy(w / w.sum())[0]
    assert -1e-15 <= h <= math.log(5) + 1e-12


def test_component_report_untrained_near_uniform(rng):
    m = mdn.build_model("mdn", 2, 1, K=4, width=8, layers=2, seed=0)
    for t in m.params.values():          # zero output layer: every logit equal
        if t.shape[-1] == mdn.head_width(4, 1):
            t.data[...] = 0.0
    rep = mdn.component_report(m, rng.normal(size=(50, 2)))
    assert np.allclose(rep.marginal, 0.25) and abs(rep.marginal.sum() - 1) < 1e-12
    assert len(rep.to_rows()) == 4 and list(rep.top(2)) == list(rep.order[:2])


# ------------------------------------------------------------------ model
def test_model_clone_independent():
    m = mdn.build_model("mdn", 1, 1, K=2, width=4, layers=1, seed=3)
    c = m.clone()
    c.params["mlp.0.w"].data[...] = 0
    assert m.params["mlp.0.w"].data.any()


def test_mse_model_has_no_mixture():
    m = mdn.build_model("mse", 1, 1, width=4, layers=1)
    with pytest.raises(TypeError):
        m.mixture(np.zeros((1, 1)))


def test_unknown_kind():
    with pytest.raises(ValueError):
        mdn.build_model("cfm", 1, 1)


def test_rnn_model_output_layout(rng):
    m = mdn.build_model("rnn_mdn", 3, 3, K=2, width=5, layers=1, seed=1)
    raw = m.predict_raw(rng.normal(size=(4, 2, 3)))
    assert raw.shape == (8, mdn.head_width(2, 3))
