import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ruackit import style_attack as sa
from ruackit.autodiff import Tape, backward, grad_check
from ruackit.style_attack import ObjectStyle, StyleResidual


def _two_objects(h=12, w=12):
    rng = np.random.default_rng(0)
    img = rng.uniform(0.2, 0.8, size=(3, h, w))
    a = np.zeros((h, w))
    a[1:5, 1:6] = 1
    b = np.zeros((h, w))
    b[7:11, 4:10] = 1
    return img, [a, b]


# --------------------------------------------------------------------------
# statistics


def test_constant_red_object():
    img = np.zeros((3, 4, 4))
    img[0] = 1.0
    s = sa.extract_object_style(img, np.ones((4, 4)))
    assert s.mu.tolist() == [1, 0, 0] and s.sigma.tolist() == [0, 0, 0]


def test_two_pixel_population_std():
    img = np.zeros((3, 1, 3))
    img[:, 0, 1] = 1.0
    s = sa.extract_object_style(img, np.array([[1, 1, 0]]))
    assert np.allclose(s.mu, 0.5) and np.allclose(s.sigma, 0.5)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        sa.extract_object_style(np.zeros((3, 2, 2)), np.zeros((2, 2)))


# --------------------------------------------------------------------------
# residual predictor


def test_zero_weights_give_zero_residual():
    p = {k: np.zeros_like(v) for k, v in sa.init_style_params().items()}
    r = sa.predict_style_residual(np.random.default_rng(1).normal(size=12), p)
    assert not r.as_vector().any()


def test_grl_does_not_change_forward():
    p = sa.init_style_params(seed=3)
    x = np.random.default_rng(2).normal(size=12)
    t = Tape()
    P = {k: t.const(v) for k, v in p.items()}
    a = sa.predict_style_residual_var(t, t.const(x), P, grl_scale=1.0).value
    b = sa.predict_style_residual_var(t, t.const(x), P, grl_scale=None).value
    assert np.array_equal(a, b)


def _style_pipeline_grads(grl, use_gcn):
    img, masks = _two_objects()
    params = {**sa.init_style_params(seed=5), **sa.init_gcn_params(seed=6)}
    rng = np.random.default_rng(7)
    pooled = rng.normal(size=(2, 12))
    styles = [sa.extract_object_style(img, m) for m in masks]
    t = Tape()
    P = {k: t.param(k, v) for k, v in params.items()}
    raw = [sa.predict_style_residual_var(t, t.const(pooled[i]), P, grl_scale=None) for i in range(2)]
    R = t.concat([r.reshape(1, 9) for r in raw], axis=0)
    if use_gcn:
        R = sa.gcn_refine_var(t, sa.build_object_graph(masks, pooled), R, t.const(pooled), P)
    if grl:
        R = t.grl(R, 1.0)
    mus, sigs = zip(*[sa.bound_style_var(t, s, R[i]) for i, s in enumerate(styles)])
    out = sa.adain_var(t, img, masks, styles, mus, sigs)
    t.output("loss", (out * t.const(rng.normal(size=img.shape))).sum())
    return backward(t, {"loss": 1.0})


@pytest.mark.parametrize("use_gcn", [False, True])
def test_attacker_gradient_sign_is_exact(use_gcn):
    with_grl = _style_pipeline_grads(True, use_gcn)
    without = _style_pipeline_grads(False, use_gcn)
    for name, g in without.items():
        if name.startswith("gcn.") and not use_gcn:
            continue
        assert np.array_equal(with_grl[name], -g), name
    assert any(np.abs(g).max() > 0 for g in without.values())


# --------------------------------------------------------------------------
# bounding


def test_bound_style_examples():
    s = ObjectStyle(np.array([0.4, 0.2, 0.7]), np.array([0.1, 0.2, 0.3]))
    z = sa.bound_style(s, StyleResidual.from_vector(np.zeros(9)))
    assert np.array_equal(z.mu, s.mu) and np.array_equal(z.sigma, s.sigma)
    sat = sa.bound_style(s, StyleResidual.from_vector([800] * 3 + [0] * 3 + [800] * 3))
    assert np.allclose(sat.mu, s.mu * 1.3 + 0.3, rtol=1e-15)
    hand = sa.bound_style(s, StyleResidual.from_vector([np.log(3.0)] + [0] * 8), eps_mu=0.3)
    assert hand.mu[0] == pytest.approx(0.46, rel=1e-14)


def test_bound_style_rejects_nonpositive_eps():
    s = ObjectStyle(np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        sa.bound_style(s, StyleResidual.from_vector(np.zeros(9)), eps_mu=0.0)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, 3, elements=st.floats(-2, 2)),
       arrays(np.float64, 3, elements=st.floats(1e-3, 2)),
       st.floats(0.01, 0.9), st.floats(0.01, 0.9), st.floats(0.01, 0.9))
def test_bound_style_respects_bounds(r, mu, sigma, e_mu, e_sig, e_shift):
    out = sa.bound_style(ObjectStyle(mu, sigma), StyleResidual.from_vector(r), e_mu, e_sig, e_shift)
    tol = 1e-12
    assert np.all(np.abs(out.mu - mu) <= np.abs(mu) * e_mu + e_shift + tol)
    assert np.all(np.abs(out.sigma / sigma - 1) <= e_sig + tol)
    assert np.all(out.sigma >= 0)


def test_bound_style_tape_matches_eager():
    s = ObjectStyle(np.array([0.4, 0.2, 0.7]), np.array([0.1, 0.2, 0.3]))
    r = np.random.default_rng(3).normal(size=9) * 2
    t = Tape()
    mu, sig = sa.bound_style_var(t, s, t.const(r), 0.3, 0.2, 0.1)
    ref = sa.bound_style(s, StyleResidual.from_vector(r), 0.3, 0.2, 0.1)
    assert np.allclose(mu.value, ref.mu, rtol=1e-15) and np.allclose(sig.value, ref.sigma, rtol=1e-15)


# --------------------------------------------------------------------------
# AdaIN


def test_adain_identity_when_styles_match():
    img, masks = _two_objects()
    styles = [sa.extract_object_style(img, m) for m in masks]
    out = sa.adain_apply(img, masks, styles)
    assert np.allclose(out, img, atol=1e-15)


def test_adain_zero_sigma_gives_constant():
    img, masks = _two_objects()
    out = sa.adain_apply(img, masks[:1], [ObjectStyle(np.array([0.1, 0.5, 0.9]), np.zeros(3))])
    sel = masks[0] > 0.5
    assert np.allclose(out[:, sel], np.array([[0.1], [0.5], [0.9]]))


def test_adain_hand_case():
    img = np.zeros((3, 1, 3))
    img[:, 0, 0], img[:, 0, 1] = 0.2, 0.6
    out = sa.adain_apply(img, [np.array([[1, 1, 0]])], [ObjectStyle(np.full(3, 0.5), np.full(3, 0.1))])
    assert np.allclose(out[:, 0, :2], [[0.4, 0.6]] * 3, atol=1e-15)


def test_adain_overlap_rejected():
    img, masks = _two_objects()
    styles = [sa.extract_object_style(img, m) for m in masks]
    with pytest.raises(ValueError):
        sa.adain_apply(img, [masks[0], masks[0]], styles)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), arrays(np.float64, 6, elements=st.floats(0, 3)))
def test_adain_background_bit_identical(seed, targets):
    img, masks = _two_objects()
    img = np.random.default_rng(seed).uniform(size=img.shape)
    styles = [ObjectStyle(targets[:3], targets[3:]), ObjectStyle(targets[3:], targets[:3])]
    out = sa.adain_apply(img, masks, styles)
    bg = (masks[0] + masks[1]) == 0
    assert np.array_equal(out[:, bg], img[:, bg])
    assert out.min() >= 0 and out.max() <= 1


def test_adain_tape_matches_eager():
    img, masks = _two_objects()
    src = [sa.extract_object_style(img, m) for m in masks]
    adv = [ObjectStyle(s.mu * 1.2, s.sigma * 0.8) for s in src]
    t = Tape()
    out = sa.adain_var(t, img, masks, src, [t.const(a.mu) for a in adv], [t.const(a.sigma) for a in adv])
    assert np.allclose(out.value, sa.adain_apply(img, masks, adv), atol=1e-15)


# --------------------------------------------------------------------------
# object graph and GCN


def test_single_object_graph():
    g = sa.build_object_graph([np.ones((5, 5))], np.ones((1, 4)))
    assert g.adjacency.tolist() == [[1.0]] and g.normalized().tolist() == [[1.0]]


def test_identical_objects_weight_three():
    m = np.zeros((10, 10))
    m[2:6, 2:7] = 1
    g = sa.build_object_graph([m, m], np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert g.adjacency[0, 1] == pytest.approx(3.0, rel=1e-15)


def test_far_dissimilar_objects_disconnected():
    a, b = np.zeros((40, 40)), np.zeros((40, 40))
    a[1:4, 1:4] = 1
    b[35:39, 35:39] = 1
    g = sa.build_object_graph([a, b], np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert g.adjacency.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_graph_distance_term_by_hand():
    a, b = np.zeros((20, 20)), np.zeros((20, 20))
    a[2:6, 2:6] = 1
    b[2:6, 9:13] = 1  # boundary columns 5 and 9: distance 4
    th = sa.GraphThresholds(tau_d=10.0, d_max=8.0, tau_sim=2.0)
    g = sa.build_object_graph([a, b], np.ones((2, 3)), th)
    assert g.terms["dist"][0, 1] == pytest.approx(0.5) and g.adjacency[0, 1] == pytest.approx(0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_graph_invariants(seed, k):
    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(k):
        m = np.zeros((16, 16))
        y, x = rng.integers(0, 12, size=2)
        m[y:y + rng.integers(1, 5), x:x + rng.integers(1, 5)] = 1
        masks.append(m)
    g = sa.build_object_graph(masks, rng.normal(size=(k, 5)))
    A = g.adjacency
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 1) and np.all(A >= 0)
    assert np.allclose(g.normalized().sum(axis=1), 1.0, rtol=1e-15)


def test_gcn_zero_weights_is_identity():
    img, masks = _two_objects()
    p = {k: np.zeros_like(v) for k, v in sa.init_gcn_params().items()}
    r = np.random.default_rng(1).normal(size=(2, 9))
    pooled = np.random.default_rng(2).normal(size=(2, 12))
    out = sa.gcn_refine(sa.build_object_graph(masks, pooled), r, pooled, p)
    assert np.array_equal(out, r)


def test_gcn_single_node_is_per_node_transform():
    p = sa.init_gcn_params(seed=4)
    r = np.random.default_rng(1).normal(size=(1, 9))
    pooled = np.random.default_rng(2).normal(size=(1, 12))
    out = sa.gcn_refine(sa.build_object_graph([np.ones((4, 4))], pooled), r, pooled, p)
    h = np.concatenate([r[:, :6], pooled @ p["gcn.proj_w"] + p["gcn.proj_b"]], axis=1) @ p["gcn.w1"]
    h = (h - h.mean()) / np.sqrt(h.var() + 1e-5) * p["gcn.ln_g"] + p["gcn.ln_b"]
    h = np.maximum(h, 0) @ p["gcn.w2"]
    assert np.allclose(out[:, :6], r[:, :6] + sa.GCN_ALPHA * h, atol=1e-14)
    assert np.array_equal(out[:, 6:], r[:, 6:])


def test_style_mlp_and_bounding_grad_check():
    assert grad_check(_style_mlp_tape(Tape(), np.random.default_rng(8))) < 1e-4


def _style_mlp_tape(t, rng):
    P = {k: t.param(k, v) for k, v in sa.init_style_params(seed=2).items()}
    r = sa.predict_style_residual_var(t, t.const(rng.normal(size=12)), P, grl_scale=None)
    s = ObjectStyle(np.array([0.4, 0.3, 0.6]), np.array([0.1, 0.15, 0.2]))
    mu, sig = sa.bound_style_var(t, s, r)
    t.output("mu", mu)
    t.output("sig", sig)
    return t
