import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from i2iunlearn.metrics import GaussianMoments
from i2iunlearn.models import init_model
from i2iunlearn.numerics import Rng
from i2iunlearn.theory import (
    INF, Density1D, DiscreteDist, bound_components, bound_rhs, check_bound,
    components_from_embeddings, construct_infinite_kl, gaussian_1d, infonce_estimate,
    kl_discrete, kl_gaussian, kl_quadrature, lemma1_family_check, perturb_encoder,
    random_mixture, theorem1_sweep, verify_theorem1,
)
from i2iunlearn.transforms import MaskSpec, make_mask

MASK = make_mask(MaskSpec("center_crop", 4))


def test_kl_discrete_hand_cases():
    assert kl_discrete((0.3, 0.7), (0.3, 0.7)) == 0.0
    assert kl_discrete((0.5, 0.5), (0.75, 0.25)) == pytest.approx(0.143841, abs=1e-6)
    assert kl_discrete((0.5, 0.5), (1.0, 0.0)) == INF
    assert kl_discrete((1.0, 0.0), (0.5, 0.5)) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        kl_discrete((0.5, 0.5), (1.0,))
    with pytest.raises(ValueError):
        DiscreteDist((0.5, 0.6))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 31))
def test_kl_discrete_nonnegative(n, seed):
    r = np.random.default_rng(seed)
    p, q = r.dirichlet(np.ones(n)), r.dirichlet(np.ones(n))
    p, q = p / p.sum(), q / q.sum()
    assert kl_discrete(p, q) >= 0.0
    assert kl_discrete(p, p) == 0.0


def test_infinite_kl_example():
    q = construct_infinite_kl((0.5, 0.3, 0.2), 0, 1, 0.1)
    # z = 1 - 0.5 - 0.3 + 0.1 = 0.3: k gets 0.1/0.3, the untouched entry 0.2/0.3
    assert q.probs == pytest.approx((0.0, 1 / 3, 2 / 3), abs=1e-15)
    assert kl_discrete((0.5, 0.3, 0.2), q) == INF
    assert construct_infinite_kl((0.5, 0.3, 0.2), 0, 1, 0.2) != q


def test_infinite_kl_errors():
    with pytest.raises(ValueError):
        construct_infinite_kl((0.0, 0.5, 0.5), 0, 1, 0.1)
    with pytest.raises(ValueError):
        construct_infinite_kl((0.5, 0.5), 1, 1, 0.1)
    with pytest.raises(ValueError):
        construct_infinite_kl((0.5, 0.5), 0, 1, 0.0)
    with pytest.raises(IndexError):
        construct_infinite_kl((0.5, 0.5), 0, 4, 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2 ** 31), st.floats(1e-3, 5.0))
def test_infinite_kl_always_valid(n, seed, kappa):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(n))
    p = p / p.sum()
    j, k = r.choice(n, 2, replace=False)
    q = construct_infinite_kl(p, int(j), int(k), kappa)
    assert abs(sum(q.probs) - 1.0) <= 1e-12 and min(q.probs) >= 0.0
    assert q.probs[j] == 0.0 and kl_discrete(p, q) == INF


def test_kl_gaussian_cases():
    a = gaussian_1d(0.0, 1.0)
    assert kl_gaussian(a, a) == pytest.approx(0.0, abs=1e-12)
    assert kl_gaussian(a, GaussianMoments([1.0], [[1.0]], 10)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        kl_gaussian(a, GaussianMoments([0.0], [[0.0]], 10))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.3, 3), st.floats(-3, 3), st.floats(0.3, 3))
def test_kl_gaussian_matches_quadrature(m1, s1, m2, s2):
    closed = kl_gaussian(GaussianMoments([m1], [[s1 ** 2]], 10), GaussianMoments([m2], [[s2 ** 2]], 10))
    assert abs(kl_quadrature(Density1D("gaussian", (m1, s1)), Density1D("gaussian", (m2, s2))) - closed) < 1e-4


def test_kl_quadrature_cases():
    p = Density1D("logistic", (0.5, 1.2))
    assert abs(kl_quadrature(p, p)) < 1e-8
    assert kl_quadrature(Density1D("gaussian", (0, 1)), Density1D("uniform", (-1, 1))) == INF


@pytest.mark.parametrize("kind", ["gaussian", "laplace", "uniform", "logistic"])
def test_densities_integrate_to_one(kind):
    d = Density1D.matched(kind, 0.7, 1.3)
    assert abs(d.mass() - 1.0) < 1e-6
    assert d.mean == pytest.approx(0.7, abs=1e-12) and d.sd == pytest.approx(1.3, rel=1e-12)


def test_mixture_moments_and_mass():
    d = random_mixture(Rng(4))
    assert abs(d.mass() - 1.0) < 1e-6
    w, mu, sd = (np.array(v) for v in d.params)
    assert d.mean == pytest.approx(w @ mu)
    assert d.sd ** 2 == pytest.approx(w @ (sd ** 2 + mu ** 2) - (w @ mu) ** 2)


def test_lemma1_degenerate_skip():
    r = lemma1_family_check(Density1D("gaussian", (0.0, 2.0)))
    assert r.skipped and r.gaussian_is_max is None and not r.candidates
    r = lemma1_family_check(Density1D("mixture", ((1.0,), (0.0,), (1.0,))))
    assert r.skipped


def test_lemma1_reports_every_candidate_and_flags_uniform():
    r = lemma1_family_check(random_mixture(Rng(0)))
    kinds = [c.kind for c in r.candidates]
    assert kinds == ["gaussian", "laplace", "uniform", "logistic"]
    uni = r.candidates[2]
    assert uni.excluded and uni.kl == INF
    g = r.candidates[0]
    assert g.margin == 0.0 and not g.excluded
    assert isinstance(r.gaussian_is_max, bool)


def test_infonce_cases():
    e = np.eye(4)
    assert infonce_estimate(e, e) == pytest.approx(math.log(4) - math.log(math.e + 3) + 1, abs=1e-12)
    assert abs(infonce_estimate(e, e) - 0.6426) < 1e-4
    assert infonce_estimate(e[:1], e[:1]) == 0.0
    with pytest.raises(ValueError):
        infonce_estimate(2 * e, e)


def _unit(r, k, d):
    x = r.normal(size=(k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(2, 8), st.integers(0, 2 ** 31))
def test_infonce_at_most_log_k(k, d, seed):
    r = np.random.default_rng(seed)
    assert infonce_estimate(_unit(r, k, d), _unit(r, k, d)) <= math.log(k) + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(2, 8), st.floats(0.0, 2.0), st.integers(0, 2 ** 31))
def test_bound_holds_on_random_embeddings(k, d, spread, seed):
    r = np.random.default_rng(seed)
    ref = _unit(r, k, d)
    new = ref + spread * r.normal(size=(k, d))
    new /= np.linalg.norm(new, axis=1, keepdims=True)
    c = components_from_embeddings(ref, new, ref, new)
    for chk in check_bound(c):
        assert chk.lhs >= chk.rhs - 1e-9 and chk.passed


def test_bound_tight_at_zero_distance():
    ref = _unit(np.random.default_rng(0), 8, 5)
    assert abs(infonce_estimate(ref, ref) - bound_rhs(np.zeros(8), ref @ ref.T)) < 1e-12


def test_bound_components_properties(images):
    m0 = init_model(0)
    noise = np.random.default_rng(1).normal(size=images.shape)
    same = bound_components(m0.encoder, m0.encoder, images, images, noise, MASK)
    assert not same.eps.any()
    assert np.allclose(np.diag(same.R), 1.0, atol=1e-12) and np.allclose(np.diag(same.F), 1.0, atol=1e-12)
    target = perturb_encoder(m0.encoder, 0.1, Rng(2))
    c = bound_components(target, m0.encoder, images, images, noise, MASK)
    direct = np.sqrt(((c.retain_new - c.retain_ref) ** 2).sum(axis=1))
    assert np.max(np.abs(direct - c.eps)) < 1e-12
    assert np.all(np.abs(c.R) <= 1.0) and np.all(c.delta >= 0)


def test_bound_components_errors(images):
    m0 = init_model(0)
    bad = dict(m0.encoder)
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError):
        bound_components(bad, m0.encoder, images, images, images, MASK)
    with pytest.raises(ValueError):
        bound_components(m0.encoder, m0.encoder, images, images, images[:2], MASK)


def test_verify_theorem1_at_original_is_tight(images):
    m0 = init_model(0)
    noise = np.random.default_rng(1).normal(size=images.shape)
    retain, forget = verify_theorem1(m0.encoder, m0.encoder, images, images[::-1], noise, MASK)
    assert retain.tight and abs(retain.lhs - retain.rhs) < 1e-9
    # the forget side compares against noise embeddings, so delta > 0 at theta0
    assert forget.tight is None and forget.passed
    with pytest.raises(ValueError):
        verify_theorem1(m0.encoder, m0.encoder, images, images, noise, MASK, k=99)


def test_small_sweep_monotone_scan(images):
    imgs = np.random.default_rng(3).uniform(size=(16, 1, 32, 32))
    rep = theorem1_sweep(init_model(1).encoder, imgs, MASK, trials=9, ks=(2, 4, 8), seed=5)
    assert rep.violations == 0 and rep.tight
    assert len(rep.trials) == 18 and len(rep.tightness) == 3
    scales = [t.scale for t in rep.trials]
    assert scales == sorted(scales)
    assert '"violations": 0' in rep.to_json()
