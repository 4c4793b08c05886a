import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multiref.latent import (
    GaussianParams,
    PriorSpec,
    gaussian_kl,
    gaussian_log_prob,
    gmm_log_prob,
    lgm_aggregate,
    one_hot_weights,
    prior_kl,
    sample_gaussian,
    sample_gmm,
    sample_lgm,
)



@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def fixture(K, D, seed):
    g = torch.Generator().manual_seed(seed)
    mean = torch.randn(K, D, generator=g)
    std = 0.2 + torch.rand(K, D, generator=g)
    w = torch.softmax(torch.randn(K, generator=g), -1)
    return GaussianParams(mean, std), w


def test_lgm_aggregate_hand_case():
    comps = GaussianParams(torch.tensor([[0.0], [2.0]]), torch.tensor([[1.0], [1.0]]))
    agg = lgm_aggregate(comps, torch.tensor([0.5, 0.5]))
    assert agg.mean.item() == pytest.approx(1.0)
    assert agg.std.square().item() == pytest.approx(0.5)


def test_lgm_k1_returns_component():
    comps = GaussianParams(torch.tensor([[0.3, -1.0]]), torch.tensor([[0.7, 2.0]]))
    noise = torch.randn(1, 2)
    state = sample_lgm(comps, torch.ones(1), noise)
    assert torch.equal(state.z, comps.mean[0] + comps.std[0] * noise[0])


def test_lgm_onehot_is_that_component():
    comps, w = fixture(3, 4, 1)
    noise = torch.randn(3, 4)
    state = sample_lgm(comps, one_hot_weights(w, 1), noise)
    assert torch.allclose(state.z, comps.mean[1] + comps.std[1] * noise[1])


@pytest.mark.parametrize("K", [2, 5])
def test_lgm_sample_moments(K):
    comps, w = fixture(K, 3, K)
    g = torch.Generator().manual_seed(0)
    noise = torch.randn(200_000, K, 3, generator=g)
    z = sample_lgm(comps, w, noise).z
    agg = lgm_aggregate(comps, w)
    assert torch.allclose(z.mean(0), agg.mean, atol=0.01)
    assert torch.allclose(z.var(0), agg.std.square(), rtol=0.02)


def test_gmm_hand_case():
    comps = GaussianParams(torch.tensor([[0.0], [2.0]]), torch.tensor([[1.0], [1.0]]))
    state = sample_gmm(comps, torch.tensor([0.5, 0.5]), torch.Generator().manual_seed(0), (200_000,))
    assert state.z.mean().item() == pytest.approx(1.0, abs=0.02)
    assert state.z.var().item() == pytest.approx(2.0, rel=0.02)


def test_gmm_weight_zero_never_selected():
    comps = GaussianParams(torch.tensor([[0.0], [100.0]]), torch.tensor([[1e-3], [1e-3]]))
    state = sample_gmm(comps, torch.tensor([1.0, 0.0]), torch.Generator().manual_seed(0), (10_000,))
    assert state.z.abs().max().item() < 1.0


def test_gmm_gradient_reaches_selected_component_only():
    mean = torch.tensor([[0.0], [2.0]], requires_grad=True)
    comps = GaussianParams(mean, torch.ones(2, 1))
    state = sample_gmm(comps, torch.tensor([1.0, 0.0]), torch.Generator().manual_seed(0))
    state.z.sum().backward()
    assert mean.grad.tolist() == [[1.0], [0.0]]


def test_gumbel_relaxation_is_differentiable_in_weights():
    comps, _ = fixture(3, 2, 4)
    logits = torch.zeros(3, requires_grad=True)
    state = sample_gmm(comps, torch.softmax(logits, -1), torch.Generator().manual_seed(1), temperature=0.5)
    state.z.sum().backward()
    assert logits.grad.abs().sum() > 0


def test_gaussian_kl_examples():
    N01 = GaussianParams(torch.zeros(1), torch.ones(1))
    assert gaussian_kl(N01, N01).item() == 0.0
    kl = gaussian_kl(GaussianParams(torch.ones(1), torch.ones(1)), N01).item()
    assert kl == pytest.approx(0.5)
    kl = gaussian_kl(GaussianParams(torch.zeros(1), torch.full((1,), 2.0)), N01).item()
    assert kl == pytest.approx(math.log(0.5) + 2.0 - 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_gaussian_kl_nonnegative(seed, D):
    g = torch.Generator().manual_seed(seed)
    q = GaussianParams(torch.randn(D, generator=g), 0.1 + torch.rand(D, generator=g) * 3)
    p = GaussianParams(torch.randn(D, generator=g), 0.1 + torch.rand(D, generator=g) * 3)
    assert gaussian_kl(q, p).item() >= -1e-12
    assert gaussian_kl(q, q).item() == pytest.approx(0.0, abs=1e-12)


def test_gaussian_kl_matches_monte_carlo():
    g = torch.Generator().manual_seed(5)
    q = GaussianParams(torch.randn(3, generator=g), 0.5 + torch.rand(3, generator=g))
    p = GaussianParams(torch.randn(3, generator=g), 0.5 + torch.rand(3, generator=g))
    z = sample_gaussian(q, torch.randn(400_000, 3, generator=g))
    mc = (gaussian_log_prob(z, q) - gaussian_log_prob(z, p)).mean().item()
    assert mc == pytest.approx(gaussian_kl(q, p).item(), rel=0.02)


def test_gaussian_log_prob_standard_normal():
    lp = gaussian_log_prob(torch.zeros(2), GaussianParams(torch.zeros(2), torch.ones(2)))
    assert lp.item() == pytest.approx(-math.log(2 * math.pi))


def test_gmm_log_prob_single_component():
    comps, _ = fixture(1, 3, 2)
    z = torch.randn(3)
    assert torch.allclose(gmm_log_prob(z, comps, torch.ones(1)), gaussian_log_prob(z, comps.component(0)))


def test_prior_kl_lgm_k1_bitwise():
    comps, w = fixture(1, 4, 9)
    q = GaussianParams(torch.randn(4), 0.3 + torch.rand(4))
    spec = PriorSpec("lgm", 1)
    assert torch.equal(prior_kl(q, comps, torch.ones(1), spec), gaussian_kl(q, comps.component(0)))


def test_prior_kl_unimodal_and_lgm_exact():
    comps, w = fixture(3, 2, 11)
    q = GaussianParams(torch.randn(2), 0.5 + torch.rand(2))
    assert torch.equal(prior_kl(q, comps, w, PriorSpec("lgm", 3)), gaussian_kl(q, lgm_aggregate(comps, w)))
    one, _ = fixture(1, 2, 12)
    assert torch.equal(prior_kl(q, one, torch.ones(1), PriorSpec("unimodal")), gaussian_kl(q, one.component(0)))


def test_prior_kl_gmm_monte_carlo_close_to_large_sample():
    comps, w = fixture(3, 2, 13)
    q = GaussianParams(torch.randn(2), 0.5 + torch.rand(2))
    g = torch.Generator().manual_seed(0)
    est = prior_kl(q, comps, w, PriorSpec("gmm", 3), num_samples=200_000, generator=g).item()
    small = [prior_kl(q, comps, w, PriorSpec("gmm", 3), num_samples=16, generator=g).item() for _ in range(400)]
    # the 16-sample estimator is unbiased for the same quantity
    assert np.mean(small) == pytest.approx(est, rel=0.05, abs=0.02)


def test_prior_kl_rejects_hred():
    comps, w = fixture(1, 2, 0)
    with pytest.raises(ValueError):
        prior_kl(GaussianParams(torch.zeros(2), torch.ones(2)), comps, w, PriorSpec("none"))


def test_one_hot_weights_range():
    w = torch.full((2, 4), 0.25)
    assert one_hot_weights(w, 3).tolist() == [[0, 0, 0, 1.0]] * 2
    with pytest.raises(IndexError):
        one_hot_weights(w, 4)


@pytest.mark.parametrize(
    "text, family, K",
    [("none", "none", 1), ("unimodal", "unimodal", 1), ("gmm5", "gmm", 5), ("lgm20", "lgm", 20), ("lgm", "lgm", 1)],
)
def test_prior_spec_parse(text, family, K):
    spec = PriorSpec.parse(text)
    assert (spec.family, spec.K) == (family, K)


def test_prior_spec_rejects_bad_family():
    with pytest.raises(ValueError):
        PriorSpec("vmf")
    with pytest.raises(ValueError):
        PriorSpec("gmm", 0)
