import numpy as np
import pytest
import torch

from mri2pet.sampler import NonFiniteOutputError, ddim_sample, ddim_timesteps, ddpm_ancestral_sample
from mri2pet.schedule import build_schedule


def test_timesteps():
    ts = ddim_timesteps(1000, 100)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 101
    assert np.all(np.diff(ts) < 0)
    assert list(ddim_timesteps(10, 10)) == list(range(10, -1, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)


def test_ddim_oracle_recovers_target():
    s = build_schedule("cosine", 1000)
    target = torch.rand(3, 5, 8, 8, dtype=torch.float64)
    for steps in (10, 100, 1000):
        out = ddim_sample(lambda x, t: target, s, steps, target.shape, dtype=torch.float64, clamp=None)
        assert torch.allclose(out, target, atol=1e-10)


def test_ddim_single_step_hand_computed():
    # one DDIM step from t to s with a constant x0 oracle
    s = build_schedule("linear", 10)
    x_T = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    x0 = torch.tensor([[0.5, 0.25]], dtype=torch.float64)
    out, traj = ddim_sample(lambda x, t: x0, s, 2, x_T.shape, x_T=x_T, dtype=torch.float64, clamp=None,
                            return_trajectory=True)
    t, m = 10, 5
    eps = (x_T - s.alpha[t] * x0) / s.sigma[t]
    expected = s.alpha[m] * x0 + s.sigma[m] * eps
    assert torch.allclose(traj[1], expected)
    assert torch.allclose(out, x0)


def test_ddim_deterministic_and_seed_sensitive():
    s = build_schedule("cosine", 100)
    torch.manual_seed(0)
    net = torch.nn.Conv2d(1, 1, 3, padding=1)
    model = lambda x, t: torch.tanh(net(x))
    a = ddim_sample(model, s, 20, (2, 1, 6, 6), seed=1)
    b = ddim_sample(model, s, 20, (2, 1, 6, 6), seed=1)
    c = ddim_sample(model, s, 20, (2, 1, 6, 6), seed=2)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_conditions_are_forwarded():
    s = build_schedule("cosine", 50)
    seen = {}

    def model(x, t, cond=None):
        seen["cond"] = cond
        return torch.zeros_like(x)
    ddim_sample(model, s, 5, (1, 1, 2, 2), conditions={"cond": 7})
    assert seen["cond"] == 7


def test_clamp_applies_to_prediction():
    s = build_schedule("cosine", 50)
    out = ddim_sample(lambda x, t: torch.full_like(x, 5.0), s, 5, (1, 1, 2, 2))
    assert torch.allclose(out, torch.full((1, 1, 2, 2), 1.1))


def test_non_finite_output_raises():
    s = build_schedule("cosine", 50)
    with pytest.raises(NonFiniteOutputError, match="timestep 50"):
        ddim_sample(lambda x, t: x * float("nan"), s, 5, (1, 1, 2, 2))


@pytest.mark.parametrize("variance", ["posterior", "beta"])
def test_ancestral_oracle_ends_on_target(variance):
    s = build_schedule("cosine", 100)
    target = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    out = ddpm_ancestral_sample(lambda x, t: target, s, target.shape, variance=variance, dtype=torch.float64,
                                clamp=None)
    assert torch.allclose(out, target, atol=1e-12)


def test_ancestral_gaussian_data_marginal():
    # for data x0 ~ N(m, v) the optimal x0 predictor is linear; sampling with it
    # must reproduce the data distribution
    s = build_schedule("cosine", 200)
    m, v = 0.4, 0.09

    def oracle(x, t):
        a = torch.tensor(s.alpha[t.numpy()], dtype=x.dtype).reshape(-1, 1)
        sg = torch.tensor(s.sigma[t.numpy()], dtype=x.dtype).reshape(-1, 1)
        return m + a * v / (a**2 * v + sg**2) * (x - a * m)
    out = ddpm_ancestral_sample(oracle, s, (4000, 1), seed=0, dtype=torch.float64, clamp=None)
    assert abs(out.mean().item() - m) < 0.03
    assert abs(out.var().item() - v) < 0.015


def test_ancestral_rejects_unknown_variance():
    with pytest.raises(ValueError):
        ddpm_ancestral_sample(lambda x, t: x, build_schedule("cosine", 10), (1, 1), variance="learned")
