import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mri2pet.schedule import NoiseSchedule, build_schedule, q_sample


def _cosine_oracle(t, T, s=0.008):
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_invariants(kind):
    s = build_schedule(kind, 1000)
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0
    assert np.allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.sigma) > 0)
    assert s.sigma[-1] > 0.99


def test_cosine_matches_closed_form_away_from_clip():
    s = build_schedule("cosine", 1000)
    for t in (1, 10, 250, 500, 900):
        assert s.alpha[t] ** 2 == pytest.approx(_cosine_oracle(t, 1000), rel=1e-10)


def test_cosine_final_step_is_clipped():
    s = build_schedule("cosine", 1000)
    # the unclipped last retention ratio is 0; clipping keeps it at 0.001
    assert s.alpha[1000] ** 2 / s.alpha[999] ** 2 == pytest.approx(0.001)


def test_linear_frozen_values():
    s = build_schedule("linear", 1000)
    # alpha_bar after one step is 1 - beta_1
    assert s.alpha[1] ** 2 == pytest.approx(1 - 1e-4)
    betas = np.linspace(1e-4, 0.02, 1000)
    assert s.alpha[500] ** 2 == pytest.approx(np.prod(1 - betas[:500]), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(1, 3000), kind=st.sampled_from(["cosine", "linear"]))
def test_invariants_any_length(T, kind):
    s = build_schedule(kind, T)
    assert len(s.alpha) == T + 1
    assert np.max(np.abs(s.alpha**2 + s.sigma**2 - 1)) < 1e-6
    assert np.all(np.diff(s.sigma) >= 0)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        build_schedule("cosine", 0)
    with pytest.raises(ValueError):
        build_schedule("sigmoid", 100)
    with pytest.raises(ValueError):
        NoiseSchedule(T=3, alpha=np.ones(3), sigma=np.zeros(3))


def test_serialization_round_trip():
    s = build_schedule("cosine", 200)
    r = NoiseSchedule.from_json(s.to_json())
    assert np.array_equal(r.alpha, s.alpha) and r.kind == s.kind
    assert r.sha256() == s.sha256()
    assert build_schedule("linear", 200).sha256() != s.sha256()


def test_q_sample_endpoints_and_checks():
    s = build_schedule("cosine", 100)
    x0 = torch.rand(4, 2, 3, 3)
    eps = torch.randn_like(x0)
    assert torch.allclose(q_sample(s, x0, 0, eps).x_t, x0)
    t = torch.tensor([0, 10, 50, 100])
    xt = q_sample(s, x0, t, eps).x_t
    a = torch.tensor(s.alpha[t.numpy()], dtype=x0.dtype).reshape(-1, 1, 1, 1)
    sg = torch.tensor(s.sigma[t.numpy()], dtype=x0.dtype).reshape(-1, 1, 1, 1)
    assert torch.allclose(xt, a * x0 + sg * eps)
    with pytest.raises(ValueError):
        q_sample(s, x0, 101, eps)
    with pytest.raises(ValueError):
        q_sample(s, x0, 5, eps[:, :1])
    with pytest.raises(ValueError):
        q_sample(s, x0, torch.tensor([1, 2]), eps)


def test_coefficients_do_not_warn():
    import warnings

    s = build_schedule("cosine", 10)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        s.coefficients(torch.tensor([1, 2]), torch.zeros(2, 3))
