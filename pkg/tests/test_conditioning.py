import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from mri2pet.conditioning import (CLINICAL_DIM, CLINICAL_FEATURES, ClinicalStats, ClinicalVector, adagn,
                                  build_clinical_vector, build_roi_weight_map, group_count, read_clinical_csv,
                                  roi_weights, sa_adagn, timestep_embedding, write_clinical_csv)
from mri2pet.dataio import Volume3D, phantom_roi_mask


def test_timestep_embedding_values():
    e = timestep_embedding(torch.tensor([0.0, 3.0]), 8)
    assert e.shape == (2, 8)
    assert torch.allclose(e[0, :4], torch.zeros(4)) and torch.allclose(e[0, 4:], torch.ones(4))
    freqs = [10000 ** (-i / 3) for i in range(4)]
    expected = [math.sin(3 * f) for f in freqs] + [math.cos(3 * f) for f in freqs]
    assert torch.allclose(e[1], torch.tensor(expected, dtype=torch.float32), atol=1e-6)
    with pytest.raises(ValueError):
        timestep_embedding(1, 7)
    with pytest.raises(ValueError):
        timestep_embedding(torch.tensor([-1.0]), 8)


def test_group_count():
    assert group_count(64) == 32 and group_count(48) == 16 and group_count(8) == 8


def _gn_oracle(h, groups, eps=1e-5):
    B, C = h.shape[:2]
    x = h.reshape(B, groups, -1)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)  # population variance
    return ((x - mu) / np.sqrt(var + eps)).reshape(h.shape)


def test_adagn_against_numpy_oracle():
    rng = np.random.default_rng(0)
    h = rng.standard_normal((2, 8, 5, 4))
    t_s, t_b, c_s = rng.standard_normal((2, 8)), rng.standard_normal((2, 8)), rng.standard_normal((2, 8))
    h_m = rng.standard_normal((2, 8, 5, 4))
    out = adagn(torch.tensor(h), torch.tensor(t_s), torch.tensor(t_b), torch.tensor(c_s), torch.tensor(h_m), 4)
    g = _gn_oracle(h, 4)
    ref = c_s[..., None, None] * (h_m * (t_s[..., None, None] * g + t_b[..., None, None]))
    assert np.allclose(out.numpy(), ref, atol=1e-10)


def test_adagn_none_factors_are_neutral():
    h = torch.randn(2, 16, 6, 6)
    assert torch.allclose(adagn(h, None, None, None, None, 8), F.group_norm(h, 8, eps=1e-5), atol=1e-6)
    assert torch.allclose(sa_adagn(h, None, None, None, None, None, None, 8), adagn(h, None, None, None, None, 8))


def test_sa_adagn_affine_in_z():
    h = torch.randn(2, 16, 6, 6)
    z_s, z_b = torch.randn(2, 16), torch.randn(2, 16)
    base = adagn(h, None, None, None, None, 8)
    out = sa_adagn(h, None, None, None, None, z_s, z_b, 8)
    assert torch.allclose(out, z_s[..., None, None] * base + z_b[..., None, None], atol=1e-6)


def test_adagn_spatial_mismatch():
    with pytest.raises(ValueError):
        adagn(torch.randn(1, 8, 4, 4), None, None, None, torch.ones(1, 8, 2, 2), 4)


@settings(max_examples=20, deadline=None)
@given(B=st.integers(1, 3), C=st.sampled_from([4, 8, 16]), H=st.integers(1, 6))
def test_neutral_identity_property(B, C, H):
    h = torch.randn(B, C, H, H + 1)
    out = adagn(h, torch.ones(C), torch.zeros(C), torch.ones(B, C), torch.ones_like(h), group_count(C, 4))
    assert torch.allclose(out, F.group_norm(h, group_count(C, 4), eps=1e-5), atol=1e-6)


RAW = [
    {"age": 70.0, "gender": 1.0, "education": 16.0, "mmse": 29.0, "adas13": 8.0, "apoe4": 0.0},
    {"age": 80.0, "gender": 0.0, "education": 12.0, "mmse": 23.0, "adas13": 20.0, "apoe4": 2.0},
    {"age": 60.0, "gender": 1.0, "education": 20.0, "mmse": None, "adas13": 14.0, "apoe4": 1.0},
]


def test_clinical_stats_use_present_values_only():
    stats = ClinicalStats.fit(RAW)
    assert stats.mean["mmse"] == pytest.approx(26.0)
    assert stats.std["mmse"] == pytest.approx(3.0)
    assert stats.mean["age"] == pytest.approx(70.0)
    again = ClinicalStats.from_json(stats.to_json())
    assert again == stats


def test_clinical_vector_layout():
    stats = ClinicalStats.fit(RAW)
    v = build_clinical_vector(RAW[2], stats)
    assert v.values.shape == (CLINICAL_DIM,)
    assert v["mmse"] == 0.0 and v["mmse_missing"] == 1.0
    assert v["adas13_missing"] == 0.0
    assert v["age"] == pytest.approx((60 - 70) / stats.std["age"])
    assert list(CLINICAL_FEATURES[:3]) == ["age", "gender", "education"]


def test_clinical_vector_errors():
    stats = ClinicalStats.fit(RAW)
    with pytest.raises(ValueError):
        build_clinical_vector({**RAW[0], "age": None}, stats)
    bad = np.zeros(CLINICAL_DIM)
    bad[CLINICAL_FEATURES.index("mmse_missing")] = 0.5
    with pytest.raises(ValueError):
        ClinicalVector(bad)
    bad = np.zeros(CLINICAL_DIM)
    bad[CLINICAL_FEATURES.index("mmse_missing")] = 1.0
    bad[CLINICAL_FEATURES.index("mmse")] = 0.3
    with pytest.raises(ValueError):
        ClinicalVector(bad)
    with pytest.raises(ValueError):
        ClinicalStats.fit([{**r, "mmse": None} for r in RAW])


def test_clinical_csv_round_trip(tmp_path):
    recs = {f"s{i}": {**r, "diagnosis": "CN"} for i, r in enumerate(RAW)}
    write_clinical_csv(tmp_path / "c.csv", recs)
    back = read_clinical_csv(tmp_path / "c.csv")
    assert back == recs


def test_roi_weight_map_on_phantom_mask():
    mask = phantom_roi_mask((32, 32, 32))
    wm = build_roi_weight_map(mask, 2.0)
    w = wm.weights.data
    # voxel-count oracle: centres of the two ellipsoids by explicit loop
    count = 0
    ax = [(i + 0.5) / 32 * 2 - 1 for i in range(32)]
    for cu in (0.48, -0.48):
        for u in ax:
            for v in ax:
                for z in ax:
                    if ((u - cu) / 0.24) ** 2 + ((v + 0.38) / 0.24) ** 2 + ((z - 0.15) / 0.24) ** 2 <= 1:
                        count += 1
    assert count == 470
    assert int((w == 2.0).sum()) == count
    assert np.all(w[mask.data == 0] == 1.0)


def test_roi_weight_map_errors():
    with pytest.raises(ValueError):
        build_roi_weight_map(Volume3D(np.full((4, 4, 4), 0.5, dtype=np.float32)))
    with pytest.raises(ValueError):
        build_roi_weight_map(Volume3D(np.zeros((4, 4, 4), dtype=np.float32)), 0.5)


def test_roi_weights_tensor_differentiable():
    lam = torch.tensor(3.0, requires_grad=True)
    m = torch.tensor([0.0, 1.0])
    w = roi_weights(m, lam)
    assert torch.equal(w.detach(), torch.tensor([1.0, 3.0]))
    w.sum().backward()
    assert lam.grad.item() == 1.0
