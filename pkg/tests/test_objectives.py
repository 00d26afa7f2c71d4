import numpy as np
import pytest
import torch

import oracles
from talkhead.objectives import (DEFAULT_SCALES, LossWeights, PerceptualExtractor, downsample, lambda_m_schedule,
                                 perceptual_loss, pyramid_perceptual_loss, stage1_loss, stage2_loss)


def kp_dict(seed, shape=(2, 8, 10)):
    g = torch.Generator().manual_seed(seed)
    heat = torch.rand(*shape, 16, 16, generator=g, dtype=torch.float64)
    return {"heatmap": heat / heat.sum((-1, -2), keepdim=True),
            "value": torch.rand(*shape, 2, generator=g, dtype=torch.float64) * 2 - 1,
            "jacobian": torch.randn(*shape, 2, 2, generator=g, dtype=torch.float64)}


@pytest.fixture(scope="module")
def ext():
    return PerceptualExtractor(seed=0).double()


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_m, w.lambda_p, w.lambda_j, w.lambda_p_prime) == (1, 10, 10, 100)
    assert (w.lambda_rec, w.lambda_eq_p, w.lambda_eq_j) == (10, 10, 10)
    with pytest.raises(ValueError, match="lambda_j"):
        LossWeights(lambda_j=-1)


def test_stage1_terms_match_loop_oracle():
    pred, tgt = kp_dict(0), kp_dict(1)
    w = LossWeights(lambda_m=0.7)
    out = stage1_loss(pred, tgt, w)
    for key, name, lam in (("heatmap", "heatmap", 0.7), ("value", "position", 10), ("jacobian", "jacobian", 10)):
        want = lam * oracles.mean_abs_loops(pred[key].numpy(), tgt[key].numpy())
        assert float(out[name]) == pytest.approx(want, rel=1e-12)
    assert float(out["total"]) == pytest.approx(float(out["heatmap"] + out["position"] + out["jacobian"]))


def test_stage1_per_frame_average_equals_global_mean():
    pred, tgt = kp_dict(2), kp_dict(3)
    w = LossWeights()
    per_frame = np.mean([oracles.mean_abs_loops(pred["value"][:, t].numpy(), tgt["value"][:, t].numpy())
                         for t in range(8)])
    assert float(stage1_loss(pred, tgt, w)["position"]) == pytest.approx(10 * per_frame, rel=1e-12)


def test_stage1_zero_at_target_and_override():
    tgt = kp_dict(4)
    out = stage1_loss(tgt, tgt, LossWeights())
    assert float(out["total"]) == 0
    pred = kp_dict(5)
    assert float(stage1_loss(pred, tgt, LossWeights(), lambda_m=0.0)["heatmap"]) == 0


def test_stage1_is_linear_in_weights():
    pred, tgt = kp_dict(6), kp_dict(7)
    base = stage1_loss(pred, tgt, LossWeights())
    doubled = stage1_loss(pred, tgt, LossWeights(lambda_m=2, lambda_p=20, lambda_j=20))
    for k in ("heatmap", "position", "jacobian", "total"):
        assert float(doubled[k]) == pytest.approx(2 * float(base[k]), rel=1e-12)


def test_stage1_shape_mismatch():
    pred, tgt = kp_dict(0), kp_dict(1, shape=(2, 7, 10))
    with pytest.raises(ValueError, match="heatmap"):
        stage1_loss(pred, tgt, LossWeights())


def test_lambda_m_schedule():
    assert lambda_m_schedule(0, 200) == 1.0
    assert lambda_m_schedule(100, 200) == pytest.approx(0.5)
    assert lambda_m_schedule(50, 200, initial=2.0) == pytest.approx(1.5)
    assert lambda_m_schedule(200, 200) == 0.0
    assert lambda_m_schedule(10_000, 200) == 0.0
    vals = [lambda_m_schedule(s, 200) for s in range(250)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- perceptual --------------------------------------------------------------------------

def test_extractor_is_frozen_and_seeded():
    a, b = PerceptualExtractor(seed=3), PerceptualExtractor(seed=3)
    assert all(not p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training
    parent = torch.nn.Sequential(a)
    parent.train()
    assert not a.training
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    feats = a(torch.rand(1, 3, 33, 33))
    assert [f.shape[1] for f in feats] == [16, 32, 64, 64, 64]
    assert [f.shape[-1] for f in feats] == [33, 17, 9, 5, 3]


def test_perceptual_matches_per_channel_oracle(ext):
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    b = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    want = oracles.per_channel_l1([f.numpy() for f in ext(a)], [f.numpy() for f in ext(b)])
    assert float(perceptual_loss(a, b, ext)) == pytest.approx(want, rel=1e-10)


def test_perceptual_identity_is_zero(ext):
    a = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    assert float(perceptual_loss(a, a, ext)) == 0.0
    assert float(pyramid_perceptual_loss(a, a, ext)) == 0.0


def test_pyramid_is_sum_over_scales(ext):
    g = torch.Generator().manual_seed(1)
    a = torch.rand(1, 3, 64, 64, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 64, 64, generator=g, dtype=torch.float64)
    parts = [float(perceptual_loss(downsample(a, s), downsample(b, s), ext)) for s in DEFAULT_SCALES]
    assert float(pyramid_perceptual_loss(a, b, ext)) == pytest.approx(sum(parts), rel=1e-12)
    assert float(pyramid_perceptual_loss(a, b, ext, scales=(1.0,))) == pytest.approx(parts[0], rel=1e-12)


def test_downsample_is_block_mean():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    y = downsample(x, 0.5)
    assert y.shape == (1, 1, 4, 4)
    torch.testing.assert_close(y, x.reshape(1, 1, 4, 2, 4, 2).mean((3, 5)))
    assert downsample(x, 1.0) is x


def test_pyramid_rejects_tiny_images(ext):
    a = torch.rand(1, 3, 24, 24)
    with pytest.raises(ValueError, match="below 4 px"):
        pyramid_perceptual_loss(a, a, ext)
    with pytest.raises(ValueError):
        pyramid_perceptual_loss(a, a, ext, scales=(1.5,))
    with pytest.raises(ValueError):
        pyramid_perceptual_loss(a, a, ext, scales=())


def test_pyramid_gradient_matches_finite_differences(ext):
    rng = np.random.default_rng(2)
    gen = rng.uniform(size=(1, 3, 32, 32))
    gt = rng.uniform(size=(1, 3, 32, 32))
    x = torch.from_numpy(gen.copy()).requires_grad_(True)
    pyramid_perceptual_loss(x, torch.from_numpy(gt), ext).backward()
    analytic = x.grad.numpy().ravel()
    idx = rng.choice(gen.size, 40, replace=False)
    h = 1e-6
    num = []
    for i in idx:
        up, dn = gen.copy().ravel(), gen.copy().ravel()
        up[i] += h
        dn[i] -= h
        f = lambda v: float(pyramid_perceptual_loss(torch.from_numpy(v.reshape(gen.shape)), torch.from_numpy(gt), ext))
        num.append((f(up) - f(dn)) / (2 * h))
    num = np.array(num)
    rel = np.linalg.norm(analytic[idx] - num) / np.linalg.norm(num)
    assert rel < 1e-3


def test_gradient_does_not_touch_extractor(ext):
    a = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    before = [p.clone() for p in ext.parameters()]
    pyramid_perceptual_loss(a, torch.rand(1, 3, 32, 32, dtype=torch.float64), ext).backward()
    assert all(p.grad is None for p in ext.parameters())
    assert all(torch.equal(p, q) for p, q in zip(before, ext.parameters()))


# -- stage 2 -----------------------------------------------------------------------------

def test_stage2_composition(ext):
    g = torch.Generator().manual_seed(3)
    pred = torch.rand(1, 4, 10, 2, generator=g, dtype=torch.float64)
    tgt = torch.rand(1, 4, 10, 2, generator=g, dtype=torch.float64)
    a = torch.rand(4, 3, 32, 32, generator=g, dtype=torch.float64)
    b = torch.rand(4, 3, 32, 32, generator=g, dtype=torch.float64)
    eq = (torch.tensor(0.2, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64))
    out = stage2_loss(pred, tgt, a, b, eq, LossWeights(), ext=ext)
    assert float(out["position"]) == pytest.approx(100 * oracles.mean_abs_loops(pred.numpy(), tgt.numpy()))
    assert float(out["reconstruction"]) == pytest.approx(10 * float(pyramid_perceptual_loss(a, b, ext)))
    assert float(out["equivariance_p"]) == pytest.approx(2.0)
    assert float(out["equivariance_j"]) == pytest.approx(3.0)
    parts = sum(float(out[k]) for k in ("position", "reconstruction", "equivariance_p", "equivariance_j"))
    assert float(out["total"]) == pytest.approx(parts)


def test_stage2_without_frames():
    pred = torch.zeros(1, 2, 10, 2)
    out = stage2_loss(pred, pred + 0.5, None, None, (torch.tensor(0.0), torch.tensor(0.0)), LossWeights())
    assert float(out["reconstruction"]) == 0
    assert float(out["total"]) == pytest.approx(50.0)
    with pytest.raises(ValueError, match="extractor"):
        stage2_loss(pred, pred, torch.zeros(1, 3, 32, 32), torch.zeros(1, 3, 32, 32),
                    (torch.tensor(0.0), torch.tensor(0.0)), LossWeights())
