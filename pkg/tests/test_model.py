import numpy as np
import pytest
import torch

from urm.model import URM, ModeError, ModelConfig


def randomise(module, scale=0.2, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture
def toy():
    return URM(ModelConfig.toy(n_prototypes=2)).double().eval()


def batch(B=2, n=3, dtype=torch.float64):
    g = torch.Generator().manual_seed(0)
    images = torch.rand(B, 3, 64, 64, generator=g, dtype=dtype)
    boxes = torch.tensor([[4.0, 4.0, 12.0, 14.0], [30.0, 20.0, 38.0, 27.0], [50.0, 50.0, 60.0, 61.0]], dtype=dtype)[:n]
    return images, boxes.expand(B, -1, -1).clone()


class TestUpdatePrototypes:
    def test_identity_at_init(self, toy):
        images, boxes = batch()
        out = toy(images, boxes)
        p_v, p_l = toy.initial_prototypes(2)
        torch.testing.assert_close(out["p_v"], p_v, rtol=0, atol=1e-12)
        torch.testing.assert_close(out["p_l"], p_l, rtol=0, atol=1e-12)

    def test_shared_weights_same_function(self, toy):
        randomise(toy)
        fE = torch.randn(1, 64, 16, dtype=torch.float64)
        p = torch.randn(1, 2, 16, dtype=torch.float64)
        torch.testing.assert_close(toy.update_prototypes(p, fE), toy.update_prototypes(p.clone(), fE))
        with torch.no_grad():
            toy.p_l.copy_(toy.p_v)
        out = toy(*batch())
        torch.testing.assert_close(out["p_v"], out["p_l"])

    def test_default_shape(self):
        m = URM(ModelConfig(backbone="toy", toy_channels=(8, 8, 8)))
        assert m.cfg.n1 == 3 and m.cfg.n2 == 3
        p = m.update_prototypes(m.p_v[None], torch.randn(1, 4096, 256))
        assert p.shape == (1, 3, 256)

    def test_dim_mismatch(self, toy):
        with pytest.raises(ValueError):
            toy.update_prototypes(torch.randn(1, 2, 8, dtype=torch.float64), torch.randn(1, 64, 16, dtype=torch.float64))


class TestKDProject:
    def test_identity(self):
        m = URM(ModelConfig.toy(d_t=16)).double()
        with torch.no_grad():
            m.kd_proj_v.weight.copy_(torch.eye(16))
            m.kd_proj_v.bias.zero_()
        x = torch.randn(3, 16, dtype=torch.float64)
        torch.testing.assert_close(m.kd_project(x), x)

    def test_zero(self, toy):
        with torch.no_grad():
            toy.kd_proj_v.bias.zero_()
        assert torch.count_nonzero(toy.kd_project(torch.zeros(3, 16, dtype=torch.float64))) == 0

    def test_hand_matmul(self):
        m = URM(ModelConfig(backbone="toy", toy_channels=(8, 8, 8), d_t=32)).double()
        x = np.random.default_rng(0).normal(size=(3, 256))
        W = m.kd_proj_v.weight.detach().numpy()
        b = m.kd_proj_v.bias.detach().numpy()
        hand = np.array([[sum(x[i, k] * W[j, k] for k in range(256)) + b[j] for j in range(32)] for i in range(3)])
        np.testing.assert_allclose(m.kd_project(torch.from_numpy(x)).detach().numpy(), hand, atol=1e-10)

    def test_shared_between_branches(self, toy):
        assert toy.kd_proj_l is toy.kd_proj_v
        separate = URM(ModelConfig.toy(shared_kd_projection=False))
        assert separate.kd_proj_l is not separate.kd_proj_v


class TestMatch:
    def test_duplicate_keys_collapse(self, toy):
        randomise(toy)
        fE = torch.randn(1, 64, 16, dtype=torch.float64)
        p = torch.randn(1, 1, 16, dtype=torch.float64)
        blk = toy.match_layers[0]
        two = blk.attn(blk.norm_q(fE), *(blk.norm_kv(torch.cat([p, p], 1)),) * 2)
        one = blk.attn(blk.norm_q(fE), *(blk.norm_kv(p),) * 2)
        torch.testing.assert_close(two, one)
        torch.testing.assert_close(toy.match(fE, p, p), toy.match(fE, p, p[:, :0]))

    def test_identity_at_init(self, toy):
        fE = torch.randn(2, 64, 16, dtype=torch.float64)
        p = torch.randn(2, 2, 16, dtype=torch.float64)
        torch.testing.assert_close(toy.match(fE, p, p), fE, rtol=0, atol=1e-12)

    def test_default_shape(self):
        m = URM(ModelConfig(backbone="toy", toy_channels=(8, 8, 8)))
        out = m.match(torch.randn(1, 4096, 256), m.p_v[None], m.p_l[None])
        assert out.shape == (1, 4096, 256)


class TestRegress:
    def test_default_shape(self):
        m = URM(ModelConfig(backbone="toy", toy_channels=(8, 8, 8)))
        with torch.no_grad():
            assert m.regress(torch.randn(1, 4096, 256)).shape == (1, 512, 512)

    def test_nonnegative(self, toy):
        randomise(toy, scale=1.0)
        g = torch.Generator().manual_seed(1)
        with torch.no_grad():
            for _ in range(1000):
                out = toy.regress(torch.randn(1, 64, 16, generator=g, dtype=torch.float64) * 3)
                assert out.min() >= 0

    def test_count_is_sum(self, toy):
        randomise(toy)
        out = toy(*batch())
        torch.testing.assert_close(out["count"], out["density"].sum(dim=(1, 2)))


class TestForward:
    def test_deterministic_eval(self, toy):
        randomise(toy)
        a, b = toy(*batch()), toy(*batch())
        assert torch.equal(a["density"], b["density"])

    def test_zero_shot_finite(self, toy):
        randomise(toy)
        images, _ = batch()
        out = toy(images, None, mode="zero-shot")
        assert torch.isfinite(out["density"]).all()

    def test_toy_shapes(self, toy):
        out = toy(*batch())
        assert out["density"].shape == (2, 64, 64)
        assert out["proj_v"].shape == (2, 32) and out["p_v"].shape == (2, 2, 16)

    def test_few_shot_needs_boxes(self, toy):
        images, boxes = batch()
        with pytest.raises(ModeError):
            toy(images, boxes[:, :0])
        with pytest.raises(ModeError):
            toy(images, None)

    def test_identity_reduces_to_head(self, toy):
        out = toy(*batch())
        torch.testing.assert_close(out["fE"], out["f"].flatten(2).transpose(1, 2), rtol=0, atol=1e-12)
        torch.testing.assert_close(out["density"], toy.regress(out["fE"]), rtol=0, atol=1e-12)

    def test_backbone_gets_no_gradient(self, toy):
        randomise(toy)
        out = toy(*batch())
        (out["count"].sum() + out["proj_v"].sum()).backward()
        assert all(p.grad is None for p in toy.features.net.parameters())
        assert toy.features.proj.weight.grad.abs().sum() > 0
