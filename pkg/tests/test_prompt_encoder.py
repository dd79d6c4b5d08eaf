import numpy as np
import pytest
import torch

from urm.prompt_encoder import PromptEncoder, ShapeEmbedding, roi_average

@pytest.fixture(autouse=True)
def _double():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def randomise(module, scale=0.3, seed=0):
    """Perturb every parameter so identity-initialised blocks do real work."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)
    return module


class TestShapeEmbed:
    def test_shape(self):
        e = ShapeEmbedding(256)
        boxes = torch.tensor([[[0, 0, 10, 20], [5, 5, 50, 40], [1, 1, 2, 2]]], dtype=torch.float64)
        assert e(boxes, 512).shape == (1, 3, 256)

    def test_identical_boxes_identical_rows(self):
        e = ShapeEmbedding(16)
        out = e(torch.tensor([[[0, 0, 10, 20], [30, 30, 40, 50]]], dtype=torch.float64), 64)
        assert torch.equal(out[0, 0], out[0, 1])

    def test_hand_composition(self):
        e = ShapeEmbedding(16)
        out = e(torch.tensor([[[0, 0, 256, 256]]], dtype=torch.float64), 512)[0, 0].detach().numpy()
        W = [m.weight.detach().numpy() for m in e.mlp if isinstance(m, torch.nn.Linear)]
        b = [m.bias.detach().numpy() for m in e.mlp if isinstance(m, torch.nn.Linear)]
        h = np.array([0.5, 0.5])
        h = np.maximum(W[0] @ h + b[0], 0)
        h = np.maximum(W[1] @ h + b[1], 0)
        h = W[2] @ h + b[2]
        np.testing.assert_allclose(out, h, atol=1e-12)

    def test_zero_area(self):
        with pytest.raises(ValueError):
            ShapeEmbedding(8)(torch.tensor([[[3, 3, 3, 9]]], dtype=torch.float64), 64)


class TestROI:
    def test_constant_field(self):
        enc = PromptEncoder(16)
        f = torch.full((1, 16, 8, 8), 3.0)
        boxes = torch.tensor([[[0, 0, 20, 20], [30, 10, 60, 50]]], dtype=torch.float64)
        tok = enc.roi_appearance(f, boxes, 8.0)
        expect = enc.appearance(torch.full((16,), 3.0))
        torch.testing.assert_close(tok[0, 0], expect)
        torch.testing.assert_close(tok[0, 1], expect)

    def test_single_cell(self):
        f = torch.randn(1, 4, 8, 8)
        out = roi_average(f, torch.tensor([[[16.0, 24.0, 24.0, 32.0]]]), 8.0)
        torch.testing.assert_close(out[0, 0], f[0, :, 3, 2])

    def test_two_by_two_mean(self):
        f = torch.zeros(1, 1, 8, 8)
        f[0, 0, 2:4, 4:6] = torch.tensor([[1.0, 2.0], [3.0, 10.0]])
        out = roi_average(f, torch.tensor([[[32.0, 16.0, 48.0, 32.0]]]), 8.0)
        assert out.item() == pytest.approx((1 + 2 + 3 + 10) / 4)

    def test_tiny_box_expands_to_one_cell(self):
        f = torch.randn(1, 2, 8, 8)
        out = roi_average(f, torch.tensor([[[17.0, 17.0, 17.5, 17.5]]]), 8.0)
        torch.testing.assert_close(out[0, 0], f[0, :, 2, 2])


class TestEncode:
    def test_identity_at_init(self):
        enc = PromptEncoder(16, layers=2, heads=2)
        f = torch.randn(2, 16, 8, 8)
        boxes = torch.tensor([[[0, 0, 10, 10]]] * 2, dtype=torch.float64)
        tokens = enc.exemplar_tokens(f, boxes, 64)
        fE = enc.encode(f, tokens)
        torch.testing.assert_close(fE, f.flatten(2).transpose(1, 2), rtol=0, atol=1e-12)

    def test_exemplar_permutation_invariant(self):
        enc = randomise(PromptEncoder(16, layers=2, heads=2))
        f = torch.randn(1, 16, 8, 8)
        boxes = torch.tensor([[[0, 0, 10, 12], [20, 30, 40, 41], [5, 50, 12, 63]]], dtype=torch.float64)
        a = enc(f, boxes, 64)
        b = enc(f, boxes[:, [2, 0, 1]], 64)
        assert (a - b).abs().max() <= 1e-6
        assert (a - f.flatten(2).transpose(1, 2)).abs().max() > 1e-3

    def test_zero_shot_finite(self):
        enc = randomise(PromptEncoder(16, layers=1, heads=2, zero_shot_tokens=3))
        f = torch.randn(2, 16, 8, 8)
        fE = enc(f)
        assert fE.shape == (2, 64, 16) and torch.isfinite(fE).all()

    def test_no_tokens_passthrough(self):
        enc = PromptEncoder(16, heads=2)
        f = torch.randn(1, 16, 4, 4)
        assert enc.encode(f, torch.zeros(1, 0, 16)).shape == (1, 16, 16)

    def test_width_mismatch(self):
        enc = PromptEncoder(16, heads=2)
        with pytest.raises(ValueError):
            enc.encode(torch.randn(1, 16, 4, 4), torch.randn(1, 2, 8))

    def test_concat_mode(self):
        enc = PromptEncoder(16, heads=2, combine="concat")
        f = torch.randn(1, 16, 8, 8)
        tok = enc.exemplar_tokens(f, torch.tensor([[[0, 0, 10, 10]]], dtype=torch.float64), 64)
        assert tok.shape == (1, 1, 16)


class TestZeroShotTokens:
    def test_shape_and_parameters(self):
        enc = PromptEncoder(256, zero_shot_tokens=3)
        t1, t2 = enc.zero_shot_tokens(), enc.zero_shot_tokens()
        assert t1.shape == (1, 3, 256) and torch.equal(t1, t2)

    def test_gradient_reaches_tokens(self):
        enc = randomise(PromptEncoder(16, layers=1, heads=2, zero_shot_tokens=3))
        f = torch.randn(2, 16, 8, 8)
        target = torch.randn(2, 64, 16)
        loss = (enc(f) - target).square().mean()
        loss.backward()
        g = enc.zero_shot.grad
        assert g.abs().max() > 0
        # finite-difference probe on one entry
        eps = 1e-6
        with torch.no_grad():
            enc.zero_shot[1, 3] += eps
            up = (enc(f) - target).square().mean()
            enc.zero_shot[1, 3] -= 2 * eps
            down = (enc(f) - target).square().mean()
            enc.zero_shot[1, 3] += eps
        assert ((up - down) / (2 * eps)).item() == pytest.approx(g[1, 3].item(), rel=1e-5)
