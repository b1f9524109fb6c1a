import numpy as np
import pytest
import torch

from mmcomplete.encoders import ImageEncoder, PointEncoder, fps_indices
from mmcomplete.geometry import farthest_point_indices
from mmcomplete.fusion import _init_weights


def point_encoder(seed=0, **kw):
    enc = PointEncoder(**{"channels": 8, "tokens": 4, "k": 8, "hidden": 8, **kw})
    _init_weights(enc, seed)
    return enc


def image_encoder(seed=0):
    enc = ImageEncoder(channels=8, tokens=4, width=4)
    _init_weights(enc, seed)
    return enc


def test_fps_matches_reference():
    pts = np.random.default_rng(0).normal(size=(2, 50, 3))
    idx = fps_indices(torch.tensor(pts), 10).numpy()
    for b in range(2):
        np.testing.assert_array_equal(idx[b], farthest_point_indices(pts[b], 10, 0))


class TestPointEncoder:
    def test_shape(self):
        x = torch.randn(1, 64, 3)
        assert point_encoder()(x).shape == (1, 8, 4)

    def test_default_shape(self):
        enc = PointEncoder()
        assert enc(torch.randn(1, 256, 3)).shape == (1, 256, 128)

    def test_deterministic(self):
        x = torch.randn(1, 64, 3)
        assert torch.equal(point_encoder()(x), point_encoder()(x))

    def test_translation_sensitive(self):
        x = torch.randn(1, 64, 3)
        enc = point_encoder()
        assert not torch.allclose(enc(x), enc(x + torch.tensor([0.5, 0.0, 0.0])))

    def test_permutation_keeps_token_multiset(self):
        torch.manual_seed(0)
        x = torch.randn(1, 64, 3, dtype=torch.float64)
        enc = point_encoder().double()
        perm = torch.cat([torch.tensor([0]), 1 + torch.randperm(63)])  # start point stays first
        a = enc(x)[0].T
        b = enc(x[:, perm])[0].T
        key = lambda t: sorted(map(tuple, np.round(t.detach().numpy(), 10)))  # noqa: E731
        assert key(a) == key(b)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            point_encoder()(torch.full((1, 64, 3), float("nan")))
        with pytest.raises(ValueError):
            point_encoder()(torch.randn(1, 3, 3))

    def test_weight_gradients_finite_differences(self):
        torch.manual_seed(1)
        enc = point_encoder().double()
        x = torch.randn(1, 16, 3, dtype=torch.float64)
        _check_weight_grads(enc, lambda: (enc(x) ** 2).sum())


class TestImageEncoder:
    def test_shape_zero_image(self):
        out = image_encoder()(torch.zeros(1, 3, 224, 224))
        assert out.shape == (1, 8, 4)
        assert torch.isfinite(out).all()

    def test_default_tokens(self):
        assert ImageEncoder()(torch.zeros(1, 3, 224, 224)).shape == (1, 256, 128)

    def test_distinct_and_deterministic(self):
        a, b = torch.rand(1, 3, 224, 224), torch.rand(1, 3, 224, 224)
        enc = image_encoder()
        assert torch.equal(enc(a), enc(a))
        assert not torch.equal(enc(a), enc(b))

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            image_encoder()(torch.zeros(1, 3, 64, 64))

    def test_weight_gradients_finite_differences(self):
        torch.manual_seed(2)
        enc = image_encoder().double()
        img = torch.rand(1, 3, 224, 224, dtype=torch.float64)
        _check_weight_grads(enc, lambda: (enc(img) ** 2).sum())


def _check_weight_grads(module, objective, h=1e-6, tol=1e-3):
    """Directional finite differences along a random direction per parameter."""
    module.zero_grad()
    objective().backward()
    gen = torch.Generator().manual_seed(0)
    for name, p in module.named_parameters():
        v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        analytic = float((p.grad * v).sum())
        with torch.no_grad():
            p.add_(h * v)
            up = float(objective())
            p.sub_(2 * h * v)
            down = float(objective())
            p.add_(h * v)
        fd = (up - down) / (2 * h)
        assert abs(analytic - fd) <= tol * max(abs(fd), 1e-8), name
