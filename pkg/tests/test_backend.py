import numpy as np
import pytest

from mcseg import backend, nn
from mcseg.model import NetConfig, build_network

pytestmark = pytest.mark.skipif(not backend.HAVE_NUMBA, reason="numba unavailable")


@pytest.fixture
def both_backends():
    old = backend.active_backend()
    yield
    backend.set_backend(old)


def _conv_all(x, w, b, g):
    out = nn.conv_same(x, w, b)
    dx, dw, db = nn.conv_same_vjp(x, w, g)
    return out, dx, dw, db


class TestConvParity:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 2e-3), (np.float64, 1e-10)])
    def test_forward_backward_match(self, both_backends, dtype, tol):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 8, 32, 32)).astype(dtype)
        w = rng.standard_normal((16, 8, 3, 3)).astype(dtype)
        b = rng.standard_normal(16).astype(dtype)
        g = rng.standard_normal((3, 16, 32, 32)).astype(dtype)
        backend.set_backend("numba")
        fast = _conv_all(x, w, b, g)
        backend.set_backend("numpy")
        ref = _conv_all(x, w, b, g)
        for a, r in zip(fast, ref):
            scale = max(np.abs(r).max(), 1.0)
            np.testing.assert_allclose(a, r, atol=tol * scale)

    def test_full_forward_parity(self, both_backends):
        net = build_network(NetConfig(base_width=8, depth=3, dropout_rate=0.0), seed=0)
        x = np.random.default_rng(1).standard_normal((2, 1, 64, 64)).astype(np.float32)
        backend.set_backend("numba")
        s1, d1 = net.forward(x)
        backend.set_backend("numpy")
        s2, d2 = net.forward(x)
        np.testing.assert_allclose(s1, s2, atol=2e-4)
        np.testing.assert_allclose(d1, d2, atol=2e-4)


class TestEdtParity:
    @pytest.mark.parametrize("shape", [(16, 16), (12, 12, 12)])
    def test_distance_fields_match(self, both_backends, shape):
        from mcseg.geometry import sdf_transform

        rng = np.random.default_rng(2)
        mask = (rng.random(shape) < 0.35).astype(np.uint8)
        backend.set_backend("numba")
        fast = sdf_transform(mask)
        backend.set_backend("numpy")
        ref = sdf_transform(mask)
        np.testing.assert_allclose(fast, ref, atol=1e-9)

    def test_anisotropic_spacing_matches(self, both_backends):
        from mcseg.geometry import sdf_transform

        mask = np.zeros((10, 10), np.uint8)
        mask[3:7, 4:8] = 1
        backend.set_backend("numba")
        fast = sdf_transform(mask, spacing=(2.0, 0.5))
        backend.set_backend("numpy")
        ref = sdf_transform(mask, spacing=(2.0, 0.5))
        np.testing.assert_allclose(fast, ref, atol=1e-9)


class TestBackendSelection:
    def test_env_flag_rejected_when_invalid(self, monkeypatch):
        monkeypatch.setenv("MCSEG_BACKEND", "cuda")
        with pytest.raises(ValueError):
            backend._from_env()

    def test_set_backend_round_trip(self):
        old = backend.set_backend("numpy")
        assert backend.active_backend() == "numpy"
        backend.set_backend(old)

    def test_3d_conv_always_uses_fallback(self, both_backends):
        backend.set_backend("numba")
        assert not backend.use_numba(3)
        assert backend.use_numba(2)

    def test_training_deterministic_within_backend(self, both_backends):
        from mcseg.data import SynthConfig, generate_synthetic, split_labeled
        from mcseg.trainer import TrainConfig, train

        ds = split_labeled(
            generate_synthetic(SynthConfig(num_cases=6, extents=(16, 16), seed=0)), 0.5, 1
        )
        cfg = TrainConfig(
            net=NetConfig(base_width=2, depth=2), max_iters=3, patch=(16, 16),
            mc_passes=2, log_every=0,
        )
        backend.set_backend("numba")
        a, _ = train(cfg, ds)
        b, _ = train(cfg, ds)
        assert [r.total for r in a.history] == [r.total for r in b.history]
