import numpy as np
import pytest

from bladapt import network as N
from bladapt import tensor as T
from bladapt.bilevel import value_and_grad


@pytest.fixture(scope="module")
def part():
    return N.init_partition(np.random.default_rng(0))


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(1).uniform(0.0, 0.6, (2, 3, 32, 32)).astype(np.float32)


def test_illumination_shape_and_range(part, batch):
    x = N.estimate_illumination(batch, part.encoder, part.decoder).data
    assert x.shape == batch.shape
    assert np.all((x > 0) & (x < 1))


def test_illumination_is_deterministic(part, batch):
    a = N.estimate_illumination(batch, part.encoder, part.decoder, False, False).data
    b = N.estimate_illumination(batch, part.encoder, part.decoder, False, False).data
    assert a.tobytes() == b.tobytes()


def test_init_is_seed_deterministic():
    a = N.init_partition(np.random.default_rng(5))
    b = N.init_partition(np.random.default_rng(5))
    assert N.checksum(a.flat()) == N.checksum(b.flat())


def test_mean_illumination_gradient_reaches_both_halves(part, batch):
    obj = lambda u, v, y: T.tmean(N.estimate_illumination(y, u, v))
    _, gu, gv = value_and_grad(obj, part.encoder, part.decoder, batch)
    assert any(np.any(g != 0) for g in gu.values())
    assert any(np.any(g != 0) for g in gv.values())


def test_spatial_contract():
    part = N.init_partition(np.random.default_rng(0))
    with pytest.raises(T.DimensionError):
        N.estimate_illumination(np.zeros((1, 3, 24, 32)), part.encoder, part.decoder)
    with pytest.raises(T.DimensionError):
        N.estimate_illumination(np.zeros((1, 1, 32, 32)), part.encoder, part.decoder)


def test_reflectance_examples():
    np.testing.assert_allclose(N.reflectance(np.full((1, 3, 2, 2), 0.5), T.Tensor(np.ones((1, 3, 2, 2)))).data, 0.5)
    y = np.random.default_rng(2).uniform(0.1, 0.9, (1, 3, 4, 4))
    np.testing.assert_allclose(N.reflectance(y, T.Tensor(y)).data, 1.0)


def test_reflectance_reconstructs_input_where_unguarded():
    rng = np.random.default_rng(3)
    y = rng.uniform(0, 1, (2, 3, 8, 8))
    x = rng.uniform(1e-5, 1, (2, 3, 8, 8))
    z = N.reflectance(y, T.Tensor(x)).data
    ok = (x >= T.DENOM_FLOOR) & (z < N.Z_MAX)
    assert ok.any() and not ok.all()
    assert np.max(np.abs(x * z - y)[ok]) <= 1e-6
    assert np.all(z <= N.Z_MAX) and np.all(z >= 0)


def test_zero_denoiser_is_identity_on_clamped_input(part):
    zero = {k: np.zeros_like(v) for k, v in part.denoiser.items()}
    z = np.random.default_rng(4).uniform(-0.2, 1.5, (1, 3, 8, 8))
    out, n = N.denoise(z, zero)
    np.testing.assert_array_equal(out.data, np.clip(z, 0, 1))
    assert out.shape == z.shape
    assert not np.any(n.data)


def test_fresh_denoiser_starts_as_identity(part, batch):
    with_g = N.run_pipeline(batch, part.encoder, part.decoder, part.denoiser).output.data
    without = N.run_pipeline(batch, part.encoder, part.decoder, None).output.data
    np.testing.assert_array_equal(with_g, without)


def test_enhance_preserves_shape(part, batch):
    assert N.enhance(batch, part.encoder, part.decoder, part.denoiser).shape == batch.shape


def test_partition_flat_roundtrip(part):
    p = part.copy()
    p.meta_init = N.copy_params(p.decoder)
    back = N.ParameterPartition.from_flat(p.flat())
    assert N.checksum(back.flat()) == N.checksum(p.flat())
    assert set(back.meta_init) == set(p.decoder)


def test_buffers_are_not_trainable(part):
    names = N.trainable_names(part.encoder)
    assert names and not any(N.is_buffer(n) for n in names)
    assert any(N.is_buffer(n) for n in part.encoder)


def test_checksum_detects_single_bit_change(part):
    p = N.copy_params(part.encoder)
    before = N.checksum(p)
    k = sorted(p)[0]
    p[k].view(np.uint32).reshape(-1)[0] ^= 1
    assert N.checksum(p) != before
