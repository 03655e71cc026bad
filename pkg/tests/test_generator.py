import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangan.generator import (Generator, GeneratorConfig, NoiseInjection, build_generator,
                                   default_generator_channels, generate, latent_traversal)
from disentangan.latent import sample_noise, sample_uniform_code


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


def small_config(**kw):
    base = dict(d=4, n_z=8, img_size=32, img_channels=1, channel_schedule=default_generator_channels(32, 8))
    base.update(kw)
    return GeneratorConfig(**base)


def test_default_shapes_follow_table():
    g = build_generator(GeneratorConfig(d=10), rng())
    assert g.config.channel_schedule == (512, 256, 256, 128, 64)
    convs = [(b.conv.in_channels, b.conv.out_channels, b.conv.kernel_size) for b in g.trunk]
    assert convs == [(512, 256, (3, 3)), (256, 256, (3, 3)), (256, 128, (3, 3)), (128, 64, (3, 3))]
    assert g.seed_projection.weight.shape == (10, 512, 4, 4)
    assert g.learned_constant.shape == (512, 4, 4)
    assert g.injection.z_projection.out_features == 256 * 8 * 8
    assert g.to_image.out_channels == 3


def test_default_forward_shape_and_range():
    g = build_generator(GeneratorConfig(d=10), rng()).eval()
    with torch.no_grad():
        x = generate(g, sample_uniform_code(10, rng(1), 2), sample_noise(100, rng(2), 2))
    assert x.shape == (2, 3, 64, 64)
    assert torch.all((x >= 0) & (x <= 1))


def test_seed_projection_input_channels():
    g = build_generator(GeneratorConfig(d=16, n_z=100), rng())
    assert g.seed_projection.in_channels == 16


def test_same_seed_same_init():
    a = build_generator(small_config(), rng(7)).state_dict()
    b = build_generator(small_config(), rng(7)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_generator(small_config(), rng(8)).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_null_mask_makes_output_independent_of_z():
    g = build_generator(small_config(), rng()).eval()
    with torch.no_grad():
        g.injection.mask_projection.weight.zero_()
        g.injection.mask_projection.bias.fill_(-float("inf"))
        c = sample_uniform_code(4, rng(1), 3)
        a = g(c, sample_noise(8, rng(2), 3))
        b = g(c, sample_noise(8, rng(3), 3))
    assert torch.equal(a, b)


def test_code_changes_output():
    g = build_generator(small_config(), rng()).eval()
    z = sample_noise(8, rng(2), 1)
    with torch.no_grad():
        a = g(torch.zeros(1, 4), z)
        b = g(torch.full((1, 4), 0.9), z)
    assert (a != b).any()


def test_concat_stem_ablation():
    g = build_generator(small_config(compete_free=False), rng()).eval()
    assert g.learned_constant is None and g.injection is None
    assert g.seed_projection.in_channels == 4 + 8
    with torch.no_grad():
        assert g(torch.rand(2, 4), torch.randn(2, 8)).shape == (2, 1, 32, 32)


def test_input_validation():
    g = build_generator(small_config(), rng())
    with pytest.raises(ValueError):
        g(torch.rand(2, 4), torch.randn(3, 8))
    with pytest.raises(ValueError):
        g(torch.rand(2, 5), torch.randn(2, 8))
    with pytest.raises(ValueError):
        GeneratorConfig(d=4, img_size=48)
    with pytest.raises(ValueError):
        GeneratorConfig(d=4, img_size=64, channel_schedule=(8, 8))


def test_injection_formula():
    inj = NoiseInjection(3, 5, 2, size=8).double()
    c, z, h = torch.rand(4, 3, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64), \
        torch.randn(4, 2, 8, 8, dtype=torch.float64)
    m = torch.sigmoid(c @ inj.mask_projection.weight.T + inj.mask_projection.bias)
    zf = (z @ inj.z_projection.weight.T + inj.z_projection.bias).reshape(4, 2, 8, 8)
    expected = h + m[:, :, None, None] * zf
    assert torch.allclose(inj(h, c, z), expected, atol=1e-12)


def test_traversal_identity_and_determinism():
    g = build_generator(small_config(), rng())
    c = sample_uniform_code(4, rng(1))
    z = sample_noise(8, rng(2))
    (img,) = latent_traversal(g, c, z, 2, [c.values[0, 2].item()])
    g.eval()
    with torch.no_grad():
        ref = g(c, z)[0]
    assert torch.equal(img, ref)
    a = latent_traversal(g, c, z, 1, [0, 0.5, 1])
    b = latent_traversal(g, c, z, 1, [0, 0.5, 1])
    assert len(a) == 3 and all(torch.equal(x, y) for x, y in zip(a, b))


def test_traversal_rejects_bad_arguments():
    g = build_generator(small_config(), rng())
    c, z = torch.rand(1, 4), torch.randn(1, 8)
    with pytest.raises(ValueError):
        latent_traversal(g, c, z, 4, [0.5])
    with pytest.raises(ValueError):
        latent_traversal(g, c, z, 0, [1.5])


@settings(max_examples=10, deadline=None)
@given(size=st.sampled_from([16, 32, 64]), d=st.integers(1, 12), batch=st.integers(1, 3))
def test_output_shape_property(size, d, batch):
    cfg = GeneratorConfig(d=d, n_z=4, img_size=size, img_channels=1,
                          channel_schedule=default_generator_channels(size, 16))
    g = Generator(cfg).eval()
    with torch.no_grad():
        x = g(torch.rand(batch, d), torch.randn(batch, 4))
    assert x.shape == (batch, 1, size, size)
    assert torch.all((x >= 0) & (x <= 1))
