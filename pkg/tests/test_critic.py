import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangan.critic import (SIGMA_MAX, SIGMA_MIN, Critic, CriticConfig, QMode, build_critic,
                                default_critic_channels, discriminate, extract_code, q_grouped_kernels)
from disentangan.layers import GroupedLinear


def rng(seed=0):
    return torch.Generator().manual_seed(seed)


def small(**kw):
    base = dict(d=5, img_size=32, img_channels=1, trunk_channels=default_critic_channels(32, 8))
    base.update(kw)
    return CriticConfig(**base)


def test_default_trunk_follows_table():
    c = build_critic(CriticConfig(d=10), rng())
    convs = [c.stem] + [b.conv for b in list(c.shared) + list(c.d_only)]
    shapes = [(m.in_channels, m.out_channels, m.kernel_size) for m in convs]
    assert shapes == [(3, 64, (1, 1)), (64, 128, (3, 3)), (128, 256, (3, 3)),
                      (256, 256, (3, 3)), (256, 512, (3, 3))]
    assert c.realness.kernel_size == (4, 4)
    assert len(c.shared) == 2


def test_grouped_layers_have_d_groups():
    c = build_critic(CriticConfig(d=10), rng())
    assert c.q.group_conv1.groups == 10 and c.q.group_conv2.groups == 10
    assert c.q.linear.groups == 10
    kernels = q_grouped_kernels(c)
    assert [tuple(k.shape) for k in kernels] == [(10, 234), (10, 16), (10, 4)]
    no_head = build_critic(CriticConfig(d=10, ortho_linear_head=False), rng())
    assert len(q_grouped_kernels(no_head)) == 2


def test_same_seed_same_init():
    a = build_critic(small(), rng(4)).state_dict()
    b = build_critic(small(), rng(4)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_scores_and_codes():
    c = build_critic(small(), rng())
    x = torch.rand(4, 1, 32, 32)
    s = discriminate(c, x)
    assert s.shape == (4,) and torch.isfinite(s).all()
    c.eval()
    dup = x[:1].repeat(2, 1, 1, 1)
    s2 = c.discriminate(dup)
    assert s2[0] == s2[1]
    pred = extract_code(c, x)
    assert pred.c_hat.shape == (4, 5)
    assert torch.all((pred.c_hat >= 0) & (pred.c_hat <= 1))
    assert pred.sigma is None


def test_probabilistic_sigma_clamped():
    c = build_critic(small(q_mode="prob"), rng())
    with torch.no_grad():
        c.q.linear.bias[:, 1] = torch.linspace(-30, 30, 5)
        pred = c.extract_code(torch.rand(3, 1, 32, 32))
    assert pred.mode == QMode.PROBABILISTIC
    assert torch.all((pred.sigma >= SIGMA_MIN) & (pred.sigma <= SIGMA_MAX))
    assert pred.sigma.min() == pytest.approx(SIGMA_MIN) and pred.sigma.max() == pytest.approx(SIGMA_MAX)


def test_q_outputs_are_group_separated():
    """Output j depends only on the j-th block of the projected features."""
    c = build_critic(small(spectral_norm=False), rng()).eval()
    h = torch.randn(2, c.config.branch_channels, c.config.branch_size, c.config.branch_size)
    proj = c.q.project(h)
    per = c.config.q_channels // c.config.d
    bumped = proj.clone()
    bumped[:, 2 * per:3 * per] += torch.randn_like(bumped[:, 2 * per:3 * per])
    c.q.project = torch.nn.Identity()
    a, b = c.q(proj).logits, c.q(bumped).logits
    changed = (a != b).any(dim=0)
    assert changed.tolist() == [False, False, True, False, False]


def test_parameter_partition():
    c = build_critic(small(), rng())
    ids = lambda ps: {id(p) for p in ps}  # noqa: E731
    trunk, head, q = ids(c.trunk_parameters()), ids(c.d_head_parameters()), ids(c.q_parameters())
    assert not (trunk & head) and not (trunk & q) and not (head & q)
    assert trunk | head | q == ids(c.parameters())


def test_bad_inputs():
    c = build_critic(small(), rng())
    with pytest.raises(ValueError):
        c(torch.rand(2, 3, 32, 32))
    with pytest.raises(ValueError):
        CriticConfig(d=3, img_size=16)
    with pytest.raises(ValueError):
        QMode.parse("fuzzy")


def test_spectral_layers_all_normalized():
    c = build_critic(CriticConfig(d=10), rng())
    layers = c.spectral_layers()
    assert len(layers) == 1 + 4 + 1 + 3
    assert build_critic(small(spectral_norm=False), rng()).spectral_layers() == []


def test_grouped_linear_matches_blockwise():
    lin = GroupedLinear(3, 4, 2).double()
    x = torch.randn(5, 3, 4, dtype=torch.float64)
    out = lin(x)
    for g in range(3):
        ref = x[:, g] @ lin.weight[g].T + lin.bias[g]
        assert torch.allclose(out[:, g], ref, atol=1e-12)


@settings(max_examples=8, deadline=None)
@given(size=st.sampled_from([32, 64]), d=st.integers(1, 12), mode=st.sampled_from(["det", "prob"]))
def test_output_dimension_property(size, d, mode):
    cfg = CriticConfig(d=d, img_size=size, img_channels=1, q_mode=mode,
                       trunk_channels=default_critic_channels(size, 16))
    c = Critic(cfg).eval()
    with torch.no_grad():
        s, pred = c(torch.rand(2, 1, size, size))
    assert s.shape == (2,) and pred.logits.shape == (2, d)
    assert (pred.sigma is not None) == (mode == "prob")
