import math

import numpy as np
import pytest
import torch

from disentangan.config import TrainConfig
from disentangan.errors import NonFiniteLossError
from disentangan.latent import CodeKind
from disentangan.trainer import LOG_COLUMNS, TrainState, instance_noise_sigma, read_metrics_csv, train, train_step


def batch(ds, n, seed=0):
    return ds.get_images(np.random.default_rng(seed).choice(len(ds), n, replace=False))


def params_of(module):
    return {k: v.detach().clone() for k, v in module.named_parameters()}


def test_instance_noise_schedule():
    cfg = TrainConfig(iterations=1000, anneal_end_iter=100, instance_noise_sigma0=0.2)
    assert instance_noise_sigma(cfg, 1) == pytest.approx(0.2 * 0.99)
    assert instance_noise_sigma(cfg, 50) == pytest.approx(0.1)
    assert instance_noise_sigma(cfg, 100) == 0.0 and instance_noise_sigma(cfg, 500) == 0.0
    big = TrainConfig(iterations=10**9, instance_noise_sigma0=0.2)
    assert instance_noise_sigma(big, 1) == pytest.approx(0.2)
    assert TrainConfig(iterations=1000).effective_anneal_end == 500


def test_onehot_iterations_add_cross_entropy(tiny_config, synth32):
    state = TrainState.create(tiny_config)
    first = train_step(state, batch(synth32, 8))
    second = train_step(state, batch(synth32, 8, 1))
    assert first["kind"] == CodeKind.ONE_HOT.value and math.isfinite(first["loss_ce"])
    assert second["kind"] == CodeKind.CONTINUOUS.value and math.isnan(second["loss_ce"])
    assert state.iteration == 2


def test_baseline_ablation_flags(tiny_config, synth32):
    cfg = tiny_config.replace(disable_onehot=True, disable_ortho=True, disable_competefree_g=True)
    state = TrainState.create(cfg)
    assert state.generator.learned_constant is None
    out = [train_step(state, batch(synth32, 8, k)) for k in range(3)]
    assert all(o["kind"] == "continuous" for o in out)
    assert all(math.isnan(o["loss_ce"]) and math.isnan(o["ortho_reg"]) for o in out)


def test_step_moves_the_right_parameters(tiny_config, synth32):
    state = TrainState.create(tiny_config)
    G, D = state.generator, state.critic
    g0, d0 = params_of(G), params_of(D)
    train_step(state, batch(synth32, 8))
    g1, d1 = params_of(G), params_of(D)
    assert any(not torch.equal(g0[k], g1[k]) for k in g0)
    # realness.bias alone may sit still: its hinge gradient is -1 + 1 while every score is inside the margin
    for part in ("stem", "shared", "d_only", "realness", "q"):
        names = [n for n in d0 if n.startswith(part + ".")]
        assert any(not torch.equal(d0[n], d1[n]) for n in names), part


def test_mi_step_leaves_trunk_alone_unless_asked(tiny_config, synth32):
    """Only D's own step may move trunk weights when mi_updates_trunk is off."""
    state = TrainState.create(tiny_config.replace(learning_rate=1e-3))
    D = state.critic
    x = batch(synth32, 8)
    trunk_names = [n for n, _ in D.named_parameters() if n.startswith(("stem", "shared"))]
    seen = {}

    def snapshot(tag):
        seen[tag] = {n: p.detach().clone() for n, p in D.named_parameters() if n in trunk_names}

    real_step = state.opt_g.step
    calls = []

    def spying_step(*a, **kw):
        calls.append(len(calls))
        snapshot(f"before_g{len(calls)}")
        r = real_step(*a, **kw)
        snapshot(f"after_g{len(calls)}")
        return r
    state.opt_g.step = spying_step
    train_step(state, x)
    assert len(calls) == 2
    for n in trunk_names:
        assert torch.equal(seen["before_g2"][n], seen["after_g2"][n])


def test_nonfinite_loss_aborts_with_snapshot(tiny_config, synth32, tmp_path):
    state = TrainState.create(tiny_config)
    state.snapshot_dir = tmp_path
    bad = batch(synth32, 8)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, bad)
    assert info.value.snapshot_path is not None
    assert info.value.snapshot_path.with_name(info.value.snapshot_path.name + ".npz").exists()


def test_train_writes_log_and_checkpoint(tiny_config, synth32, tmp_path):
    cfg = tiny_config.replace(iterations=10, snapshot_every=5, probe_every=5, probe_samples=16)
    last, rows = train(cfg, synth32, tmp_path)
    assert len(rows) == 10
    logged = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(logged) == 10 and tuple(logged[0]) == LOG_COLUMNS
    assert logged[4]["l1_onehot"] != "" and logged[3]["l1_onehot"] == ""
    assert sorted(p.name for p in (tmp_path / "checkpoints").glob("*.npz")) == \
        ["ckpt_0000005.npz", "ckpt_0000010.npz"]
    assert last.name == "ckpt_0000010"


def test_train_rejects_empty_dataset(tiny_config, synth32, tmp_path):
    empty = synth32.__class__(synth32.images[:0], synth32.factor_classes[:0], synth32.factor_sizes)
    with pytest.raises(ValueError):
        train(tiny_config, empty, tmp_path)


def test_prefetch_mode_runs(tiny_config, synth32, tmp_path):
    _, rows = train(tiny_config.replace(strict=False, iterations=4), synth32, tmp_path)
    assert len(rows) == 4 and all(math.isfinite(r["loss_d"]) for r in rows)
