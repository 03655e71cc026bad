import json

import numpy as np
import pytest
import torch

from disentangan.checkpoint import load_checkpoint, load_models, read_metadata, save_checkpoint
from disentangan.errors import CheckpointError, CheckpointVersionError
from disentangan.trainer import TrainState, train


def same_rows(a, b):
    """Row lists equal, with NaN matching NaN."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        for k in x:
            u, v = x[k], y[k]
            if isinstance(u, float) and u != u:
                if not (isinstance(v, float) and v != v):
                    return False
            elif u != v:
                return False
    return True


@pytest.fixture
def trained(tiny_config, synth32, tmp_path):
    last, _ = train(tiny_config.replace(iterations=3), synth32, tmp_path / "run")
    return last


def test_roundtrip_bitwise(trained):
    meta = read_metadata(trained)
    assert meta["format_version"] == 1 and meta["iteration"] == 3
    state = load_checkpoint(trained)
    again = load_checkpoint(trained)
    for a, b in ((state.generator, again.generator), (state.critic, again.critic)):
        sa, sb = a.state_dict(), b.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
    with np.load(str(trained) + ".npz") as arrays:
        for k, v in state.generator.state_dict().items():
            assert np.array_equal(arrays["generator/" + k], v.numpy())


def test_wrong_version_rejected(trained):
    meta_path = trained.with_name(trained.name + ".json")
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = 99
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(trained)


def test_corrupt_archive_rejected(trained):
    npz = trained.with_name(trained.name + ".npz")
    npz.write_bytes(npz.read_bytes()[:200])
    with pytest.raises(CheckpointError):
        load_checkpoint(trained)


def test_tampered_rng_rejected(trained):
    meta_path = trained.with_name(trained.name + ".json")
    meta = json.loads(meta_path.read_text())
    meta["stream_state"]["cursor"] += 1
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(trained)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_load_models_eval_mode(trained):
    g, c, cfg = load_models(trained)
    assert not g.training and not c.training and cfg.iterations == 3


def test_resume_replays_uninterrupted_run(tiny_config, synth32, tmp_path):
    # the noise schedule is pinned, as it would be for a run interrupted at iteration 3
    cfg = tiny_config.replace(iterations=8, snapshot_every=3, anneal_end_iter=6)
    _, full = train(cfg, synth32, tmp_path / "a")
    _, first = train(cfg.replace(iterations=3), synth32, tmp_path / "b")
    _, rest = train(cfg, synth32, tmp_path / "b", resume_from=tmp_path / "b" / "checkpoints" / "ckpt_0000003")
    assert same_rows(full, first + rest)
    fa = load_checkpoint(tmp_path / "a" / "checkpoints" / "ckpt_0000008")
    fb = load_checkpoint(tmp_path / "b" / "checkpoints" / "ckpt_0000008")
    sa, sb = fa.critic.state_dict(), fb.critic.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_resume_keeps_noise_schedule_when_extending(tiny_config, synth32, tmp_path):
    _, first = train(tiny_config.replace(iterations=4), synth32, tmp_path)
    _, more = train(tiny_config.replace(iterations=6), synth32, tmp_path,
                    resume_from=tmp_path / "checkpoints" / "ckpt_0000004")
    # annealing ended at 4 // 2 = 2 in the original run and stays ended
    assert [r["sigma_t"] for r in more] == [0.0, 0.0]
    assert load_checkpoint(tmp_path / "checkpoints" / "ckpt_0000006").config.anneal_end_iter == 2


def test_manual_save_of_fresh_state(tiny_config, tmp_path):
    state = TrainState.create(tiny_config)
    base = save_checkpoint(state, tmp_path / "fresh")
    back = load_checkpoint(base)
    assert back.iteration == 0 and back.stream is None
