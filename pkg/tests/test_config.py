import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disentangan.config import TrainConfig, parse_flat


def test_text_roundtrip():
    cfg = TrainConfig(d=7, q_mode="prob", anneal_end_iter=None, disable_ortho=True, lam=0.5)
    back = TrainConfig.from_text(cfg.to_text())
    assert back == cfg and back.q_mode == "probabilistic"


def test_file_with_comments_and_dashes(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# baseline\nbatch-size = 32   # smaller\ndisable_onehot = yes\nanneal_end_iter = 100\n")
    cfg = TrainConfig.from_file(p)
    assert cfg.batch_size == 32 and cfg.disable_onehot and cfg.anneal_end_iter == 100


@pytest.mark.parametrize("text", ["nokey\n", "zzz = 1\n", "strict = maybe\n", "batch_size = 1\n",
                                  "lam = -1\n", "q_mode = fuzzy\n", "onehot_phase = 5\n"])
def test_bad_text_rejected(text):
    with pytest.raises(ValueError):
        TrainConfig.from_text(text)


def test_derived_views():
    cfg = TrainConfig(disable_ortho=True, disable_onehot=True, disable_competefree_g=True, img_size=32,
                      width_divisor=8)
    assert cfg.loss_weights.ortho_weight == 0
    assert cfg.schedule.period is None
    assert not cfg.generator_config().compete_free
    assert cfg.critic_config().img_size == 32
    assert parse_flat("a = 1\n\n# x\n") == {"a": "1"}


@settings(max_examples=40)
@given(seed=st.integers(0, 2**31), lam=st.floats(0, 10), period=st.integers(1, 5), flag=st.booleans(),
       end=st.one_of(st.none(), st.integers(0, 10**6)))
def test_roundtrip_property(seed, lam, period, flag, end):
    cfg = TrainConfig(seed=seed, lam=lam, onehot_period=period, onehot_phase=period - 1, strict=flag,
                      anneal_end_iter=end)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
