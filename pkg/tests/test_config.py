import pytest

from dualroute.config import RunConfig, load_config, parse_config


def test_defaults_are_valid_and_round_trip():
    cfg = RunConfig()
    assert parse_config(cfg.to_text()) == cfg


def test_parse_values_and_comments():
    cfg = parse_config("""
    # a comment
    seed = 3
    op_offsets = 1, 2,3
    tau = 0.05   # trailing comment
    rl_negatives = inbatch
    """)
    assert cfg.seed == 3 and cfg.op_offsets == (1, 2, 3) and cfg.tau == 0.05
    assert cfg.rl_negatives == "inbatch"
    assert cfg.world_spec().op_offsets == (1, 2, 3)
    assert cfg.sft_hyper().tau == 0.05


def test_views_share_the_seed():
    cfg = RunConfig(seed=7)
    assert cfg.world_spec().seed == 7 and cfg.backbone().seed == 7


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown config keys: bogus"):
        parse_config("bogus = 1")
    with pytest.raises(ValueError, match="unknown"):
        RunConfig().with_overrides(nope=2)


@pytest.mark.parametrize("text", ["seed = x", "seed 3", "tau = -1", "batch_size = 0", "rl_negatives = web",
                                  "eval_fraction = 1.5"])
def test_bad_values_rejected(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_load_from_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("sft_steps = 12\n")
    assert load_config(p).sft_steps == 12
