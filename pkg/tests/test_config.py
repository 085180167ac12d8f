from dataclasses import fields

import pytest

from unmask.config import ConfigError, RunConfig, build_id, parse_config, snapshot


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_config(cfg.to_text()) == cfg
    assert all(f.metadata.get("doc") for f in fields(RunConfig))


def test_parse_values_and_comments():
    cfg = parse_config("""
# a comment
seed = 7   # trailing comment
lr = 3e-4
flip = false
box_area = 0.05, 0.2
prior = boxes
""")
    assert cfg.seed == 7 and cfg.lr == 3e-4 and cfg.flip is False and cfg.box_area == (0.05, 0.2)
    tc = cfg.train_config()
    assert tc.prior.kind == "boxes" and tc.seed == 7 and tc.betas == (0.5, 0.9)
    assert cfg.weights().lambda_sty == 3000


@pytest.mark.parametrize("text, msg", [
    ("sede = 1", "unknown key"),
    ("seed", "key = value"),
    ("seed = x", "expects int"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("box_area = 0.1", "2 comma-separated"),
    ("lambda_c = -1", "lambda_c"),
    ("batch_size = 0", "batch_size"),
])
def test_rejects(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_prior_override():
    cfg = RunConfig()
    assert cfg.prior_spec("pool:/tmp/p").pool_dir == "/tmp/p"
    assert cfg.prior_spec("none").kind == "none"
    with pytest.raises(ConfigError):
        cfg.prior_spec("pool")
    with pytest.raises(ConfigError):
        cfg.prior_spec("circles")


def test_snapshot_embeds_source_and_build():
    cfg = parse_config("seed = 3\n")
    snap = snapshot(cfg, "seed = 3\n", extra=1)
    assert snap["source"] == "seed = 3\n" and snap["resolved"]["seed"] == 3 and snap["build_id"] == build_id()
