import math

import pytest

from vptlab.config import ExperimentConfig, dumps_config, load_config, parse_config
from vptlab.errors import UsageError


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg.train.batch_size == 32
    assert cfg.backbone.d_model == 64
    assert cfg.pool.n_candidates == 100


def test_file_values_then_overrides():
    text = "# comment\nbackbone.d_model = 32  # trailing\ntune.tau_grid = 0.5, 2\ntune.enabled = no\n"
    cfg = parse_config(text, ["backbone.d_model=48", "run.seed=9"])
    assert cfg.backbone.d_model == 48
    assert cfg.run.seed == 9
    assert cfg.tune.tau_grid == (0.5, 2.0)
    assert cfg.tune.enabled is False


def test_dump_parse_round_trip():
    cfg = parse_config("", ["select.beta=0.25", "eval.u_values=5, 10", "vpt.n_pool_tokens=3"])
    again = parse_config(dumps_config(cfg))
    assert again == cfg
    assert dumps_config(again) == dumps_config(cfg)


def test_infinite_ratio_survives_text_and_json():
    cfg = parse_config("")
    assert math.isinf(cfg.tune.beta_grid[-1])
    assert parse_config(dumps_config(cfg)).tune.beta_grid == cfg.tune.beta_grid
    assert cfg.to_dict()["tune"]["beta_grid"][-1] == "inf"


@pytest.mark.parametrize(
    "override",
    [
        "nosuch.key=1",
        "backbone.nosuch=1",
        "backbone.d_model=big",
        "tune.enabled=maybe",
        "train.vpt_epochs=0",
        "eval.collapse_epochs=0",
        "tune.beta_grid=1, -1",
        "eval.distinct_mode=other",
        "pool.n_candidates=5",
        "corpus.path=/does/not/exist",
        "backbone",
    ],
)
def test_bad_values_are_usage_errors(override):
    with pytest.raises(UsageError):
        parse_config("", [override])


def test_line_without_equals_names_the_line():
    with pytest.raises(UsageError, match="line 2"):
        parse_config("run.seed = 1\nrun.seed\n")


def test_load_config_from_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("run.seed = 4\n")
    assert load_config(path).run.seed == 4
    assert load_config(None).run.seed == 0
    with pytest.raises(UsageError):
        load_config(tmp_path / "missing.cfg")
