from dataclasses import replace

import pytest

from denver.config import RunConfig, dump_config, load_config, parse_overrides
from denver.errors import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.run = replace(cfg.run, output=str(tmp_path / "out"))
    dump_config(cfg, tmp_path / "a.cfg")
    assert load_config(tmp_path / "a.cfg", env={}) == cfg


def test_shipped_configs_load():
    paper = load_config("configs/paper.cfg", env={})
    assert (paper.stage1.lambda_smooth, paper.stage1.lambda_limit) == (0.02, 0.02)
    lam = [paper.stage2.weight(n) for n in ("prior", "parallel", "warp", "mask", "rec")]
    assert lam == [0.5, 0.05, 0.1, 0.1, 0.5]
    acc = load_config("configs/acceptance.cfg", env={})
    assert (acc.stage1.steps, acc.stage2.total_steps) == (1500, 1500)
    assert float(acc.extra["acceptance"]["min_gain"]) == 0.02


def test_overrides_and_types():
    cfg = load_config(None, ["stage2.lr=1e-4", "vesselness.scales=1,2.5", "flow.external_dir=none",
                             "synth.frames=10"], env={})
    assert cfg.stage2.lr == 1e-4 and cfg.synth.frames == 10
    assert cfg.vesselness.scales == [1.0, 2.5]
    assert cfg.flow.external_dir is None


def test_seed_propagates_and_env_overrides():
    cfg = load_config(None, ["run.seed=7"], env={})
    assert cfg.synth.seed == cfg.stage1.seed == cfg.stage2.seed == 7
    cfg = load_config(None, ["run.seed=7"], env={"DENVER_SEED": "3"})
    assert cfg.seed == cfg.synth.seed == cfg.stage2.seed == 3


@pytest.mark.parametrize("override", [
    "stage2.no_such_key=1",
    "stage1.steps=many",
    "stage1.steps=0",
    "run.tau=-1",
    "run.input=/does/not/exist",
    "run.annotated=1,x",
])
def test_bad_values_raise(override):
    with pytest.raises(ConfigError):
        load_config(None, [override], env={})


def test_bad_override_syntax_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_overrides(["stage1steps=3"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError):
        load_config(None, env={"DENVER_SEED": "abc"})


def test_unknown_sections_are_kept(tmp_path):
    (tmp_path / "c.cfg").write_text("[notes]\nowner = lab\n")
    assert load_config(tmp_path / "c.cfg", env={}).extra == {"notes": {"owner": "lab"}}
