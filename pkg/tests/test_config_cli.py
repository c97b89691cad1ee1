from __future__ import annotations

import shutil

import pytest

from mixrec import pipeline
from mixrec.cli import main
from mixrec.config import ConfigError, PipelineConfig, load_config, synthetic_preset

from conftest import tiny_config, tiny_flags


def test_defaults_match_reference_settings():
    c = PipelineConfig()
    assert (c.mix.think_rate, c.mix.rec_rate, c.mix.learning_rate, c.mix.weight_decay) == (0.2, 0.8, 1e-4, 1e-3)
    assert (c.loss.alpha, c.loss.beta, c.loss.eta, c.loss.gamma) == (0.1, 0.9, 0.9, 0.1)
    assert (c.lm.lora_r, c.lm.lora_alpha, c.lm.lora_dropout) == (8, 16.0, 0.05)
    assert (c.experts.tau, c.experts.entropy_factor, c.experts.conc_base, c.experts.conc_slope) == \
        (0.1, 0.95, 0.5, 0.6)
    assert c.data.max_history == 10 and c.data.keywords == 10


def test_ini_round_trip_and_overrides(tmp_path):
    cfg = synthetic_preset(str(tmp_path / "out"))
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    back = load_config(path, {"mix.steps": "7", "data.item_delimiter": "\\t", "eval.use_features": "no"})
    assert back.lm.d_model == cfg.lm.d_model and back.output == cfg.output
    assert back.mix.steps == 7 and back.data.item_delimiter == "\t" and back.eval.use_features is False


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[mix]\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, {"mix.steps": "many"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_section_hash_tracks_only_named_sections():
    a, b = PipelineConfig(), PipelineConfig()
    b.eval.k = 10
    assert a.section_hash("data", "lm") == b.section_hash("data", "lm")
    b.lm.d_model = 64
    assert a.section_hash("data", "lm") != b.section_hash("data", "lm")


def test_exit_code_config_error(tmp_path, capsys):
    assert main(["prepare", "--output", str(tmp_path / "o"), "--data.ratings", str(tmp_path / "nope.dat")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert main(["prepare", "--output", str(tmp_path / "o"), "--mix.steps", "x"]) == 2


def test_exit_code_prerequisite_names_checkpoint(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["train-global", "--preset", "synthetic", "--output", str(out)]) == 3
    err = capsys.readouterr().err
    assert str(out / "data") in err and "prepare" in err
    assert main(["train-experts", "--preset", "synthetic", "--output", str(out)]) == 3


def test_exit_code_divergence(tmp_path):
    out = str(tmp_path / "o")
    flags = ["--preset", "synthetic", "--output", out, *tiny_flags()]
    assert main(["prepare", *flags]) == 0
    assert main(["train-collab", *flags, "--collab.learning_rate", "1e308", "--collab.optimizer", "sgd"]) == 4


def test_config_hash_mismatch_is_prerequisite_error(built_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(built_run.output, out)
    cfg = tiny_config(out, mix__steps=7)
    with pytest.raises(pipeline.PrerequisiteError, match="global.trkc.*rerun 'train-global'"):
        pipeline.run_stage(cfg, "train-experts")
    with pytest.raises(pipeline.PrerequisiteError, match="does not match"):
        pipeline.cmd_evaluate(cfg, "global")


def test_cli_stage_sequence_and_infer(tmp_path, capsys):
    out = str(tmp_path / "o")
    flags = ["--preset", "synthetic", "--output", out, *tiny_flags()]
    for stage in ("prepare", "synth", "train-collab", "train-global"):
        assert main([stage, *flags]) == 0
    assert main(["evaluate", *flags, "--mode", "global", "--eval.use_features", "false"]) == 0
    assert "uauc" in capsys.readouterr().out
    assert main(["infer", *flags, "--user", "0", "--item", "1", "--mode", "global",
                 "--eval.use_features", "false"]) == 0
    assert '"score"' in capsys.readouterr().out
    assert main(["infer", *flags, "--user", "0", "--item", "99999", "--mode", "global",
                 "--eval.use_features", "false"]) == 2
    assert (tmp_path / "o" / "config.ini").exists()


def test_file_values_override_preset(tmp_path):
    from mixrec.cli import build_parser, resolve_config

    ini = tmp_path / "c.ini"
    ini.write_text("[lm]\nd_model = 32\n")
    args = build_parser().parse_args(["prepare", "--preset", "synthetic", "--config", str(ini),
                                      "--mix.steps", "5"])
    cfg = resolve_config(args)
    assert cfg.lm.d_model == 32 and cfg.mix.steps == 5 and cfg.data.source == "synthetic"
