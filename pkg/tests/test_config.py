import textwrap

import pytest

from mmctta.adapter import MethodVariant
from mmctta.config import ExperimentConfig, dumps, load, loads
from mmctta.errors import ConfigError


def parse(text):
    return loads(textwrap.dedent(text), "exp.ini")


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert loads(dumps(cfg)) == cfg


def test_custom_round_trip():
    cfg = parse("""
        [schedule]
        preset = custom
        [segment.fog]
        length = 4
        bias_2d = 1.5
        noise_gain_3d = 2
        [segment.tilt]
        length = 2
        bias_2d = 1, 0, 0, 0, 0, 0, 0, 0
        rotation_3d_deg = 30
        [adapter]
        n_q = 64
        n_enq = 8
        aug_3d = 90, 270
        [run]
        seeds = 3, 4
        variants = comac, no_xmpf
        [ablate]
        n_aug_2d = 0, 2
        n_aug_3d = 1
        sweep_p_rs = 0.1, 0.9
    """)
    assert [s.name for s in cfg.custom_segments] == ["fog", "tilt"]
    assert cfg.custom_segments[1].bias_2d == (1.0, 0, 0, 0, 0, 0, 0, 0)
    assert cfg.adapter.aug_3d == (90.0, 270.0)
    assert cfg.variants == (MethodVariant.COMAC, MethodVariant.NO_XMPF)
    assert cfg.ablate.sweeps == (("p_rs", (0.1, 0.9)),)
    assert loads(dumps(cfg)) == cfg


def test_partial_file_keeps_defaults():
    cfg = parse("""
        [adapter]
        lr = 0.01
    """)
    assert cfg.adapter.lr == 0.01 and cfg.adapter.n_q == ExperimentConfig().adapter.n_q


@pytest.mark.parametrize("text, line, fragment", [
    ("[world]\nnoise = 0.5\nbogus = 1\n", 3, "[world] bogus: unknown key"),
    ("[run]\nseeds = 1\n\n[nowhere]\nx = 1\n", 4, "[nowhere]: unknown section"),
    ("[adapter]\n\nlambda_s = 2\n", 3, "[adapter] lambda_s"),
    ("[adapter]\nn_q = many\n", 2, "[adapter] n_q"),
    ("[run]\nvariants = comac, magic\n", 2, "[run] variants"),
    ("[ablate]\nn_aug_2d =\nn_aug_3d = 1\n", 2, "empty axis"),
    ("[ablate]\nsweep_lr =\n", 2, "[ablate] sweep_lr"),
    ("[segment.a]\ndropout_3d = 1.0\n", 2, "[segment.a] dropout_3d"),
    ("[schedule]\npreset = custom\n", 2, "custom preset"),
])
def test_errors_point_at_line(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        loads(text, "exp.ini")
    msg = str(exc.value)
    assert msg.startswith(f"exp.ini:{line}:")
    assert fragment in msg


def test_grid_needs_both_axes():
    with pytest.raises(ConfigError, match="n_aug_3d is missing"):
        loads("[ablate]\nn_aug_2d = 1, 2\n")


def test_unknown_sweep_parameter():
    with pytest.raises(ConfigError, match="sweep_n_q"):
        loads("[ablate]\nsweep_n_q = 1\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "none.ini")


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("MMCTTA_OUT", "/tmp/elsewhere")
    assert ExperimentConfig().output_dir == "/tmp/elsewhere"


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / "configs"
    for path in sorted(root.glob("*.ini")):
        load(path)
