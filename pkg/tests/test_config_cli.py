from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from innlab import config as cfgmod
from innlab.attacks import load_adversarial_set
from innlab.checkpoint import load_checkpoint
from innlab.cli import resolve_config, run_command
from innlab.ensemble import parse_curve_csv
from innlab.errors import ConfigError

TINY = """\
# a few seconds per stage on the digits data
pretrain.epochs = 1
train.epochs = 2
attack.iterations = 2
attack.snapshot = 1
eval_images = 20
"""


def tiny_config(tmp_path, extra=""):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + extra)
    return str(path)


# ---------------------------------------------------------------------------
# presets, epsilon parsing and the config file


def test_presets():
    expect = {
        "fig3-blue": (0.5, 0.4, 0.4, 8),
        "fig3-green": (0.3, 0.3, 0.4, 4),
        "fig3-red": (0.2, 0.3, 0.2, 4),
        "fig3-purple": (0.1, 0.1, 0.1, 8),
    }
    for name, (a, b, g, k) in expect.items():
        ic = cfgmod.from_preset(name, seed=3).interference
        assert (ic.alpha, ic.beta, ic.gamma, ic.K, ic.master_seed) == (a, b, g, k, 3)
    with pytest.raises(ConfigError):
        cfgmod.from_preset("fig3-orange")


def test_default_desk_grid():
    assert cfgmod.DESK_EPSILONS[0] == 0.0
    assert cfgmod.DESK_EPSILONS[-1] == pytest.approx(0.3, abs=1e-15)
    assert np.allclose(cfgmod.DESK_EPSILONS, [0, 0.0375, 0.075, 0.15, 0.3])


@pytest.mark.parametrize("name", sorted(cfgmod.PRESETS))
def test_render_parse_round_trip(name):
    cfg = cfgmod.from_preset(name, seed=11)
    assert cfgmod.parse(cfgmod.render(cfg)) == cfg


def test_render_parse_round_trip_custom():
    cfg = cfgmod.ExperimentConfig(
        dataset_format="idx", train_paths=("a", "b"), test_paths=("c", "d"), modes=("INN2",),
        epsilons=(0.0, 8 / 255), eval_images=7, out_dir="/tmp/x",
    ).with_seed(2**40)
    assert cfgmod.parse(cfgmod.render(cfg)) == cfg


def test_parse_epsilon_forms():
    assert cfgmod.parse_epsilon("16/255") == float(Fraction(16, 255))
    assert cfgmod.parse_epsilon("16") == 16 / 255
    assert cfgmod.parse_epsilon("0.3") == 0.3
    assert cfgmod.parse_epsilon("0") == 0.0
    assert cfgmod.parse_epsilons("0,2, 4/255,0.5") == (0.0, 2 / 255, 4 / 255, 0.5)
    for bad in ("x", "1/0", "300", "-0.1", "2.5"):
        with pytest.raises(ConfigError):
            cfgmod.parse_epsilon(bad)


def test_parse_errors():
    for text in ("bogus = 1", "alpha", "K = eight", "train.seed = 3", "attack.eot_resample = maybe"):
        with pytest.raises(ConfigError):
            cfgmod.parse(text)


def test_parse_preset_line_is_base():
    cfg = cfgmod.parse("K = 2\npreset = fig3-red\nseed = 4")
    assert (cfg.interference.alpha, cfg.interference.K, cfg.seed, cfg.attack.seed, cfg.train.seed) == (0.2, 2, 4, 4, 4)


def _args(**kw):
    base = dict(config=None, preset=None, dataset=None, test_dataset=None, out=None, seed=None, eps=None,
                modes=None, iterations=None, eval_images=None, epochs=None)
    base.update(kw)
    return SimpleNamespace(**base)


def test_seed_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 5\n")
    assert resolve_config(_args(config=str(path)), {}).seed == 5
    assert resolve_config(_args(config=str(path)), {"INN_SEED": "6"}).seed == 6
    cfg = resolve_config(_args(config=str(path), seed=7), {"INN_SEED": "6"})
    assert (cfg.seed, cfg.train.seed, cfg.pretrain.seed, cfg.attack.seed) == (7, 7, 7, 7)
    with pytest.raises(ConfigError):
        resolve_config(_args(), {"INN_SEED": "seven"})


def test_flags_override_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("preset = fig3-blue\nattack.iterations = 9\n")
    cfg = resolve_config(_args(config=str(path), preset="fig3-red", iterations=3, eps="0,8", modes="INN2"), {})
    assert cfg.interference.alpha == 0.2 and cfg.attack.iterations == 3
    assert cfg.attack.step_size == 2.5 * cfg.attack.epsilon / 3
    assert cfg.epsilons == (0.0, 8 / 255) and cfg.modes == ("INN2",)
    with pytest.raises(ConfigError):
        resolve_config(_args(modes="INN3"), {})


# ---------------------------------------------------------------------------
# command line


def test_usage_errors_exit_2(capsys):
    assert run_command([]) == 2
    assert run_command(["train"]) == 2
    assert run_command(["pretrain", "--bogus"]) == 2
    assert run_command(["pretrain", "--seed", "x"]) == 2
    assert run_command(["--help"]) == 0


def test_operational_errors_exit_1(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert run_command(["eval", "--out", out], {}) == 1
    assert "snapshots" in capsys.readouterr().err
    assert run_command(["pretrain", "--out", out, "--dataset", "idx:nope1,nope2"], {}) == 1
    assert run_command(["pretrain", "--out", out, "--eps", "2.5"], {}) == 1
    assert run_command(["gen-backgrounds", "--out", out, "--shape", "1,2"], {}) == 1


def test_gen_backgrounds(tmp_path, capsys):
    out = tmp_path / "o"
    assert run_command(["gen-backgrounds", "--out", str(out), "--shape", "3,16,16", "--preset", "fig3-red", "--seed", "2"], {}) == 0
    ck = load_checkpoint(out / "backgrounds.innc")
    assert ck.metadata["K"] == "4" and ck.metadata["seed"] == "2"
    assert list(ck.tensors) == ["bg0.solid_gray", "bg1.horizontal_gradient", "bg2.vertical_gradient", "bg3.checkerboard"]
    assert ck.tensors["bg0.solid_gray"].shape == (3, 16, 16)


def test_gradcheck_command(capsys):
    assert run_command(["gradcheck"], {}) == 0
    out = capsys.readouterr().out
    assert "smallconvnet.input" in out and "FAIL" not in out


@pytest.mark.slow
def test_finetune_twice_is_bit_identical(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    for name in ("a", "b"):
        assert run_command(["finetune", "--config", cfg, "--out", str(tmp_path / name)], {"INN_SEED": "3"}) == 0
    for rel in ("pretrained.innc", "snapshots/epoch1.innc", "snapshots/epoch2.innc"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    meta = load_checkpoint(tmp_path / "a" / "snapshots" / "epoch2.innc").metadata
    assert meta["K"] == "8" and meta["epoch"] == "2"


@pytest.mark.slow
def test_curve_attack_eval_pipeline(tmp_path, capsys):
    cfg, out = tiny_config(tmp_path), tmp_path / "o"
    assert run_command(["curve", "--config", cfg, "--out", str(out), "--eps", "0,2,4,8,16"], {}) == 0
    printed = capsys.readouterr().out
    csv = (out / "curves" / "robustness.csv").read_text()
    assert csv in printed
    rows = parse_curve_csv(csv)
    assert len(rows) == 15
    assert {r.mode for r in rows} == {"INN1", "INN2", "undefended"}
    assert sorted({r.epsilon for r in rows}) == [round(k / 255, 6) for k in (0, 2, 4, 8, 16)]
    assert all(r.n_images == 20 and r.seed == 0 for r in rows)
    assert len(list((out / "adv").glob("*.inna"))) == 15
    assert len(list((out / "logs").glob("eval_*.txt"))) == 15

    # the stand-alone commands reproduce the curve's numbers from the same artifacts
    assert run_command(["attack", "--config", cfg, "--out", str(out), "--eps", "8", "--modes", "INN1,undefended", "--threads", "2"], {}) == 0
    adv = load_adversarial_set(out / "adv" / f"eps{8 / 255:.6f}_INN1.inna")
    assert adv.mode == "INN1" and adv.snapshot_index == 1 and len(adv.images) == 20
    capsys.readouterr()
    for mode in ("INN1", "undefended"):
        path = out / "adv" / f"eps{8 / 255:.6f}_{mode}.inna"
        assert run_command(["eval", "--config", cfg, "--out", str(out), "--adv", str(path)], {}) == 0
        acc = float(capsys.readouterr().out.split("accuracy ")[1].split()[0])
        assert acc == pytest.approx([r for r in rows if r.mode == mode and r.epsilon == round(8 / 255, 6)][0].top1_base_accuracy, abs=1e-6)
    assert run_command(["eval", "--config", cfg, "--out", str(out)], {}) == 0
    clean = float(capsys.readouterr().out.split("accuracy ")[1].split()[0])
    assert clean == pytest.approx([r for r in rows if r.mode == "INN1" and r.epsilon == 0][0].top1_base_accuracy, abs=1e-6)
