import json

import numpy as np
import pytest

from hdlsr import data as D
from hdlsr.checkpoint import Checkpoint, save_checkpoint
from hdlsr.cli import encode_ppm, main, stretch_band
from hdlsr.config import CliConfig, ConfigError
from hdlsr.model import ModelConfig, init_params, param_shapes, trainable_names


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """Two small synthetic cubes cut into a pairs manifest."""
    root = tmp_path_factory.mktemp("cli")
    (root / "synth").mkdir()
    assert run("synth", "--out", root / "synth", "--seed", 3, "--cubes", 2, "--size", 32, "--bands", 4) == 0
    assert run("prepare", root / "synth" / "manifest.json", "--out", root / "pairs", "--patch", 16,
               "--scale", 2, "--val-fraction", 0.25) == 0
    return root


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


# -- config documents -----------------------------------------------------


def test_config_roundtrip_fixed_point():
    doc = {"model": {"bands": 16, "width": 16, "num_residual_blocks": 2},
           "train": {"max_steps": 300, "loss_weights": {"mse": 1.5}}, "scale": 4}
    cfg = CliConfig.from_dict(doc)
    again = CliConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()
    assert cfg.train.loss_weights.mse == 1.5 and cfg.train.batch_size == 4


@pytest.mark.parametrize("doc,key", [
    ({"trian": {}}, "trian"),
    ({"train": {"lerning_rate": 1}}, "train.lerning_rate"),
    ({"train": {"loss_weights": {"ssim": 1}}}, "train.loss_weights.ssim"),
    ({"model": {"bands": 4, "depth": 2}}, "model.depth"),
    ({"model": {"width": 4}}, "model.bands"),
    ({"train": {"batch_size": 0}}, "train.batch_size"),
    ({"scale": 0}, "scale"),
])
def test_config_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as exc:
        CliConfig.from_dict(doc)
    assert exc.value.key == key


# -- synth / prepare ------------------------------------------------------


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        assert run("synth", "--out", tmp_path / d, "--seed", 7, "--cubes", 4, "--size", 96, "--bands", 16) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert len(D.Manifest.load(tmp_path / "a" / "manifest.json").cubes) == 4


def test_synth_missing_dir(tmp_path, capsys):
    assert run("synth", "--out", tmp_path / "missing") == 2
    assert "missing" in capsys.readouterr().err


def test_prepare_tiling_count(tmp_path):
    cube = D.Cube.from_array(np.random.default_rng(0).uniform(0.1, 2, (512, 512, 16)))
    D.write_hsc(tmp_path / "big.hsc", cube)
    assert run("prepare", tmp_path / "big.hsc", "--out", tmp_path / "p", "--patch", 128, "--scale", 4) == 0
    m = D.Manifest.load(tmp_path / "p" / "manifest.json")
    assert len(m.pairs) == 16 and m.bands == 16
    assert sum(e.split == "val" for e in m.pairs) == 2
    m.load_pairs(verify=True)


def test_prepare_divisibility(tmp_path, capsys):
    D.write_hsc(tmp_path / "c.hsc", D.Cube.from_array(np.ones((144, 144, 2))))
    assert run("prepare", tmp_path / "c.hsc", "--out", tmp_path / "ok", "--patch", 144, "--scale", 8,
               "--val-fraction", 0.5) == 2  # a single patch cannot be split
    assert "too few pairs" in capsys.readouterr().err
    assert run("prepare", tmp_path / "c.hsc", "--out", tmp_path / "bad", "--patch", 100, "--scale", 8) == 2
    assert "not divisible" in capsys.readouterr().err


def test_prepare_accepts_144_over_8(tmp_path):
    D.write_hsc(tmp_path / "c.hsc", D.Cube.from_array(np.ones((288, 144, 2))))
    assert run("prepare", tmp_path / "c.hsc", "--out", tmp_path / "ok", "--patch", 144, "--scale", 8,
               "--val-fraction", 0.5) == 0


def test_prepare_unreadable(tmp_path):
    assert run("prepare", tmp_path / "nope.hsc", "--out", tmp_path / "o", "--patch", 8, "--scale", 2) == 2


# -- train / eval / infer -------------------------------------------------


def small_config(root, out):
    return write_config(root / f"{out}.json", {
        "model": {"bands": 4, "width": 4, "num_residual_blocks": 1},
        "train": {"batch_size": 2, "max_steps": 4, "learning_rate": 1e-3},
        "data": {"manifest": "pairs/manifest.json", "out_dir": out},
    })


def test_train_outputs_and_rerun(prepared):
    assert run("train", small_config(prepared, "run_a")) == 0
    assert run("train", small_config(prepared, "run_b")) == 0
    a, b = prepared / "run_a", prepared / "run_b"
    for name in ("best.ckpt", "last.ckpt", "summary.json", "config.json"):
        assert (a / name).exists()
    for name in ("best.ckpt", "last.ckpt", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    def hist(d):
        return [line.split("\t")[:-1] for line in (d / "history.tsv").read_text().splitlines()]

    assert hist(a) == hist(b)
    summary = json.loads((a / "summary.json").read_text())
    assert summary["steps"] == 4 and summary["param_count"] > 0


def test_train_bad_key(prepared, capsys):
    cfg = write_config(prepared / "bad.json", {"model": {"bands": 4}, "train": {"lerning_rate": 1}})
    assert run("train", cfg) == 2
    assert "train.lerning_rate" in capsys.readouterr().err


def test_eval_identity_equals_baseline(prepared):
    p = init_params(ModelConfig(bands=4, width=4, num_residual_blocks=1))
    p = p.updated({n: np.zeros_like(p[n]) for n in ("head.out.weight", "head.out.bias")})
    save_checkpoint(prepared / "ident.ckpt", Checkpoint(p))
    m = prepared / "pairs" / "manifest.json"
    assert run("eval", "--checkpoint", prepared / "ident.ckpt", "--manifest", m, "--out", prepared / "e1") == 0
    assert run("eval", "--checkpoint", prepared / "ident.ckpt", "--manifest", m, "--out", prepared / "e2") == 0
    assert run("eval", "--baseline", "--manifest", m, "--out", prepared / "eb") == 0
    files = sorted(f.name for f in (prepared / "e1").iterdir())
    assert "aggregate.json" in files and len(files) > 1
    for f in files:
        one = (prepared / "e1" / f).read_bytes()
        assert one == (prepared / "e2" / f).read_bytes()
        assert one == (prepared / "eb" / f).read_bytes()


def test_eval_band_mismatch(prepared):
    save_checkpoint(prepared / "c5.ckpt", Checkpoint(init_params(ModelConfig(bands=5, width=4,
                                                                             num_residual_blocks=1))))
    assert run("eval", "--checkpoint", prepared / "c5.ckpt", "--manifest", prepared / "pairs" / "manifest.json",
               "--out", prepared / "e5") == 2


def test_infer_dims(prepared):
    save_checkpoint(prepared / "c.ckpt", Checkpoint(init_params(ModelConfig(bands=4, width=4,
                                                                            num_residual_blocks=1))))
    lr = D.Cube.from_array(np.random.default_rng(1).uniform(0, 1, (6, 5, 4)), normalized=True)
    D.write_hsc(prepared / "lr.hsc", lr)
    assert run("infer", "--checkpoint", prepared / "c.ckpt", "--input", prepared / "lr.hsc",
               "--output", prepared / "sr.hsc", "--scale", 4) == 0
    sr = D.read_hsc(prepared / "sr.hsc")
    assert (sr.meta.height, sr.meta.width, sr.meta.bands) == (24, 20, 4)
    # without --scale and no scale recorded in the checkpoint
    assert run("infer", "--checkpoint", prepared / "c.ckpt", "--input", prepared / "lr.hsc",
               "--output", prepared / "sr2.hsc") == 2


# -- gradcheck / params / render ------------------------------------------


def test_gradcheck_default_and_rows(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out.splitlines()
    rows = [line.split("\t") for line in out[1:-1]]
    model_rows = [r[1] for r in rows if r[0] == "model"]
    cfg = ModelConfig(bands=4, width=5, num_residual_blocks=2)
    assert model_rows == ["x"] + trainable_names(cfg)


def test_gradcheck_impossible_tolerance(capsys):
    assert run("gradcheck", "--tol", 1e-12) == 1
    assert "worst" in capsys.readouterr().err


def test_params_reference_preset(capsys):
    assert run("params", "--bands", 102, "--width", 56, "--blocks", 3) == 0
    lines = capsys.readouterr().out.splitlines()
    total = int(lines[-1].split("\t")[-1])
    assert 300_000 <= total <= 360_000
    assert total == sum(int(line.split("\t")[-1]) for line in lines[:-1])


def test_params_hand_count(capsys):
    assert run("params", "--bands", 1, "--width", 1, "--blocks", 1) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].split("\t")[-1] == "70"
    assert len(out) - 1 == len(trainable_names(ModelConfig(bands=1, width=1, num_residual_blocks=1)))
    assert len(out) - 1 < len(param_shapes(ModelConfig(bands=1, width=1, num_residual_blocks=1)))


def test_params_invalid(capsys):
    assert run("params", "--bands", 0) == 2


def test_render_constant_and_header(tmp_path):
    D.write_hsc(tmp_path / "k.hsc", D.Cube.from_array(np.full((5, 7, 3), 0.4)))
    assert run("render", "--input", tmp_path / "k.hsc", "--bands", 0, 1, 2, "--out", tmp_path / "k.ppm") == 0
    raw = (tmp_path / "k.ppm").read_bytes()
    head = b"P6\n7 5\n255\n"
    assert raw.startswith(head)
    assert raw[len(head):] == bytes([128]) * (7 * 5 * 3)


def test_render_band_range(tmp_path, capsys):
    D.write_hsc(tmp_path / "k.hsc", D.Cube.from_array(np.zeros((4, 4, 3))))
    assert run("render", "--input", tmp_path / "k.hsc", "--bands", 0, 1, 3, "--out", tmp_path / "k.ppm") == 2
    assert "3" in capsys.readouterr().err


def test_stretch_and_ppm():
    band = np.linspace(0, 1, 101).reshape(1, 101)
    s = stretch_band(band)
    assert s[0, 0] == 0 and s[0, -1] == 255 and s[0, 50] == 128
    rgb = np.zeros((2, 3, 3), np.uint8)
    rgb[1, 2] = (1, 2, 3)
    ppm = encode_ppm(rgb)
    assert ppm[:11] == b"P6\n3 2\n255\n" and ppm[-3:] == b"\x01\x02\x03"


def test_usage_errors():
    assert run() == 2
    assert run("frobnicate") == 2
    assert run("synth") == 2
