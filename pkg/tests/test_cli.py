import numpy as np
import pytest

from evl import checkpoint as ck
from evl.cli import main
from evl.config import DEFAULTS, build, dump, parse_text
from evl.errors import ConfigError

TINY = """\
# tiny end-to-end run
backbone.image_size = 32
backbone.patch_size = 8
backbone.width = 16
backbone.heads = 2
backbone.mlp_factor = 2
decoder.heads = 2
decoder.mlp_factor = 2
decoder.max_frames = 4
sampling.frames = 4
synth.frames = 4
train.steps = 6
train.batch_size = 4
data.train = data
data.eval = data
"""


def test_parse_grammar():
    v = parse_text("seed = 3  # trailing\n\n# only\n"
                   "decoder.feature_layers = -2, -1\ndecoder.use_conv = no\n")
    assert v == {"seed": 3, "decoder.feature_layers": (-2, -1), "decoder.use_conv": False}


@pytest.mark.parametrize("text,needle", [
    ("seed = 1\nbogus.key = 2\n", ":2: unknown key 'bogus.key'"),
    ("seed = 1\nseed = 2\n", ":2: key 'seed' given twice"),
    ("train.lr = fast\n", ":1: bad value for train.lr"),
    ("decoder.use_pos = maybe\n", ":1: bad value"),
    ("just words\n", ":1: expected 'key = value'"),
])
def test_parse_errors_name_line(text, needle):
    with pytest.raises(ConfigError, match=needle.replace("(", r"\(")):
        parse_text(text, "x.cfg")


def test_build_validates_fields():
    with pytest.raises(ConfigError, match="feature_layers"):
        build({"decoder.num_blocks": 3})
    with pytest.raises(ConfigError):
        build({"decoder.feature_layers": (-5, -1)})
    with pytest.raises(ConfigError):
        build({"sampling.frames": 16})
    cfg = build({})
    assert cfg.decoder.width == cfg.backbone.width and cfg.decoder.grid == (8, 8)
    assert build({"backbone.qk_gain": 2.0}).backbone_init == {"pos_scale": 1.0, "qk_gain": 2.0}


def test_dump_roundtrip():
    values = dict(DEFAULTS, **{"seed": 9, "decoder.use_attn": False, "data.train": "x"})
    assert parse_text(dump(values)) == {k: v for k, v in values.items() if v is not None}


def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(TINY)
    assert main(["synth", "--seed", "1", "--size", "12", "--frames", "4", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "run.cfg"), "--out", str(root / "a"), "--seed", "3"]) == 0
    return root


def test_synth_deterministic(workspace, tmp_path):
    assert main(["synth", "--seed", "1", "--size", "12", "--frames", "4", "--out", str(tmp_path)]) == 0
    for name in ("index.tsv", "clip_00000.evlt", "clip_00011.evlt"):
        assert (tmp_path / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_train_outputs_deterministic(workspace):
    text = (workspace / "a" / "metrics.tsv").read_text()
    lines = text.splitlines()
    assert lines[0] == "step\tloss\tlr\ttrain_acc" and len(lines) == 7
    assert all(len(f.split(".")[1]) == 6 for f in lines[1].split("\t")[1:])
    assert main(["train", "--config", str(workspace / "run.cfg"), "--out", str(workspace / "b"),
                 "--seed", "3"]) == 0
    assert (workspace / "b" / "metrics.tsv").read_text() == text
    assert (workspace / "b" / "checkpoint.evlt").read_bytes() == (workspace / "a" / "checkpoint.evlt").read_bytes()


def test_eval_writes_report(workspace, capsys):
    ckpt = workspace / "a" / "checkpoint.evlt"
    assert main(["eval", "--config", str(workspace / "run.cfg"), "--ckpt", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "top-1 accuracy" in out
    rows = (workspace / "a" / "eval.tsv").read_text().splitlines()
    assert rows[0] == "class\tname\tcount\taccuracy" and rows[-1].startswith("all\tall\t12\t")


def test_eval_manifest_mismatch_lists_names(workspace, tmp_path, capsys):
    arc = ck.load(workspace / "a" / "checkpoint.evlt")
    del arc["decoder.head.weight"]
    ck.save(arc, tmp_path / "bad.evlt")
    assert main(["eval", "--config", str(workspace / "run.cfg"), "--ckpt", str(tmp_path / "bad.evlt")]) == 2
    assert "decoder.head.weight" in capsys.readouterr().err


def test_eval_empty_dataset_exit_2(workspace, tmp_path):
    assert main(["synth", "--size", "0", "--out", str(tmp_path / "empty")]) == 0
    assert main(["eval", "--config", str(workspace / "run.cfg"), "--ckpt",
                 str(workspace / "a" / "checkpoint.evlt"), "--data", str(tmp_path / "empty")]) == 2


def test_missing_inputs_exit_1(workspace, tmp_path):
    assert main(["eval", "--config", str(workspace / "run.cfg"), "--ckpt", str(tmp_path / "none.evlt")]) == 1
    assert main(["eval", "--config", str(workspace / "run.cfg"), "--ckpt",
                 str(workspace / "a" / "checkpoint.evlt"), "--data", str(tmp_path / "nodata")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(workspace, tmp_path, capsys):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(TINY.replace("data.train = data", f"data.train = {workspace / 'data'}")
                   + "train.lr = 1e300\ntrain.weight_decay = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "numerical abort at step" in capsys.readouterr().err


def test_export_attention(workspace, tmp_path):
    out = tmp_path / "attn.evlt"
    assert main(["export-attn", "--config", str(workspace / "run.cfg"), "--ckpt",
                 str(workspace / "a" / "checkpoint.evlt"), "--clip",
                 str(workspace / "data" / "clip_00003.evlt"), "--out", str(out)]) == 0
    arc = ck.load(out)
    for name in ("layer-2.a_prev", "layer-2.a_next", "layer-1.a_prev", "layer-1.a_next"):
        a = arc[name].astype(np.float64)
        assert a.shape == (4, 16, 16)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    assert arc["decoder.block0.attn"].shape == (2, 64)
    assert main(["export-attn", "--config", str(workspace / "run.cfg"), "--ckpt",
                 str(workspace / "a" / "checkpoint.evlt"), "--clip", str(tmp_path / "x.evlt"),
                 "--out", str(out)]) == 1


def test_flops_command(workspace, tmp_path, capsys):
    cfg = tmp_path / "vitb.cfg"
    cfg.write_text("backbone.image_size = 224\nbackbone.patch_size = 16\nbackbone.depth = 12\n"
                   "backbone.width = 768\nbackbone.heads = 12\ndecoder.heads = 12\n"
                   "decoder.num_blocks = 4\ndecoder.feature_layers = -4,-3,-2,-1\n"
                   "decoder.max_frames = 32\ndecoder.num_classes = 400\n"
                   "sampling.frames = 8\n")
    assert main(["flops", "--config", str(cfg), "--json", str(tmp_path / "f8.json")]) == 0
    out = capsys.readouterr().out
    assert "exact 0.1605" in out and "decoder.block.3" in out
    assert main(["flops", "--config", str(cfg), "--frames", "16", "--json", str(tmp_path / "f16.json")]) == 0
    import json
    f8 = json.loads((tmp_path / "f8.json").read_text())
    f16 = json.loads((tmp_path / "f16.json").read_text())
    assert abs(f16["total"] / f8["total"] - 2.0) <= 0.01
    capsys.readouterr()
    assert main(["flops", "--config", str(cfg), "--blocks", "0"]) == 0
    assert "decoder.block" not in capsys.readouterr().out
    assert main(["flops", "--config", str(cfg), "--full"]) == 0
    assert "decoder.block.11" in capsys.readouterr().out


def test_threads_env(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("EVL_THREADS", "0")
    assert main(["synth", "--size", "2", "--out", str(tmp_path / "t")]) == 2
    monkeypatch.setenv("EVL_THREADS", "2")
    assert main(["synth", "--seed", "1", "--size", "12", "--frames", "4", "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "clip_00007.evlt").read_bytes() == (workspace / "data" / "clip_00007.evlt").read_bytes()
