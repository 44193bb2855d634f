import csv
import io
import json

import numpy as np
import pytest

from conftest import randomize_partition
from fact import checkpoint as ck
from fact import cli, plots, training, vit
from fact import config as cfgfile
from fact import factorization as fz

DATA = "synthetic:seed=1,image_size=8,rotation=90,train=48,val=16,test=16"
FAST = ["--epochs", "2", "--warmup-epochs", "1", "--data", DATA]


@pytest.fixture(scope="module")
def backbone_path(tmp_path_factory):
    cfg = vit.vit_config(L=2, d=16, heads=2, image_size=8, patch_size=4, num_classes=4)
    model = vit.VisionTransformer.random(cfg, seed=0)
    path = tmp_path_factory.mktemp("bb") / "backbone.bin"
    ck.save_backbone(model, path)
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def error_line(err):
    lines = [ln for ln in err.splitlines() if ln.startswith("fact: error[")]
    assert len(lines) == 1
    return lines[0]


# ------------------------------------------------------------ count-params


@pytest.mark.parametrize("fmt, rank, strategy, expected, shown", [
    ("tt", 4, "all", 8448, "0.008"),
    ("tk", 8, "all", 13952, "0.014"),
    ("mb", 8, "qv", 294912, "0.295"),
])
def test_count_params_reproduces_table_values(capsys, fmt, rank, strategy, expected, shown):
    code, out, _ = run(capsys, "count-params", "--format", fmt, "--rank", rank, "-L", 12, "-d", 768,
                       "--strategy", strategy, "--csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 1
    assert int(rows[0]["params"]) == expected and rows[0]["params_M"] == shown


def test_count_params_table_lists_every_format_and_rank(capsys):
    code, out, _ = run(capsys, "count-params")
    assert code == 0
    body = out.splitlines()
    assert len(body) == 1 + 3 * 5 + 1
    assert "85798656" in body[-1]


def test_count_params_matches_formula(capsys):
    code, out, _ = run(capsys, "count-params", "--format", "tt,tk,mb", "--rank", "1,3,7", "-L", 3, "-d", 40,
                       "--strategy", "ffn", "--csv")
    assert code == 0
    for row in csv.DictReader(io.StringIO(out)):
        assert int(row["params"]) == fz.param_count(row["format"], 24, 40, int(row["rank"]))


def test_count_params_bad_rank_is_config_error(capsys):
    code, _, err = run(capsys, "count-params", "--rank", "0", "--csv")
    assert code == 2 and error_line(err).startswith("fact: error[config]:")


# -------------------------------------------------------------- arguments


def test_unknown_flag_rejected(capsys):
    code, _, err = run(capsys, "train", "--colour", "red")
    assert code == 2 and "--colour" in error_line(err)


def test_missing_command(capsys):
    code, _, err = run(capsys)
    assert code == 2 and error_line(err)


def test_config_file_and_flag_override(capsys, tmp_path, backbone_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("# toy run\nformat = tk\nrank = 2\nepochs = 1\nwarmup-epochs = 0\n"
                    f"data = {DATA}\nbackbone = {backbone_path}\n")
    code, out, err = run(capsys, "train", "--config", conf, "--rank", 3)
    assert code == 0
    echoed = json.loads(err.split("fact: config ", 1)[1].splitlines()[0])
    assert echoed["format"] == "tk" and echoed["rank"] == 3 and echoed["epochs"] == 1
    assert last_json(out)["factor_param_count"] == fz.param_count("tk", 24, 16, 3)


@pytest.mark.parametrize("text", ["colour = red\n", "format = svd\n", "rank = four\n", "rank 4\n"])
def test_bad_config_file_is_config_error(capsys, tmp_path, backbone_path, text):
    conf = tmp_path / "bad.cfg"
    conf.write_text(text)
    code, _, err = run(capsys, "train", "--config", conf, "--backbone", backbone_path)
    assert code == 2 and error_line(err).startswith("fact: error[config]:")


def test_config_parser():
    got = cfgfile.parse_config_text("a = 1\n\n# c\nwarmup-epochs= 3 \n")
    assert got == {"a": "1", "warmup_epochs": "3"}
    assert cfgfile.parse_config_text(cfgfile.format_config(got)) == got
    with pytest.raises(cfgfile.ConfigFileError, match="duplicate"):
        cfgfile.parse_config_text("a=1\na=2")


# ------------------------------------------------------------------ train


def test_missing_backbone_exit_3_with_path(capsys, tmp_path):
    missing = tmp_path / "nowhere" / "bb.bin"
    code, _, err = run(capsys, "train", "--backbone", missing, *FAST)
    assert code == 3
    line = error_line(err)
    assert line.startswith("fact: error[data]:") and str(missing) in line


def test_missing_backbone_flag_is_config_error(capsys):
    code, _, err = run(capsys, "train", *FAST)
    assert code == 2 and "--backbone" in error_line(err)


def test_train_reports_exact_trainable_count(capsys, tmp_path, backbone_path):
    out_path = tmp_path / "f.fact"
    code, out, _ = run(capsys, "train", "--format", "tt", "--rank", 4, "--backbone", backbone_path,
                       "--out", out_path, *FAST)
    assert code == 0
    rep = last_json(out)
    assert rep["trainable_param_count"] == fz.param_count("tt", 24, 16, 4) + 16 * 4 + 4
    assert out_path.stat().st_size == 4 * rep["trainable_param_count"] + ck.fixed_overhead(1)


def test_same_invocation_twice_identical_metrics(capsys, tmp_path, backbone_path):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train", "--backbone", backbone_path, "--metrics", tmp_path / f"{name}.jsonl",
                         "--out", tmp_path / f"{name}.fact", *FAST)
        assert code == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.fact").read_bytes() == (tmp_path / "b.fact").read_bytes()


def test_linear_mode_writes_head_only_checkpoint(capsys, tmp_path, backbone_path):
    code, out, _ = run(capsys, "train", "--mode", "linear", "--backbone", backbone_path,
                       "--out", tmp_path / "h.fact", *FAST)
    assert code == 0 and last_json(out)["trainable_param_count"] == 68
    assert ck.load_checkpoint(tmp_path / "h.fact").partition is None


def test_divergence_exit_4(capsys, tmp_path, backbone_path):
    model = ck.load_backbone(backbone_path)
    model["norm.gamma"].data[...] = np.nan
    bad = tmp_path / "nan.bin"
    ck.save_backbone(model, bad)
    code, _, err = run(capsys, "train", "--backbone", bad, *FAST)
    assert code == 4 and error_line(err).startswith("fact: error[divergence]:")


def test_image_size_mismatch_is_data_error(capsys, backbone_path):
    code, _, err = run(capsys, "train", "--backbone", backbone_path, "--epochs", 1, "--warmup-epochs", 0,
                       "--data", "synthetic:image_size=12,train=8,val=4,test=4")
    assert code == 3 and error_line(err)


def test_corrupt_backbone_is_data_error(capsys, tmp_path, backbone_path):
    blob = bytearray(backbone_path.read_bytes())
    blob[-10] ^= 0xFF
    bad = tmp_path / "corrupt.bin"
    bad.write_bytes(bytes(blob))
    code, _, err = run(capsys, "eval", "--backbone", bad, "--data", DATA)
    assert code == 3 and "CRC" in error_line(err)


def test_pretrain_writes_loadable_backbone(capsys, tmp_path):
    out = tmp_path / "pre.bin"
    code, _, _ = run(capsys, "pretrain", "-L", 1, "-d", 8, "--heads", 2, "--image-size", 8, "--patch-size", 4,
                     "--out", out, *FAST)
    assert code == 0
    model = ck.load_backbone(out)
    assert model.config.stages[0].dim == 8 and model.config.num_classes == 4


def test_pretrain_rejects_bad_heads(capsys, tmp_path):
    code, _, _ = run(capsys, "pretrain", "-d", 10, "--heads", 4, "--out", tmp_path / "x.bin")
    assert code == 2


# -------------------------------------------------------------- eval/merge


def _factor_file(tmp_path, backbone_path, fmt="tt", strategy="all", zero=False):
    model = ck.load_backbone(backbone_path)
    part = vit.make_partition(model.config, fmt, 3, 0.5, strategy)
    if not zero:
        randomize_partition(part, seed=4, magnitude=0.2)
    head_w = np.random.default_rng(0).normal(size=(16, 4)).astype(np.float32)
    path = tmp_path / f"{fmt}-{strategy}.fact"
    ck.save_checkpoint(ck.FactorCheckpoint(part, head_w, np.zeros(4, np.float32)), path)
    return path


def test_zero_factor_merge_leaves_backbone_weights(capsys, tmp_path, backbone_path):
    factors = _factor_file(tmp_path, backbone_path, zero=True)
    code, _, _ = run(capsys, "merge", "--backbone", backbone_path, "--factors", factors,
                     "--out", tmp_path / "m.bin")
    assert code == 0
    before = ck.load_backbone(backbone_path).state_dict()
    after = ck.load_backbone(tmp_path / "m.bin").state_dict()
    assert list(before) == list(after)
    for k in before:
        if not k.startswith("head."):
            assert before[k].tobytes() == after[k].tobytes(), k


@pytest.mark.parametrize("fmt", fz.FORMATS)
def test_merged_model_matches_factored_model(capsys, tmp_path, backbone_path, fmt):
    factors = _factor_file(tmp_path, backbone_path, fmt, "mhsa")
    merged = tmp_path / "merged.bin"
    assert run(capsys, "merge", "--backbone", backbone_path, "--factors", factors, "--out", merged)[0] == 0
    code, out, _ = run(capsys, "eval", "--backbone", backbone_path, "--factors", factors, "--data", DATA)
    factored = last_json(out)
    code2, out2, _ = run(capsys, "eval", "--backbone", merged, "--data", DATA)
    assert code == code2 == 0
    assert last_json(out2)["acc"] == factored["acc"]
    assert abs(last_json(out2)["loss"] - factored["loss"]) < 1e-4
    ckpt = ck.load_checkpoint(factors)
    model = cli._attach(ck.load_backbone(backbone_path), ckpt)
    x = np.random.default_rng(0).normal(size=(4, 3, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(training.predict_logits(ck.load_backbone(merged), x),
                               training.predict_logits(model, x, ckpt.partition), atol=1e-4)


def test_merge_incompatible_dim_exit_2(capsys, tmp_path, backbone_path):
    other = vit.VisionTransformer.random(vit.vit_config(L=2, d=8, heads=2, image_size=8, patch_size=4), 0)
    part = vit.make_partition(other.config, "tt", 2)
    factors = tmp_path / "d8.fact"
    ck.save_checkpoint(ck.checkpoint_from_model(other, part), factors)
    code, _, err = run(capsys, "merge", "--backbone", backbone_path, "--factors", factors,
                       "--out", tmp_path / "m.bin")
    assert code == 2 and error_line(err).startswith("fact: error[config]:")
    assert not (tmp_path / "m.bin").exists()


# ------------------------------------------------------------ sweep/plots


def test_sweep_then_export_plots(capsys, tmp_path, backbone_path):
    metrics = tmp_path / "s.jsonl"
    code, out, _ = run(capsys, "sweep", "--backbone", backbone_path, "--ranks", "1,2", "--scales", "1",
                       "--metrics", metrics, "--out", tmp_path / "w.fact", "--epochs", 1, "--warmup-epochs", 0,
                       "--data", DATA)
    assert code == 0
    res = last_json(out)
    assert res["selected"][0] in (1, 2) and len(res["cells"]) == 2
    code, _, _ = run(capsys, "export-plots", "--metrics", metrics, "--out", tmp_path / "plots")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "plots" / "params_vs_rank.csv")))
    assert [(r["format"], int(r["rank"]), int(r["params"])) for r in rows] == [
        ("tt", 1, fz.param_count("tt", 24, 16, 1)), ("tt", 2, fz.param_count("tt", 24, 16, 2))]
    assert (tmp_path / "plots" / "accuracy_vs_rank.svg").read_text().startswith("<svg")


def test_export_plots_empty_metrics_exit_3(capsys, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, _, err = run(capsys, "export-plots", "--metrics", empty, "--out", tmp_path / "p")
    assert code == 3 and error_line(err).startswith("fact: error[data]:")


@pytest.mark.parametrize("text", ["not json\n", '{"record": "cell", "format": "tt"}\n',
                                  '{"record": "epoch", "epoch": 0}\n'])
def test_export_plots_unusable_metrics_exit_3(capsys, tmp_path, text):
    path = tmp_path / "m.jsonl"
    path.write_text(text)
    assert run(capsys, "export-plots", "--metrics", path, "--out", tmp_path / "p")[0] == 3


def test_params_curves_follow_formula_and_tk_below_tt(tmp_path):
    L, d = 12, 768
    records = [{"record": "cell", "format": row["format"], "rank": row["rank"], "params": row["params"],
                "val_acc": None}
               for row in cli.count_rows(["tt", "tk"], [1, 2, 4, 8, 16], L, d, "all")]
    plots.export_plots(records, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "params_vs_rank.csv")))
    curve = {(r["format"], int(r["rank"])): int(r["params"]) for r in rows}
    for (fmt, r), count in curve.items():
        assert count == fz.param_count(fmt, 12 * L, d, r)
    M = 12 * L
    for r in (1, 2, 4, 8, 16):
        # tk replaces the M r^2 cores by M r + r^3
        assert (curve[("tk", r)] < curve[("tt", r)]) == (M * r + r**3 < M * r * r)
