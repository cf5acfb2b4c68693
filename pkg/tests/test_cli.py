import json

import pytest
from _toys import tiny_run_config

from queryrec.checkpoint import load_checkpoint
from queryrec.cli import main
from queryrec.diffusion import read_enhanced_tsv


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text("# tiny end-to-end run\n" + tiny_run_config().dumps(), encoding="utf-8")
    return path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_synth_gen_then_analyze(tmp_path, config_file, capsys):
    data = tmp_path / "data"
    assert main(["synth-gen", "--config", str(config_file), "--out", str(data)]) == 0
    assert {p.name for p in data.iterdir()} >= {"rec_log.tsv", "search_log.tsv", "user_features.tsv", "item_features.tsv"}
    capsys.readouterr()
    (tmp_path / "a.txt").write_text("0.60\n0.61\n0.62\n")
    (tmp_path / "b.txt").write_text("0.70\n0.71\n0.69\n")
    argv = [
        "analyze", "--rec", str(data / "rec_log.tsv"), "--search", str(data / "search_log.tsv"),
        "--out", str(tmp_path / "report"), "--resamples", "200",
        "--auc-a", str(tmp_path / "a.txt"), "--auc-b", str(tmp_path / "b.txt"),
    ]
    assert main(argv) == 0
    summary = last_json(capsys)
    assert summary["users"] > 0 and 0 <= summary["shifted_fraction"] <= 1
    assert summary["correlation"]["R1_corr"] > 0 and summary["correlation"]["R1_se"] > 0
    assert summary["bootstrap"]["mean_diff"] == pytest.approx(0.09)
    csv = (tmp_path / "report" / "js_histogram.csv").read_text().splitlines()
    assert csv[0] == "bin_low,bin_high,count" and len(csv) == 21
    assert json.loads((tmp_path / "report" / "analysis.json").read_text()) == summary


def test_train_then_evaluate(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(out), "--set", "epochs=1"]) == 0
    result = last_json(capsys)
    assert (out / "model.qrec").exists() and (out / "metrics.jsonl").exists()
    assert main(["evaluate", "--ckpt", str(out / "model.qrec"), "--split", "test"]) == 0
    report = last_json(capsys)
    assert report["split"] == "test" and report["auc"] == result["test_auc"]


def test_ablation_flags_reach_the_saved_config(tmp_path, config_file, capsys):
    out = tmp_path / "din"
    argv = ["train", "--config", str(config_file), "--out", str(out), "--no-nip", "--no-contrastive", "--no-diffusion"]
    assert main(argv + ["--set", "epochs=1", "--seed", "3"]) == 0
    ckpt = load_checkpoint(out / "model.qrec")
    text = ckpt.config_text
    assert "lambda2 = 0.0" in text and "lambda3 = 0.0" in text and "use_diffusion = false" in text and "seed = 3" in text
    assert not ckpt.subset("denoiser.")


def test_train_diffusion_then_augment(tmp_path, config_file, capsys):
    ckpt = tmp_path / "denoiser.qrec"
    argv = ["train-diffusion", "--config", str(config_file), "--out", str(ckpt), "--set", "diffusion_sparse_max=1000"]
    assert main(argv) == 0
    capsys.readouterr()
    tsv = tmp_path / "enhanced.tsv"
    assert main(["augment", "--ckpt", str(ckpt), "--out", str(tsv)]) == 0
    summary = last_json(capsys)
    sets = read_enhanced_tsv(tsv)
    assert summary["queries_augmented"] > 0 and sets
    lines = tsv.read_text().splitlines()
    assert lines[0] == "query_id\titem_id\tsource"
    assert {line.split("\t")[2] for line in lines[1:]} <= {"observed", "generated"}


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--module", "contrastive"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_errors_exit_with_status_two(tmp_path, config_file, capsys):
    bad = tmp_path / "bad.qrec"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["evaluate", "--ckpt", str(bad)]) == 2
    assert "bad magic" in capsys.readouterr().err
    assert main(["train", "--config", str(config_file), "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["gradcheck", "--module", "nope"])
