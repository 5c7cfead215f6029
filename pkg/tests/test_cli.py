import csv
import json

import pytest

from ampattn import cli
from ampattn.training import ABLATION_COLUMNS, report_from_predictions

TINY = {"model": {"conv_channels": 2, "lstm_hidden": 4, "heads": 2, "fc_hidden": 6},
        "train": {"epochs": 2, "lr": 0.003, "batch_size": 16}, "folds": 3}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "syn"), "--classes", "3", "--per-class", "4",
                     "--seed", "7"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "run"
    code = cli.main(["train", "--manifest", str(corpus / "syn" / "manifest.csv"), "--config",
                     str(corpus / "tiny.json"), "--out", str(out)])
    assert code == 0
    return out


def test_synth_counts(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "s", "--classes", 4, "--per-class", 25,
                       "--seed", 7)
    assert code == 0
    assert len(list((tmp_path / "s" / "wav").glob("*.wav"))) == 100
    assert sum(1 for _ in open(tmp_path / "s" / "manifest.csv")) == 101
    assert json.loads(out)["utterances"] == 100


def test_usage_and_config_errors(tmp_path, capsys, corpus):
    assert run(capsys, "synth")[0] == 2
    assert run(capsys, "train", "--manifest", corpus / "syn" / "manifest.csv", "--variant", "nope",
               "--out", tmp_path)[0] == 2
    assert run(capsys, "train", "--out", tmp_path)[0] == 2
    (tmp_path / "bad.json").write_text('{"epochz": 3}')
    code, _, err = run(capsys, "train", "--manifest", corpus / "syn" / "manifest.csv", "--config",
                       tmp_path / "bad.json", "--out", tmp_path / "o")
    assert code == 2 and "epochz" in err
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none", "--manifest",
               corpus / "syn" / "manifest.csv")[0] == 2


def test_train_outputs(trained):
    rc = json.loads((trained / "run_config.json").read_text())
    assert rc["model"]["conv_channels"] == 2 and rc["mfcc"]["fft_size"] == 512
    report = json.loads((trained / "report.json").read_text())
    assert {"WA", "UA", "confusion", "alignment"} <= set(report)
    for r in range(3):
        meta = json.loads((trained / f"fold{r}" / "checkpoint" / "manifest.json").read_text())
        assert meta["vocabulary"] == ["class0", "class1", "class2"] and "run" in meta
        assert (trained / f"fold{r}" / "history.csv").is_file()


def test_train_replay_is_bit_identical(trained, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", trained / "run_config.json", "--out", tmp_path / "re")
    assert code == 0
    assert (tmp_path / "re" / "report.json").read_bytes() == (trained / "report.json").read_bytes()


def test_eval_schema_and_recount(trained, corpus, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "fold0" / "checkpoint", "--manifest",
                       corpus / "syn" / "manifest.csv", "--fold", 0)
    assert code == 0
    rep = json.loads(out)
    assert {"WA", "UA", "confusion", "truth", "pred"} <= set(rep)
    again = report_from_predictions(rep["truth"], rep["pred"], 3)
    assert (again.WA, again.UA) == (rep["WA"], rep["UA"])
    fold0 = json.loads((trained / "fold0" / "checkpoint" / "manifest.json").read_text())["metrics"]
    assert (rep["WA"], rep["UA"]) == (fold0["WA"], fold0["UA"])
    assert run(capsys, "eval", "--checkpoint", trained / "fold0" / "checkpoint", "--manifest",
               corpus / "syn" / "manifest.csv", "--fold", 9)[0] == 1


def test_eval_vocabulary_mismatch(trained, tmp_path, capsys):
    cli.main(["synth", "--out", str(tmp_path / "four"), "--classes", "4", "--per-class", "2"])
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "fold0" / "checkpoint", "--manifest",
                       tmp_path / "four" / "manifest.csv")
    assert code == 1 and "class3" in err


@pytest.mark.parametrize("variant,kinds", [("faca", {"H_o", "f", "H_s"}), ("bmhsa", {"H_o"})])
def test_attn_map_files(corpus, tmp_path, capsys, variant, kinds):
    out = tmp_path / variant
    assert cli.main(["train", "--manifest", str(corpus / "syn" / "manifest.csv"), "--config",
                     str(corpus / "tiny.json"), "--variant", variant, "--out", str(out)]) == 0
    wav = corpus / "syn" / "wav" / "u00000.wav"
    code, _, _ = run(capsys, "attn-map", "--checkpoint", out / "fold0" / "checkpoint", "--wav", wav,
                     "--out", tmp_path / "maps")
    assert code == 0
    names = {p.name for p in (tmp_path / "maps").iterdir()}
    want = {f"u00000_0_head{h}_{k}.csv" for h in range(2) for k in kinds} | {"u00000_0_trace.json"}
    assert names == want
    rows = list(csv.reader(open(tmp_path / "maps" / "u00000_0_head0_H_o.csv")))
    assert len(rows) == 50 and abs(sum(map(float, rows[3])) - 1) < 1e-9
    trace = json.loads((tmp_path / "maps" / "u00000_0_trace.json").read_text())
    assert trace["variant"] == variant and 0 <= trace["amplitude_peak_frame"] < 50
    assert run(capsys, "attn-map", "--checkpoint", out / "fold0" / "checkpoint", "--wav", wav,
               "--segment-offset", 3, "--out", tmp_path / "m2")[0] == 2


def test_gradcheck_report(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 1)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "item,max_rel_error,status"
    rows = {r[0]: r for r in csv.reader(lines[1:])}
    for item in ("focal_bias", "calibrate_heads", "lstm", "model_faca_tiny"):
        assert rows[item][2] == "pass" and float(rows[item][1]) <= 1e-4
    assert run(capsys, "gradcheck", "--seed", 1)[1] == out


def test_ablation_schema(corpus, tmp_path, capsys):
    (tmp_path / "one.json").write_text(json.dumps({**TINY, "train": {**TINY["train"], "epochs": 1}}))
    code, out, _ = run(capsys, "ablation", "--manifest", corpus / "syn" / "manifest.csv", "--config",
                       tmp_path / "one.json", "--seeds", "0", "--out", tmp_path / "abl")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    assert list(rows[0]) == ABLATION_COLUMNS
    assert [r["variant"] for r in rows] == ["bmhsa", "fa", "faca"]
    assert (tmp_path / "abl" / "run_config.json").is_file()
