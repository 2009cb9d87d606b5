import csv
import json

import numpy as np
import pytest

from dkspace import io
from dkspace.cli import main
from dkspace.codebook import SCALES, load_shipped
from dkspace.embednet import predict_bag_probs
from dkspace.ensemble import BagPrediction, vote_slide
from dkspace.knowspace import classify, project_slide
from dkspace.ensemble import SlideCode
from dkspace.pipeline import load_models


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    assert run("synth", "--codebook", "rcc", "--out", d / "ds", "--slides-per-subtype", 10) == 0
    assert run("train", "--codebook", "rcc", "--dataset", d / "ds", "--checkpoint-dir", d / "ck") == 0
    return d


@pytest.fixture(scope="module")
def noisy(tmp_path_factory):
    d = tmp_path_factory.mktemp("noisy")
    assert run("synth", "--codebook", "sc", "--out", d / "ds", "--count", "BCC=20", "--count", "SCC=20",
               "--count", "BD=10", "--noise", 0.15, "--jitter", 0.45, "--seed", 4) == 0
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSynth:
    def test_rcc_150(self, tmp_path):
        assert run("synth", "--codebook", "rcc", "--out", tmp_path, "--slides-per-subtype", 50) == 0
        assert len(read_csv(tmp_path / "manifest.csv")) == 150

    def test_minimal(self, tmp_path, capsys):
        assert run("synth", "--codebook", "rcc", "--out", tmp_path, "--slides-per-subtype", 1) == 0
        assert len(read_csv(tmp_path / "manifest.csv")) == 3
        assert "2 train, 1 test" in capsys.readouterr().out

    def test_missing_codebook(self, tmp_path, capsys):
        assert run("synth", "--codebook", tmp_path / "nope.codebook", "--out", tmp_path / "x") == 1
        err = capsys.readouterr().err
        assert err.startswith("error: synth:") and "nope.codebook" in err and err.count("\n") == 1

    def test_bad_config(self, tmp_path, capsys):
        assert run("synth", "--codebook", "rcc", "--out", tmp_path, "--noise", 0.7) == 1
        assert "flip_noise" in capsys.readouterr().err


class TestTrain:
    def test_checkpoints_and_losses(self, trained):
        for s in SCALES:
            assert (trained / "ck" / f"scale{s}.npz").exists()
        assert (trained / "ck" / "losses.png").stat().st_size > 0
        for s in SCALES:
            meta = json.loads(str(np.load(trained / "ck" / f"scale{s}.npz")["meta"]))
            assert meta["losses"][-1] < 0.05

    def test_rerun_identical(self, trained, tmp_path):
        assert run("train", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", tmp_path) == 0
        for s in SCALES:
            name = f"scale{s}.npz"
            assert (tmp_path / name).read_bytes() == (trained / "ck" / name).read_bytes()

    def test_zero_lr_constant_loss(self, trained, tmp_path, capsys):
        assert run("train", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", tmp_path,
                   "--lr", 0, "--epochs", 3) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("scale 1 epoch")]
        losses = [float(l.split()[-1]) for l in lines]
        assert len(losses) == 3 and max(losses) - min(losses) < 1e-9

    def test_missing_dataset(self, tmp_path):
        assert run("train", "--codebook", "rcc", "--dataset", tmp_path / "none", "--checkpoint-dir", tmp_path) == 1


class TestPredict:
    def test_noiseless_checkpoints(self, trained):
        out = trained / "d.jsonl"
        assert run("predict", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", trained / "ck",
                   "--out", out) == 0
        truth = {e.slide_id: e.subtype for e in io.read_manifest(trained / "ds" / "manifest.csv")}
        diags = io.read_diagnoses(out)
        assert len(diags) == 6
        assert all(d.predicted == truth[d.slide_id] for d in diags)

    def test_composition(self, trained, tmp_path):
        out = tmp_path / "d.jsonl"
        assert run("predict", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", trained / "ck",
                   "--split", "all", "--out", out) == 0
        cb = load_shipped("rcc")
        manifest = io.read_manifest(trained / "ds" / "manifest.csv")
        models = load_models(trained / "ck")
        bags = io.read_instance_bags(trained / "ds", manifest)
        manual = []
        for e in sorted(manifest, key=lambda e: e.slide_id):
            codes = []
            for s in SCALES:
                preds = [predict_bag_probs(models[s], b) for b in bags if b.slide_id == e.slide_id and b.scale_index == s]
                codes.append(vote_slide(preds, 0.5))
            manual.append(classify(SlideCode(e.slide_id, tuple(codes)), cb))
        assert io.read_diagnoses(out) == manual

    @pytest.mark.parametrize("suffix", [".csv", ".jsonl"])
    def test_external_bag_file(self, noisy, tmp_path, suffix):
        ext = tmp_path / f"ext{suffix}"
        io.write_bag_probs(ext, io.read_bag_probs(noisy / "ds" / "bags.csv"))
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run("predict", "--codebook", "sc", "--dataset", noisy / "ds", "--split", "all", "--out", a) == 0
        assert run("predict", "--codebook", "sc", "--bags", ext, "--out", b) == 0
        assert a.read_text() == b.read_text()

    def test_schema_mismatch(self, noisy, tmp_path, capsys):
        assert run("predict", "--codebook", "rcc", "--bags", noisy / "ds" / "bags.csv", "--out", tmp_path / "x") == 1
        assert "features at that scale" in capsys.readouterr().err

    def test_threshold_flag(self, noisy, tmp_path):
        assert run("predict", "--codebook", "sc", "--dataset", noisy / "ds", "--threshold", "1=0.3",
                   "--threshold", "s2=0.6", "--out", tmp_path / "d.jsonl") == 0

    def test_bad_threshold_flag(self, noisy, tmp_path):
        with pytest.raises(SystemExit):
            run("predict", "--codebook", "sc", "--dataset", noisy / "ds", "--threshold", "4=0.3", "--out", tmp_path / "x")

    def test_shortcut_slide(self, tmp_path, capsys):
        bags = tmp_path / "b.jsonl"
        bits = {1: "000001001", 2: "0000", 3: "11000"}
        io.write_bag_probs(bags, [BagPrediction("ep", s, k, tuple(float(c) for c in bits[s]))
                                  for s in SCALES for k in range(3)])
        out = tmp_path / "d.jsonl"
        assert run("predict", "--codebook", "sc", "--bags", bags, "--out", out) == 0
        (d,) = io.read_diagnoses(out)
        assert d.via_shortcut and d.predicted == "BD"
        assert run("report", "--diagnoses", out, "--slide", "ep") == 0
        assert "shortcut rule Ep@s=1 -> BD" in capsys.readouterr().out


def _write_diags(path, pairs):
    """Diagnosis file whose predictions are given directly."""
    cb = load_shipped("rcc")
    rows = {"KIRC": "110000", "KIRP": "001000", "KICH": "000010"}
    diags = [classify(SlideCode.from_bits(sid, rows[p], rows[p], "100000" if p == "KIRC" else "010000"
                                          if p == "KIRP" else "000001"), cb) for sid, p in pairs]
    io.write_diagnoses(path, diags)


def _write_manifest(path, pairs):
    code = SlideCode.from_bits("x", "0" * 6, "0" * 6, "0" * 6)
    io.write_manifest(path, [io.ManifestEntry(sid, t, "test", SlideCode(sid, code.codes)) for sid, t in pairs])


class TestEvaluate:
    def test_perfect(self, trained, tmp_path):
        assert run("predict", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", trained / "ck",
                   "--out", tmp_path / "d.jsonl") == 0
        assert run("evaluate", "--codebook", "rcc", "--dataset", trained / "ds", "--diagnoses", tmp_path / "d.jsonl",
                   "--out", tmp_path / "ev") == 0
        data = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert [data[k] for k in ("accuracy", "macro_precision", "macro_recall", "macro_specificity", "macro_f1")] == [1.0] * 5
        assert (tmp_path / "ev" / "confusion.png").stat().st_size > 0
        assert (tmp_path / "ev" / "metrics.txt").read_text().splitlines()[0].split()[1:] == ["ACC", "P", "R", "S", "F1"]

    def test_fixed_matrix_end_to_end(self, tmp_path):
        labels = ("KIRC", "KIRP", "KICH")
        cm = [[8, 2, 0], [1, 9, 0], [0, 0, 10]]
        truth, pred = [], []
        n = 0
        for i, row in enumerate(cm):
            for j, count in enumerate(row):
                for _ in range(count):
                    truth.append((f"s{n:03d}", labels[i]))
                    pred.append((f"s{n:03d}", labels[j]))
                    n += 1
        ds = tmp_path / "ds"
        ds.mkdir()
        _write_manifest(ds / "manifest.csv", truth)
        _write_diags(tmp_path / "d.jsonl", pred)
        assert run("evaluate", "--codebook", "rcc", "--dataset", ds, "--diagnoses", tmp_path / "d.jsonl",
                   "--out", tmp_path / "ev") == 0
        data = json.loads((tmp_path / "ev" / "metrics.json").read_text())
        assert data["confusion"]["counts"] == cm
        got = [data[k] for k in ("accuracy", "macro_precision", "macro_recall", "macro_specificity", "macro_f1")]
        np.testing.assert_allclose(got, [0.9, 268 / 297, 0.9, 0.95, 359 / 399], atol=1e-12)

    def test_disjoint_ids(self, tmp_path, capsys):
        ds = tmp_path / "ds"
        ds.mkdir()
        _write_manifest(ds / "manifest.csv", [("a", "KIRC")])
        _write_diags(tmp_path / "d.jsonl", [("b", "KIRC")])
        assert run("evaluate", "--codebook", "rcc", "--dataset", ds, "--diagnoses", tmp_path / "d.jsonl",
                   "--out", tmp_path / "ev") == 1
        assert "absent from the manifest" in capsys.readouterr().err


class TestSweep:
    def test_noiseless(self, tmp_path):
        assert run("synth", "--codebook", "rcc", "--out", tmp_path / "ds", "--slides-per-subtype", 5,
                   "--jitter", 0) == 0
        assert run("sweep", "--codebook", "rcc", "--dataset", tmp_path / "ds", "--out", tmp_path / "s.csv") == 0
        rows = read_csv(tmp_path / "s.csv")
        assert len(rows) == 4 * 9
        assert {float(r["accuracy"]) for r in rows} == {1.0}
        assert (tmp_path / "s.png").stat().st_size > 0

    def test_single_value_matches_evaluate(self, noisy, tmp_path):
        ds = noisy / "ds"
        assert run("sweep", "--codebook", "sc", "--dataset", ds, "--grid", "0.5", "--out", tmp_path / "s.csv") == 0
        assert run("predict", "--codebook", "sc", "--dataset", ds, "--out", tmp_path / "d.jsonl") == 0
        assert run("evaluate", "--codebook", "sc", "--dataset", ds, "--diagnoses", tmp_path / "d.jsonl",
                   "--out", tmp_path / "ev") == 0
        acc = json.loads((tmp_path / "ev" / "metrics.json").read_text())["accuracy"]
        rows = read_csv(tmp_path / "s.csv")
        assert len(rows) == 4
        assert all(float(r["accuracy"]) == acc for r in rows)

    def test_matches_independent_recompute(self, noisy, tmp_path):
        ds = noisy / "ds"
        assert run("sweep", "--codebook", "sc", "--dataset", ds, "--split", "all", "--grid", "0.2:0.8:0.2",
                   "--out", tmp_path / "s.csv") == 0
        cb = load_shipped("sc")
        truth = {e.slide_id: e.subtype for e in io.read_manifest(ds / "manifest.csv")}
        preds = io.read_bag_probs(ds / "bags.csv")
        for r in read_csv(tmp_path / "s.csv"):
            v = float(r["v"])
            th = {s: v if r["scale"] in ("all", str(s)) else 0.5 for s in SCALES}
            correct = 0
            for sid in truth:
                codes = []
                for s in SCALES:
                    probs = [p.probs for p in preds if p.slide_id == sid and p.scale_index == s]
                    bits = tuple(int(sum(p[i] > th[s] for p in probs) * 2 > len(probs)) for i in range(len(probs[0])))
                    codes.append(bits)
                correct += classify(SlideCode.from_bits(sid, *codes), cb).predicted == truth[sid]
            assert float(r["accuracy"]) == correct / len(truth)

    def test_empty_grid(self, noisy, tmp_path):
        assert run("sweep", "--codebook", "sc", "--dataset", noisy / "ds", "--grid", "", "--out", tmp_path / "s.csv") == 1


class TestExportSpace:
    def test_rcc_counts(self, trained, tmp_path):
        assert run("predict", "--codebook", "rcc", "--dataset", trained / "ds", "--checkpoint-dir", trained / "ck",
                   "--out", tmp_path / "d.jsonl") == 0
        assert run("export-space", "--codebook", "rcc", "--diagnoses", tmp_path / "d.jsonl", "--dataset",
                   trained / "ds", "--out", tmp_path / "space.csv") == 0
        rows = read_csv(tmp_path / "space.csv")
        know = [r for r in rows if r["kind"] == "knowledge"]
        pred = [r for r in rows if r["kind"] == "prediction"]
        assert len(know) == 9 + 27 + 54
        assert len(pred) == 6
        cb = load_shipped("rcc")
        diags = {d.slide_id: d for d in io.read_diagnoses(tmp_path / "d.jsonl")}
        for r in pred:
            code = io.code_from_strings(r["slide_id"], diags[r["slide_id"]].codes)
            assert (int(r["x"]), int(r["y"]), int(r["z"])) == project_slide(code, cb)
            assert r["true_label"] == r["predicted"]

    def test_knowledge_only(self, tmp_path):
        assert run("export-space", "--codebook", "sc", "--out", tmp_path / "space.csv") == 0
        rows = read_csv(tmp_path / "space.csv")
        assert len(rows) == 93 + 21 + 9 and {r["kind"] for r in rows} == {"knowledge"}


class TestReport:
    def _diag_file(self, tmp_path, bits):
        bags = tmp_path / "b.csv"
        io.write_bag_probs(bags, [BagPrediction("x", s, 0, tuple(float(c) for c in bits[s - 1])) for s in SCALES])
        assert run("predict", "--codebook", "sc", "--bags", bags, "--out", tmp_path / "d.jsonl") == 0
        return tmp_path / "d.jsonl"

    def test_scc_example(self, tmp_path, capsys):
        path = self._diag_file(tmp_path, ("000001100", "0000", "11000"))
        capsys.readouterr()
        assert run("report", "--diagnoses", path, "--slide", "x") == 0
        out = capsys.readouterr().out
        assert "Ke, Pie" in out and "IB, MC" in out and "(12, 0, 24)" in out
        assert "s=2  0000       no features detected" in out
        assert "diagnosis      SCC" in out

    def test_all_zero(self, tmp_path, capsys):
        path = self._diag_file(tmp_path, ("0" * 9, "0" * 4, "0" * 5))
        capsys.readouterr()
        assert run("report", "--diagnoses", path) == 0
        out = capsys.readouterr().out
        assert out.count("no features detected") == 3
        assert "diagnosis" in out

    def test_unknown_slide(self, tmp_path, capsys):
        path = self._diag_file(tmp_path, ("0" * 9, "0" * 4, "0" * 5))
        assert run("report", "--diagnoses", path, "--slide", "nope") == 1
        assert "unknown slide id 'nope'" in capsys.readouterr().err
