from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from sslscan import __version__
from sslscan.cli import (
    EXIT_FORMAT,
    EXIT_OK,
    EXIT_PRECONDITION,
    EXIT_TROJANED,
    EXIT_USAGE,
    main,
    parse_k_list,
    read_report,
    report_digest,
    verdict_from_report,
)
from sslscan.harness.data import load_dataset
from sslscan.harness.triggers import load_trigger
from sslscan.numkit import FormatError, load_encoder


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Shared artifacts: a dataset, a clean and a patch-planted encoder, and a trojaned scan."""
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--classes", 8, "--per-class", 40, "--seed", 1, "--out", d / "d.dset") == EXIT_OK
    assert run("train", "--data", d / "d.dset", "--epochs", 5, "--seed", 1, "--out", d / "clean.encw") == EXIT_OK
    assert run(
        "train", "--data", d / "d.dset", "--epochs", 5, "--seed", 1, "--out", d / "troj.encw",
        "--poison", "patch", "--target-class", 0, "--poison-rate", 0.1,
    ) == EXIT_OK
    code = run("scan", "--encoder", d / "troj.encw", "--data", d / "d.dset", "--steps", 300, "--seed", 1, "--out", d / "r.json")
    assert code == EXIT_TROJANED
    return d


class TestGenData:
    def test_accounting_and_determinism(self, tmp_path):
        a, b = tmp_path / "a.dset", tmp_path / "b.dset"
        assert run("gen-data", "--classes", 8, "--per-class", 200, "--seed", 7, "--out", a) == EXIT_OK
        assert run("gen-data", "--classes", 8, "--per-class", 200, "--seed", 7, "--out", b) == EXIT_OK
        assert load_dataset(a).n == 1600
        assert a.read_bytes() == b.read_bytes()

    @pytest.mark.parametrize("argv", [["--classes", 1, "--per-class", 5], ["--classes", 3, "--per-class", 0],
                                      ["--classes", 3, "--per-class", 5, "--noise", -1]])
    def test_invalid(self, tmp_path, argv):
        assert run("gen-data", *argv, "--out", tmp_path / "x.dset") == EXIT_USAGE

    def test_noise_flag(self, tmp_path):
        p = tmp_path / "q.dset"
        assert run("gen-data", "--classes", 2, "--per-class", 3, "--noise", 0, "--out", p) == EXIT_OK
        x = load_dataset(p).x
        assert np.array_equal(x[0], x[1])


class TestTrain:
    def test_trigger_file_reloads(self, work):
        spec = load_trigger(str(work / "troj.encw") + ".trigger.json")
        assert spec.kind == "patch"

    def test_deterministic(self, work, tmp_path):
        out = tmp_path / "again.encw"
        assert run("train", "--data", work / "d.dset", "--epochs", 5, "--seed", 1, "--out", out) == EXIT_OK
        assert out.read_bytes() == (work / "clean.encw").read_bytes()

    @pytest.mark.parametrize(
        "extra",
        [
            ["--poison", "patch", "--target-class", 0, "--poison-rate", 0],
            ["--target-class", 0],
            ["--poison", "patch", "--target-class", 99],
        ],
    )
    def test_invalid(self, work, tmp_path, extra):
        assert run("train", "--data", work / "d.dset", "--epochs", 1, "--out", tmp_path / "e.encw", *extra) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.dset", "--out", tmp_path / "e.encw") == EXIT_USAGE

    def test_corrupt_data(self, tmp_path):
        bad = tmp_path / "bad.dset"
        bad.write_bytes(b"garbage")
        assert run("train", "--data", bad, "--out", tmp_path / "e.encw") == EXIT_FORMAT


class TestScan:
    def test_report_contents(self, work):
        rep = read_report(work / "r.json", "scan_report")
        assert rep["version"] == __version__ and rep["verdict"] == "trojaned"
        k = rep["swk"]["k_chosen"]
        assert len(rep["clusters"]) == k == len(rep["sizes"]) == len(rep["norms"])
        assert set(rep["volatile"]) == {"timestamp", "timings"}
        # the stored triggers reproduce the verdict without any compute on the encoder
        v = verdict_from_report(rep)
        assert v.verdict == rep["verdict"]
        assert sorted(int(c) for c in rep["table"]) == v.flagged_clusters

    def test_digest_ignores_volatile(self, work, tmp_path):
        out = tmp_path / "r2.json"
        run("scan", "--encoder", work / "troj.encw", "--data", work / "d.dset", "--steps", 300, "--seed", 1, "--out", out)
        a = json.loads((work / "r.json").read_text())
        b = json.loads(out.read_text())
        assert a["digest"] == b["digest"]
        a.pop("volatile"), b.pop("volatile")
        assert a == b

    def test_benign_exit_zero(self, work, tmp_path):
        # short inversion on a tiny clean encoder can go either way; check the exit-code contract only
        code = run("scan", "--encoder", work / "clean.encw", "--data", work / "d.dset", "--steps", 50, "--out", tmp_path / "c.json")
        rep = read_report(tmp_path / "c.json", "scan_report")
        assert code == (EXIT_TROJANED if rep["verdict"] == "trojaned" else EXIT_OK)
        assert (rep["verdict"] == "benign") == (rep["table"] == {})

    @pytest.mark.parametrize(
        "extra", [["--window", 2], ["--k-list", "2..x"], ["--data-ratio", 0], ["--k-list", "2,3"], ["--steps", 0]]
    )
    def test_usage_errors(self, work, tmp_path, extra):
        assert run("scan", "--encoder", work / "troj.encw", "--data", work / "d.dset", "--out", tmp_path / "z.json", *extra) == EXIT_USAGE

    def test_window_message_mentions_odd(self, work, tmp_path, capsys):
        run("scan", "--encoder", work / "troj.encw", "--data", work / "d.dset", "--out", tmp_path / "z.json", "--window", 2)
        assert "odd" in capsys.readouterr().err

    def test_corrupt_encoder(self, work, tmp_path):
        bad = tmp_path / "bad.encw"
        bad.write_bytes((work / "troj.encw").read_bytes()[:-7])
        assert run("scan", "--encoder", bad, "--data", work / "d.dset", "--out", tmp_path / "z.json") == EXIT_FORMAT

    def test_too_few_samples(self, work, tmp_path):
        code = run("scan", "--encoder", work / "troj.encw", "--data", work / "d.dset", "--data-ratio", 0.05, "--out", tmp_path / "z.json")
        assert code == EXIT_PRECONDITION


class TestMitigate:
    def test_writes_encoder_and_report(self, work, tmp_path):
        out = tmp_path / "clean.encw"
        code = run("mitigate", "--encoder", work / "troj.encw", "--report", work / "r.json", "--data", work / "d.dset", "--out", out)
        assert code == EXIT_OK
        load_encoder(out)
        rep = read_report(str(out) + ".report.json", "mitigation_report")
        assert rep["steps"] == len(rep["losses"]) > 0

    def test_benign_report(self, work, tmp_path):
        rep = json.loads((work / "r.json").read_text())
        rep["verdict"], rep["table"] = "benign", {}
        rep["digest"] = report_digest(rep)
        p = tmp_path / "benign.json"
        p.write_text(json.dumps(rep))
        code = run("mitigate", "--encoder", work / "troj.encw", "--report", p, "--data", work / "d.dset", "--out", tmp_path / "o.encw")
        assert code == EXIT_PRECONDITION

    def test_wrong_encoder(self, work, tmp_path):
        code = run("mitigate", "--encoder", work / "clean.encw", "--report", work / "r.json", "--data", work / "d.dset", "--out", tmp_path / "o.encw")
        assert code == EXIT_PRECONDITION

    def test_missing_report(self, work, tmp_path):
        code = run("mitigate", "--encoder", work / "troj.encw", "--report", tmp_path / "none.json", "--data", work / "d.dset", "--out", tmp_path / "o.encw")
        assert code == EXIT_USAGE

    def test_tampered_report(self, work, tmp_path):
        rep = json.loads((work / "r.json").read_text())
        rep["sizes"][0] += 1
        p = tmp_path / "t.json"
        p.write_text(json.dumps(rep))
        with pytest.raises(FormatError):
            read_report(p, "scan_report")
        code = run("mitigate", "--encoder", work / "troj.encw", "--report", p, "--data", work / "d.dset", "--out", tmp_path / "o.encw")
        assert code == EXIT_FORMAT


class TestEval:
    def test_acc_and_asr(self, work, tmp_path, capsys):
        out = tmp_path / "m.json"
        code = run("eval", "--encoder", work / "troj.encw", "--data", work / "d.dset",
                   "--trigger", str(work / "troj.encw") + ".trigger.json", "--target-class", 0, "--out", out)
        assert code == EXIT_OK
        m = json.loads(out.read_text())
        assert json.loads(capsys.readouterr().out) == m
        assert 0 <= m["ACC"] <= 1 and 0 <= m["ASR"] <= 1

    def test_asr_flags_need_each_other(self, work):
        assert run("eval", "--encoder", work / "clean.encw", "--data", work / "d.dset", "--target-class", 0) == EXIT_USAGE

    def test_unlabeled_data(self, work, tmp_path):
        from sslscan.harness.data import SampleSet, save_dataset

        ds = load_dataset(work / "d.dset")
        p = tmp_path / "u.dset"
        save_dataset(SampleSet(ds.x, ds.geometry, None), p)
        assert run("eval", "--encoder", work / "clean.encw", "--data", p) == EXIT_PRECONDITION


class TestExportPlot:
    def test_round_trip(self, work, tmp_path):
        assert run("export-plot", "--report", work / "r.json", "--out", tmp_path) == EXIT_OK
        rep = read_report(work / "r.json", "scan_report")
        with open(tmp_path / "swk_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(rep["swk"]["k_list"])
        assert [float(r["s"]) for r in rows] == rep["swk"]["s_list"]
        with open(tmp_path / "trigger_stats.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(rep["clusters"])
        assert [float(r["size"]) for r in rows] == rep["sizes"]
        assert [float(r["norm"]) for r in rows] == rep["norms"]

    def test_malformed(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{")
        assert run("export-plot", "--report", p, "--out", tmp_path / "o") == EXIT_FORMAT
        p.write_text(json.dumps({"kind": "metrics_report"}))
        assert run("export-plot", "--report", p, "--out", tmp_path / "o") == EXIT_FORMAT


class TestMisc:
    def test_k_list_parsing(self):
        assert parse_k_list("2..5") == [2, 3, 4, 5]
        assert parse_k_list("2,4,8") == [2, 4, 8]

    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0 and __version__ in capsys.readouterr().out

    def test_bench_structure(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"fixture": {"classes": 8, "per_class": 20, "train": {"epochs": 1}}}))
        out = tmp_path / "b.json"
        code = run("bench", "--n-clean", 1, "--n-trojan", 1, "--data-ratio", 0.5, "--data-ratio", 1.0,
                   "--k-list", "2..6", "--steps", 10, "--config", cfg, "--out", out)
        assert code == EXIT_OK
        rep = read_report(out, "metrics_report")
        assert [r["data_ratio"] for r in rep["rows"]] == [0.5, 1.0]
        for r in rep["rows"]:
            assert r["TP"] <= 1 and r["FP"] <= 1
