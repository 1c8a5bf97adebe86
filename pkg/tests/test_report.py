import json
import statistics

import pytest

from anylink.evaluation import ExperimentResult
from anylink.report import plot_training_curves, read_tsv, report_results


def result(label, acc, finetune=None):
    r = ExperimentResult("d" * 64, list(range(len(acc))), acc, [0.9] * len(acc), k=8, label=label)
    if finetune:
        r.extra["finetune"] = {"fractions": finetune}
    return r


def test_summary_table_matches_statistics(tmp_path):
    rs = [result("a", [0.5, 0.6, 0.7]), result("b", [0.25, 0.75])]
    files = report_results(rs, tmp_path, "s", "t")
    rows = read_tsv(files["table"])
    assert [r["label"] for r in rows] == ["a", "b"]
    for row, r in zip(rows, rs):
        assert float(row["accuracy_mean"]) == pytest.approx(statistics.mean(r.accuracy), abs=5e-5)
        assert float(row["accuracy_std"]) == pytest.approx(statistics.stdev(r.accuracy), abs=5e-5)
    per_seed = read_tsv(files["seeds"])
    assert len(per_seed) == 5
    assert files["figure"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_finetune_outputs(tmp_path):
    ft = {"1.0": {"documents": 20, "mean": 0.8, "std": 0.01, "accuracy": [0.8]},
          "0.0": {"documents": 0, "mean": 0.5, "std": 0.02, "accuracy": [0.5]}}
    files = report_results([result("full", [0.5], ft)], tmp_path)
    rows = read_tsv(files["finetune_table:full"])
    assert [float(r["fraction"]) for r in rows] == [0.0, 1.0]
    assert files["finetune_figure:full"].stat().st_size > 0


def test_training_curves(tmp_path):
    log = tmp_path / "rerank.jsonl"
    log.write_text("\n".join(json.dumps({"epoch": e, "loss": 1.0 / (e + 1), "val_metric": None if e % 2 else 0.5})
                             for e in range(4)))
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    out = plot_training_curves([log, empty], tmp_path / "c.png")
    assert out.read_bytes()[:4] == b"\x89PNG"
