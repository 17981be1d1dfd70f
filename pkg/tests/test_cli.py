import csv
import json

import numpy as np
import pytest

from trajdiff.cli import main
from trajdiff.dataset import Dataset, read_tensor
from trajdiff.metrics import AGGREGATE_COLUMNS


def run(*args):
    return main([str(a) for a in args])


def test_gen_data_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--n", 2)
    assert exc.value.code == 2


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train", "--bogus")
    assert exc.value.code == 2


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--n", 4, "--seed", 7, "--grid", 16, "--out", tmp_path / name) == 0
    a, b = Dataset.open(tmp_path / "a"), Dataset.open(tmp_path / "b")
    assert len(a) <= 4 and a.hash == b.hash
    resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    assert resolved["n"] == 4 and resolved["grid"] == 16


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 3, "grid": 8, "seed": 1, "out": str(tmp_path / "d")}))
    assert run("gen-data", "--config", cfg, "--n", 2) == 0
    resolved = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
    assert resolved["n"] == 2 and resolved["grid"] == 8
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--config", bad, "--out", tmp_path / "e")
    assert exc.value.code == 2


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 1
    assert "trajdiff train" in capsys.readouterr().err


def _train(data, out, *extra):
    return run("train", "--data", data.root, "--out", out, "--width", 8, "--batch-size", 4,
               "--checkpoint-every", 2, "--probe-every", 2, "--timesteps", 50, *extra)


def test_train_zero_iters_emits_only_initial_checkpoint(small_dataset, tmp_path):
    assert _train(small_dataset, tmp_path, "--iters", 0) == 0
    assert sorted(p.name for p in tmp_path.glob("*.pt")) == ["ckpt_000000.pt", "last.pt"]
    assert not (tmp_path / "loss.csv").exists()


def _losses(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_none_has_zero_alignment_column(small_dataset, tmp_path):
    assert _train(small_dataset, tmp_path, "--iters", 4, "--ta", "none") == 0
    rows = _losses(tmp_path / "loss.csv")
    assert len(rows) == 4 and all(float(r["ta_loss"]) == 0.0 for r in rows)
    probe = _losses(tmp_path / "probe.csv")
    assert {int(r["iteration"]) for r in probe} == {2, 4}


def test_resume_reproduces_uninterrupted_losses(small_dataset, tmp_path):
    assert _train(small_dataset, tmp_path / "full", "--iters", 6, "--ta", "clean") == 0
    assert _train(small_dataset, tmp_path / "split", "--iters", 4, "--ta", "clean") == 0
    assert _train(small_dataset, tmp_path / "split", "--iters", 6, "--ta", "clean", "--resume") == 0
    assert _losses(tmp_path / "full" / "loss.csv") == _losses(tmp_path / "split" / "loss.csv")


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert _train(small_dataset, out, "--iters", 2, "--ta", "clean") == 0
    return out / "last.pt"


def test_sample_is_deterministic_and_counts_calls(small_dataset, trained, tmp_path):
    for name in ("a", "b"):
        assert run("sample", "--checkpoint", trained, "--data", small_dataset.root, "--steps", 2,
                   "--seed", 3, "--limit", 3, "--out", tmp_path / name) == 0
    for p in (tmp_path / "a").glob("*.pgm"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()
    assert len(list((tmp_path / "a").glob("*.domt"))) == 3
    summary = json.loads((tmp_path / "a" / "timing_summary.json").read_text())
    assert summary["denoiser_calls_per_sample"] == [2]
    header = (tmp_path / "a" / "00000.pgm").read_bytes()[:13]
    assert header == b"P5\n16 16\n255\n"


def test_sample_grid_mismatch(trained, tmp_path):
    assert run("gen-data", "--n", 1, "--grid", 8, "--out", tmp_path / "d8") == 0
    assert run("sample", "--checkpoint", trained, "--data", tmp_path / "d8", "--out", tmp_path / "s") == 1


def test_refine_and_eval(small_dataset, trained, tmp_path):
    samples = tmp_path / "samples"
    assert run("sample", "--checkpoint", trained, "--data", small_dataset.root, "--limit", 4,
               "--out", samples) == 0
    assert run("refine", "--samples", samples, "--data", small_dataset.root, "--opt-steps", 5,
               "--out", tmp_path / "refined") == 0
    deltas = _losses(tmp_path / "refined" / "deltas.csv")
    assert len(deltas) == 4 and "fm_after" in deltas[0]
    assert run("eval", "--samples", tmp_path / "refined", "--data", small_dataset.root,
               "--out", tmp_path / "report", "--images") == 0
    header = (tmp_path / "report" / "report.csv").read_text().splitlines()[0]
    assert header.split(",") == list(AGGREGATE_COLUMNS)
    assert len(list((tmp_path / "report").glob("*_vs_ref.pgm"))) == 4
    # inputs untouched
    for p in samples.glob("*.domt"):
        assert read_tensor(p).shape == (16, 16)


def test_eval_references_against_themselves(small_dataset, tmp_path):
    refs = tmp_path / "refs"
    refs.mkdir()
    for i in range(len(small_dataset)):
        rec = small_dataset.record(i)
        (refs / f"{rec['id']}.domt").write_bytes((small_dataset.root / rec["files"]["topology"]).read_bytes())
    assert run("eval", "--samples", refs, "--data", small_dataset.root, "--out", tmp_path / "r") == 0
    agg = json.loads((tmp_path / "r" / "report.json").read_text())["aggregate"]
    assert abs(agg["AVG_CE"]) < 0.1 and agg["LD"] == 0 and agg["UNS"] == 0
