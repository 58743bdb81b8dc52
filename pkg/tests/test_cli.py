import os

import numpy as np
import pytest
import yaml

from mutualrec.cli import main


def write_config(tmp_path, **overrides):
    cfg = dict(dataset="synthetic", synthetic_examples=240, batch_size=32,
               learning_rate=0.01, epochs=2, patience=2, seeds=[0],
               out_dir=str(tmp_path / "out"))
    cfg.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_train_writes_reports_figures_and_artifacts(tmp_path, capsys):
    code = main(["train", "--config", write_config(tmp_path)])
    assert code == 0
    out_dir = tmp_path / "out"
    for name in ("runs.tsv", "curves.tsv", "table.txt", "artifacts.json",
                 "curves.png", "metrics.png"):
        assert (out_dir / name).exists(), name
    assert (out_dir / "synthetic_shared_bottom_full_seed0.npz").exists()
    printed = capsys.readouterr().out
    assert "seed 0: best epoch" in printed
    assert "auc/positive" in printed


def test_report_subcommand_reemits_byte_identically(tmp_path, capsys):
    assert main(["train", "--config", write_config(tmp_path)]) == 0
    out_dir = tmp_path / "out"
    before = {name: (out_dir / name).read_bytes()
              for name in ("runs.tsv", "curves.tsv", "table.txt")}
    assert main(["report", "--out", str(out_dir)]) == 0
    for name, blob in before.items():
        assert (out_dir / name).read_bytes() == blob


def test_report_subcommand_without_artifacts_fails(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "artifacts.json" in capsys.readouterr().err


def test_prepare_data_writes_cache(tmp_path, capsys):
    cache = tmp_path / "splits" / "syn.npz"
    code = main(["prepare-data", "--dataset", "synthetic",
                 "--out", str(cache)])
    assert code == 0
    assert cache.exists()
    printed = capsys.readouterr().out
    assert "800 train / 100 validation / 100 test" in printed
    assert "positive (classification)" in printed


def test_prepare_data_requires_destination(tmp_path, capsys):
    assert main(["prepare-data", "--dataset", "synthetic"]) == 2
    assert "--out" in capsys.readouterr().err


def test_train_uses_prepared_cache(tmp_path, capsys):
    cache = tmp_path / "syn.npz"
    assert main(["prepare-data", "--dataset", "synthetic", "--out",
                 str(cache)]) == 0
    cfg = write_config(tmp_path, cache=str(cache), synthetic_examples=10000)
    # the cache wins: 1000 cached examples, not a fresh 10000-example corpus
    assert main(["train", "--config", cfg]) == 0
    runs = (tmp_path / "out" / "runs.tsv").read_text().splitlines()
    assert runs[1].split("\t")[4] == "100"  # test-part example_count


def test_seed_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, seeds=[0, 1, 2])
    assert main(["train", "--config", cfg, "--seed", "7"]) == 0
    runs = (tmp_path / "out" / "runs.tsv").read_text().splitlines()
    assert len(runs) == 2 and runs[1].split("\t")[3] == "7"

    assert main(["train", "--config", cfg, "--seeds", "4,5"]) == 0
    runs = (tmp_path / "out" / "runs.tsv").read_text().splitlines()
    assert [r.split("\t")[3] for r in runs[1:]] == ["4", "5"]


def test_compare_subcommand_reports_all_shared_metrics(tmp_path, capsys):
    base_cfg = write_config(tmp_path, variant="none", seeds=[0, 1],
                            out_dir=str(tmp_path / "base"))
    assert main(["train", "--config", base_cfg]) == 0
    treat_cfg = write_config(tmp_path, variant="full", seeds=[0, 1],
                             out_dir=str(tmp_path / "treat"))
    assert main(["train", "--config", treat_cfg]) == 0
    capsys.readouterr()

    assert main(["compare", str(tmp_path / "base"),
                 str(tmp_path / "treat")]) == 0
    printed = capsys.readouterr().out
    assert "auc/positive (greater)" in printed
    assert "mse/rating (smaller)" in printed  # direction inferred
    assert "consistency (greater)" in printed
    assert "p=" in printed

    assert main(["compare", str(tmp_path / "base"), str(tmp_path / "treat"),
                 "--metric", "mse/rating", "--direction", "greater"]) == 0
    printed = capsys.readouterr().out
    assert printed.count("\n") == 1
    assert "mse/rating (greater)" in printed


def test_train_exit_code_flags_total_divergence(tmp_path, capsys):
    cfg = write_config(tmp_path, learning_rate=1e150, epochs=1)
    with np.errstate(over="ignore"):  # the overflow is the point
        code = main(["train", "--config", cfg])
    assert code == 1
    assert "DIVERGED" in capsys.readouterr().out
    assert (tmp_path / "out" / "diverged.tsv").exists()


def test_grad_audit_subcommand_narrowed(tmp_path, capsys):
    code = main(["grad-audit", "--backbone", "shared_bottom",
                 "--variant", "none"])
    assert code == 0
    printed = capsys.readouterr().out
    assert "PASS model-fd/shared_bottom/none" in printed
    assert "FAIL" not in printed
    assert "audits passed" in printed


def test_unknown_choices_are_rejected_by_argparse(tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--dataset", "ml25m"])
    with pytest.raises(SystemExit):
        main(["train", "--backbone", "transformer"])
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_config_unknown_key_surfaces_from_cli(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("epoch: 5\n")
    with pytest.raises(ValueError, match="unknown config keys: epoch"):
        main(["train", "--config", str(path)])
