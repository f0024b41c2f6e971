"""Command-line surface: exit codes, file outputs, determinism, verification."""

import json
from pathlib import Path

import numpy as np
import pytest

from changecap.cli import main
from changecap.gradcheck import finite_difference_check
from changecap.tensor import Tensor, record
from changecap.verification import THRESHOLDS, run_scopes


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "toy"
    code = run_cli("gen-data", "--out", root, "--train", "24", "--val", "6",
                   "--test", "6", "--seed", "11")
    assert code == 0
    return root


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    """One very small training run shared by the eval/resume tests."""
    out = tmp_path_factory.mktemp("run")
    code = run_cli("train", f"data_dir={tiny_data}", f"out_dir={out}",
                   "epochs=2", "width=16", "state_size=4", "layers=1",
                   "heads=2", "decoder_blocks=1", "batch=8", "lr=0.002")
    assert code == 0
    return out


class TestGenData:
    def test_layout_and_vocab(self, tiny_data):
        assert (tiny_data / "vocab.txt").exists()
        for split in ("train", "val", "test"):
            assert (tiny_data / split / "scenes.bin").exists()
            assert (tiny_data / split / "captions.jsonl").exists()
        lines = (tiny_data / "vocab.txt").read_text().splitlines()
        assert lines[0] == "<pad>" and lines[1] == "<bos>"

    def test_deterministic_regeneration(self, tiny_data, tmp_path):
        again = tmp_path / "again"
        assert run_cli("gen-data", "--out", again, "--train", "24", "--val", "6",
                       "--test", "6", "--seed", "11") == 0
        for rel in ("vocab.txt", "train/scenes.bin", "train/captions.jsonl",
                    "val/scenes.bin", "test/captions.jsonl"):
            assert (again / rel).read_bytes() == (tiny_data / rel).read_bytes(), rel

    def test_zero_split_usage_error(self, tmp_path):
        assert run_cli("gen-data", "--out", tmp_path / "x", "--train", "0") == 2


class TestTrainEval:
    def test_checkpoint_written(self, tiny_run):
        assert (tiny_run / "best.camc").exists()
        assert (tiny_run / "config.txt").exists()
        log = (tiny_run / "train_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,val_loss,wall_s"
        assert len(log) == 3

    def test_training_loss_beats_uniform(self, tiny_data, tiny_run):
        # the full-size first-epoch variant of this check lives in the
        # acceptance suite; at this fixture's scale the second epoch is
        # the first with enough steps behind it
        vocab_size = len((tiny_data / "vocab.txt").read_text().splitlines())
        log = (tiny_run / "train_log.csv").read_text().splitlines()
        second_epoch_loss = float(log[2].split(",")[1])
        assert second_epoch_loss < np.log(vocab_size)

    def test_missing_dataset_exit_2(self, tmp_path):
        assert run_cli("train", f"data_dir={tmp_path / 'missing'}",
                       f"out_dir={tmp_path / 'o'}", "epochs=1") == 2

    def test_unknown_override_exit_2(self, tiny_data, tmp_path):
        assert run_cli("train", f"data_dir={tiny_data}",
                       f"out_dir={tmp_path}", "epoch=1") == 2

    def test_eval_outputs(self, tiny_data, tiny_run, capsys):
        code = run_cli("eval", "--checkpoint", tiny_run / "best.camc",
                       "--split", "val", "--out", tiny_run)
        assert code == 0
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(payload) >= {"bleu4", "rouge_l", "meteor_simplified",
                                "cider_d", "s_star_m", "exact_match"}
        preds = [json.loads(l) for l in
                 (tiny_run / "predictions_val.jsonl").read_text().splitlines()]
        assert len(preds) == 6
        assert set(preds[0]) == {"sample_id", "hypothesis", "references"}
        report = json.loads((tiny_run / "eval_val.json").read_text())
        assert report["n_samples"] == 6
        csv_lines = (tiny_run / "eval_history.csv").read_text().splitlines()
        assert csv_lines[0].startswith("split,bleu1")

    def test_eval_deterministic(self, tiny_run, capsys):
        run_cli("eval", "--checkpoint", tiny_run / "best.camc", "--split", "val",
                "--out", tiny_run)
        first = capsys.readouterr().out
        run_cli("eval", "--checkpoint", tiny_run / "best.camc", "--split", "val",
                "--out", tiny_run)
        second = capsys.readouterr().out
        assert first == second

    def test_eval_oracle_mode_beats_untrained(self, tiny_run, capsys):
        run_cli("eval", "--checkpoint", tiny_run / "best.camc", "--split", "val",
                "--out", tiny_run, "--oracle")
        payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        # reference[0] scored against all five: below 100, far above noise
        assert 40.0 < payload["bleu4"] < 100.0

    def test_eval_vocab_mismatch_exit_2(self, tiny_run, tmp_path):
        other = tmp_path / "other"
        run_cli("gen-data", "--out", other, "--train", "3", "--val", "2",
                "--test", "2", "--seed", "5")
        # tiny vocab from 3 train samples will not match the checkpoint's
        assert run_cli("eval", "--checkpoint", tiny_run / "best.camc",
                       "--split", "val", "--data", other) == 2

    def test_resume_continues(self, tiny_data, tiny_run, tmp_path, capsys):
        out2 = tmp_path / "resumed"
        code = run_cli("train", f"data_dir={tiny_data}", f"out_dir={out2}",
                       "epochs=1", "width=16", "state_size=4", "layers=1",
                       "heads=2", "decoder_blocks=1", "batch=8",
                       "--resume", tiny_run / "best.camc")
        assert code == 0
        from changecap.checkpoint import load_checkpoint
        resumed = load_checkpoint(out2 / "best.camc")
        original = load_checkpoint(tiny_run / "best.camc")
        assert resumed.step > original.step


class TestGradcheckCommand:
    def test_ops_scope_passes(self, capsys):
        assert run_cli("gradcheck", "--scope", "ops") == 0
        out = capsys.readouterr().out
        assert "ops: max rel-err" in out

    def test_corrupted_backward_caught(self):
        # negative control: a deliberately wrong vector-Jacobian product
        def broken_double(t):
            return record(t.data * 2.0, (t,), lambda g: (g * 1.5,))

        err = finite_difference_check(lambda t: broken_double(t).sum(),
                                      Tensor(np.random.randn(4), dtype=np.float64))
        assert err > THRESHOLDS["ops"]
        details, failures = run_scopes(["ops"])
        assert not failures  # sanity: the real suite stays green


class TestBenchCommand:
    def test_small_bench_csv(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = run_cli("bench-scan", "--lengths", "64,128", "--impl", "seq,par",
                       "--out", out)
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "impl,L,median_ms"
        assert len(lines) == 5  # 2 impls x 2 lengths

    def test_unknown_impl_exit_2(self):
        assert run_cli("bench-scan", "--impl", "gpu") == 2


class TestAblateCommand:
    def test_tiny_table3_structure(self, tiny_data, tmp_path, capsys):
        out = tmp_path / "abl"
        code = run_cli("ablate", "--matrix", "table3", "--seeds", "7",
                       f"data_dir={tiny_data}", f"out_dir={out}",
                       "epochs=1", "width=16", "state_size=4", "heads=2",
                       "decoder_blocks=1", "batch=8")
        assert code == 0
        table = (out / "ablation_table3.md").read_text()
        for label in ("layers-2", "layers-3", "layers-4"):
            assert label in table

    def test_table2_rows_defined(self):
        from changecap.train import ABLATION_MATRICES
        labels = [l for l, _ in ABLATION_MATRICES["table2"]]
        assert labels == ["baseline-self-gate", "spatial-diff-only",
                          "spatial-diff+interleave", "spatial-diff+length-concat"]
        assert [l for l, _ in ABLATION_MATRICES["table4"]] == [
            "decoder-mamba", "decoder-gpt-style", "decoder-cross-attention"]
