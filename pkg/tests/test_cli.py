"""End-to-end exercises of the command-line layer via main(argv).

Training-backed commands run with deliberately tiny models so the whole
file stays in the seconds range.
"""

import json
import os
import warnings

import numpy as np
import pytest

import srpl.tasks as K
import srpl.training as TR
from srpl.cli import (EXIT_FORMAT, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK,
                      EXIT_STATE, EXIT_USAGE, load_config_file, main,
                      resolve_task, thread_budget)

TINY = ["--hidden-dim", "16", "--num-heads", "2", "--num-layers", "1",
        "--max-seq-len", "64", "--eval-batches", "1", "--snapshot-every", "4"]


def run_train(out_dir, *extra):
    args = ["train", "--task", "mod7", "--out", str(out_dir), "--steps", "8"]
    args += TINY + list(extra)
    return main(args)


# ---------------------------------------------------------------------------
# task aliases and parser basics


def test_resolve_task_aliases():
    assert resolve_task("dyck3") == K.DYCK3
    assert resolve_task("bio") == K.BIO_ROTATION
    assert resolve_task("bio_rotation") == K.BIO_ROTATION
    assert resolve_task("mod7") == K.MODULO7
    assert resolve_task("modulo7") == K.MODULO7


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    capsys.readouterr()


def test_missing_required_flag_is_usage_error(capsys):
    assert main(["train", "--task", "mod7"]) == EXIT_USAGE
    capsys.readouterr()


# ---------------------------------------------------------------------------
# gen


def test_gen_writes_requested_count(tmp_path, capsys):
    out = tmp_path / "samples.tsv"
    assert main(["gen", "dyck3", "--count", "7", "--seed", "3",
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 7
    msg = capsys.readouterr().out
    assert "7" in msg and "dyck3" in msg


def test_gen_zero_count_writes_empty_file(tmp_path):
    out = tmp_path / "empty.tsv"
    assert main(["gen", "mod7", "--count", "0", "--out", str(out)]) == EXIT_OK
    assert out.exists()
    assert out.read_text().strip() == ""


def test_gen_negative_count_rejected(tmp_path, capsys):
    out = tmp_path / "x.tsv"
    assert main(["gen", "mod7", "--count", "-1", "--out", str(out)]) == EXIT_USAGE
    capsys.readouterr()


def test_gen_unknown_task(tmp_path, capsys):
    assert main(["gen", "nosuch", "--out", str(tmp_path / "x.tsv")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "dyck3" in err and "mod7" in err


def test_gen_bio_respects_pinned_noise_len(tmp_path):
    out = tmp_path / "bio.tsv"
    assert main(["gen", "bio", "--count", "3", "--motif-len", "4",
                 "--noise-len", "100", "--out", str(out)]) == EXIT_OK
    for line in out.read_text().strip().split("\n"):
        inp = line.split("\t")[0].split(" ")
        # motif + noise + separator + (rc - 1 token shifted out)
        assert len(inp) == 4 + 100 + 1 + 4 - 1


# ---------------------------------------------------------------------------
# train


def test_train_writes_all_artifacts(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "spectral", "--seed", "2") == EXIT_OK
    for name in ("checkpoint.srpl", "history.csv", "snapshots_layer0.csv",
                 "summary.json"):
        assert (tmp_path / name).exists(), name
    losses = TR.read_history_csv(str(tmp_path / "history.csv"))
    assert losses.shape == (8,)
    snaps = TR.read_snapshot_csv(str(tmp_path / "snapshots_layer0.csv"))
    assert [s for s, _ in snaps] == [0, 4, 8]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["task"] == K.MODULO7
    assert summary["engine"] == "spectral"
    assert summary["mean_abs_phase_shift"] is not None
    out = capsys.readouterr().out
    assert "final_loss" in out


def test_train_standard_summary_omits_phase_fields(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "standard") == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["engine"] == "standard"
    assert summary["mean_abs_phase_shift"] is None
    assert summary["alternation_rate"] is None
    capsys.readouterr()


def test_train_divergence_exits_numeric(tmp_path, capsys):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rc = run_train(tmp_path, "--lr", "1e150", "--steps", "10")
    assert rc == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "step" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_reproduces_training_final_loss(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "spectral", "--seed", "5") == EXIT_OK
    capsys.readouterr()
    # same stream, same count as the end-of-run evaluation
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.srpl"),
                 "--task", "mod7", "--n-samples", "32", "--seed", "5"]) == EXIT_OK
    printed = capsys.readouterr().out
    summary = json.loads((tmp_path / "summary.json").read_text())
    loss = float(printed.split("loss=")[1].split(" ")[0])
    assert loss == pytest.approx(summary["final_loss"], abs=5e-7)  # printed at 6 dp


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.srpl"),
                 "--task", "mod7"]) == EXIT_MISSING
    capsys.readouterr()


def test_eval_task_vocab_mismatch(tmp_path, capsys):
    assert run_train(tmp_path) == EXIT_OK
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.srpl"),
                 "--task", "dyck3"]) == EXIT_USAGE
    capsys.readouterr()


# ---------------------------------------------------------------------------
# swap


def test_swap_standard_checkpoint_is_exact(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "standard") == EXIT_OK
    out = tmp_path / "swapped.srpl"
    rc = main(["swap", "--in", str(tmp_path / "checkpoint.srpl"),
               "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "0.0" in printed
    assert out.exists()
    # swapped model evaluates identically to the source
    assert main(["eval", "--checkpoint", str(out), "--task", "mod7",
                 "--n-samples", "16", "--seed", "9"]) == EXIT_OK
    swapped_line = capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(tmp_path / "checkpoint.srpl"),
                 "--task", "mod7", "--n-samples", "16", "--seed", "9"]) == EXIT_OK
    source_line = capsys.readouterr().out
    assert swapped_line.split("loss=")[1] == source_line.split("loss=")[1]


def test_swap_spectral_checkpoint_is_state_error(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "spectral") == EXIT_OK
    rc = main(["swap", "--in", str(tmp_path / "checkpoint.srpl"),
               "--out", str(tmp_path / "x.srpl")])
    assert rc == EXIT_STATE
    capsys.readouterr()


def test_swap_garbage_checkpoint_is_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.srpl"
    bad.write_bytes(b"not a checkpoint at all")
    rc = main(["swap", "--in", str(bad), "--out", str(tmp_path / "x.srpl")])
    assert rc == EXIT_FORMAT
    capsys.readouterr()


def test_swap_missing_input_file(tmp_path, capsys):
    rc = main(["swap", "--in", str(tmp_path / "none.srpl"),
               "--out", str(tmp_path / "x.srpl")])
    assert rc == EXIT_MISSING
    capsys.readouterr()


# ---------------------------------------------------------------------------
# compare


def test_compare_single_task(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SRPL_THREADS", "2")
    out = tmp_path / "cmp"
    rc = main(["compare", "--task", "mod7", "--seeds", "0,1", "--steps", "6",
               "--out", str(out)] + TINY)
    assert rc == EXIT_OK
    table_lines = (out / "compare.csv").read_text().strip().split("\n")
    assert table_lines[0] == "task,standard_loss,spectral_loss,gain,winner"
    assert len(table_lines) == 2
    assert table_lines[1].startswith("modulo7,")
    curves = (out / "curves.csv").read_text().strip().split("\n")
    # header + 2 engines x 2 seeds x 6 steps
    assert len(curves) == 1 + 2 * 2 * 6
    summary = json.loads((out / "summary_modulo7.json").read_text())
    assert summary["gain"] is not None
    for engine in ("standard", "spectral"):
        for seed in (0, 1):
            assert (out / f"modulo7_{engine}_seed{seed}" / "checkpoint.srpl").exists()
    capsys.readouterr()


def test_compare_bad_seed_list(tmp_path, capsys):
    rc = main(["compare", "--task", "mod7", "--seeds", "0,x",
               "--out", str(tmp_path / "cmp")] + TINY)
    assert rc == EXIT_USAGE
    capsys.readouterr()


def test_thread_budget_env(monkeypatch):
    monkeypatch.setenv("SRPL_THREADS", "3")
    assert thread_budget(10) == 3
    assert thread_budget(2) == 2
    monkeypatch.setenv("SRPL_THREADS", "bogus")
    with pytest.raises(Exception):
        thread_budget(4)
    monkeypatch.delenv("SRPL_THREADS")
    assert thread_budget(1) == 1


# ---------------------------------------------------------------------------
# diagnose


def test_diagnose_zigzag(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "spectral") == EXIT_OK
    out = tmp_path / "diag"
    rc = main(["diagnose", "--report", "zigzag",
               "--snapshots", str(tmp_path / "snapshots_layer0.csv"),
               "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "mean_abs_shift" in printed
    assert (out / "zigzag.csv").exists()


def test_diagnose_depth(tmp_path, capsys):
    args = ["train", "--task", "dyck3", "--out", str(tmp_path), "--steps", "2",
            "--engine", "spectral"] + TINY
    assert main(args) == EXIT_OK
    out = tmp_path / "diag"
    rc = main(["diagnose", "--report", "depth",
               "--checkpoint", str(tmp_path / "checkpoint.srpl"),
               "--count", "10", "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "bucket counts" in printed
    assert (out / "depth_probe.csv").exists()


def test_diagnose_depth_wrong_vocab(tmp_path, capsys):
    assert run_train(tmp_path) == EXIT_OK  # mod7 checkpoint
    rc = main(["diagnose", "--report", "depth",
               "--checkpoint", str(tmp_path / "checkpoint.srpl"),
               "--count", "5", "--out", str(tmp_path / "diag")])
    assert rc == EXIT_USAGE
    capsys.readouterr()


def test_diagnose_resonance(tmp_path, capsys):
    assert run_train(tmp_path, "--engine", "spectral") == EXIT_OK
    out = tmp_path / "diag"
    rc = main(["diagnose", "--report", "resonance",
               "--snapshots", str(tmp_path / "snapshots_layer0.csv"),
               "--distance", "18", "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "best cos" in printed
    assert (out / "resonance.csv").exists()


def test_diagnose_missing_inputs(tmp_path, capsys):
    out = str(tmp_path / "diag")
    assert main(["diagnose", "--report", "zigzag", "--out", out]) == EXIT_MISSING
    assert main(["diagnose", "--report", "depth", "--out", out]) == EXIT_MISSING
    assert main(["diagnose", "--report", "resonance", "--out", out]) == EXIT_MISSING
    assert main(["diagnose", "--report", "resonance", "--snapshots", "x.csv",
                 "--out", out]) == EXIT_MISSING
    err = capsys.readouterr().err
    assert "--snapshots" in err and "--checkpoint" in err and "--distance" in err


def test_diagnose_malformed_snapshots(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,loss\n1,0.5\n")
    rc = main(["diagnose", "--report", "zigzag", "--snapshots", str(bad),
               "--out", str(tmp_path / "diag")])
    assert rc == EXIT_FORMAT
    capsys.readouterr()


# ---------------------------------------------------------------------------
# config files


def test_config_file_supplies_defaults_and_flags_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nsteps = 5\nhidden-dim = 16\nnum_heads = 2\n"
                   "num_layers = 1\nmax_seq_len = 32\neval_batches = 1\n"
                   "snapshot_every = 5\n")
    out = tmp_path / "run"
    rc = main(["train", "--task", "mod7", "--config", str(cfg),
               "--steps", "3", "--out", str(out)])
    assert rc == EXIT_OK
    losses = TR.read_history_csv(str(out / "history.csv"))
    assert losses.shape == (3,)  # flag wins over the file's 5
    capsys.readouterr()


def test_config_file_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("stepz = 5\n")
    rc = main(["train", "--task", "mod7", "--config", str(cfg),
               "--out", str(tmp_path / "x")])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "stepz" in err


def test_config_file_malformed_line(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps 5\n")
    rc = main(["train", "--task", "mod7", "--config", str(cfg),
               "--out", str(tmp_path / "x")])
    assert rc == EXIT_USAGE
    capsys.readouterr()


def test_config_file_missing(tmp_path, capsys):
    rc = main(["train", "--task", "mod7", "--config", str(tmp_path / "none.cfg"),
               "--out", str(tmp_path / "x")])
    assert rc == EXIT_MISSING
    capsys.readouterr()


def test_load_config_file_parses_booleans(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("untied_phase = true\nfreeze_basis = off\n")
    raw = load_config_file(str(cfg))
    assert raw == {"untied_phase": "true", "freeze_basis": "off"}


def test_boolean_config_values_reach_the_model(tmp_path, capsys):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("untied_phase = true\n")
    out = tmp_path / "run"
    rc = main(["train", "--task", "mod7", "--engine", "spectral",
               "--config", str(cfg), "--steps", "2", "--out", str(out)] + TINY)
    assert rc == EXIT_OK
    capsys.readouterr()
    from srpl.model import load_checkpoint
    model = load_checkpoint(str(out / "checkpoint.srpl"))
    assert model.config.untied_phase is True
    basis = model.layers[0].basis
    assert basis.phase_q is not basis.phase_k
