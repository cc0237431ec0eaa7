import json
import re
import struct

import filelock
import numpy as np
import pytest

from latforge import cli, storage, trainer
from latforge.evalkit import MetricsRecord
from latforge.model import init_params
from latforge.plots import family_svg

from conftest import TINY

SMALL_RUN = """\
task.setting = unlearn
task.seed = 0
task.forget = 16
task.retain = 16
loss.kind = unlearn-ga
model.n_layers = 2
model.d_model = 16
model.n_heads = 2
attack.steps = 2
attack.sites = 2
attack.epsilon = 1.0
train.batch_size = 4
train.steps = 4
train.eval_every = 2
train.checkpoint_every = 2
paths.data_dir = data
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.txt").write_text(SMALL_RUN)
    assert cli.main(["gen-data", "--config", "run.txt"]) == 0
    return tmp_path


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    params = init_params(TINY, seed=1)
    mom = {k: np.full_like(v, 0.5) for k, v in params.items()}
    storage.save_checkpoint(tmp_path / "a.latf", "x = 1\n", params, mom, (7, 1, 12))
    ck = storage.load_checkpoint(tmp_path / "a.latf")
    got = ck.params()
    assert sorted(got) == sorted(params)
    assert all(got[k].tobytes() == params[k].tobytes() and got[k].shape == params[k].shape for k in params)
    assert ck.counters() == (7, 1, 12) and ck.config_text == "x = 1\n"
    assert all(ck.momentum()[k].tobytes() == mom[k].tobytes() for k in mom)


def test_checkpoint_layout(tmp_path):
    blob = storage.encode_checkpoint("c", {"w": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == b"LATF"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    assert blob[12:13] == b"c"
    assert struct.unpack("<I", blob[13:17]) == (1,)
    assert struct.unpack("<H", blob[17:19]) == (1,) and blob[19:20] == b"w"
    assert struct.unpack("<III", blob[20:32]) == (2, 1, 2)
    assert np.frombuffer(blob[32:40], "<f4").tolist() == [1.0, 2.0]
    assert len(blob) == 40 + 32


@pytest.mark.parametrize("where", [0, 10, -40, -1])
def test_corrupted_checkpoint_rejected(tmp_path, where):
    path = tmp_path / "a.latf"
    storage.save_checkpoint(path, "cfg", init_params(TINY))
    blob = bytearray(path.read_bytes())
    blob[where] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(storage.CheckpointError):
        storage.load_checkpoint(path)


def test_truncated_checkpoint_rejected(tmp_path):
    blob = storage.encode_checkpoint("cfg", init_params(TINY))
    with pytest.raises(storage.CheckpointError):
        storage.decode_checkpoint(blob[:-5])


def test_atomic_write_leaves_no_temporaries(tmp_path):
    storage.atomic_write(tmp_path / "sub" / "f.txt", "one")
    storage.atomic_write(tmp_path / "sub" / "f.txt", "two")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]
    assert (tmp_path / "sub" / "f.txt").read_text() == "two"


# ---------------------------------------------------------------- CSV and plots

def test_csv_empty_cells_and_column_order(tmp_path):
    text = storage.metrics_csv([MetricsRecord(step=1, loss_defense=0.5)], "abc")
    header, row = text.splitlines()
    assert header.split(",") == MetricsRecord.columns() + ["config_hash"]
    assert row == "1,,0.5,,,,,,,,,0,abc"
    (tmp_path / "m.csv").write_text(text)
    back = storage.read_metrics_csv(tmp_path / "m.csv")[0]
    assert back["loss_attack"] is None and back["loss_defense"] == 0.5 and back["step"] == 1


def test_csv_float_round_trip(tmp_path):
    r = MetricsRecord(step=3, loss_attack=0.1 + 0.2, compliance_rate=1 / 3)
    (tmp_path / "m.csv").write_text(storage.metrics_csv([r], "h"))
    back = storage.read_metrics_csv(tmp_path / "m.csv")[0]
    assert back["loss_attack"] == 0.1 + 0.2 and back["compliance_rate"] == 1 / 3


def _series_points(svg, col):
    m = re.search(rf'<g id="series-{col}">(.*?)</g>\s*</g>', svg, re.S)
    return len(re.findall(r"<use ", m.group(1)))


def test_plot_of_two_rows_has_two_points_per_series():
    rows = [{"step": 1, "loss_attack": 1.0, "loss_defense": 2.0, "loss_benign": None},
            {"step": 2, "loss_attack": 0.5, "loss_defense": 1.0, "loss_benign": None}]
    svg = family_svg(rows, "loss")
    assert _series_points(svg, "loss_attack") == 2 and _series_points(svg, "loss_defense") == 2
    assert "series-loss_benign" not in svg
    assert family_svg(rows, "rates") is None


def test_plot_is_deterministic():
    rows = [{"step": 1, "compliance_rate": 1.0, "trigger_success_rate": 0.0}]
    assert family_svg(rows, "rates") == family_svg(rows, "rates")


# ---------------------------------------------------------------- commands

def test_gen_data_rerun_gives_identical_manifest(workdir):
    first = (workdir / "data" / "manifest.json").read_bytes()
    assert cli.main(["gen-data", "--config", "run.txt"]) == 0
    assert (workdir / "data" / "manifest.json").read_bytes() == first
    manifest = json.loads(first)
    assert set(manifest["splits"]) == {"forget", "retain"}
    assert manifest["splits"]["forget"]["records"] == 16


def test_gen_data_seed_override_changes_data(workdir):
    assert cli.main(["gen-data", "--config", "run.txt", "--seed", "5", "--out", "other"]) == 0
    a = json.loads((workdir / "data" / "manifest.json").read_text())
    b = json.loads((workdir / "other" / "manifest.json").read_text())
    assert a["splits"]["forget"]["sha256"] != b["splits"]["forget"]["sha256"]


def test_tampered_dataset_is_an_io_error(workdir):
    with open(workdir / "data" / "forget.jsonl", "a") as fh:
        fh.write("\n")
    assert cli.main(["train", "--config", "run.txt", "--out", "r"]) == cli.EXIT_IO


def test_train_writes_outputs_and_is_reproducible(workdir):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    assert cli.main(["train", "--config", "run.txt", "--out", "b"]) == 0
    assert (workdir / "a" / "metrics.csv").read_bytes() == (workdir / "b" / "metrics.csv").read_bytes()
    names = sorted(p.name for p in (workdir / "a").iterdir())
    assert names == ["checkpoint-000002.latf", "checkpoint-000004.latf", "config.txt", "final.latf", "metrics.csv"]
    rows = storage.read_metrics_csv(workdir / "a" / "metrics.csv")
    assert [r["step"] for r in rows] == [2, 4]


def test_train_seed_override(workdir):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    assert cli.main(["train", "--config", "run.txt", "--out", "b", "--seed", "9"]) == 0
    assert (workdir / "a" / "metrics.csv").read_bytes() != (workdir / "b" / "metrics.csv").read_bytes()


def test_resume_continues_step_numbering(workdir):
    assert cli.main(["train", "--config", "run.txt", "--out", "full"]) == 0
    assert cli.main(["train", "--config", "run.txt", "--out", "part"]) == 0
    # drop the second half of the run, then resume from the step-2 checkpoint
    rows = storage.read_metrics_csv(workdir / "part" / "metrics.csv")
    assert cli.main(["train", "--config", "run.txt", "--out", "part",
                     "--resume", "part/checkpoint-000002.latf"]) == 0
    assert [r["step"] for r in storage.read_metrics_csv(workdir / "part" / "metrics.csv")] == [2, 4]
    assert (workdir / "part" / "metrics.csv").read_bytes() == (workdir / "full" / "metrics.csv").read_bytes()
    assert len(rows) == 2


def test_resume_needs_trainer_state(workdir):
    storage.save_checkpoint(workdir / "bare.latf", "", init_params(TINY))
    assert cli.main(["train", "--config", "run.txt", "--out", "r", "--resume", "bare.latf"]) == cli.EXIT_CONFIG


def test_eval_is_byte_identical(workdir, capsys):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    assert cli.main(["eval", "--checkpoint", "a/final.latf", "--config", "run.txt", "--out", "e1.csv"]) == 0
    assert cli.main(["eval", "--checkpoint", "a/final.latf", "--config", "run.txt", "--out", "e2.csv"]) == 0
    assert (workdir / "e1.csv").read_bytes() == (workdir / "e2.csv").read_bytes()
    row = storage.read_metrics_csv(workdir / "e1.csv")[0]
    assert row["step"] == 4 and row["forget_accuracy"] is not None


def test_eval_falls_back_to_stored_config(workdir, capsys):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    capsys.readouterr()
    # the stored config's data_dir is relative; resolve it from the working directory
    assert cli.main(["eval", "--checkpoint", "a/final.latf"]) == 0
    assert capsys.readouterr().out.startswith("step,")


def test_relearn_report_shape(workdir):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    with open(workdir / "run.txt", "a") as fh:
        fh.write("paths.init_checkpoint = a/checkpoint-000002.latf\n")
    assert cli.main(["relearn", "--checkpoint", "a/final.latf", "--config", "run.txt", "--out", "rel.json"]) == 0
    rep = json.loads((workdir / "rel.json").read_text())
    assert rep["n_examples"] == 2 and rep["iters"] == 20 and rep["eval_at"] == [5, 10, 20]
    assert len(rep["indices"]) == 2
    assert rep["best_accuracy"] == max(rep["accuracies"][k] for k in ("5", "10", "20"))
    assert rep["base_accuracy"] is not None


def test_plot_command_writes_svgs(workdir):
    assert cli.main(["train", "--config", "run.txt", "--out", "a"]) == 0
    assert cli.main(["plot", "a/metrics.csv", "--out", "plots"]) == 0
    names = sorted(p.name for p in (workdir / "plots").iterdir())
    assert names == ["accuracy.svg", "loss.svg", "perplexity.svg", "stability.svg"]
    assert all(p.read_text().lstrip().startswith("<?xml") for p in (workdir / "plots").iterdir())


# ---------------------------------------------------------------- exit codes

def test_lock_conflict_is_an_io_error(workdir):
    (workdir / "busy").mkdir()
    with filelock.FileLock(str(workdir / "busy" / "run.lock")):
        assert cli.main(["train", "--config", "run.txt", "--out", "busy"]) == cli.EXIT_IO


def test_missing_key_is_a_config_error(workdir, capsys):
    (workdir / "bad.txt").write_text("task.setting = unlearn\nloss.kind = rt\n")
    assert cli.main(["gen-data", "--config", "bad.txt"]) == cli.EXIT_CONFIG
    assert "task.seed" in capsys.readouterr().err


def test_invalid_value_is_a_config_error(workdir):
    (workdir / "bad.txt").write_text(SMALL_RUN + "benign.mode = sometimes\n")
    assert cli.main(["train", "--config", "bad.txt"]) == cli.EXIT_CONFIG


def test_missing_files_are_io_errors(workdir):
    assert cli.main(["gen-data", "--config", "nope.txt"]) == cli.EXIT_IO
    assert cli.main(["eval", "--checkpoint", "nope.latf"]) == cli.EXIT_IO


class _NanObjective(trainer.UnlearnObjective):
    def defense_loss(self, params, batch, pert):
        return super().defense_loss(params, batch, pert) * np.float32(np.nan)


def test_nan_budget_exit_code(workdir, monkeypatch):
    monkeypatch.setitem(trainer.OBJECTIVES, "unlearn-ga", _NanObjective)
    with np.errstate(all="ignore"):
        assert cli.main(["train", "--config", "run.txt", "--out", "n"]) == cli.EXIT_NAN


@pytest.mark.parametrize("value,code", [("2", 0), ("zero", 2), ("0", 2)])
def test_thread_env_var(workdir, monkeypatch, value, code):
    monkeypatch.setenv("LATFORGE_THREADS", value)
    assert cli.main(["gen-data", "--config", "run.txt"]) == code
