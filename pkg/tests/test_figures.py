"""Figure rendering from delimited run outputs."""

from movecl.cli import main
from movecl.figures import read_delimited, render_run_dir


def test_read_delimited_skips_echo(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("# scenario = synthetic\n# seeds = 1\n"
                    "task,epoch,loss\n0,0,1.5\n0,1,1.2\n")
    rows = read_delimited(path)
    assert len(rows) == 2
    assert rows[0]["loss"] == "1.5"


def test_render_empty_dir_writes_nothing(tmp_path):
    assert render_run_dir(tmp_path) == []


def test_dense_run_has_no_expert_load_figure(tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--set", "scenario=synthetic",
                 "--set", "synthetic.n_per_task=96",
                 "--set", "model.hidden=8",
                 "--set", "train.epochs=1",
                 "--set", "train.mode=naive_dense",
                 "--seed", "1", "--out", str(out)])
    assert code == 0
    seed_dir = out / "seed_1"
    assert (seed_dir / "training_curves.png").exists()
    assert (seed_dir / "accuracy_matrix.png").exists()
    assert not (seed_dir / "expert_load.png").exists()


def test_zero_epoch_run_still_renders_matrix(tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--set", "scenario=synthetic",
                 "--set", "synthetic.n_per_task=96",
                 "--set", "model.hidden=8",
                 "--set", "epochs=0",
                 "--seed", "2", "--out", str(out)])
    assert code == 0
    seed_dir = out / "seed_2"
    assert (seed_dir / "accuracy_matrix.png").exists()
    assert not (seed_dir / "training_curves.png").exists()  # empty train log
