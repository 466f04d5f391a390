"""End-to-end command-line behavior: exit codes, files written, output text."""

import numpy as np
import pytest

from clasp import blockworld as bw
from clasp import cli, datastore, trainer


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data_file(workdir):
    path = workdir / "demo.clasp"
    assert cli.main(["gen-data", "--out", str(path), "--num", "48", "--seed", "5"]) == 0
    return path


@pytest.fixture(scope="module")
def config_file(workdir):
    path = workdir / "fast.cfg"
    path.write_text(
        "steps=6\nbatch_size=8\ndropout=0.0\nprior_steps=30\nprior_batch_size=16\n"
    )
    return path


@pytest.fixture(scope="module")
def ckpt_file(workdir, data_file, config_file):
    path = workdir / "model.ckpt"
    code = cli.main(
        ["train", "--data", str(data_file), "--config", str(config_file), "--out", str(path)]
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def prior_file(workdir, data_file, ckpt_file):
    path = workdir / "prior.ckpt"
    code = cli.main(
        ["train-prior", "--ckpt", str(ckpt_file), "--data", str(data_file), "--out", str(path)]
    )
    assert code == 0
    return path


# ---------------------------------------------------------------- usage errors


def test_unknown_subcommand_exits_one(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["summon"])
    assert err.value.code == 1


def test_unknown_flag_exits_one():
    with pytest.raises(SystemExit) as err:
        cli.main(["gen-data", "--out", "x", "--banana", "3"])
    assert err.value.code == 1


def test_missing_required_flag_exits_one():
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--out", "x.ckpt"])
    assert err.value.code == 1


# ---------------------------------------------------------------- gen-data


def test_gen_data_deterministic(workdir):
    a, b = workdir / "da.clasp", workdir / "db.clasp"
    assert cli.main(["gen-data", "--out", str(a), "--num", "12", "--seed", "3"]) == 0
    assert cli.main(["gen-data", "--out", str(b), "--num", "12", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_reports_count(workdir, capsys, data_file):
    out = capsys.readouterr()
    ds = datastore.load_dataset(data_file)
    assert len(ds.records) == 48


# ---------------------------------------------------------------- train


def test_train_writes_checkpoint_and_metrics(ckpt_file):
    assert ckpt_file.exists()
    metrics = ckpt_file.parent / "model_metrics.csv"
    assert metrics.exists()
    assert len(metrics.read_text().splitlines()) == 6
    ckpt = trainer.load_checkpoint(ckpt_file)
    assert ckpt.step == 6
    assert not ckpt.has_flow


def test_train_missing_data_exits_two(workdir, capsys):
    code = cli.main(["train", "--data", str(workdir / "nope.clasp"), "--out", str(workdir / "x.ckpt")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_train_seed_flag_overrides(workdir, data_file, config_file):
    out = workdir / "seeded.ckpt"
    code = cli.main(
        [
            "train", "--data", str(data_file), "--config", str(config_file),
            "--out", str(out), "--seed", "9",
        ]
    )
    assert code == 0
    assert trainer.load_checkpoint(out).config.seed == 9


# ---------------------------------------------------------------- train-prior


def test_train_prior_adds_flow(prior_file):
    ckpt = trainer.load_checkpoint(prior_file)
    assert ckpt.has_flow
    assert ckpt.prior_step == 30
    assert any("/flow." in k for k in ckpt.arrays)


def test_train_prior_corrupt_ckpt_exits_two(workdir, data_file, capsys):
    bad = workdir / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNKJUNKJUNK")
    code = cli.main(
        ["train-prior", "--ckpt", str(bad), "--data", str(data_file), "--out", str(workdir / "y.ckpt")]
    )
    assert code == 2


# ---------------------------------------------------------------- eval


def test_eval_retrieval_table_and_csv(workdir, data_file, ckpt_file, capsys):
    out = workdir / "scores.csv"
    code = cli.main(
        [
            "eval", "--ckpt", str(ckpt_file), "--data", str(data_file),
            "--suite", "retrieval", "--pool-size", "10", "--out", str(out),
        ]
    )
    assert code == 0
    printed = capsys.readouterr().out
    assert "text_r@1" in printed
    lines = out.read_text().splitlines()
    assert lines[0] == "variant,metric,value,seed"
    assert len(lines) == 5


def test_eval_exploration_without_prior_exits_two(workdir, data_file, ckpt_file, capsys):
    code = cli.main(
        ["eval", "--ckpt", str(ckpt_file), "--data", str(data_file), "--suite", "exploration"]
    )
    assert code == 2


def test_eval_all_with_prior_includes_exploration(workdir, data_file, prior_file, capsys):
    code = cli.main(
        [
            "eval", "--ckpt", str(prior_file), "--data", str(data_file),
            "--suite", "all", "--pool-size", "10", "--trials", "5",
        ]
    )
    assert code == 0
    printed = capsys.readouterr().out
    assert "explore_behaviour_prior" in printed
    assert "caption_slot_acc" in printed


# ---------------------------------------------------------------- caption


def test_caption_prints_text_and_factors(data_file, ckpt_file, capsys):
    code = cli.main(
        ["caption", "--ckpt", str(ckpt_file), "--data", str(data_file), "--traj-id", "3"]
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("factors:")


def test_caption_unknown_id_exits_two(data_file, ckpt_file, capsys):
    code = cli.main(
        ["caption", "--ckpt", str(ckpt_file), "--data", str(data_file), "--traj-id", "999"]
    )
    assert code == 2


# ---------------------------------------------------------------- generate


def test_generate_writes_trajectory_file(workdir, data_file, ckpt_file, capsys):
    ds = datastore.load_dataset(data_file)
    text = bw.caption_to_string(ds.records[0].caption)
    out = workdir / "rollouts.clasp"
    code = cli.main(
        [
            "generate", "--ckpt", str(ckpt_file), "--text", text,
            "--trials", "3", "--out", str(out), "--data", str(data_file),
        ]
    )
    assert code == 0
    rolled = datastore.load_dataset(out)
    assert len(rolled.records) == 3
    assert all(r.trajectory.horizon == bw.T_MAX for r in rolled.records)


def test_generate_rejects_unparseable_text(workdir, ckpt_file, capsys):
    code = cli.main(
        [
            "generate", "--ckpt", str(ckpt_file), "--text", "do something nice",
            "--trials", "2", "--out", str(workdir / "z.clasp"),
        ]
    )
    assert code == 2


# ---------------------------------------------------------------- ablate


def test_ablate_compares_two_configs(workdir, data_file, capsys):
    fast = workdir / "v_fast.cfg"
    fast.write_text("steps=5\nbatch_size=8\ndropout=0.0\n")
    point = workdir / "v_point.cfg"
    point.write_text("steps=5\nbatch_size=8\ndropout=0.0\ndistributional=false\n")
    out = workdir / "ablate.csv"
    code = cli.main(
        [
            "ablate", "--configs", str(fast), str(point),
            "--data", str(data_file), "--out", str(out), "--workdir", str(workdir),
        ]
    )
    assert code == 0
    body = out.read_text()
    assert "v_fast" in body and "v_point" in body
    assert (workdir / "v_fast.ckpt").exists()
