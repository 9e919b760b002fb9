import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from ieqn import cli

FAST = {
    "regress": ["n_samples=500", "K=5", "steps=50", "n_seeds=2"],
    "project": ["n_samples=2000", "K_list=2,5", "pairs=3", "pair_K=20"],
    "dp": ["n_reward_atoms=500", "K=20", "iterations=5", "rollouts=2000", "max_atoms=200"],
    "train": ["steps=60", "eval_every=30", "hidden=8", "mapper_hidden=8", "n_seeds=2"],
}


def run(command, out, *sets, extra=()):
    argv = [command, "--out", str(out), "--quiet", *extra]
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_text_parsing():
    text = "# comment\n K = 7   # trailing\n\ntarget=dirac:1.5\n"
    assert cli.parse_config_text(text) == {"K": "7", "target": "dirac:1.5"}
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("K 7")
    with pytest.raises(cli.ConfigError):
        cli.parse_config_text("= 7")


def test_resolve_config_types_and_errors():
    cfg = cli.resolve_config("project", {"out": "x", "K_list": "1, 2,3"})
    assert cfg["K_list"] == [1, 2, 3] and cfg["seed"] == 0 and cfg["pair_K"] == 200
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("project", {"out": "x", "bogus": "1"})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("regress", {"out": "x", "K": "ten"})
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("regress", {})


def test_config_file_with_overrides(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# delta target\ntarget = dirac:0.5\nK_list = 3, 4  # two sizes\npairs = 0\n")
    out = tmp_path / "o"
    assert cli.main(["project", "--config", str(conf), "--set", "K_list=6", "--out", str(out),
                     "--quiet"]) == 0
    rows = read_rows(out / "project_convergence.csv")
    assert [r["K"] for r in rows] == ["6"]


def test_missing_out_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["regress", "--quiet"]) == 2
    assert os.listdir(tmp_path) == []


def test_bad_values_exit_2_without_files(tmp_path):
    cases = [
        ("project", "K_list=0"),
        ("regress", "K=0"),
        ("regress", "bogus=1"),
        ("train", "variants=IEQN,DQN"),
        ("dp", "mdp=grid"),
        ("dp", "target=uniform"),
        ("project", "floor_rule=ceil"),
    ]
    for i, (command, setting) in enumerate(cases):
        out = tmp_path / f"o{i}"
        assert run(command, out, setting) == 2, (command, setting)
        assert not out.exists()
    assert cli.main(["spread", "--out", str(tmp_path / "s"), "--quiet"]) == 2
    assert cli.main(["nonsense"]) == 2


def test_unwritable_outdir_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("dp", blocker / "sub", *FAST["dp"]) == 2


def test_divergence_exits_3(tmp_path):
    with np.errstate(all="ignore"):
        assert run("regress", tmp_path / "o", "learning_rate=1e3", "K=3", "steps=2000") == 3


def test_help_lists_every_key(capsys):
    for command, schema in cli.SCHEMAS.items():
        assert cli.main([command, "--help"]) == 0
        text = capsys.readouterr().out
        for key in {**cli.COMMON, **schema}:
            assert f"  {key} = " in text, (command, key)
    assert "mapper_lr = 7e-05" in (cli.main(["train", "--help"]), capsys.readouterr().out)[1]


def test_regress_outputs(tmp_path):
    assert run("regress", tmp_path, *FAST["regress"]) == 0
    for name in ("L1", "L2", "L2_mapped"):
        rows = read_rows(tmp_path / f"regress_mae_{name}.csv")
        assert len(rows) == 2 * 50 and list(rows[0]) == ["seed", "step", "mae"]
    stats = read_rows(tmp_path / "regress_stats.csv")
    assert len(stats) == 3 * 2 * 5
    summary = read_rows(tmp_path / "regress_summary.csv")
    assert {r["method"] for r in summary} == {"L1", "L2", "L2_mapped"}


def test_project_delta_target_is_exact(tmp_path):
    assert run("project", tmp_path, "target=dirac:2", "K_list=1,3,9", "pairs=2", "pair_K=5") == 0
    rows = read_rows(tmp_path / "project_convergence.csv")
    assert all(float(r["w1_dual"]) == 0.0 and float(r["w1_quantile"]) == 0.0 for r in rows)
    assert len(read_rows(tmp_path / "project_pairs.csv")) == 2


def test_dp_gamma_zero_converges_in_one_iteration(tmp_path):
    assert run("dp", tmp_path, *FAST["dp"], "gamma=0", "n_states=3") == 0
    rows = read_rows(tmp_path / "dp_iterations.csv")
    assert len(rows) <= 2
    assert float(rows[-1]["sup_w1_delta"]) <= 1e-9


def test_dp_self_loop(tmp_path):
    assert run("dp", tmp_path, *FAST["dp"], "mdp=self_loop", "gamma=0.5") == 0
    assert run("dp", tmp_path / "x", *FAST["dp"], "mdp=self_loop", "gamma=1") == 2


def test_train_and_spread(tmp_path):
    assert run("train", tmp_path, *FAST["train"]) == 0
    ratios = read_rows(tmp_path / "spread_ratios.csv")
    assert [r["variant"] for r in ratios] == ["IEQN", "IEQN", "IENNaive", "IENNaive"]
    assert ratios[2]["quantile_ratio"] == "nan"
    trace = tmp_path / "trace_IEQN_seed0.csv"
    steps = {r["step"] for r in read_rows(trace)}
    assert steps == {"30", "60"}
    out = tmp_path / "spread"
    assert cli.main(["spread", "--set", f"trace={trace}", "--set", "scale=1", "--out", str(out),
                     "--quiet"]) == 0
    spreads = read_rows(out / "spread.csv")
    assert len(spreads) == 2 * 4 * 2
    assert run("spread", out, f"trace={trace}", "scale=0") == 2


def test_train_zero_steps_is_snapshot_only(tmp_path):
    assert run("train", tmp_path, "steps=0", "variants=IQN0", "hidden=8") == 0
    assert {r["step"] for r in read_rows(tmp_path / "trace_IQN0_seed0.csv")} == {"0"}


@pytest.mark.parametrize("command", sorted(FAST))
def test_reruns_are_byte_identical(command, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(command, a, *FAST[command], extra=["--seed", "7"]) == 0
    assert run(command, b, *FAST[command], extra=["--seed", "7"]) == 0
    names = sorted(os.listdir(a))
    assert names == sorted(os.listdir(b)) and names
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ieqn", "project", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "K_list" in proc.stdout


def test_regress_default_budget_prefers_expectiles(tmp_path):
    assert run("regress", tmp_path, "n_seeds=10") == 0
    rows = read_rows(tmp_path / "regress_summary.csv")
    final = {m: np.median([float(r["final_mae"]) for r in rows if r["method"] == m])
             for m in ("L1", "L2")}
    assert final["L2"] < final["L1"]
