import subprocess
import sys

import numpy as np

from smoothrl.cli import main
from smoothrl.policy import GaussianPolicy


def test_train_summarize_probe(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    out = tmp_path / "run"
    cfg.write_text(f"algo = trpo\nenv = pendulum\nseeds = 1,2\niterations = 2\n"
                   f"steps_per_iter = 200\noutput = {out}\n")
    assert main(["train", str(cfg)]) == 0
    assert (out / "seed_1.csv").exists()
    assert main(["summarize", str(out)]) == 0
    assert capsys.readouterr().out.splitlines()[-3] == "percentile,return"
    assert main(["probe-smoothness", str(out / "policy_seed_1.txt"), "--eps", "0.05",
                 "-n", "10"]) == 0
    assert float(capsys.readouterr().out) >= 0
    assert main(["eval-robust", str(out / "policy_seed_1.txt"), "--env", "pendulum",
                 "--mode", "random", "--eps", "0,0.1", "--rollouts", "2",
                 "--out", str(tmp_path / "rob.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "epsilon,mean_return,std_return" and len(lines) == 3


def test_rejections_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("algo = frobnicate\nenv = pendulum\n")
    assert main(["train", str(bad)]) != 0
    assert "unknown algorithm" in capsys.readouterr().err
    pol = tmp_path / "p.txt"
    pol.write_text(GaussianPolicy.init(4, 2, (4,), np.random.default_rng(0)).to_text())
    assert main(["eval-robust", str(pol), "--env", "pendulum", "--mode", "random"]) != 0
    assert main(["summarize", str(tmp_path / "empty")]) != 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "smoothrl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "probe-smoothness" in r.stdout
