import json
import subprocess
import sys

import pytest

from moras import cli
from test_harness import TINY


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps({**TINY, "evo": {"pop_size": 2, "generations": 1},
                                  "out": str(root / "out")}))
    return root, config


def moras(*args):
    return cli.main([str(a) for a in args])


class TestStages:
    def test_calibrate_search_report(self, run_dir, capsys):
        root, config = run_dir
        assert moras("calibrate", "--config", config) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["stats"].endswith("stats.json")
        assert moras("search", "--config", config) == 0
        assert json.loads(capsys.readouterr().out)["archive"]
        assert moras("report", "--config", config) == 0
        assert (root / "out" / "report" / "hv.csv").exists()

    def test_attack_eval_flags(self, run_dir, capsys, tmp_path):
        root, config = run_dir
        from moras.network import Model
        from moras.objectives import SUBSTITUTE_GENOME
        from moras.genome import NetworkSpec
        model = Model(NetworkSpec.from_genome(SUBSTITUTE_GENOME, 3, channels=4, cells_per_phase=1))
        model.save(tmp_path / "m.npz")
        code = moras("attack-eval", "--config", config, "--model", tmp_path / "m.npz",
                     "--attack", "bim", "--epsilon", 0.02, "--alpha", 0.01, "--iterations", 3,
                     "--export", tmp_path / "adv.mds")
        assert code == 0
        metrics = json.loads(capsys.readouterr().out)
        assert metrics["attack"]["kind"] == "BIM" and metrics["attack"]["iterations"] == 3
        assert metrics["max_linf"] <= 0.02 + 1e-6
        assert (tmp_path / "adv.mds").exists()
        assert moras("attack-eval", "--config", config, "--model", tmp_path / "m.npz",
                     "--attack", "blk-fgsm") == 0

    def test_seed_and_out_overrides(self, run_dir, tmp_path, capsys):
        _, config = run_dir
        assert moras("calibrate", "--config", config, "--seed", 3, "--out", tmp_path) == 0
        saved = json.loads((tmp_path / "config.json").read_text())
        assert saved["seed"] == 3 and saved["out"] == str(tmp_path)


class TestErrors:
    def test_missing_dataset_exits_nonzero(self, tmp_path, capsys):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"data": {"path": str(tmp_path / "absent.mds")},
                                      "out": str(tmp_path / "o")}))
        assert moras("calibrate", "--config", config) != 0
        assert "dataset not found" in capsys.readouterr().err

    def test_search_before_calibrate(self, tmp_path, capsys):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({**TINY, "out": str(tmp_path / "o")}))
        assert moras("search", "--config", config) != 0
        assert "moras calibrate" in capsys.readouterr().err

    def test_bad_config(self, tmp_path, capsys):
        config = tmp_path / "c.json"
        config.write_text('{"evo": {"pop_size": 3}}')
        assert moras("search", "--config", config) != 0
        assert "pop_size" in capsys.readouterr().err

    def test_unknown_stage(self):
        with pytest.raises(SystemExit):
            moras("train")


def test_console_entry_point():
    # the installed `moras` script and `python -m moras.cli` share main()
    proc = subprocess.run([sys.executable, "-m", "moras.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for stage in cli.STAGES:
        assert stage in proc.stdout
