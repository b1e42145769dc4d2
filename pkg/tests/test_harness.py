import csv
import json

import numpy as np
import pytest

from moras import data as D
from moras import harness as H
from moras.attacks import ATTACK_KINDS, AttackKind, default_attack_configs
from moras.errors import ConfigError
from moras.harness import DataConfig, RunConfig
from moras.moea import EvoConfig
from moras.training import TrainConfig

TINY = {
    "data": {"synthetic": {"n_per_class": 12, "classes": 3}},
    "channels": 4,
    "cells_per_phase": 1,
    "evo": {"pop_size": 4, "generations": 3},
    "search_train": {"epochs": 1, "batch_size": 8},
    "final_train": {"epochs": 1, "batch_size": 8},
    "calibration_random": 0,
}


def tiny_config(out, **changes) -> RunConfig:
    return RunConfig.from_dict({**TINY, "out": str(out), **changes})


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    """One tiny run taken through calibrate, search, retrain and report."""
    cfg = tiny_config(tmp_path_factory.mktemp("run"))
    H.cmd_calibrate(cfg)
    archive = H.cmd_search(cfg)
    rows = H.cmd_retrain(cfg)
    H.cmd_report(cfg.out_dir)
    return cfg, archive, rows


def read(path):
    return path.read_bytes()


class TestRunConfig:
    def test_defaults_are_desk_sized(self):
        cfg = RunConfig()
        assert (cfg.evo.pop_size, cfg.evo.generations) == (8, 10)
        assert (cfg.channels, cfg.cells_per_phase) == (8, 2)
        assert (cfg.search_train.epochs, cfg.search_train.batch_size) == (8, 32)
        assert cfg.final_train.epochs == 20

    def test_json_roundtrip(self, tmp_path):
        cfg = tiny_config(tmp_path, attacks={"pgd": {"iterations": 3}})
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.load(path) == cfg

    def test_partial_final_train_keeps_its_own_defaults(self):
        cfg = RunConfig.from_dict({"final_train": {"batch_size": 16}})
        assert cfg.final_train.epochs == 20 and cfg.final_train.batch_size == 16

    def test_attack_overrides(self):
        cfg = RunConfig(attacks={"bim": {"alpha": 0.01, "iterations": 3}})
        bim = cfg.attack_configs()[AttackKind.BIM]
        assert (bim.alpha, bim.iterations, bim.epsilon) == (0.01, 3, 8 / 255)
        assert cfg.attack_configs()[AttackKind.PGD] == default_attack_configs()[AttackKind.PGD]

    @pytest.mark.parametrize("bad", [
        {"nonsense": 1},
        {"threads": 0},
        {"objective2": "both"},
        {"attacks": {"pgd": {"steps": 3}}},
        {"attacks": {"cw": {}}},
        {"evo": {"pop_size": 3}},
        {"search_train": {"epochs": 0}},
        {"data": {"fractions": [1, 1]}},
        {"evo": {"popsize": 4}},
    ])
    def test_invalid_configs_fail_before_compute(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)

    def test_unreadable_files(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            RunConfig.load(tmp_path / "bad.json")

    def test_overrides(self):
        cfg = RunConfig().with_overrides(seed=3, threads=2, out="x")
        assert (cfg.seed, cfg.threads, cfg.out) == (3, 2, "x")
        assert H._evo(cfg).seed == 3


class TestData:
    def test_missing_dataset(self, tmp_path):
        cfg = RunConfig(data=DataConfig(path=str(tmp_path / "nope.mds")))
        with pytest.raises(ConfigError, match="dataset not found"):
            H.load_splits(cfg)

    def test_file_dataset(self, tmp_path):
        ds = D.generate_synthetic(D.SyntheticSpec(n_per_class=10, classes=3), 0)
        D.save(ds, tmp_path / "d.mds")
        cfg = RunConfig(data=DataConfig(path=str(tmp_path / "d.mds")))
        splits = H.load_splits(cfg)
        assert len(splits.train) + len(splits.val) + len(splits.test) == 30


class TestCalibrate:
    def test_stats_file(self, finished_run):
        cfg, *_ = finished_run
        stats = json.loads((cfg.out_dir / "calibration" / "stats.json").read_text())
        assert sorted(stats["attacks"]) == sorted(k.name for k in ATTACK_KINDS)
        assert len(stats["baselines"]) == 4
        assert (cfg.out_dir / "calibration" / "substitute.npz").exists()

    def test_rerun_is_identical(self, finished_run, tmp_path):
        cfg, *_ = finished_run
        again = tiny_config(tmp_path)
        H.cmd_calibrate(again)
        for name in ("stats.json", "substitute.npz", "baselines.json"):
            assert read(cfg.out_dir / "calibration" / name) == read(tmp_path / "calibration" / name)

    def test_search_without_calibration(self, tmp_path):
        with pytest.raises(ConfigError, match="moras calibrate"):
            H.cmd_search(tiny_config(tmp_path))


class TestSearch:
    def test_archive_is_nondominated(self, finished_run):
        cfg, archive, _ = finished_run
        assert archive and H.archive_is_nondominated(archive)
        saved = H.load_archive(cfg)
        assert [a.objectives for a in saved] == [a.objectives for a in archive]
        entry = json.loads((cfg.out_dir / "search" / "archive.json").read_text())[0]
        assert {"normal", "reduction", "genome", "objectives"} <= set(entry)

    def test_budget_is_pop_times_generations(self, finished_run):
        cfg, *_ = finished_run
        snaps = H._read_snapshots(cfg.out_dir)
        assert len(snaps) == cfg.evo.generations
        assert sum(len(s["evaluated"]) for s in snaps) == cfg.evo.pop_size * cfg.evo.generations

    def test_frozen_hv_is_monotone(self, finished_run):
        cfg, *_ = finished_run
        hv = [s["hv_archive_frozen"] for s in H._read_snapshots(cfg.out_dir)]
        assert all(b >= a for a, b in zip(hv, hv[1:]))

    def test_interrupted_run_resumes_bit_identically(self, finished_run, tmp_path):
        cfg, *_ = finished_run
        resumed = tiny_config(tmp_path, calibration_dir=str(cfg.out_dir / "calibration"))
        H.cmd_search(resumed, stop_after=0)
        assert not (tmp_path / "search" / "archive.json").exists()
        # a half-written snapshot line from a crash must not survive the resume
        with open(tmp_path / "search" / "snapshots.jsonl", "a") as fh:
            fh.write('{"generation": 1, "trunc')
        H.cmd_search(resumed)
        for name in ("archive.json", "snapshots.jsonl"):
            assert read(tmp_path / "search" / name) == read(cfg.out_dir / "search" / name)

    def test_resume_rejects_other_config(self, finished_run, tmp_path):
        cfg, *_ = finished_run
        cal = str(cfg.out_dir / "calibration")
        H.cmd_search(tiny_config(tmp_path, calibration_dir=cal), stop_after=0)
        with pytest.raises(ConfigError, match="different configuration"):
            H.cmd_search(tiny_config(tmp_path, calibration_dir=cal, seed=5))

    def test_thread_count_does_not_change_results(self, finished_run, tmp_path):
        cfg, *_ = finished_run
        two = tiny_config(tmp_path, threads=2, calibration_dir=str(cfg.out_dir / "calibration"))
        H.cmd_search(two)
        assert read(tmp_path / "search" / "archive.json") == \
            read(cfg.out_dir / "search" / "archive.json")


class TestRetrain:
    def test_one_row_per_archive_member(self, finished_run):
        cfg, archive, rows = finished_run
        assert [r["model"] for r in rows] == [f"moras-{a.id}" for a in archive]
        with open(cfg.out_dir / "retrain" / "results.csv") as fh:
            assert len(list(csv.DictReader(fh))) == len(archive)
        md = (cfg.out_dir / "retrain" / "results.md").read_text()
        assert md.startswith(H.RETRAIN_HEADER)
        for a in archive:
            assert (cfg.out_dir / "retrain" / f"model_{a.id}.npz").exists()

    def test_rerun_is_deterministic(self, finished_run):
        cfg, _, rows = finished_run
        before = read(cfg.out_dir / "retrain" / "results.json")
        assert H.cmd_retrain(cfg) == rows
        assert read(cfg.out_dir / "retrain" / "results.json") == before

    def test_needs_finished_search(self, tmp_path):
        with pytest.raises(ConfigError, match="moras search"):
            H.cmd_retrain(tiny_config(tmp_path))


@pytest.fixture(scope="module")
def model_path(finished_run):
    cfg, archive, _ = finished_run
    return cfg.out_dir / "retrain" / f"model_{archive[0].id}.npz"


class TestAttackEval:
    @pytest.mark.parametrize("kind", [k for k in ATTACK_KINDS if k is not AttackKind.BLK_FGSM])
    def test_budget_and_determinism(self, finished_run, model_path, kind):
        cfg, *_ = finished_run
        test = H.load_splits(cfg).test
        attack = default_attack_configs(seed=1)[kind]
        a = H.cmd_attack_eval(model_path, test, attack)
        assert a["max_linf"] <= attack.epsilon + 1e-6 and a["samples"] == len(test)
        assert H.cmd_attack_eval(model_path, test, attack) == a

    def test_bim_one_step_equals_fgsm(self, finished_run, model_path, tmp_path):
        from moras.attacks import AttackConfig
        test = H.load_splits(finished_run[0]).test
        eps = 8 / 255
        H.cmd_attack_eval(model_path, test, AttackConfig(AttackKind.BIM, eps, eps, 1),
                          export=str(tmp_path / "bim.mds"))
        H.cmd_attack_eval(model_path, test, AttackConfig(AttackKind.FGSM, eps),
                          export=str(tmp_path / "fgsm.mds"))
        assert read(tmp_path / "bim.mds") == read(tmp_path / "fgsm.mds")

    def test_export_roundtrips(self, finished_run, model_path, tmp_path):
        cfg, *_ = finished_run
        _, substitute = H.load_calibration(cfg)
        test = H.load_splits(cfg).test
        attack = default_attack_configs()[AttackKind.BLK_FGSM]
        H.cmd_attack_eval(model_path, test, attack, substitute, str(tmp_path / "a.mds"))
        adv = D.load(tmp_path / "a.mds")
        assert np.array_equal(adv.labels, test.labels)
        # 8-bit export: at most one quantization level beyond the budget
        assert np.abs(adv.images - test.images).max() <= attack.epsilon + 1 / 255


class TestReport:
    def test_hv_rows_per_generation(self, finished_run):
        cfg, *_ = finished_run
        with open(cfg.out_dir / "report" / "hv.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["generation"]) for r in rows] == list(range(cfg.evo.generations))
        assert {"hv_population", "hv_archive", "hv_archive_frozen"} <= set(rows[0])

    def test_front_has_first_and_last_generation(self, finished_run):
        cfg, *_ = finished_run
        with open(cfg.out_dir / "report" / "front.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["which"] for r in rows} == {"first", "last"}
        assert {int(r["generation"]) for r in rows} == {0, cfg.evo.generations - 1}

    def test_idempotent(self, finished_run):
        cfg, *_ = finished_run
        out = cfg.out_dir / "report"
        before = {p.name: read(p) for p in out.iterdir()}
        H.cmd_report(cfg.out_dir)
        assert {p.name: read(p) for p in out.iterdir()} == before
        assert "## Retrained models" in (out / "report.md").read_text()

    def test_manifest_lists_hashes(self, finished_run):
        cfg, *_ = finished_run
        manifest = json.loads((cfg.out_dir / H.MANIFEST).read_text())["artifacts"]
        assert "search/archive.json" in manifest and "report/hv.csv" in manifest
        assert manifest["config.json"] == H._sha256(cfg.out_dir / "config.json")


def test_evo_and_train_configs_live_in_run_config():
    cfg = RunConfig(evo=EvoConfig(pop_size=4), search_train=TrainConfig(epochs=2))
    back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.evo.pop_size == 4 and back.search_train.epochs == 2
