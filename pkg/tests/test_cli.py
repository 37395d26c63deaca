from __future__ import annotations

import re

import pytest

from waynav import cli
from waynav.evalsuite import OfflineResult

TINY_CONFIG = """\
[world]
seed = 5
train = 1
val = 1
test = 1
corners = 4
long_corners = 0
min_edge = 5
max_edge = 6

[dataset]
laps_train = 2
laps_val = 2
laps_test = 2

[detector]
backbone_seed = 11
init_seed = 3

[trainer]
seed = 1
phase1_iterations = 3
phase1_batch_episodes = 2
phase2_iterations = 3
phase2_batch_episodes = 2
ablation_phase1_iterations = 2
ablation_phase2_iterations = 2

[controller]
seed = 2
backbone_seed = 21
init_seed = 9
epochs = 2

[eval]
seed = 3
corruption_seed = 4
repeats = 1
"""


@pytest.fixture()
def tiny_cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


class TestConfig:
    def test_builtin_defaults_load(self):
        cfg = cli.load_config(None)
        assert cfg.get("world", "seed") == 7
        assert cfg.get("detector", "metric") == "sym_mahalanobis"
        assert cfg.get("trainer", "phase2_iterations") == 1500
        assert cfg.get("eval", "threshold") == 0.0

    def test_user_config_overrides_defaults(self, tiny_cfg_path):
        cfg = cli.load_config(str(tiny_cfg_path))
        assert cfg.get("world", "corners") == 4
        # untouched non-seed keys keep their defaults
        assert cfg.get("detector", "feature_dim") == 128
        assert cfg.get("controller", "lr") == pytest.approx(1e-4)

    def test_master_seed_fans_out(self):
        cfg = cli.load_config(None, master_seed=42)
        assert cfg.get("world", "seed") == 42
        assert cfg.get("detector", "backbone_seed") == 142
        assert cfg.get("eval", "corruption_seed") == 842
        seeds = [cfg.get(s, k) for s, k in cli._SEED_KEYS]
        assert len(set(seeds)) == len(seeds)

    def test_set_override(self):
        cfg = cli.load_config(None, overrides=["trainer.phase1_lr=5e-4", "world.corners=6"])
        assert cfg.get("trainer", "phase1_lr") == pytest.approx(5e-4)
        assert cfg.get("world", "corners") == 6

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[world]\nseeed = 1\n")
        with pytest.raises(cli.CliError, match="unknown config key"):
            cli.load_config(str(bad))
        with pytest.raises(cli.CliError, match="unknown config key worlds.seed"):
            cli.load_config(None, overrides=["worlds.seed=1"])
        sectioned = tmp_path / "sectioned.cfg"
        sectioned.write_text("[worlds]\nseed = 1\n")
        with pytest.raises(cli.CliError, match="unknown config section"):
            cli.load_config(str(sectioned))
        with pytest.raises(cli.CliError, match="section.key=value"):
            cli.load_config(None, overrides=["world.seed"])

    def test_unparsable_value_rejected(self):
        with pytest.raises(cli.CliError, match="cannot parse"):
            cli.load_config(None, overrides=["world.corners=eight"])

    def test_seeds_are_mandatory_in_user_configs(self, tmp_path):
        partial = tmp_path / "partial.cfg"
        partial.write_text("[world]\nseed = 1\ncorners = 4\n")
        with pytest.raises(cli.CliError, match="seeds are never defaulted"):
            cli.load_config(str(partial))
        # a master seed satisfies the requirement
        cfg = cli.load_config(str(partial), master_seed=9)
        assert cfg.get("world", "seed") == 9

    def test_validation_rules(self):
        with pytest.raises(cli.CliError, match="n_query"):
            cli.load_config(None, overrides=["navigator.n_query=8"])
        with pytest.raises(cli.CliError, match="between 2 and 8"):
            cli.load_config(None, overrides=["dataset.laps_train=1"])
        with pytest.raises(cli.CliError, match="threshold"):
            cli.load_config(None, overrides=["eval.threshold=1.5"])
        with pytest.raises(cli.CliError, match="metric"):
            cli.load_config(None, overrides=["detector.metric=cosine"])

    def test_resolved_text_round_trips(self, tiny_cfg_path, tmp_path):
        cfg = cli.load_config(str(tiny_cfg_path))
        resolved = tmp_path / "resolved.cfg"
        resolved.write_text(cfg.text())
        again = cli.load_config(str(resolved))
        assert again.values == cfg.values
        assert again.text() == cfg.text()


class TestCommandPlumbing:
    def test_unknown_command_is_usage_error(self, capsys):
        assert cli.run(["frobnicate"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert cli.run(["--help"]) == 0
        capsys.readouterr()

    def test_missing_data_has_actionable_message(self, tiny_cfg_path, tmp_path, capsys):
        code = cli.run(
            ["train-detector", "--config", str(tiny_cfg_path), "--out", str(tmp_path / "out")]
        )
        assert code == cli.EXIT_ERROR
        assert "waynav collect" in capsys.readouterr().err

    def test_missing_checkpoint_has_actionable_message(self, tiny_cfg_path, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(cli, "_open_dataset", lambda cfg, layout, worlds: None)
        code = cli.run(
            ["eval-offline", "--config", str(tiny_cfg_path), "--out", str(tmp_path / "out")]
        )
        assert code == cli.EXIT_ERROR
        assert "waynav train-detector" in capsys.readouterr().err

    def test_bad_jobs_rejected(self, tiny_cfg_path, tmp_path, capsys):
        code = cli.run(
            ["gen-world", "--config", str(tiny_cfg_path), "--out", str(tmp_path), "--jobs", "0"]
        )
        assert code == cli.EXIT_ERROR
        capsys.readouterr()


class TestGenWorld:
    def test_writes_reports_and_resolved_config(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.run(["gen-world", "--config", str(tiny_cfg_path), "--out", str(out)])
        captured = capsys.readouterr()
        assert code == cli.EXIT_OK
        assert (out / "resolved.cfg").is_file()
        assert (out / "reports" / "worlds.csv").is_file()
        assert (out / "reports" / "worlds.txt").is_file()
        # logs are timestamped on stderr; reports carry no timestamps
        assert re.search(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z gen-world", captured.err)
        report = (out / "reports" / "worlds.csv").read_text()
        assert not re.search(r"\d{4}-\d{2}-\d{2}T", report)
        # one ccw and one cw course per world, three worlds
        assert report.count("waypoints") == 6

    def test_resolved_config_is_loadable(self, tiny_cfg_path, tmp_path):
        out = tmp_path / "out"
        assert cli.run(["gen-world", "--config", str(tiny_cfg_path), "--out", str(out)]) == 0
        cfg = cli.load_config(str(out / "resolved.cfg"))
        assert cfg.get("world", "corners") == 4


class TestCollect:
    def test_collect_writes_expected_laps(self, tiny_cfg_path, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.run(["collect", "--config", str(tiny_cfg_path), "--out", str(out)])
        capsys.readouterr()
        assert code == cli.EXIT_OK
        course_dirs = sorted(p.name for p in (out / "data").iterdir())
        assert course_dirs == sorted(
            f"{w}{i}_{d}" for w in ("train", "val", "test") for i in (0,) for d in ("ccw", "cw")
        )
        for course_dir in (out / "data").iterdir():
            manifests = sorted(p.name for p in course_dir.glob("*.manifest"))
            assert manifests == ["lap00.manifest", "lap01.manifest"]

    def test_collect_is_deterministic(self, tiny_cfg_path, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.run(["collect", "--config", str(tiny_cfg_path), "--out", str(out)]) == 0
            outs.append(out)
        capsys.readouterr()
        course = "train0_ccw"
        for fname in ("lap00.manifest", "lap00.rasters"):
            a = (outs[0] / "data" / course / fname).read_bytes()
            b = (outs[1] / "data" / course / fname).read_bytes()
            assert a == b


class TestGates:
    def _stub_pipeline(self, monkeypatch, accuracy):
        rows = [
            {
                "course": "t0_ccw", "memory_lap": "lap00", "test_lap": "lap01",
                "accuracy": accuracy, "false_pos": 0, "false_neg": 0,
            }
        ]
        monkeypatch.setattr(cli, "_worlds", lambda cfg: [])
        monkeypatch.setattr(cli, "_open_dataset", lambda cfg, layout, worlds: None)
        monkeypatch.setattr(cli, "_load_detector", lambda layout: None)
        monkeypatch.setattr(cli, "_resolve_threshold", lambda cfg, p, d, cache=None: 0.5)
        monkeypatch.setattr(cli.ev, "eval_offline", lambda *a, **k: OfflineResult(rows))

    def test_offline_gate_violation_exits_nonzero(self, monkeypatch, tmp_path, capsys):
        self._stub_pipeline(monkeypatch, accuracy=0.6)
        code = cli.run(
            ["eval-offline", "--out", str(tmp_path), "--set", "eval.min_offline_accuracy=0.9"]
        )
        capsys.readouterr()
        assert code == cli.EXIT_GATE

    def test_offline_gate_pass_exits_zero(self, monkeypatch, tmp_path, capsys):
        self._stub_pipeline(monkeypatch, accuracy=0.95)
        code = cli.run(
            ["eval-offline", "--out", str(tmp_path), "--set", "eval.min_offline_accuracy=0.9"]
        )
        capsys.readouterr()
        assert code == cli.EXIT_OK
        assert (tmp_path / "reports" / "offline.csv").is_file()
