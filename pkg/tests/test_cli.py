import json

import pytest

from fsail.cli import SWEEPS, base_dir, incremental_dir, main, similarity_split
from fsail.config import ConfigError, ExperimentConfig
from fsail.env import default_catalog, read_demo_set

TINY = {
    "seeds": [0],
    "schedule": {"q": 1, "base_demos": 2, "eval_episodes": 2},
    "train": {"base_epochs": 1, "stage2_epochs": 1, "fewshot_epoch_scale": 1},
    "model": {"width": 8, "layers": 1, "heads": 2, "ff_dim": 16, "n_prompts": 2},
}


def write_config(tmp_path, **over):
    raw = json.loads(json.dumps(TINY))
    raw.update({"data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "runs")})
    for k, v in over.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    """Tiny config with demonstrations and topic + naive runs already on disk."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["generate-data", "--config", str(cfg)]) == 0
    assert main(["run", "--config", str(cfg), "--method", "topic"]) == 0
    assert main(["run", "--config", str(cfg), "--method", "naive"]) == 0
    return tmp, cfg


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.method == "topic"
        assert cfg.schedule.base_demos == 300 and cfg.schedule.q == 1
        assert len(cfg.catalog().base) == 10

    @pytest.mark.parametrize("raw", [
        {"bogus": 1},
        {"train": {"lamda1": 0.2}},
        {"model": {"depth": 3}},
        {"schedule": {"shots": 5}},
        {"env": {"size": 9}},
    ])
    def test_unknown_keys_rejected(self, raw):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_invalid_values_rejected_at_load(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"method": "ewc"}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"schedule": {"n_base_tasks": 11}})

    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig.load(write_config(tmp_path))
        cfg.save(tmp_path / "again.json")
        assert ExperimentConfig.load(tmp_path / "again.json") == cfg

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "c.json")

    def test_model_follows_env(self):
        cfg = ExperimentConfig.from_dict({"env": {"grid": 10}})
        assert cfg.model_config().grid == 10 and cfg.model_config().n_logits == 10 + 10 + 3 + 4 + 2


class TestGenerateData:
    def test_counts(self, prepared):
        tmp, _ = prepared
        _, _, manifest, demos = read_demo_set(base_dir(tmp / "data", 0))
        assert len(demos) == 10 * 2 and manifest["demos_per_task"] == 2
        _, _, _, inc = read_demo_set(incremental_dir(tmp / "data", 0, 1))
        assert sorted(d.task_id for d in inc) == sorted(t.task_id for t in default_catalog().incremental)

    def test_refuses_to_overwrite(self, prepared, capsys):
        _, cfg = prepared
        assert main(["generate-data", "--config", str(cfg)]) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_rewrites_identically(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["generate-data", "--config", str(cfg)]) == 0
        path = base_dir(tmp_path / "data", 0) / "demos.jsonl"
        first = path.read_bytes()
        assert main(["generate-data", "--config", str(cfg), "--force"]) == 0
        assert path.read_bytes() == first

    def test_q_flag(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["generate-data", "--config", str(cfg), "--q", "5"]) == 0
        _, _, _, inc = read_demo_set(incremental_dir(tmp_path / "data", 0, 5))
        assert len(inc) == 5 * 5
        assert {sum(d.task_id == t for d in inc) for t in {d.task_id for d in inc}} == {5}


class TestRun:
    def test_outputs(self, prepared):
        tmp, _ = prepared
        d = tmp / "runs" / "topic_seed0"
        summary = json.loads((d / "summary.json").read_text())
        assert len(summary["reports"]) == 6
        assert len(list((d / "sessions").glob("session_*.json"))) == 5
        assert (d / "graph.json").exists()
        echoed = json.loads((d / "config.json").read_text())
        assert echoed["train"]["method"] == "topic" and echoed["seeds"] == [0]

    def test_invalid_method_is_usage_error(self, prepared):
        _, cfg = prepared
        assert main(["run", "--config", str(cfg), "--method", "ewc"]) == 2

    def test_missing_data_names_stage(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "base-session" in err and "generate-data" in err

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_rerun_resumes_identically(self, prepared):
        tmp, cfg = prepared
        before = (tmp / "runs" / "naive_seed0" / "summary.json").read_text()
        assert main(["run", "--config", str(cfg), "--method", "naive"]) == 0
        assert (tmp / "runs" / "naive_seed0" / "summary.json").read_text() == before


class TestReport:
    def test_comparison_table(self, prepared, capsys):
        tmp, _ = prepared
        runs = [str(tmp / "runs" / "topic_seed0"), str(tmp / "runs" / "naive_seed0")]
        capsys.readouterr()
        assert main(["report", *runs, "--out", str(tmp / "report")]) == 0
        out = capsys.readouterr().out
        assert "Final Improv." in out and "prompt similarity" in out
        topic = json.loads((tmp / "runs" / "topic_seed0" / "summary.json").read_text())
        naive = json.loads((tmp / "runs" / "naive_seed0" / "summary.json").read_text())

        def avg(rec):
            return sum(r["average"] for r in rec["reports"]) / len(rec["reports"])

        row = next(l for l in out.splitlines() if l.startswith("topic"))
        assert row.split()[-1] == f"{100 * (avg(topic) - avg(naive)):+.1f}"
        curve = (tmp / "report" / "session_curve.csv").read_text().splitlines()
        assert curve[0] == "session,naive,topic" and len(curve) == 7
        sim = (tmp / "report" / "similarity_topic_seed0.csv").read_text().splitlines()
        assert len(sim) == 16 and len(sim[0].split(",")) == 16

    def test_single_run(self, prepared, capsys):
        tmp, _ = prepared
        capsys.readouterr()
        assert main(["report", str(tmp / "runs" / "naive_seed0")]) == 0
        assert "Final Improv." not in capsys.readouterr().out

    def test_incompatible_schedules(self, prepared, tmp_path):
        tmp, _ = prepared
        other = tmp_path / "other"
        other.mkdir()
        rec = json.loads((tmp / "runs" / "naive_seed0" / "summary.json").read_text())
        rec["schedule"]["q"] = 5
        (other / "summary.json").write_text(json.dumps(rec))
        assert main(["report", str(tmp / "runs" / "topic_seed0"), str(other)]) == 1

    def test_missing_run(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 1

    def test_similarity_split(self):
        tasks = {t.task_id: t for t in default_catalog().all()}
        ids = ["reach_red_cube", "reach_yellow_cube", "press_green_button"]
        split = similarity_split({"task_ids": ids, "matrix": [[1, 0.9, 0.1], [0.9, 1, 0.3], [0.1, 0.3, 1]]},
                                 tasks)
        assert split["related_pairs"] == 1 and split["related_mean"] == 0.9
        assert split["disjoint_mean"] == pytest.approx(0.2)


class TestAblate:
    def test_grids(self):
        assert [p["train"]["lam1"] for p in SWEEPS["lambda"]] == [0.1, 0.2, 0.3, 0.4, 0.5]
        assert [p["train"]["lam2"] for p in SWEEPS["lambda"]] == [0.9, 0.8, 0.7, 0.6, 0.5]
        assert [p["model"]["n_prompts"] for p in SWEEPS["prompts"]] == [1, 3, 5, 7, 9]
        assert len(SWEEPS["projection"]) == 4
        assert [p["schedule"]["n_base_tasks"] for p in SWEEPS["base-tasks"]] == [0, 2, 4, 6, 8, 10]

    def test_lambda_sweep(self, prepared, capsys):
        tmp, cfg = prepared
        capsys.readouterr()
        assert main(["ablate", "--config", str(cfg), "--sweep", "lambda"]) == 0
        rows = (tmp / "runs" / "lambda" / "sweep_summary.csv").read_text().splitlines()
        assert len(rows) == 1 + 5
        assert "lam1=0.1,lam2=0.9" in rows[1]

    def test_base_task_sweep_includes_zero(self, prepared, monkeypatch):
        tmp, cfg = prepared
        monkeypatch.setenv("FSAIL_WORKERS", "2")
        assert main(["ablate", "--config", str(cfg), "--sweep", "base-tasks"]) == 0
        rows = (tmp / "runs" / "base-tasks" / "sweep_summary.csv").read_text().splitlines()
        assert len(rows) == 7 and rows[1].startswith("base-tasks,n_base_tasks=0,")

    def test_unknown_sweep(self, prepared):
        _, cfg = prepared
        assert main(["ablate", "--config", str(cfg), "--sweep", "depth"]) == 2
