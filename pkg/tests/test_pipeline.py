import json
from pathlib import Path

import pytest

from cfkit.backends.synthetic import generate_dataset
from cfkit.evaluation import EvalReport
from cfkit.params import load_parameters
from cfkit.pipeline import (
    DEFAULT_CONFIG,
    RunManifest,
    apply_dotted_overrides,
    config_hash,
    load_config,
    merge_config,
    run_reinforcement,
    run_stress_test,
)
from cfkit.types import CfkitError


class TestConfig:
    def test_merge_is_deep(self):
        out = merge_config({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"c": 9}, "e": 4})
        assert out == {"a": {"b": 1, "c": 9}, "d": 3, "e": 4}

    def test_load_config_defaults_and_file(self, tmp_path):
        assert load_config() == DEFAULT_CONFIG
        cfg_file = tmp_path / "cfg.yaml"
        cfg_file.write_text("train:\n  alpha: 0.7\n")
        cfg = load_config(cfg_file)
        assert cfg["train"]["alpha"] == 0.7
        assert cfg["train"]["batch_size"] == DEFAULT_CONFIG["train"]["batch_size"]

    def test_dotted_overrides_parse_yaml_scalars(self):
        cfg = apply_dotted_overrides(DEFAULT_CONFIG, ["train.alpha=0.5", "stress.jobs=4"])
        assert cfg["train"]["alpha"] == 0.5
        assert cfg["stress"]["jobs"] == 4
        assert DEFAULT_CONFIG["train"]["alpha"] == 0.3  # original untouched

    def test_dotted_override_requires_equals(self):
        with pytest.raises(ValueError):
            apply_dotted_overrides(DEFAULT_CONFIG, ["train.alpha"])

    def test_config_hash_is_stable_and_sensitive(self):
        h1 = config_hash({"b": 2, "a": 1})
        h2 = config_hash({"a": 1, "b": 2})
        h3 = config_hash({"a": 1, "b": 3})
        assert h1 == h2
        assert h1 != h3
        assert len(h1) == 64


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a fast config; stress test already run once."""
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    generate_dataset(data, seed=0, n_classes=16, n_focus=2,
                     n_per_class=4, n_pretrain_per_class=4)
    config = load_config(overrides={
        "dataset_dir": str(data),
        "run_root": str(root / "runs"),
        "classifier_pretrain": {"epochs": 120, "lr": 0.01},
        "backends": {"generator": {"num_steps": 10}},
        "stress": {"inversion_steps": 10, "tau_grid": [0.3, 0.6, 0.9]},
        "train": {"learning_rate": 0.05, "max_epochs": 6, "min_delta": 0.0},
        "reinforce": {"eval_manifests": ["ood.jsonl"]},
    })
    T_prime, report, manifest = run_stress_test(config)
    return {"root": root, "config": config, "T_prime": T_prime,
            "report": report, "manifest": manifest}


class TestStressRun:
    def test_run_dir_and_artifacts(self, workspace):
        manifest = workspace["manifest"]
        chash = config_hash(workspace["config"])
        assert manifest.run_id == f"stress-{chash[:8]}-000"
        for key in ("captions", "edits", "counterfactuals", "report"):
            assert Path(manifest.artifact_paths[key]).exists()
        assert manifest.stage == "stress_test"
        assert len(manifest.backend_descriptors) == 6

    def test_counts_consistent(self, workspace):
        manifest = workspace["manifest"]
        assert manifest.counts["T"] == 8
        assert manifest.counts["T_prime"] == len(workspace["T_prime"])
        assert manifest.counts["T_prime"] >= 1
        assert manifest.counts["edits_accepted"] <= manifest.counts["edits_total"]

    def test_report_exposes_weakness(self, workspace):
        report = workspace["report"]
        assert set(report.per_class)  # at least one focus class present
        assert report.set_sizes["T"] == 8
        # The planted background bias must show up as an accuracy drop.
        assert any(row["delta"] < 0 for row in report.per_class.values())
        assert "background" in report.per_factor

    def test_report_round_trips_from_disk(self, workspace):
        path = workspace["manifest"].artifact_paths["report"]
        loaded = EvalReport.from_json(Path(path).read_text())
        assert loaded.to_dict() == workspace["report"].to_dict()

    def test_manifest_round_trips(self, workspace):
        run_dir = Path(workspace["config"]["run_root"]) / workspace["manifest"].run_id
        loaded = RunManifest.load(run_dir / "manifest.json")
        assert loaded.run_id == workspace["manifest"].run_id
        assert loaded.config_hash == workspace["manifest"].config_hash

    def test_second_run_gets_next_sequence_and_identical_report(self, workspace):
        _, report2, manifest2 = run_stress_test(workspace["config"])
        assert manifest2.run_id.endswith("-001")
        first = Path(workspace["manifest"].artifact_paths["report"]).read_bytes()
        second = Path(manifest2.artifact_paths["report"]).read_bytes()
        assert first == second

    def test_parallel_jobs_match_serial(self, workspace):
        config = merge_config(workspace["config"], {"stress": {"jobs": 2}})
        _, report, _ = run_stress_test(config)
        serial = workspace["report"].to_dict()
        parallel = report.to_dict()
        assert parallel["per_class"] == serial["per_class"]
        assert parallel["per_factor"] == serial["per_factor"]

    def test_caption_cache_file_written(self, workspace):
        config = merge_config(workspace["config"], {"stress": {"cache_captions": True}})
        run_stress_test(config)
        cache_dir = Path(config["run_root"]) / ".cache"
        assert list(cache_dir.glob("captions-*.json"))

    def test_no_factors_rejected(self, workspace):
        config = merge_config(workspace["config"], {"stress": {"factors": []}})
        with pytest.raises(ValueError):
            run_stress_test(config)


class TestReinforceRun:
    def test_full_stage_two(self, workspace):
        manifest = run_reinforcement(workspace["manifest"].run_id, workspace["config"])
        assert manifest.stage == "reinforce"
        assert manifest.counts["cf_train"] >= 1
        assert manifest.counts["cf_val"] >= 1
        assert manifest.counts["epochs_run"] >= 1

        params_dir = Path(manifest.artifact_paths["parameters"])
        baseline = load_parameters(params_dir / "baseline")
        blended = load_parameters(params_dir / "blended")
        assert baseline.same_structure(blended)

        comp_path = Path(manifest.artifact_paths["comparisons"]["ood"])
        comp = json.loads(comp_path.read_text())
        assert comp["arms"] == ["baseline", "standard", "counterfactual"]
        assert set(comp["overall"]) == set(comp["arms"])
        assert comp_path.with_suffix(".csv").exists()

    def test_missing_stress_run_rejected(self, workspace):
        with pytest.raises(CfkitError):
            run_reinforcement("stress-deadbeef-000", workspace["config"])
