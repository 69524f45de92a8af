import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from crystalopt.cli import (
    ConfigError,
    PROFILES,
    load_run_config,
    main,
    write_csv,
    write_svg_lines,
)

TINY_CONFIG = {
    "seed": 3,
    "profile": "desk",
    "model": {
        "transformer_dim": 32, "n_blocks": 1, "n_heads": 2, "mlp_dim": 32,
        "n_mlp": 1, "n_cliques": 3, "clique_dim": 5, "knot_dim": 1,
        "n_species": 5, "max_atoms": 6,
    },
    "train": {"gradient_steps": 40, "batch_size": 8, "warmup": 10, "val_every": 20},
    "flow": {"n_step": 6},
    "latent_opt": {"design_steps": 8, "n_pert": 4},
    "data": {"n_records": 50},
    "experiment": {
        "n_optimize": 5, "n_reconstruct": 4, "n_pairs": 2, "interp_points": 3,
        "cliques": [0], "n_ablate": 3, "ablate_steps": 4,
        "sweep_decays": [0.0, 0.4], "timing_sizes": [3, 6],
        "timing_design_steps": 3, "timing_n_pert": 2, "timing_flow_steps": 3,
        "timing_batch_capacity": 8,
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CONFIG))
    out = root / "out"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def read_csv(path: Path) -> tuple[list[str], list[list[str]], str]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    assert lines[-1].startswith("# config_hash=")
    rows = [line.split(",") for line in lines[1:-1]]
    return header, rows, lines[-1]


class TestConfig:
    def test_unknown_top_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"not_a_section": 1}))
        with pytest.raises(ConfigError, match="unknown config key"):
            load_run_config(str(path))

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"nonsense_key": 1}}))
        with pytest.raises(ConfigError, match="train.nonsense_key"):
            load_run_config(str(path))

    def test_profile_values(self):
        cfg = load_run_config(None, profile="paper")
        assert cfg.section("model")["transformer_dim"] == 256
        assert cfg.train_config().gradient_steps == 700_000
        assert cfg.es_config().steps == 2000
        assert cfg.es_config().decay == 0.4
        desk = load_run_config(None, profile="desk")
        assert desk.section("model")["transformer_dim"] == 64
        assert desk.train_config().gradient_steps == 20_000

    def test_table_keys_representable(self):
        # Every published hyperparameter key can be set through the config.
        for section, key in [
            ("model", "n_cliques"), ("model", "clique_dim"), ("model", "knot_dim"),
            ("model", "transformer_dim"), ("model", "n_blocks"), ("model", "n_heads"),
            ("model", "n_registers"), ("model", "mlp_dim"), ("model", "n_mlp"),
            ("model", "dropout_rate"), ("train", "gradient_steps"),
            ("train", "alpha_vae"), ("train", "alpha_mse"), ("train", "beta_mse"),
            ("train", "temp_atom"), ("flow", "temp_flow"), ("train", "warmup"),
            ("train", "learning_rate"), ("latent_opt", "algorithm"),
            ("latent_opt", "antithetic"), ("latent_opt", "n_pert"),
            ("latent_opt", "pert_scale"), ("latent_opt", "learning_rate"),
            ("latent_opt", "design_steps"), ("latent_opt", "decay"),
            ("decoding", "n_beam"), ("flow", "w_cfg"), ("flow", "n_step"),
        ]:
            assert key in PROFILES["paper"][section], (section, key)

    def test_cli_seed_overrides_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 5}))
        cfg = load_run_config(str(path), seed=9)
        assert cfg.seed == 9

    def test_config_hash_stable(self):
        a = load_run_config(None, profile="desk").config_hash()
        b = load_run_config(None, profile="desk").config_hash()
        assert a == b

    def test_missing_config_file(self):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config("/nonexistent/path.json")


class TestCommands:
    def test_gen_data_outputs(self, workspace):
        _, out = workspace
        assert (out / "dataset.jsonl").exists()
        header, rows, _ = read_csv(out / "gen_data_stats.csv")
        assert header == ["n", "label_mean", "label_std", "label_min", "label_max"]
        assert int(rows[0][0]) == 50

    def test_train_outputs(self, workspace):
        _, out = workspace
        assert (out / "model.ckpt").exists()
        header, rows, _ = read_csv(out / "val_history.csv")
        assert header == ["step", "val_loss"]
        assert len(rows) == 2  # steps 20 and 40
        log_lines = (out / "train_log.csv").read_text().splitlines()
        assert len(log_lines) == 41

    def test_optimize_outputs(self, workspace):
        cfg_path, out = workspace
        assert main(["optimize", "--config", str(cfg_path), "--out", str(out)]) == 0
        header, rows, _ = read_csv(out / "optimize_results.csv")
        assert header[:3] == ["id", "initial_predicted", "final_predicted"]
        assert len(rows) == 5
        header, rows, _ = read_csv(out / "optimize_trace.csv")
        assert header == ["latent_id", "step", "predicted_value", "latent_norm"]
        assert len(rows) == 5 * 9  # steps + 1 per latent
        assert (out / "optimized_materials.jsonl").exists()

    def test_reconstruct_contract(self, workspace):
        cfg_path, out = workspace
        assert main(["reconstruct", "--config", str(cfg_path), "--out", str(out)]) == 0
        header, rows, _ = read_csv(out / "reconstruct_results.csv")
        assert header == ["omega", "n", "matched", "match_ratio"]
        assert len(rows) == 3
        assert [float(r[0]) for r in rows] == [0.0, 2.0, 4.0]
        for row in rows:
            assert int(row[1]) == 4
        summary = (out / "reconstruct_summary.txt").read_text()
        assert "species_match_ratio" in summary

    def test_timing_contract(self, workspace):
        cfg_path, out = workspace
        assert main(["timing", "--config", str(cfg_path), "--out", str(out)]) == 0
        header, rows, _ = read_csv(out / "timing_results.csv")
        assert header == ["n", "mbo_seconds", "decode_seconds"]
        assert [int(r[0]) for r in rows] == [3, 6]
        for row in rows:
            assert float(row[1]) > 0 and float(row[2]) > 0

    def test_ablate_contract(self, workspace):
        cfg_path, out = workspace
        assert main(["ablate-gradients", "--config", str(cfg_path), "--out", str(out)]) == 0
        header, rows, _ = read_csv(out / "ablate_gradients.csv")
        assert [r[0] for r in rows] == ["BP", "BP+W", "ES", "ES+W"]
        header, rows, _ = read_csv(out / "decay_sweep.csv")
        assert [float(r[0]) for r in rows] == [0.0, 0.4]

    def test_interpolate_contract(self, workspace):
        cfg_path, out = workspace
        assert main(["interpolate", "--config", str(cfg_path), "--out", str(out),
                     "--plots"]) == 0
        header, rows, _ = read_csv(out / "interpolate_results.csv")
        assert header == ["pair", "mode", "clique", "t", "oracle_value", "n_atom"]
        # 2 pairs x (full + 1 clique mode) x 3 points
        assert len(rows) == 2 * 2 * 3
        assert (out / "interpolate_curves.svg").exists()

    def test_eval_contract(self, workspace):
        cfg_path, out = workspace
        assert main(["eval", "--config", str(cfg_path), "--out", str(out)]) == 0
        header, rows, _ = read_csv(out / "eval_results.csv")
        assert [r[0] for r in rows] == ["train", "val", "test"]

    def test_reproducible_csv_bits(self, workspace, tmp_path):
        cfg_path, out = workspace
        out2 = tmp_path / "repeat"
        # re-point the dataset/checkpoint at the shared workspace artifacts
        cfg = json.loads(cfg_path.read_text())
        cfg["data"]["dataset"] = str(out / "dataset.jsonl")
        cfg["data"]["checkpoint"] = str(out / "model.ckpt")
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps(cfg))
        for _ in range(2):
            assert main(["optimize", "--config", str(cfg2), "--out", str(out2)]) == 0
            first = (out2 / "optimize_results.csv").read_bytes()
        assert (out2 / "optimize_results.csv").read_bytes() == first


class TestErrorPaths:
    def test_missing_checkpoint_exit_code_1(self, tmp_path):
        cfg = dict(TINY_CONFIG)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        code = main(["optimize", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_bad_config_exit_code_1(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"bogus_section": {}}))
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "crystalopt.cli", "--help"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "gen-data" in proc.stdout


class TestHelpers:
    def test_csv_round_trip_floats(self, tmp_path):
        path = tmp_path / "x.csv"
        value = 0.1234567890123456789
        write_csv(path, ["a"], [[value]], "deadbeef")
        _, rows, trailer = read_csv(path)
        assert float(rows[0][0]) == value
        assert trailer == "# config_hash=deadbeef"

    def test_svg_writer(self, tmp_path):
        path = tmp_path / "chart.svg"
        write_svg_lines(path, {"s": [1.0, 2.0, 1.5]}, "title")
        text = path.read_text()
        assert text.startswith("<svg") and "polyline" in text
