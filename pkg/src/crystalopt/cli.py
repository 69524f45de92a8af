"""Operator entry points: dataset generation, training, latent optimization,
reconstruction, interpolation, gradient ablations, timing, and evaluation.

Every command reads one canonical-JSON config (unknown keys rejected), is
reproducible bit-for-bit from (config, seed) in single-threaded mode, and
writes CSV results (header row first, trailing comment line with the config
hash) plus a plain-text summary into the output directory. Exit code 1
signals config/file errors; exit code 2 signals runtime numeric failures.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from crystalopt.atom_decoder import DecoderConfig
from crystalopt.cliques import CliqueShape
from crystalopt.core import (
    InvariantError,
    MaterialRecord,
    RecordParseError,
    Vocab,
    read_records,
    write_records,
)
from crystalopt.flow import FlowConfig, NonFiniteStateError
from crystalopt.mbo import (
    ESConfig,
    NonFiniteSurrogateError,
    discover,
    interpolate_clique,
    interpolate_latent,
    optimize,
    top_k_filter,
)
from crystalopt.model import CrystalModel, ModelConfig, build_model, materials_match
from crystalopt.nn import TransformerConfig
from crystalopt.trainer import (
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    split_records,
    train,
)
from crystalopt.toy import (
    OracleSpec,
    default_length_prior,
    default_weights,
    generate_dataset,
    oracle,
)


class ConfigError(ValueError):
    """Bad run configuration (unknown key, invalid value, missing file)."""


# ---------------------------------------------------------------------------
# Configuration. Keys mirror the published hyperparameter table; ``desk`` is
# the reduced profile every test uses, ``paper`` the full-scale one.

PROFILES: dict[str, dict[str, Any]] = {
    "paper": {
        "model": {
            "n_cliques": 8,
            "clique_dim": 16,
            "knot_dim": 1,
            "transformer_dim": 256,
            "n_blocks": 4,
            "n_heads": 4,
            "n_registers": 2,
            "mlp_dim": 128,
            "n_mlp": 2,
            "dropout_rate": 0.1,
            "n_species": 16,
            "max_atoms": 20,
            "cond_pool": "mean",
        },
        "train": {
            "gradient_steps": 700_000,
            "batch_size": 1024,
            "learning_rate": 1.4e-4,
            "warmup": 100_000,
            "alpha_vae": 1e-4,
            "alpha_mse": 1.0,
            "beta_mse": 1e-4,
            "temp_atom": 1.0,
            "val_every": 500,
        },
        "flow": {
            "n_step": 1000,
            "w_cfg": 2.0,
            "eps_mix": 0.1,
            "temp_flow": 16.0,
            "p_lat": 0.1,
        },
        "latent_opt": {
            "algorithm": "es",
            "antithetic": True,
            "n_pert": 20,
            "pert_scale": 0.05,
            "learning_rate": 3e-4,
            "design_steps": 2000,
            "decay": 0.4,
            "decay_mode": "decoupled",
            "top_k_percent": 10.0,
            "batch_capacity": None,
        },
        "decoding": {"n_beam": 10},
        "toy": {
            "oracle": "composition-affinity",
            "weights_seed": 0,
            "skew": 2.0,
            "rho_star": 1.0,
            "gamma": 0.0,
            "lambda_reg": 20.0,
            "tau_reg": -0.2,
        },
        "data": {"dataset": "dataset.jsonl", "checkpoint": "model.ckpt", "n_records": 45_000},
        "experiment": {
            "n_optimize": 100,
            "n_reconstruct": 100,
            "n_pairs": 10,
            "interp_points": 8,
            "cliques": [0, 5],
            "n_ablate": 100,
            "ablate_steps": 1000,
            "sweep_decays": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            "timing_sizes": [100, 500, 1000],
            "timing_design_steps": 60,
            "timing_n_pert": 5,
            "timing_flow_steps": 60,
            "timing_batch_capacity": 1024,
        },
    },
}

PROFILES["desk"] = copy.deepcopy(PROFILES["paper"])
PROFILES["desk"]["model"].update(
    {"transformer_dim": 64, "n_blocks": 2, "n_heads": 2}
)
PROFILES["desk"]["train"].update(
    {"gradient_steps": 20_000, "batch_size": 64, "warmup": 2_000}
)
PROFILES["desk"]["latent_opt"].update({"design_steps": 600, "decay": 0.1})
PROFILES["desk"]["data"].update({"n_records": 5_000})
PROFILES["desk"]["experiment"].update({"n_ablate": 24, "ablate_steps": 300})

TOP_KEYS = ("seed", "profile", "threads", "data", "model", "train", "flow",
            "latent_opt", "decoding", "toy", "experiment")


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}{key}' must be a section")
            out[key] = _merge_strict(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def vocab(self) -> Vocab:
        return Vocab(int(self.section("model")["n_species"]))

    def model_config(self) -> ModelConfig:
        m = self.section("model")
        return ModelConfig(
            transformer=TransformerConfig(
                d_model=int(m["transformer_dim"]),
                n_blocks=int(m["n_blocks"]),
                n_heads=int(m["n_heads"]),
                n_registers=int(m["n_registers"]),
                mlp_dim=int(m["mlp_dim"]),
                n_mlp=int(m["n_mlp"]),
                dropout=float(m["dropout_rate"]),
            ),
            shape=CliqueShape(
                n_cliques=int(m["n_cliques"]),
                d_clique=int(m["clique_dim"]),
                d_knot=int(m["knot_dim"]),
            ),
            n_species=int(m["n_species"]),
            max_atoms=int(m["max_atoms"]),
            cond_pool=str(m["cond_pool"]),
            predictor_mlp_dim=int(m["mlp_dim"]),
            predictor_n_mlp=int(m["n_mlp"]),
        )

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        return TrainConfig(
            gradient_steps=int(t["gradient_steps"]),
            batch_size=int(t["batch_size"]),
            learning_rate=float(t["learning_rate"]),
            warmup=int(t["warmup"]),
            beta_limit=float(t["alpha_vae"]),
            tau_pred_limit=float(t["alpha_mse"]),
            tau_pred_init=float(t["beta_mse"]),
            temp_atom=float(t["temp_atom"]),
            val_every=int(t["val_every"]),
        )

    def flow_config(self, **overrides) -> FlowConfig:
        f = dict(self.section("flow"))
        f.update(overrides)
        return FlowConfig(
            n_step=int(f["n_step"]),
            omega=float(f["w_cfg"]),
            eps_mix=float(f["eps_mix"]),
            tau_pos=float(f["temp_flow"]),
            p_lat=float(f["p_lat"]),
        )

    def es_config(self, **overrides) -> ESConfig:
        e = dict(self.section("latent_opt"))
        e.update(overrides)
        capacity = e["batch_capacity"]
        return ESConfig(
            n_pert=int(e["n_pert"]),
            sigma=float(e["pert_scale"]),
            learning_rate=float(e["learning_rate"]),
            steps=int(e["design_steps"]),
            decay=float(e["decay"]),
            antithetic=bool(e["antithetic"]),
            top_k_percent=float(e["top_k_percent"]),
            decay_mode=str(e["decay_mode"]),
            batch_capacity=None if capacity is None else int(capacity),
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            n_beam=int(self.section("decoding")["n_beam"]),
            max_species=int(self.section("model")["max_atoms"]),
        )

    def oracle_spec(self) -> OracleSpec:
        t = self.section("toy")
        weights = default_weights(
            self.vocab(), np.random.default_rng(int(t["weights_seed"]))
        )
        if t["oracle"] == "composition-affinity":
            return OracleSpec(kind="composition-affinity", weights=weights)
        if t["oracle"] == "packing":
            return OracleSpec(
                kind="packing",
                weights=weights,
                rho_star=float(t["rho_star"]),
                gamma=float(t["gamma"]),
            )
        if t["oracle"] == "regularized":
            inner = OracleSpec(kind="packing", weights=weights,
                               rho_star=float(t["rho_star"]), gamma=0.0)
            return OracleSpec(
                kind="regularized",
                weights=weights,
                lambda_reg=float(t["lambda_reg"]),
                tau_reg=float(t["tau_reg"]),
                inner=inner,
            )
        raise ConfigError(f"unknown toy oracle '{t['oracle']}'")

    def oracle_fn(self):
        spec = self.oracle_spec()
        return lambda m: oracle(m, spec)


def load_run_config(
    config_path: str | None,
    profile: str | None = None,
    seed: int | None = None,
    threads: int | None = None,
) -> RunConfig:
    override: dict[str, Any] = {}
    if config_path is not None:
        try:
            override = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError("config root must be a JSON object")
    profile_name = profile or override.get("profile", "desk")
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile '{profile_name}'")
    base: dict[str, Any] = {
        "seed": 0,
        "profile": profile_name,
        "threads": 1,
        **copy.deepcopy(PROFILES[profile_name]),
    }
    unknown = set(override) - set(TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    merged = _merge_strict(base, override)
    merged["profile"] = profile_name
    if seed is not None:
        merged["seed"] = seed
    if threads is not None:
        merged["threads"] = threads
    return RunConfig(merged)


# ---------------------------------------------------------------------------
# Output helpers.

def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Sequence[Sequence[Any]],
    config_hash: str,
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")
        fh.write(f"# config_hash={config_hash}\n")


def _csv_cell(value: Any) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_summary(path: Path, lines: Sequence[str], config_hash: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
        fh.write(f"config_hash={config_hash}\n")


def write_svg_lines(
    path: Path,
    series: dict[str, Sequence[float]],
    title: str,
    width: int = 640,
    height: int = 360,
) -> None:
    """Self-contained SVG line chart (one polyline per named series)."""
    pad = 40
    all_vals = [v for vs in series.values() for v in vs if np.isfinite(v)]
    if not all_vals:
        return
    lo, hi = min(all_vals), max(all_vals)
    if hi == lo:
        hi = lo + 1.0
    n_max = max(len(vs) for vs in series.values())
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]

    def sx(i: int, n: int) -> float:
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def sy(v: float) -> float:
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height-pad+16}" font-size="10">0</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" text-anchor="end" font-size="10">{n_max-1}</text>',
        f'<text x="{pad-4}" y="{height-pad}" text-anchor="end" font-size="10">{lo:.4g}</text>',
        f'<text x="{pad-4}" y="{pad+4}" text-anchor="end" font-size="10">{hi:.4g}</text>',
    ]
    for idx, (name, vs) in enumerate(series.items()):
        color = palette[idx % len(palette)]
        points = " ".join(
            f"{sx(i, len(vs)):.2f},{sy(v):.2f}" for i, v in enumerate(vs)
        )
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{width-pad}" y="{pad + 14 * idx}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


def _load_trained(cfg: RunConfig, out_dir: Path) -> tuple[CrystalModel, FlowConfig]:
    path = Path(cfg.section("data")["checkpoint"])
    if not path.is_absolute() and not path.exists() and (out_dir / path).exists():
        path = out_dir / path
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model, _, flow_cfg = model_from_checkpoint(load_checkpoint(path))
    return model, cfg.flow_config()


def _load_dataset(cfg: RunConfig, out_dir: Path) -> list[MaterialRecord]:
    path = Path(cfg.section("data")["dataset"])
    if not path.is_absolute() and not path.exists() and (out_dir / path).exists():
        path = out_dir / path
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return read_records(
        path, vocab=cfg.vocab(), max_atoms=int(cfg.section("model")["max_atoms"])
    )


# ---------------------------------------------------------------------------
# Commands.

def cmd_gen_data(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    spec = cfg.oracle_spec()
    n = int(cfg.section("data")["n_records"])
    records = generate_dataset(
        n,
        spec,
        default_length_prior(),
        seed=cfg.seed,
        vocab=cfg.vocab(),
        max_atoms=int(cfg.section("model")["max_atoms"]),
        skew=float(cfg.section("toy")["skew"]),
    )
    dataset_path = Path(cfg.section("data")["dataset"])
    if not dataset_path.is_absolute():
        dataset_path = out_dir / dataset_path
    write_records(dataset_path, records)
    labels = np.array([r.property_value for r in records])
    write_csv(
        out_dir / "gen_data_stats.csv",
        ["n", "label_mean", "label_std", "label_min", "label_max"],
        [[n, labels.mean(), labels.std(), labels.min(), labels.max()]],
        cfg.config_hash(),
    )
    write_summary(
        out_dir / "gen_data_summary.txt",
        [
            f"generated {n} records -> {dataset_path}",
            f"oracle={spec.kind} label_mean={labels.mean():.6f} label_std={labels.std():.6f}",
        ],
        cfg.config_hash(),
    )


def cmd_train(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    records = _load_dataset(cfg, out_dir)
    train_records, val_records, _ = split_records(records, cfg.seed)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    train_cfg = cfg.train_config()
    flow_cfg = cfg.flow_config()
    result = train(
        model,
        train_records,
        val_records,
        train_cfg,
        flow_cfg,
        seed=cfg.seed,
        log_path=out_dir / "train_log.csv",
    )
    ckpt_path = Path(cfg.section("data")["checkpoint"])
    if not ckpt_path.is_absolute():
        ckpt_path = out_dir / ckpt_path
    save_checkpoint(
        ckpt_path, model, train_cfg, flow_cfg, cfg.seed,
        step=train_cfg.gradient_steps, optimizer=result.optimizer,
    )
    write_csv(
        out_dir / "val_history.csv",
        ["step", "val_loss"],
        [[s, v] for s, v in result.val_history],
        cfg.config_hash(),
    )
    write_summary(
        out_dir / "train_summary.txt",
        [
            f"trained {train_cfg.gradient_steps} steps on {len(train_records)} records "
            f"-> {ckpt_path}",
            "final losses: "
            + " ".join(f"{k}={v:.6f}" for k, v in sorted(result.final_losses.items())),
        ],
        cfg.config_hash(),
    )
    if plots and result.val_history:
        write_svg_lines(
            out_dir / "val_loss.svg",
            {"val_loss": [v for _, v in result.val_history]},
            "validation loss",
        )


def cmd_optimize(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    model, flow_cfg = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    _, _, test_records = split_records(records, cfg.seed)
    n = min(int(cfg.section("experiment")["n_optimize"]), len(test_records))
    chosen = test_records[:n]
    es_cfg = cfg.es_config()
    oracle_fn = cfg.oracle_fn()
    result = discover(
        chosen,
        model,
        es_cfg,
        flow_cfg,
        dec_cfg=cfg.decoder_config(),
        seed=cfg.seed,
        oracle=oracle_fn,
        filter_top_k=False,
    )
    kept, kept_idx = top_k_filter(
        result.latents, model.surrogate(), es_cfg.top_k_percent
    )
    write_records(out_dir / "optimized_materials.jsonl", [
        MaterialRecord(m, float(v))
        for m, v in zip(result.materials, result.oracle_final)
    ])
    rows = []
    for i in range(n):
        rows.append(
            [
                i,
                result.initial_predicted[i],
                result.predicted[i],
                result.oracle_initial[i],
                result.oracle_final[i],
                int(i in set(kept_idx.tolist())),
            ]
        )
    write_csv(
        out_dir / "optimize_results.csv",
        ["id", "initial_predicted", "final_predicted", "oracle_initial",
         "oracle_final", "in_top_k"],
        rows,
        cfg.config_hash(),
    )
    trace_rows = []
    for i in range(n):
        for step in range(result.trace.shape[1]):
            trace_rows.append(
                [i, step, result.trace[i, step], result.norms[i, step]]
            )
    write_csv(
        out_dir / "optimize_trace.csv",
        ["latent_id", "step", "predicted_value", "latent_norm"],
        trace_rows,
        cfg.config_hash(),
    )
    init_mean = float(result.oracle_initial.mean())
    final_mean = float(result.oracle_final.mean())
    top_mean = float(result.oracle_final[kept_idx].mean())
    write_summary(
        out_dir / "optimize_summary.txt",
        [
            f"optimized {n} latents for {es_cfg.steps} steps",
            f"oracle_initial_mean={init_mean:.6f}",
            f"oracle_final_mean={final_mean:.6f}",
            f"oracle_top_{es_cfg.top_k_percent:g}pct_mean={top_mean:.6f}",
            f"predicted_final_mean={float(result.predicted.mean()):.6f}",
            f"predicted_top_k_mean={float(result.predicted[kept_idx].mean()):.6f}",
            f"improvement={100.0 * (init_mean - final_mean) / abs(init_mean):.2f}%",
        ],
        cfg.config_hash(),
    )
    if plots:
        write_svg_lines(
            out_dir / "optimize_trace.svg",
            {"mean predicted": result.trace.mean(axis=0).tolist()},
            "latent optimization trace",
        )


def cmd_reconstruct(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    model, _ = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    _, _, test_records = split_records(records, cfg.seed)
    n = min(int(cfg.section("experiment")["n_reconstruct"]), len(test_records))
    chosen = test_records[:n]
    es_cfg = cfg.es_config(design_steps=0)
    rows = []
    summary = [f"reconstruction over {n} held-out records"]
    for omega in (0.0, 2.0, 4.0):
        flow_cfg = cfg.flow_config(w_cfg=omega)
        result = discover(
            chosen, model, es_cfg, flow_cfg,
            dec_cfg=cfg.decoder_config(), seed=cfg.seed,
        )
        matched = sum(
            materials_match(rec.material, mat)
            for rec, mat in zip(chosen, result.materials)
        )
        species_matched = sum(
            rec.material.species == mat.species
            for rec, mat in zip(chosen, result.materials)
        )
        rows.append([omega, n, matched, matched / n])
        summary.append(
            f"omega={omega:g}: match_ratio={matched / n:.3f} "
            f"species_match_ratio={species_matched / n:.3f}"
        )
    write_csv(
        out_dir / "reconstruct_results.csv",
        ["omega", "n", "matched", "match_ratio"],
        rows,
        cfg.config_hash(),
    )
    write_summary(out_dir / "reconstruct_summary.txt", summary, cfg.config_hash())


def cmd_interpolate(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    model, flow_cfg = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    _, _, test_records = split_records(records, cfg.seed)
    exp = cfg.section("experiment")
    n_pairs = int(exp["n_pairs"])
    n_points = int(exp["interp_points"])
    cliques = [int(c) for c in exp["cliques"]]
    if 2 * n_pairs > len(test_records):
        raise ConfigError("not enough test records for the requested pairs")
    oracle_fn = cfg.oracle_fn()
    dec_cfg = cfg.decoder_config()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(17,)))
    rows = []
    for pair in range(n_pairs):
        r0, r1 = test_records[2 * pair], test_records[2 * pair + 1]
        z0 = model.encode_records([r0])[0]
        z1 = model.encode_records([r1])[0]
        modes: list[tuple[str, int | None]] = [("full", None)]
        modes += [("clique", c) for c in cliques]
        for mode, c in modes:
            ts = np.linspace(0.0, 1.0, n_points)
            latents = np.stack(
                [
                    interpolate_latent(z0, z1, float(t))
                    if mode == "full"
                    else interpolate_clique(z0, z1, model.shape, int(c), float(t))
                    for t in ts
                ]
            )
            materials = model.decode_latents(latents, flow_cfg, rng, dec_cfg)
            for t, m in zip(ts, materials):
                rows.append(
                    [pair, mode, "" if c is None else c, float(t), oracle_fn(m), m.n_atom]
                )
    write_csv(
        out_dir / "interpolate_results.csv",
        ["pair", "mode", "clique", "t", "oracle_value", "n_atom"],
        rows,
        cfg.config_hash(),
    )
    # mean curve per mode over pairs
    summary = [f"interpolated {n_pairs} pairs over {n_points}-point grids"]
    mode_keys = sorted({(r[1], r[2]) for r in rows})
    mean_curves = {}
    for mode, c in mode_keys:
        values = np.array(
            [r[4] for r in rows if (r[1], r[2]) == (mode, c)]
        ).reshape(n_pairs, n_points)
        key = mode if c == "" else f"{mode} clique {c}"
        mean_curves[key] = values.mean(axis=0).tolist()
        summary.append(
            f"{key}: endpoint means {values[:, 0].mean():.4f} -> "
            f"{values[:, -1].mean():.4f}, peak {values.mean(axis=0).max():.4f}"
        )
    write_summary(out_dir / "interpolate_summary.txt", summary, cfg.config_hash())
    if plots:
        write_svg_lines(
            out_dir / "interpolate_curves.svg", mean_curves, "oracle along interpolation"
        )


def cmd_ablate_gradients(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    model, flow_cfg = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    _, _, test_records = split_records(records, cfg.seed)
    exp = cfg.section("experiment")
    n = min(int(exp["n_ablate"]), len(test_records))
    chosen = test_records[:n]
    steps = int(exp["ablate_steps"])
    oracle_fn = cfg.oracle_fn()
    dec_cfg = cfg.decoder_config()
    base_decay = float(cfg.section("latent_opt")["decay"])
    arms = [
        ("BP", "bp", 0.0),
        ("BP+W", "bp", base_decay),
        ("ES", "es", 0.0),
        ("ES+W", "es", base_decay),
    ]
    rows = []
    changes = {}
    for name, method, decay in arms:
        es_cfg = cfg.es_config(design_steps=steps, decay=decay)
        result = discover(
            chosen, model, es_cfg, flow_cfg, dec_cfg=dec_cfg,
            seed=cfg.seed, oracle=oracle_fn,
        )
        change = float(result.oracle_final.mean() - result.oracle_initial.mean())
        changes[name] = change
        rows.append([name, decay, float(result.oracle_initial.mean()),
                     float(result.oracle_final.mean()), change])
    sweep_rows = []
    for lam in [float(x) for x in exp["sweep_decays"]]:
        es_cfg = cfg.es_config(design_steps=steps, decay=lam)
        result = discover(
            chosen, model, es_cfg, flow_cfg, dec_cfg=dec_cfg,
            seed=cfg.seed, oracle=oracle_fn,
        )
        sweep_rows.append(
            [lam, float(result.oracle_initial.mean()),
             float(result.oracle_final.mean()),
             float(result.oracle_final.mean() - result.oracle_initial.mean())]
        )
    write_csv(
        out_dir / "ablate_gradients.csv",
        ["arm", "decay", "oracle_initial_mean", "oracle_final_mean", "mean_change"],
        rows,
        cfg.config_hash(),
    )
    write_csv(
        out_dir / "decay_sweep.csv",
        ["decay", "oracle_initial_mean", "oracle_final_mean", "mean_change"],
        sweep_rows,
        cfg.config_hash(),
    )
    ordering = " ".join(f"{k}={v:+.4f}" for k, v in changes.items())
    write_summary(
        out_dir / "ablate_summary.txt",
        [
            f"gradient ablation over {n} records, {steps} steps",
            f"mean property change: {ordering}",
            f"es_below_zero={changes['ES'] < 0} "
            f"esw_leq_es={changes['ES+W'] <= changes['ES']}",
        ],
        cfg.config_hash(),
    )
    if plots:
        write_svg_lines(
            out_dir / "decay_sweep.svg",
            {"mean change": [r[3] for r in sweep_rows]},
            "weight-decay sweep",
        )


def cmd_timing(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    model, _ = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    exp = cfg.section("experiment")
    sizes = [int(s) for s in exp["timing_sizes"]]
    es_cfg = cfg.es_config(
        design_steps=int(exp["timing_design_steps"]),
        n_pert=int(exp["timing_n_pert"]),
        batch_capacity=int(exp["timing_batch_capacity"]),
    )
    flow_cfg = cfg.flow_config(n_step=int(exp["timing_flow_steps"]))
    dec_cfg = cfg.decoder_config()
    surrogate = model.surrogate()
    rows = []
    for n in sizes:
        if n > len(records):
            raise ConfigError(f"timing size {n} exceeds dataset size {len(records)}")
        chosen = records[:n]
        t0 = time.perf_counter()
        latents = model.encode_records(chosen)
        result = optimize(latents, surrogate, es_cfg, seed=cfg.seed)
        mbo_seconds = time.perf_counter() - t0
        t1 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(23, n)))
        model.decode_latents(result.latents, flow_cfg, rng, dec_cfg)
        decode_seconds = time.perf_counter() - t1
        rows.append([n, mbo_seconds, decode_seconds])
    write_csv(
        out_dir / "timing_results.csv",
        ["n", "mbo_seconds", "decode_seconds"],
        rows,
        cfg.config_hash(),
    )
    mbo = [r[1] for r in rows]
    dec = [r[2] for r in rows]
    write_summary(
        out_dir / "timing_summary.txt",
        [
            "timing over sizes " + ",".join(str(s) for s in sizes),
            f"mbo_seconds: {' '.join(f'{v:.2f}' for v in mbo)} "
            f"(max/min={max(mbo) / min(mbo):.2f})",
            f"decode_seconds: {' '.join(f'{v:.2f}' for v in dec)} "
            f"(growth={dec[-1] / dec[0]:.2f}x)",
        ],
        cfg.config_hash(),
    )


def cmd_eval(cfg: RunConfig, out_dir: Path, plots: bool) -> None:
    from crystalopt.trainer import evaluate_loss

    model, flow_cfg = _load_trained(cfg, out_dir)
    records = _load_dataset(cfg, out_dir)
    train_records, val_records, test_records = split_records(records, cfg.seed)
    train_cfg = cfg.train_config()
    rows = []
    for name, split in (
        ("train", train_records),
        ("val", val_records),
        ("test", test_records),
    ):
        loss = evaluate_loss(
            model, split, train_cfg, flow_cfg, cfg.seed, train_cfg.gradient_steps
        )
        latents = model.encode_records(split[: min(256, len(split))])
        preds = model.surrogate()(latents)
        targets = np.array(
            [r.property_value for r in split[: min(256, len(split))]]
        )
        mse = float(np.mean((preds - targets) ** 2))
        mae = float(np.mean(np.abs(preds - targets)))
        rows.append([name, len(split), loss, mse, mae])
    write_csv(
        out_dir / "eval_results.csv",
        ["split", "n", "loss", "pred_mse", "pred_mae"],
        rows,
        cfg.config_hash(),
    )
    write_summary(
        out_dir / "eval_summary.txt",
        [f"{r[0]}: n={r[1]} loss={r[2]:.4f} pred_mse={r[3]:.6f} pred_mae={r[4]:.6f}"
         for r in rows],
        cfg.config_hash(),
    )


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "optimize": cmd_optimize,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "ablate-gradients": cmd_ablate_gradients,
    "timing": cmd_timing,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crystalopt",
        description="Clique-latent optimization of crystal-like designs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="canonical JSON config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--profile", choices=sorted(PROFILES), default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--plots", action="store_true", help="emit SVG charts")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.profile, args.seed, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    torch.set_num_threads(max(1, cfg.threads))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, out_dir, args.plots)
    except (ConfigError, RecordParseError, InvariantError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteStateError, NonFiniteSurrogateError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
