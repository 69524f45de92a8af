"""Training loop: loss assembly, linear warmup schedules, variable-length
batching with exact padding masks, and binary checkpoints.

Reproducibility uses counter-based streams: every stochastic decision at
step k is drawn from a generator seeded by (seed, stream tag, k), so a run
resumed from a checkpoint at step k reproduces the uninterrupted loss curve
bit-for-bit in single-threaded mode.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from crystalopt.cliques import CliqueShape
from crystalopt.core import MaterialRecord, Vocab
from crystalopt.encoder import reparameterize
from crystalopt.flow import FlowConfig, LengthPrior, fit_length_prior, sample_prior
from crystalopt.model import CrystalModel, ModelConfig, build_model
from crystalopt.nn import TransformerConfig

# Stream tags for counter-based RNG derivation.
_TAG_TRAIN = 0
_TAG_VAL = 1
_TAG_SPLIT = 2
_TAG_TORCH = 3


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule. Defaults are the full-scale profile; ``desk()``
    is the reduced profile for quick experiments."""

    gradient_steps: int = 700_000
    batch_size: int = 1024
    learning_rate: float = 1.4e-4
    warmup: int = 100_000
    beta_limit: float = 1e-4
    tau_pred_limit: float = 1.0
    tau_pred_init: float = 1e-4
    temp_atom: float = 1.0
    val_every: int = 500
    val_batch: int = 64

    def __post_init__(self) -> None:
        numeric = (
            self.gradient_steps,
            self.batch_size,
            self.learning_rate,
            self.warmup,
            self.beta_limit,
            self.tau_pred_limit,
            self.tau_pred_init,
            self.temp_atom,
        )
        if any(v <= 0 for v in numeric):
            raise ValueError("all TrainConfig fields must be positive")
        if self.warmup > self.gradient_steps:
            raise ValueError("warmup must not exceed gradient_steps")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(gradient_steps=20_000, batch_size=64, warmup=2_000)
        base.update(overrides)
        return cls(**base)


def warmup_schedules(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """(beta, tau_pred) at a given step: beta ramps 0 -> beta_limit over
    [0, warmup]; tau_pred then ramps tau_pred_init -> tau_pred_limit over
    [warmup, 2 * warmup]; both are constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    w = cfg.warmup
    beta = cfg.beta_limit * min(step / w, 1.0)
    if step <= w:
        tau_pred = cfg.tau_pred_init
    elif step >= 2 * w:
        tau_pred = cfg.tau_pred_limit
    else:
        frac = (step - w) / w
        tau_pred = cfg.tau_pred_init + (cfg.tau_pred_limit - cfg.tau_pred_init) * frac
    return beta, tau_pred


def stream(seed: int, tag: int, step: int = 0) -> np.random.Generator:
    """Counter-based generator for (seed, tag, step)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, step)))


def split_records(
    records: Sequence[MaterialRecord], seed: int
) -> tuple[list[MaterialRecord], list[MaterialRecord], list[MaterialRecord]]:
    """Deterministic 60/20/20 train/val/test split."""
    order = stream(seed, _TAG_SPLIT).permutation(len(records))
    n_train = int(0.6 * len(records))
    n_val = int(0.2 * len(records))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train : n_train + n_val]]
    test = [records[i] for i in order[n_train + n_val :]]
    return train, val, test


@dataclass
class Batch:
    """Padded tensors for a variable-length batch of records."""

    lengths: torch.Tensor  # (B, 3)
    angles: torch.Tensor  # (B, 3)
    positions: torch.Tensor  # (B, P, 3), zero beyond each record's atoms
    species: torch.Tensor  # (B, P) long, Pad beyond each record's atoms
    atom_mask: torch.Tensor  # (B, P) bool
    properties: torch.Tensor  # (B,)

    @property
    def size(self) -> int:
        return self.lengths.shape[0]


def collate(
    records: Sequence[MaterialRecord], vocab: Vocab, dtype: torch.dtype
) -> Batch:
    B = len(records)
    P = max(r.material.n_atom for r in records)
    lengths = torch.empty(B, 3, dtype=dtype)
    angles = torch.empty(B, 3, dtype=dtype)
    positions = torch.zeros(B, P, 3, dtype=dtype)
    species = torch.full((B, P), vocab.pad_id, dtype=torch.long)
    atom_mask = torch.zeros(B, P, dtype=torch.bool)
    properties = torch.empty(B, dtype=dtype)
    for i, record in enumerate(records):
        m = record.material
        g = m.geometry
        n = m.n_atom
        lengths[i] = torch.tensor(g.lengths, dtype=dtype)
        angles[i] = torch.tensor(g.angles, dtype=dtype)
        positions[i, :n] = torch.tensor(g.positions, dtype=dtype)
        species[i, :n] = torch.tensor(list(m.species), dtype=torch.long)
        atom_mask[i, :n] = True
        properties[i] = record.property_value
    return Batch(lengths, angles, positions, species, atom_mask, properties)


@dataclass
class BatchNoise:
    """Every stochastic draw a loss evaluation needs, made explicit so padded
    batches and per-record evaluations can share identical draws."""

    eps_post: torch.Tensor  # (B, d_z) posterior reparameterization noise
    lengths0: torch.Tensor  # (B, 3) prior lengths
    angles0: torch.Tensor  # (B, 3) prior angles
    positions0: torch.Tensor  # (B, P, 3) prior positions, zero beyond atoms
    t: torch.Tensor  # (B,) flow timesteps
    latent_masked: torch.Tensor  # (B,) bool, condition on noise instead of z
    eps_z: torch.Tensor  # (B, d_z) replacement noise for masked latents
    clique_idx: torch.Tensor  # (B,) long, clique for the KL term

    def select(self, rows: Sequence[int], n_atoms: Sequence[int]) -> "BatchNoise":
        """Restrict to a subset of records (re-padding positions)."""
        rows = list(rows)
        P = max(n_atoms)
        positions0 = torch.zeros(len(rows), P, 3, dtype=self.positions0.dtype)
        for j, (r, n) in enumerate(zip(rows, n_atoms)):
            positions0[j, :n] = self.positions0[r, :n]
        return BatchNoise(
            eps_post=self.eps_post[rows],
            lengths0=self.lengths0[rows],
            angles0=self.angles0[rows],
            positions0=positions0,
            t=self.t[rows],
            latent_masked=self.latent_masked[rows],
            eps_z=self.eps_z[rows],
            clique_idx=self.clique_idx[rows],
        )


def draw_batch_noise(
    batch: Batch,
    prior: LengthPrior,
    shape: CliqueShape,
    flow_cfg: FlowConfig,
    rng: np.random.Generator,
) -> BatchNoise:
    from crystalopt.flow import sample_time

    B, P = batch.species.shape
    dtype = batch.lengths.dtype
    eps_post = torch.tensor(rng.standard_normal((B, shape.d_z)), dtype=dtype)
    lengths0 = torch.empty(B, 3, dtype=dtype)
    angles0 = torch.empty(B, 3, dtype=dtype)
    positions0 = torch.zeros(B, P, 3, dtype=dtype)
    n_atoms = batch.atom_mask.sum(dim=1).tolist()
    for i, n in enumerate(n_atoms):
        g0 = sample_prior(int(n), prior, rng)
        lengths0[i] = torch.tensor(g0.lengths, dtype=dtype)
        angles0[i] = torch.tensor(g0.angles, dtype=dtype)
        positions0[i, :n] = torch.tensor(g0.positions, dtype=dtype)
    t = torch.tensor([sample_time(flow_cfg, rng) for _ in range(B)], dtype=dtype)
    latent_masked = torch.tensor(rng.uniform(size=B) < flow_cfg.p_lat)
    eps_z = torch.tensor(rng.standard_normal((B, shape.d_z)), dtype=dtype)
    clique_idx = torch.tensor(
        rng.integers(0, shape.n_cliques, size=B), dtype=torch.long
    )
    return BatchNoise(
        eps_post, lengths0, angles0, positions0, t, latent_masked, eps_z, clique_idx
    )


def total_loss(
    model: CrystalModel,
    batch: Batch,
    noise: BatchNoise,
    beta: float,
    tau_pred: float,
    flow_cfg: FlowConfig,
    temp_atom: float = 1.0,
) -> dict[str, torch.Tensor]:
    """Mean-over-batch training loss and its components.

    Per record: temp_atom * L_atom + (L_len + L_ang + tau_pos * L_pos)
    + tau_pred * (f(z) - y)^2 + beta * KL at the drawn clique.
    """
    from crystalopt.flow import flow_loss_components

    mu, log_sigma = model.encoder(
        batch.lengths, batch.angles, batch.positions, batch.species, batch.atom_mask
    )
    z = reparameterize(mu, log_sigma, noise.eps_post)

    nll_sum, token_counts = model.atom_decoder.nll_loss(
        batch.species, batch.atom_mask, z
    )
    flow = flow_loss_components(
        model.flow,
        batch.lengths,
        batch.angles,
        batch.positions,
        batch.species,
        batch.atom_mask,
        z,
        noise.lengths0,
        noise.angles0,
        noise.positions0,
        noise.t,
        noise.latent_masked,
        noise.eps_z,
        flow_cfg,
    )
    pred = model.predictor.predict_latent(z)
    pred_err = (pred - batch.properties).square()

    # KL at one uniformly drawn clique per record: reduce per-coordinate
    # contributions over each record's chosen clique.
    per_coord = 0.5 * (
        torch.exp(2.0 * log_sigma) + mu.square() - 1.0 - 2.0 * log_sigma
    )
    idx = torch.as_tensor(model.shape.index_matrix())  # (n_cliques, d_clique)
    kl_all = per_coord[:, idx].sum(dim=-1)  # (B, n_cliques)
    kl = kl_all.gather(1, noise.clique_idx[:, None]).squeeze(1)

    per_record = (
        temp_atom * nll_sum + flow["total"] + tau_pred * pred_err + beta * kl
    )
    return {
        "total": per_record.mean(),
        "atom": nll_sum.mean(),
        "atom_per_token": (nll_sum / token_counts).mean(),
        "flow_len": flow["len"].mean(),
        "flow_ang": flow["ang"].mean(),
        "flow_pos": flow["pos"].mean(),
        "flow": flow["total"].mean(),
        "pred": pred_err.mean(),
        "lat": kl.mean(),
    }


def bucket_indices(
    records: Sequence[MaterialRecord],
) -> dict[int, list[int]]:
    """Group record indices by atom count to reduce padding."""
    buckets: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        buckets.setdefault(r.material.n_atom, []).append(i)
    return buckets


def draw_batch(
    records: Sequence[MaterialRecord],
    buckets: dict[int, list[int]],
    batch_size: int,
    rng: np.random.Generator,
) -> list[MaterialRecord]:
    """Sample a batch from one atom-count bucket (probability proportional to
    bucket size, indices with replacement)."""
    keys = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
    key = keys[rng.choice(len(keys), p=weights / weights.sum())]
    idx = rng.choice(buckets[key], size=batch_size, replace=True)
    return [records[i] for i in idx]


@dataclass
class TrainResult:
    steps: int
    final_losses: dict[str, float]
    val_history: list[tuple[int, float]] = field(default_factory=list)
    optimizer: torch.optim.Adam | None = None


def evaluate_loss(
    model: CrystalModel,
    records: Sequence[MaterialRecord],
    train_cfg: TrainConfig,
    flow_cfg: FlowConfig,
    seed: int,
    step: int,
) -> float:
    """Deterministic validation loss at the schedules of ``step``."""
    was_training = model.training
    model.eval()
    rng = stream(seed, _TAG_VAL, step)
    beta, tau_pred = warmup_schedules(step, train_cfg)
    batch_records = list(records[: train_cfg.val_batch])
    batch = collate(batch_records, model.vocab, model.dtype)
    noise = draw_batch_noise(batch, model.require_prior(), model.shape, flow_cfg, rng)
    with torch.no_grad():
        losses = total_loss(
            model, batch, noise, beta, tau_pred, flow_cfg, train_cfg.temp_atom
        )
    model.train(was_training)
    return float(losses["total"])


def train(
    model: CrystalModel,
    train_records: Sequence[MaterialRecord],
    val_records: Sequence[MaterialRecord],
    train_cfg: TrainConfig,
    flow_cfg: FlowConfig,
    seed: int,
    log_path: str | Path | None = None,
    start_step: int = 0,
    optimizer: torch.optim.Adam | None = None,
) -> TrainResult:
    """Run Adam on the total loss from ``start_step`` to ``gradient_steps``.

    The model's length prior must be set (fit it from the training split when
    absent). Pass the optimizer restored from a checkpoint to resume a run;
    with identical seeds the resumed loss curve matches the uninterrupted
    one. Logs one CSV row per step; validation loss is recorded every
    ``val_every`` steps.
    """
    if model.length_prior is None:
        model.length_prior = fit_length_prior(train_records)
    prior = model.require_prior()
    buckets = bucket_indices(train_records)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)

    log_file = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    if log_file:
        log_file.write(
            "step,total,atom,flow_len,flow_ang,flow_pos,pred,lat,beta,tau_pred,wall_ms\n"
        )

    model.train()
    val_history: list[tuple[int, float]] = []
    losses: dict[str, torch.Tensor] = {}
    for step in range(start_step, train_cfg.gradient_steps):
        t0 = time.perf_counter()
        rng = stream(seed, _TAG_TRAIN, step)
        torch.manual_seed(int(stream(seed, _TAG_TORCH, step).integers(2**62)))
        beta, tau_pred = warmup_schedules(step, train_cfg)
        batch_records = draw_batch(train_records, buckets, train_cfg.batch_size, rng)
        batch = collate(batch_records, model.vocab, model.dtype)
        noise = draw_batch_noise(batch, prior, model.shape, flow_cfg, rng)
        losses = total_loss(
            model, batch, noise, beta, tau_pred, flow_cfg, train_cfg.temp_atom
        )
        optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        optimizer.step()
        wall_ms = (time.perf_counter() - t0) * 1e3
        if log_file:
            row = {k: float(v.detach()) for k, v in losses.items()}
            log_file.write(
                f"{step},{row['total']!r},{row['atom']!r},"
                f"{row['flow_len']!r},{row['flow_ang']!r},"
                f"{row['flow_pos']!r},{row['pred']!r},"
                f"{row['lat']!r},{beta!r},{tau_pred!r},{wall_ms:.3f}\n"
            )
        next_step = step + 1
        if val_records and next_step % train_cfg.val_every == 0:
            val_loss = evaluate_loss(
                model, val_records, train_cfg, flow_cfg, seed, next_step
            )
            val_history.append((next_step, val_loss))
    if log_file:
        log_file.close()
    model.eval()
    final = {k: float(v.detach()) for k, v in losses.items()} if losses else {}
    return TrainResult(
        steps=train_cfg.gradient_steps,
        final_losses=final,
        val_history=val_history,
        optimizer=optimizer,
    )


# ---------------------------------------------------------------------------
# Checkpoint format: magic bytes, format version, a name/shape directory,
# little-endian float64 arrays, then configuration as canonical JSON.

CHECKPOINT_MAGIC = b"XTALCKP1"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    pass


class CheckpointCorruptError(RuntimeError):
    """Truncated or inconsistent checkpoint; message carries the byte offset."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def step(self) -> int:
        return int(self.meta["rng_state"]["step"])

    @property
    def seed(self) -> int:
        return int(self.meta["rng_state"]["seed"])


def _config_meta(
    model: CrystalModel,
    train_cfg: TrainConfig,
    flow_cfg: FlowConfig,
    seed: int,
    step: int,
) -> dict:
    cfg = model.cfg
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": {
            "transformer": asdict(cfg.transformer),
            "shape": asdict(cfg.shape),
            "n_species": cfg.n_species,
            "max_atoms": cfg.max_atoms,
            "cond_pool": cfg.cond_pool,
            "predictor_mlp_dim": cfg.predictor_mlp_dim,
            "predictor_n_mlp": cfg.predictor_n_mlp,
        },
        "train": asdict(train_cfg),
        "flow": asdict(flow_cfg),
        "length_prior": {
            "mu": list(model.require_prior().mu),
            "sigma": list(model.require_prior().sigma),
        },
        "rng_state": {"seed": seed, "step": step},
    }


def save_checkpoint(
    path: str | Path,
    model: CrystalModel,
    train_cfg: TrainConfig,
    flow_cfg: FlowConfig,
    seed: int,
    step: int,
    optimizer: torch.optim.Adam | None = None,
) -> None:
    arrays = dict(model.parameter_store().to_arrays())
    if optimizer is not None:
        names = [name for name, _ in model.named_parameters()]
        state = optimizer.state_dict()["state"]
        opt_steps = []
        for i, name in enumerate(names):
            if i in state:
                arrays[f"opt.m.{name}"] = (
                    state[i]["exp_avg"].detach().cpu().numpy().astype(np.float64)
                )
                arrays[f"opt.v.{name}"] = (
                    state[i]["exp_avg_sq"].detach().cpu().numpy().astype(np.float64)
                )
                opt_steps.append(int(state[i]["step"]))
            else:
                opt_steps.append(0)
    meta = _config_meta(model, train_cfg, flow_cfg, seed, step)
    if optimizer is not None:
        meta["optimizer"] = {
            "lr": optimizer.param_groups[0]["lr"],
            "steps": opt_steps,
        }
    payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        names = sorted(arrays)
        for name in names:
            arr = arrays[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointCorruptError(
                f"truncated checkpoint while reading {what} at offset {offset}"
            )
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError("bad magic bytes at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )
    (n_arrays,) = struct.unpack("<I", take(4, "array count"))
    directory: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(
            struct.unpack("<Q", take(8, f"dim of {name}"))[0] for _ in range(ndim)
        )
        directory.append((name, shape))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in directory:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(8 * count, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    (json_len,) = struct.unpack("<Q", take(8, "config length"))
    payload = take(json_len, "config json")
    if offset != len(data):
        raise CheckpointCorruptError(
            f"{len(data) - offset} trailing bytes at offset {offset}"
        )
    try:
        meta = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(
            f"unreadable config json at offset {offset - json_len}: {exc}"
        ) from exc
    return Checkpoint(arrays=arrays, meta=meta)


def model_from_checkpoint(
    ckpt: Checkpoint, dtype: torch.dtype = torch.float64
) -> tuple[CrystalModel, TrainConfig, FlowConfig]:
    m = ckpt.meta["model"]
    cfg = ModelConfig(
        transformer=TransformerConfig(**m["transformer"]),
        shape=CliqueShape(**m["shape"]),
        n_species=m["n_species"],
        max_atoms=m["max_atoms"],
        cond_pool=m["cond_pool"],
        predictor_mlp_dim=m["predictor_mlp_dim"],
        predictor_n_mlp=m["predictor_n_mlp"],
    )
    model = build_model(cfg, seed=ckpt.seed, dtype=dtype)
    params = {
        k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")
    }
    model.parameter_store().load_arrays(params)
    prior = ckpt.meta["length_prior"]
    model.length_prior = LengthPrior(tuple(prior["mu"]), tuple(prior["sigma"]))
    train_cfg = TrainConfig(**ckpt.meta["train"])
    flow_cfg = FlowConfig(**ckpt.meta["flow"])
    model.eval()
    return model, train_cfg, flow_cfg


def optimizer_from_checkpoint(
    ckpt: Checkpoint, model: CrystalModel
) -> torch.optim.Adam | None:
    """Rebuild the Adam state saved alongside the parameters, if present."""
    if "optimizer" not in ckpt.meta:
        return None
    opt_meta = ckpt.meta["optimizer"]
    optimizer = torch.optim.Adam(model.parameters(), lr=opt_meta["lr"])
    names = [name for name, _ in model.named_parameters()]
    state: dict[int, dict] = {}
    for i, name in enumerate(names):
        key_m, key_v = f"opt.m.{name}", f"opt.v.{name}"
        if key_m in ckpt.arrays:
            state[i] = {
                "step": torch.tensor(float(opt_meta["steps"][i])),
                "exp_avg": torch.tensor(ckpt.arrays[key_m], dtype=model.dtype),
                "exp_avg_sq": torch.tensor(ckpt.arrays[key_v], dtype=model.dtype),
            }
    optimizer.load_state_dict(
        {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}
    )
    return optimizer
