"""Conditional flow matching over unit-cell geometry.

The prior samples angles uniformly on (pi/3, 2pi/3), positions uniformly on
(0, 1), and lengths as cbrt(n_atom)-scaled log-normals fitted to canonical
lengths, which keeps the expected atom density invariant to the atom count.
Training regresses a transformer velocity field onto straight-line paths
between prior and data geometry at timesteps drawn from a lifted logit-normal
(a Bernoulli mixture of logit-normal and uniform). Sampling integrates the
velocity ODE with the Euler method under classifier-free guidance, where the
unconditional branch replaces the latent with standard normal noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from crystalopt.cliques import CliqueShape, chain
from crystalopt.core import (
    Geometry,
    InvariantError,
    MaterialRecord,
    Vocab,
    canonicalize_lengths,
)
from crystalopt.encoder import pooled_condition
from crystalopt.nn import (
    Mlp,
    RegisterTokens,
    TransformerBlock,
    TransformerConfig,
    gelu,
    sinusoidal_embedding,
)

SIGMA_FLOOR = 1e-6
ANGLE_CLAMP = 1e-3
LENGTH_FLOOR = 1e-3


class NonFiniteStateError(RuntimeError):
    """An ODE state entry became NaN/Inf mid-trajectory."""


class InsufficientDataError(ValueError):
    """Too few records to fit the length prior."""


@dataclass(frozen=True)
class FlowConfig:
    """Euler step count, guidance strength, timestep mixture weight,
    position-loss weight, and latent-masking probability."""

    n_step: int = 1000
    omega: float = 2.0
    eps_mix: float = 0.1
    tau_pos: float = 16.0
    p_lat: float = 0.1

    def __post_init__(self) -> None:
        if self.n_step < 1:
            raise ValueError(f"n_step must be >= 1, got {self.n_step}")
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if not 0.0 <= self.eps_mix <= 1.0:
            raise ValueError(f"eps_mix must lie in [0, 1], got {self.eps_mix}")
        if self.tau_pos <= 0:
            raise ValueError(f"tau_pos must be > 0, got {self.tau_pos}")
        if not 0.0 <= self.p_lat <= 1.0:
            raise ValueError(f"p_lat must lie in [0, 1], got {self.p_lat}")


@dataclass(frozen=True)
class LengthPrior:
    """Per-axis mean and standard deviation of log canonical lengths."""

    mu: tuple[float, float, float]
    sigma: tuple[float, float, float]

    def __post_init__(self) -> None:
        mu = tuple(float(v) for v in self.mu)
        sigma = tuple(max(float(v), SIGMA_FLOOR) for v in self.sigma)
        if len(mu) != 3 or len(sigma) != 3:
            raise ValueError("length prior needs one (mu, sigma) pair per axis")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def fit_length_prior(records: Sequence[MaterialRecord]) -> LengthPrior:
    """Per-axis sample mean / unbiased std of log(l / cbrt(n_atom))."""
    if len(records) < 2:
        raise InsufficientDataError(
            f"need at least 2 records to fit the length prior, got {len(records)}"
        )
    logs = np.array(
        [
            np.log(canonicalize_lengths(r.material.geometry.lengths, r.material.n_atom))
            for r in records
        ]
    )
    mu = logs.mean(axis=0)
    sigma = logs.std(axis=0, ddof=1)
    return LengthPrior(tuple(mu), tuple(sigma))


def sample_prior(
    n_atom: int, prior: LengthPrior, rng: np.random.Generator
) -> Geometry:
    """Draw a prior geometry for a cell of ``n_atom`` atoms."""
    scale = float(n_atom) ** (1.0 / 3.0)
    lengths = scale * np.exp(
        np.asarray(prior.mu) + np.asarray(prior.sigma) * rng.standard_normal(3)
    )
    angles = rng.uniform(math.pi / 3.0, 2.0 * math.pi / 3.0, size=3)
    positions = rng.uniform(0.0, 1.0, size=(n_atom, 3))
    return Geometry(tuple(lengths), tuple(angles), positions)


def sample_time(cfg: FlowConfig, rng: np.random.Generator) -> float:
    """Lifted logit-normal draw: sigmoid(N(0,1)) w.p. 1 - eps_mix, else U[0,1]."""
    if rng.uniform() < cfg.eps_mix:
        return float(rng.uniform())
    n = rng.standard_normal()
    return float(1.0 / (1.0 + math.exp(-n)))


def lifted_logit_normal_cdf(t: np.ndarray, eps_mix: float) -> np.ndarray:
    """Analytic CDF of the timestep mixture, for distribution tests."""
    from math import sqrt

    t = np.clip(np.asarray(t, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    logit = np.log(t / (1.0 - t))
    phi = 0.5 * (1.0 + np.vectorize(math.erf)(logit / sqrt(2.0)))
    return (1.0 - eps_mix) * phi + eps_mix * t


def interpolate(g0: Geometry, g1: Geometry, t: float) -> Geometry:
    """Componentwise linear interpolation (1 - t) * g0 + t * g1, no wrapping."""
    if g0.n_atom != g1.n_atom:
        raise InvariantError(
            f"atom-count mismatch: {g0.n_atom} vs {g1.n_atom}"
        )
    lerp = lambda a, b: tuple((1.0 - t) * x + t * y for x, y in zip(a, b))
    positions = (1.0 - t) * g0.positions + t * g1.positions
    return Geometry(lerp(g0.lengths, g1.lengths), lerp(g0.angles, g1.angles), positions)


class GeometryFlow(nn.Module):
    """Transformer velocity field over (lengths, angles, positions).

    Tokens are [registers, lengths, angles, one per atom position], lifted by
    per-modality MLPs. Every block self-attends under AdaLN conditioning
    (pooled species embeddings plus a sinusoidal time embedding) and
    cross-attends to the clique rows of the latent mapped through
    LayerNorm(GELU(MLP(Z))). Per-modality output MLPs emit the velocities.
    """

    def __init__(
        self,
        cfg: TransformerConfig,
        shape: CliqueShape,
        vocab: Vocab,
        cond_pool: str = "mean",
        max_atoms: int = 20,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.shape = shape
        self.vocab = vocab
        self.cond_pool = cond_pool
        d = cfg.d_model
        self.len_mlp = Mlp(3, d, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        self.ang_mlp = Mlp(3, d, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        self.pos_mlp = Mlp(3, d, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        # Slot-index embedding on atom rows keeps velocity targets row-aligned
        # (exchangeable rows cannot fit per-row regression targets).
        self.pos_index_embedding = nn.Parameter(
            torch.randn(max_atoms, d, dtype=dtype) * 0.02
        )
        self.atom_embedding = nn.Embedding(vocab.size, d, dtype=dtype)
        self.time_mlp = nn.Linear(d, d, dtype=dtype)
        self.latent_mlp = Mlp(shape.d_clique, d, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        self.latent_norm = nn.LayerNorm(d, dtype=dtype)
        self.registers = RegisterTokens(cfg.n_registers, d, dtype=dtype)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg, cross=True, dtype=dtype) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(d, dtype=dtype)
        self.len_head = Mlp(d, 3, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        self.ang_head = Mlp(d, 3, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)
        self.pos_head = Mlp(d, 3, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.latent_norm.weight.dtype

    def latent_tokens(self, Z: torch.Tensor) -> torch.Tensor:
        """Map clique rows (B, n_cliques, d_clique) to context tokens (B, n_cliques, d)."""
        return self.latent_norm(gelu(self.latent_mlp(Z)))

    def velocity(
        self,
        lengths: torch.Tensor,
        angles: torch.Tensor,
        positions: torch.Tensor,
        t: torch.Tensor,
        species: torch.Tensor,
        atom_mask: torch.Tensor,
        context: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Velocities (v_len (B,3), v_ang (B,3), v_pos (B,P,3)) at state/time."""
        d = self.cfg.d_model
        h_len = self.len_mlp(lengths)[:, None, :]
        h_ang = self.ang_mlp(angles)[:, None, :]
        P = positions.shape[-2]
        h_pos = self.pos_mlp(positions) + self.pos_index_embedding[:P][None]
        h = torch.cat([h_len, h_ang, h_pos], dim=-2)
        cond = pooled_condition(
            self.atom_embedding(species), atom_mask, self.cond_pool
        ) + self.time_mlp(sinusoidal_embedding(t.to(h.dtype), d))
        h = self.registers.prepend(h)
        n_reg = self.registers.count
        key_mask = torch.cat(
            [
                torch.ones(h.shape[0], n_reg + 2, dtype=torch.bool, device=h.device),
                atom_mask,
            ],
            dim=-1,
        )
        attn_mask = key_mask[:, None, :]
        for block in self.blocks:
            h = block(h, cond, attn_mask=attn_mask, context=context)
        h = self.final_norm(self.registers.strip(h))
        v_len = self.len_head(h[:, 0, :])
        v_ang = self.ang_head(h[:, 1, :])
        v_pos = self.pos_head(h[:, 2:, :])
        return v_len, v_ang, v_pos


def guided_velocity(
    flow: GeometryFlow,
    state: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    t: torch.Tensor,
    species: torch.Tensor,
    atom_mask: torch.Tensor,
    context_cond: torch.Tensor,
    context_uncond: torch.Tensor | None,
    omega: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(1 + omega) * V(.|z) - omega * V(.|eps_z); at omega = 0 this is the
    conditional field, bit-exactly (the unconditional branch is skipped)."""
    lengths, angles, positions = state
    v_cond = flow.velocity(lengths, angles, positions, t, species, atom_mask, context_cond)
    if omega == 0.0:
        return v_cond
    if context_uncond is None:
        raise ValueError("guidance with omega != 0 requires an unconditional context")
    v_unc = flow.velocity(lengths, angles, positions, t, species, atom_mask, context_uncond)
    return tuple(
        (1.0 + omega) * c - omega * u for c, u in zip(v_cond, v_unc)
    )  # type: ignore[return-value]


def euler_integrate(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    x0: torch.Tensor,
    n_step: int,
) -> torch.Tensor:
    """Generic explicit Euler from t=0 to t=1 with step 1/n_step."""
    x = x0.clone()
    dt = 1.0 / n_step
    for k in range(n_step):
        x = x + velocity_fn(x, k * dt) * dt
    return x


@torch.no_grad()
def integrate(
    flow: GeometryFlow,
    z: np.ndarray,
    species: Sequence[int],
    cfg: FlowConfig,
    prior: LengthPrior,
    rng: np.random.Generator,
) -> Geometry:
    """Decode one geometry from a flat latent via guided Euler integration."""
    return integrate_batch(flow, z[None, :], [tuple(species)], cfg, prior, rng)[0]


@torch.no_grad()
def integrate_batch(
    flow: GeometryFlow,
    latents: np.ndarray,
    species_list: Sequence[Sequence[int]],
    cfg: FlowConfig,
    prior: LengthPrior,
    rng: np.random.Generator,
) -> list[Geometry]:
    """Decode a batch of geometries, one trajectory per latent.

    Each trajectory draws its prior state and one guidance noise vector
    eps_z (held fixed across every Euler step). Final positions wrap into
    [0, 1); angles and lengths are clamped away from degenerate values.
    """
    if len(species_list) == 0:
        raise ValueError("integrate_batch requires at least one species sequence")
    if any(len(s) == 0 for s in species_list):
        raise ValueError("species sequences must be non-empty")
    B = len(species_list)
    shape = flow.shape
    dtype = flow.dtype
    n_atoms = [len(s) for s in species_list]
    P = max(n_atoms)

    g0 = [sample_prior(n, prior, rng) for n in n_atoms]
    eps_z = rng.standard_normal((B, shape.d_z))

    lengths = torch.tensor(np.array([g.lengths for g in g0]), dtype=dtype)
    angles = torch.tensor(np.array([g.angles for g in g0]), dtype=dtype)
    positions = torch.full((B, P, 3), 0.5, dtype=dtype)
    species = torch.full((B, P), flow.vocab.pad_id, dtype=torch.long)
    atom_mask = torch.zeros(B, P, dtype=torch.bool)
    for i, (g, seq) in enumerate(zip(g0, species_list)):
        n = g.n_atom
        positions[i, :n] = torch.tensor(g.positions, dtype=dtype)
        species[i, :n] = torch.tensor(list(seq), dtype=torch.long)
        atom_mask[i, :n] = True

    z_t = torch.tensor(np.asarray(latents), dtype=dtype)
    context_cond = flow.latent_tokens(chain(z_t, shape))
    context_uncond = (
        flow.latent_tokens(chain(torch.tensor(eps_z, dtype=dtype), shape))
        if cfg.omega != 0.0
        else None
    )

    dt = 1.0 / cfg.n_step
    mask_f = atom_mask[..., None].to(dtype)
    for k in range(cfg.n_step):
        t = torch.full((B,), k * dt, dtype=dtype)
        v_len, v_ang, v_pos = guided_velocity(
            flow,
            (lengths, angles, positions),
            t,
            species,
            atom_mask,
            context_cond,
            context_uncond,
            cfg.omega,
        )
        lengths = lengths + v_len * dt
        angles = angles + v_ang * dt
        positions = positions + v_pos * mask_f * dt
        if not (
            torch.isfinite(lengths).all()
            and torch.isfinite(angles).all()
            and torch.isfinite(positions[atom_mask]).all()
        ):
            raise NonFiniteStateError(
                f"non-finite ODE state at step {k + 1}/{cfg.n_step}"
            )

    out: list[Geometry] = []
    lengths_np = lengths.cpu().numpy()
    angles_np = angles.cpu().numpy()
    positions_np = positions.cpu().numpy()
    for i, n in enumerate(n_atoms):
        final_lengths = np.maximum(lengths_np[i], LENGTH_FLOOR)
        final_angles = np.clip(angles_np[i], ANGLE_CLAMP, math.pi - ANGLE_CLAMP)
        final_positions = np.mod(positions_np[i, :n], 1.0)
        # mod can round to exactly 1.0 for tiny negatives; fold back.
        final_positions[final_positions >= 1.0] = 0.0
        out.append(Geometry(tuple(final_lengths), tuple(final_angles), final_positions))
    return out


def flow_loss_components(
    flow: GeometryFlow,
    lengths1: torch.Tensor,
    angles1: torch.Tensor,
    positions1: torch.Tensor,
    species: torch.Tensor,
    atom_mask: torch.Tensor,
    z: torch.Tensor,
    lengths0: torch.Tensor,
    angles0: torch.Tensor,
    positions0: torch.Tensor,
    t: torch.Tensor,
    latent_masked: torch.Tensor,
    eps_z: torch.Tensor,
    cfg: FlowConfig,
) -> dict[str, torch.Tensor]:
    """Per-record squared-error flow losses at the interpolated state.

    Records with ``latent_masked`` true condition on eps_z instead of z
    (the training-time counterpart of the unconditional guidance branch).
    Returns per-record tensors: len, ang, pos, and the tau_pos-weighted total.
    """
    tb = t[:, None]
    lengths_t = (1.0 - tb) * lengths0 + tb * lengths1
    angles_t = (1.0 - tb) * angles0 + tb * angles1
    positions_t = (1.0 - t[:, None, None]) * positions0 + t[:, None, None] * positions1
    z_cond = torch.where(latent_masked[:, None], eps_z, z)
    context = flow.latent_tokens(chain(z_cond, flow.shape))
    v_len, v_ang, v_pos = flow.velocity(
        lengths_t, angles_t, positions_t, t, species, atom_mask, context
    )
    loss_len = ((lengths1 - lengths0) - v_len).square().sum(dim=-1)
    loss_ang = ((angles1 - angles0) - v_ang).square().sum(dim=-1)
    pos_err = ((positions1 - positions0) - v_pos).square().sum(dim=-1)
    loss_pos = (pos_err * atom_mask.to(pos_err.dtype)).sum(dim=-1)
    total = loss_len + loss_ang + cfg.tau_pos * loss_pos
    return {"len": loss_len, "ang": loss_ang, "pos": loss_pos, "total": total}
