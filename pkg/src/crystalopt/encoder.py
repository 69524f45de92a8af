"""Encoder: map a material to the mean and log-standard-deviation of its
latent Gaussian.

Lengths, angles, and fractional positions are lifted to d_model with
per-modality MLPs and concatenated into a (2 + n_atom)-row sequence; the
transformer is conditioned on pooled atom-type embeddings via adaptive
layer-norm, attention-pooled with a learnable query, and a linear head emits
[mu, log_sigma]. The pooling step is what lets one fixed-width latent cover
every atom count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from crystalopt.cliques import CliqueShape
from crystalopt.core import Material, Vocab
from crystalopt.nn import (
    AttentionPool,
    Mlp,
    RegisterTokens,
    TransformerBlock,
    TransformerConfig,
    gelu,
)

LOG_SIGMA_MIN = -8.0
LOG_SIGMA_MAX = 4.0


@dataclass(frozen=True)
class EncoderOutput:
    """Latent Gaussian parameters; log_sigma is clamped to [-8, 4]."""

    mu: np.ndarray
    log_sigma: np.ndarray


def pooled_condition(
    H_atom: torch.Tensor, atom_mask: torch.Tensor, mode: str = "mean"
) -> torch.Tensor:
    """Reduce per-atom embeddings (B, P, d) to one conditioning vector (B, d).

    ``mean`` averages over real atoms; ``sum`` keeps atom-count information
    in the magnitude.
    """
    masked = H_atom * atom_mask[..., None].to(H_atom.dtype)
    total = masked.sum(dim=-2)
    if mode == "sum":
        return total
    if mode == "mean":
        counts = atom_mask.to(H_atom.dtype).sum(dim=-1, keepdim=True).clamp(min=1.0)
        return total / counts
    raise ValueError(f"unknown conditioning pool mode '{mode}'")


class MaterialEncoder(nn.Module):
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
        # Atom rows carry a slot-index embedding: without it the rows are
        # exchangeable and row-aligned position targets cannot be learned.
        self.pos_index_embedding = nn.Parameter(
            torch.randn(max_atoms, d, dtype=dtype) * 0.02
        )
        self.atom_embedding = nn.Embedding(vocab.size, d, dtype=dtype)
        self.registers = RegisterTokens(cfg.n_registers, d, dtype=dtype)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg, dtype=dtype) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(d, dtype=dtype)
        self.pool = AttentionPool(d, dtype=dtype)
        self.post_norm = nn.LayerNorm(d, dtype=dtype)
        self.head = nn.Linear(d, 2 * shape.d_z, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def embed_inputs(
        self,
        lengths: torch.Tensor,
        angles: torch.Tensor,
        positions: torch.Tensor,
        species: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Lift a padded batch to model space.

        Returns H_in of shape (B, 2 + P, d_model) — one row for lengths, one
        for angles, one per (possibly padded) atom position — and the atom
        embeddings H_atom of shape (B, P, d_model).
        """
        h_len = self.len_mlp(lengths)[:, None, :]
        h_ang = self.ang_mlp(angles)[:, None, :]
        P = positions.shape[-2]
        H_pos = self.pos_mlp(positions) + self.pos_index_embedding[:P][None]
        H_in = torch.cat([h_len, h_ang, H_pos], dim=-2)
        H_atom = self.atom_embedding(species)
        return H_in, H_atom

    def forward(
        self,
        lengths: torch.Tensor,
        angles: torch.Tensor,
        positions: torch.Tensor,
        species: torch.Tensor,
        atom_mask: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a padded batch into (mu, log_sigma), each (B, d_z)."""
        H_in, H_atom = self.embed_inputs(lengths, angles, positions, species)
        cond = pooled_condition(H_atom, atom_mask, self.cond_pool)
        h = self.registers.prepend(H_in)
        n_reg = self.registers.count
        key_mask = torch.cat(
            [
                torch.ones(
                    h.shape[0], n_reg + 2, dtype=torch.bool, device=h.device
                ),
                atom_mask,
            ],
            dim=-1,
        )
        attn_mask = key_mask[:, None, :]
        for block in self.blocks:
            h = block(h, cond, attn_mask=attn_mask)
        h = self.final_norm(h)
        pool_mask = key_mask.clone()
        pool_mask[:, :n_reg] = False
        pooled = self.pool(h, key_mask=pool_mask)
        h_post = self.post_norm(gelu(pooled))
        out = self.head(h_post)
        d_z = self.shape.d_z
        mu = out[..., :d_z]
        log_sigma = out[..., d_z:].clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    @torch.no_grad()
    def encode(self, material: Material) -> EncoderOutput:
        """Encode a single material (convenience wrapper, numpy in/out)."""
        mu, log_sigma = self.forward(*single_material_tensors(material, self.dtype))
        return EncoderOutput(
            mu=mu[0].cpu().numpy(), log_sigma=log_sigma[0].cpu().numpy()
        )


def single_material_tensors(
    material: Material, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(lengths, angles, positions, species, atom_mask) batch of one."""
    g = material.geometry
    lengths = torch.tensor([g.lengths], dtype=dtype)
    angles = torch.tensor([g.angles], dtype=dtype)
    positions = torch.tensor(g.positions[None, :, :], dtype=dtype)
    species = torch.tensor([list(material.species)], dtype=torch.long)
    atom_mask = torch.ones(1, material.n_atom, dtype=torch.bool)
    return lengths, angles, positions, species, atom_mask


def sample_latent(out: EncoderOutput, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw z = mu + exp(log_sigma) * eps, eps ~ N(0, I)."""
    eps = rng.standard_normal(out.mu.shape[0])
    return out.mu + np.exp(out.log_sigma) * eps


def reparameterize(
    mu: torch.Tensor, log_sigma: torch.Tensor, eps: torch.Tensor
) -> torch.Tensor:
    """Torch-side reparameterization; gradients flow to mu and log_sigma."""
    return mu + torch.exp(log_sigma) * eps
