"""Autoregressive decoding of the atom-type sequence conditioned on a latent.

A causal transformer is conditioned via adaptive layer-norm on
z_mod = LayerNorm(GELU(Lin(z))) and trained with next-token prediction over
[Start, species..., Stop]. Decoding uses beam search scored by accumulated
log-probability; Start and Pad never receive probability mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from crystalopt.core import Vocab
from crystalopt.nn import Mlp, TransformerBlock, TransformerConfig, causal_mask, gelu


class MalformedPrefixError(ValueError):
    """Decoder prefix does not start with Start or exceeds the maximum length."""


@dataclass(frozen=True)
class DecoderConfig:
    """Beam width and the maximum decoded species count (sequence length
    including Start and Stop is max_species + 2)."""

    n_beam: int = 10
    max_species: int = 20

    def __post_init__(self) -> None:
        if self.n_beam < 1:
            raise ValueError(f"n_beam must be >= 1, got {self.n_beam}")
        if self.max_species < 1:
            raise ValueError(f"max_species must be >= 1, got {self.max_species}")


@dataclass(frozen=True)
class Hypothesis:
    """A completed beam hypothesis: decoded species and accumulated log-prob."""

    species: tuple[int, ...]
    score: float


class AtomDecoder(nn.Module):
    def __init__(
        self,
        cfg: TransformerConfig,
        d_z: int,
        vocab: Vocab,
        max_species: int = 20,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.max_species = max_species
        d = cfg.d_model
        self.latent_proj = nn.Linear(d_z, d, dtype=dtype)
        self.mod_norm = nn.LayerNorm(d, dtype=dtype)
        self.token_embedding = nn.Embedding(vocab.size, d, dtype=dtype)
        self.position_embedding = nn.Embedding(max_species + 2, d, dtype=dtype)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg, dtype=dtype) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(d, dtype=dtype)
        self.head = Mlp(d, vocab.size, cfg.mlp_dim, cfg.n_mlp, dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.latent_proj.weight.dtype

    def modulate_latent(self, z: torch.Tensor) -> torch.Tensor:
        """z_mod = LayerNorm(GELU(Lin(z))), one d_model vector per latent."""
        return self.mod_norm(gelu(self.latent_proj(z)))

    def logits(self, tokens: torch.Tensor, z_mod: torch.Tensor) -> torch.Tensor:
        """Causal next-token logits (B, S, vocab.size); Start and Pad are -inf."""
        B, S = tokens.shape
        pos = torch.arange(S, device=tokens.device)
        h = self.token_embedding(tokens) + self.position_embedding(pos)[None]
        mask = causal_mask(S, device=tokens.device)
        for block in self.blocks:
            h = block(h, z_mod, attn_mask=mask)
        h = self.final_norm(h)
        out = self.head(h)
        out = out.clone()
        out[..., self.vocab.start_id] = float("-inf")
        out[..., self.vocab.pad_id] = float("-inf")
        return out

    def next_token_logprobs(
        self, prefix: Sequence[int], z_mod: torch.Tensor
    ) -> np.ndarray:
        """Log-probabilities of the next token given a prefix starting with Start."""
        prefix = list(prefix)
        if not prefix or prefix[0] != self.vocab.start_id:
            raise MalformedPrefixError("prefix must begin with the Start token")
        if len(prefix) > self.max_species + 1:
            raise MalformedPrefixError(
                f"prefix length {len(prefix)} exceeds maximum {self.max_species + 1}"
            )
        with torch.no_grad():
            tokens = torch.tensor([prefix], dtype=torch.long)
            logits = self.logits(tokens, z_mod.reshape(1, -1))[0, -1]
            return torch.log_softmax(logits, dim=-1).cpu().numpy()

    def nll_loss(
        self,
        species: torch.Tensor,
        atom_mask: torch.Tensor,
        z: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Summed next-token negative log-likelihood per record.

        ``species`` is (B, P) with Pad beyond each record's atom count. The
        model predicts [species..., Stop] from inputs [Start, species...];
        padded positions contribute exactly zero. Returns (per-record sums,
        per-record token counts); the mean-per-token form used for reporting
        is sums / counts.
        """
        B, P = species.shape
        start = torch.full((B, 1), self.vocab.start_id, dtype=torch.long)
        inputs = torch.cat([start, species], dim=1)
        z_mod = self.modulate_latent(z)
        logits = self.logits(inputs, z_mod)
        logprobs = torch.log_softmax(logits, dim=-1)
        stop_col = torch.full((B, 1), self.vocab.stop_id, dtype=torch.long)
        targets = torch.cat([species, stop_col], dim=1)
        # Positions after each record's Stop are masked; relocate each Stop
        # target to the first padded slot.
        n_atoms = atom_mask.long().sum(dim=1)
        target_mask = torch.arange(P + 1)[None, :] <= n_atoms[:, None]
        targets = torch.where(target_mask, targets, torch.zeros_like(targets))
        stop_positions = n_atoms[:, None]
        targets = targets.scatter(
            1, stop_positions, torch.full_like(stop_positions, self.vocab.stop_id)
        )
        token_ll = logprobs.gather(-1, targets[..., None]).squeeze(-1)
        token_ll = token_ll * target_mask.to(token_ll.dtype)
        return -token_ll.sum(dim=1), target_mask.sum(dim=1)

    @torch.no_grad()
    def beam_search(
        self, z_mod: torch.Tensor, cfg: DecoderConfig | None = None
    ) -> tuple[int, ...]:
        """Best completed species sequence by accumulated log-probability."""
        return self.beam_search_all(z_mod, cfg)[0].species

    @torch.no_grad()
    def beam_search_all(
        self, z_mod: torch.Tensor, cfg: DecoderConfig | None = None
    ) -> list[Hypothesis]:
        """All completed hypotheses, best first.

        A hypothesis completes when Stop is emitted (its log-prob counts
        toward the score) or when it reaches max_species tokens (truncation,
        no Stop term). Deterministic: score ties break by token id, then by
        hypothesis insertion order.
        """
        cfg = cfg or DecoderConfig(max_species=self.max_species)
        if cfg.max_species > self.max_species:
            cfg = DecoderConfig(n_beam=cfg.n_beam, max_species=self.max_species)
        vocab = self.vocab
        z_mod = z_mod.reshape(1, -1)
        start = (vocab.start_id,)
        # alive entries: (tokens, score, insertion_key)
        alive: list[tuple[tuple[int, ...], float, tuple]] = [(start, 0.0, ())]
        completed: list[tuple[Hypothesis, tuple]] = []
        allowed = list(range(vocab.n_species)) + [vocab.stop_id]
        while alive:
            tokens = torch.tensor([list(h[0]) for h in alive], dtype=torch.long)
            logits = self.logits(tokens, z_mod.expand(len(alive), -1))[:, -1]
            logprobs = torch.log_softmax(logits, dim=-1).cpu().numpy()
            candidates: list[tuple[tuple[int, ...], float, tuple, int]] = []
            for h_idx, (prefix, score, key) in enumerate(alive):
                for token in allowed:
                    candidates.append(
                        (prefix, score + float(logprobs[h_idx, token]), key + (h_idx,), token)
                    )
            # Sort by score descending; ties by token id then insertion order.
            candidates.sort(key=lambda c: (-c[1], c[3], c[2]))
            next_alive: list[tuple[tuple[int, ...], float, tuple]] = []
            for prefix, score, key, token in candidates[: cfg.n_beam]:
                if token == vocab.stop_id:
                    completed.append((Hypothesis(prefix[1:], score), key))
                    continue
                seq = prefix + (token,)
                if len(seq) - 1 >= cfg.max_species:
                    completed.append((Hypothesis(seq[1:], score), key))
                else:
                    next_alive.append((seq, score, key))
            alive = next_alive
        completed.sort(key=lambda item: (-item[0].score, item[1]))
        return [hyp for hyp, _ in completed]
