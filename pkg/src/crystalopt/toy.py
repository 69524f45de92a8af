"""Synthetic target-property oracles and dataset generation.

These analytic oracles stand in for the expensive ML property predictors a
full-scale run would call. The composition-affinity oracle has a known
optimal composition (every atom the minimum-weight species), which gives
end-to-end optimization tests a ground-truth direction; species sampling is
skewed toward high-weight species so the optimum is rare in the data and
improvement requires recombining per-clique structure rather than recalling
a dense neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from crystalopt.core import (
    DEFAULT_MAX_ATOMS,
    Material,
    MaterialRecord,
    Vocab,
    density,
)
from crystalopt.flow import LengthPrior, sample_prior

ORACLE_KINDS = ("composition-affinity", "packing", "regularized")


@dataclass(frozen=True)
class OracleSpec:
    """Analytic oracle definition.

    composition-affinity: mean of weights over the species sequence.
    packing: |density - rho_star| + gamma * mean weight.
    regularized: composition-affinity plus a hinge penalty
        lambda_reg * max(0, g(m) - tau_reg) on an inner oracle g.
    """

    kind: str = "composition-affinity"
    weights: tuple[float, ...] = ()
    rho_star: float = 1.0
    gamma: float = 0.0
    lambda_reg: float = 20.0
    tau_reg: float = -0.2
    inner: Optional["OracleSpec"] = None

    def __post_init__(self) -> None:
        if self.kind not in ORACLE_KINDS:
            raise ValueError(f"unknown oracle kind '{self.kind}'")
        weights = tuple(float(w) for w in self.weights)
        if not all(np.isfinite(weights)):
            raise ValueError("weights must be finite")
        if self.kind == "packing" and self.rho_star <= 0:
            raise ValueError(f"rho_star must be > 0, got {self.rho_star}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == "regularized" and self.inner is None:
            raise ValueError("regularized oracle requires an inner oracle")
        object.__setattr__(self, "weights", weights)


def oracle(m: Material, spec: OracleSpec) -> float:
    """Evaluate the oracle; deterministic and smooth in geometry where used."""
    if spec.kind == "composition-affinity":
        return _mean_weight(m, spec)
    if spec.kind == "packing":
        return abs(density(m) - spec.rho_star) + spec.gamma * _mean_weight(m, spec)
    assert spec.inner is not None
    penalty = max(0.0, oracle(m, spec.inner) - spec.tau_reg)
    return _mean_weight(m, spec) + spec.lambda_reg * penalty


def _mean_weight(m: Material, spec: OracleSpec) -> float:
    if not spec.weights:
        return 0.0
    w = np.asarray(spec.weights)
    idx = np.asarray(m.species)
    if idx.max() >= len(w):
        raise ValueError(
            f"species id {int(idx.max())} out of range for {len(w)} weights"
        )
    return float(w[idx].mean())


def default_weights(vocab: Vocab, rng: np.random.Generator) -> tuple[float, ...]:
    """Uniform(0, 1) species weights."""
    return tuple(rng.uniform(0.0, 1.0, size=vocab.n_species))


def species_probabilities(
    weights: tuple[float, ...], skew: float = 2.0
) -> np.ndarray:
    """Sampling distribution tilted toward high-weight species, so low-weight
    (favorable) compositions stay rare in generated data."""
    w = np.asarray(weights, dtype=np.float64)
    logits = skew * w
    p = np.exp(logits - logits.max())
    return p / p.sum()


def generate_dataset(
    n: int,
    spec: OracleSpec,
    prior: LengthPrior,
    seed: int,
    vocab: Vocab | None = None,
    max_atoms: int = DEFAULT_MAX_ATOMS,
    skew: float = 2.0,
) -> list[MaterialRecord]:
    """Sample ``n`` labeled records: atom counts uniform on {1..max_atoms},
    species i.i.d. from the skewed categorical (stored in sorted order, the
    canonical composition layout), geometry from the prior."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    vocab = vocab or Vocab()
    if spec.weights and len(spec.weights) != vocab.n_species:
        raise ValueError(
            f"oracle has {len(spec.weights)} weights for {vocab.n_species} species"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    probs = (
        species_probabilities(spec.weights, skew)
        if spec.weights
        else np.full(vocab.n_species, 1.0 / vocab.n_species)
    )
    records = []
    for _ in range(n):
        n_atom = int(rng.integers(1, max_atoms + 1))
        species = tuple(
            sorted(int(s) for s in rng.choice(vocab.n_species, size=n_atom, p=probs))
        )
        geometry = sample_prior(n_atom, prior, rng)
        material = Material(species, geometry, vocab=vocab, max_atoms=max_atoms)
        records.append(MaterialRecord(material, oracle(material, spec)))
    return records


def default_length_prior() -> LengthPrior:
    """Canonical lengths around 1.15 with modest spread; cells land near
    unit atom density."""
    mu = float(np.log(1.15))
    return LengthPrior((mu, mu, mu), (0.2, 0.2, 0.2))
