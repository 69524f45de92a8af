import math

import numpy as np
import pytest
import torch

from crystalopt.cliques import CliqueShape
from crystalopt.core import Geometry, Material, MaterialRecord, Vocab
from crystalopt.flow import LengthPrior
from crystalopt.nn import TransformerConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_transformer() -> TransformerConfig:
    return TransformerConfig(
        d_model=32, n_blocks=1, n_heads=2, n_registers=2, mlp_dim=32, n_mlp=1, dropout=0.1
    )


@pytest.fixture(scope="session")
def tiny_shape() -> CliqueShape:
    return CliqueShape(n_cliques=3, d_clique=5, d_knot=1)


@pytest.fixture(scope="session")
def tiny_vocab() -> Vocab:
    return Vocab(n_species=5)


@pytest.fixture(scope="session")
def tiny_prior() -> LengthPrior:
    return LengthPrior((0.1, 0.1, 0.1), (0.15, 0.15, 0.15))


def make_material(
    rng: np.random.Generator,
    vocab: Vocab,
    max_atoms: int = 6,
    n_atom: int | None = None,
) -> Material:
    n = n_atom or int(rng.integers(1, max_atoms + 1))
    species = tuple(sorted(int(s) for s in rng.integers(0, vocab.n_species, size=n)))
    geometry = Geometry(
        tuple(rng.uniform(1.0, 3.0, size=3)),
        tuple(rng.uniform(math.pi / 3, 2 * math.pi / 3, size=3)),
        rng.uniform(0.0, 1.0, size=(n, 3)),
    )
    return Material(species, geometry, vocab=vocab, max_atoms=max_atoms)


def make_records(
    rng: np.random.Generator,
    vocab: Vocab,
    n: int,
    max_atoms: int = 6,
) -> list[MaterialRecord]:
    return [
        MaterialRecord(make_material(rng, vocab, max_atoms), float(rng.normal()))
        for _ in range(n)
    ]
