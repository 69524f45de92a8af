"""Full model assembly: encoder, clique predictor, atom decoder, geometry flow.

Two named profiles are provided: ``paper`` (the full-scale hyperparameters)
and ``desk`` (reduced transformer for tests and quick experiments). The
length prior is fitted from training data and carried with the model so it
serializes into checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from crystalopt.atom_decoder import AtomDecoder, DecoderConfig
from crystalopt.cliques import CliquePredictor, CliqueShape, chain
from crystalopt.core import Geometry, Material, MaterialRecord, Vocab
from crystalopt.encoder import MaterialEncoder, single_material_tensors
from crystalopt.flow import FlowConfig, GeometryFlow, LengthPrior, integrate_batch
from crystalopt.nn import ParameterStore, TransformerConfig


@dataclass(frozen=True)
class ModelConfig:
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    shape: CliqueShape = field(default_factory=CliqueShape)
    n_species: int = 16
    max_atoms: int = 20
    cond_pool: str = "mean"
    predictor_mlp_dim: int = 128
    predictor_n_mlp: int = 2

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(transformer=TransformerConfig.desk())

    def with_shape(self, shape: CliqueShape) -> "ModelConfig":
        return replace(self, shape=shape)


class CrystalModel(nn.Module):
    """Bundle of the four submodules plus the fitted length prior."""

    def __init__(self, cfg: ModelConfig, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocab(cfg.n_species)
        self.shape = cfg.shape
        self.encoder = MaterialEncoder(
            cfg.transformer,
            cfg.shape,
            self.vocab,
            cond_pool=cfg.cond_pool,
            max_atoms=cfg.max_atoms,
            dtype=dtype,
        )
        self.predictor = CliquePredictor(
            cfg.shape,
            mlp_dim=cfg.predictor_mlp_dim,
            n_mlp=cfg.predictor_n_mlp,
            dtype=dtype,
        )
        self.atom_decoder = AtomDecoder(
            cfg.transformer,
            cfg.shape.d_z,
            self.vocab,
            max_species=cfg.max_atoms,
            dtype=dtype,
        )
        self.flow = GeometryFlow(
            cfg.transformer,
            cfg.shape,
            self.vocab,
            cond_pool=cfg.cond_pool,
            max_atoms=cfg.max_atoms,
            dtype=dtype,
        )
        self.length_prior: LengthPrior | None = None

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.dtype

    def parameter_store(self) -> ParameterStore:
        return ParameterStore(self)

    def require_prior(self) -> LengthPrior:
        if self.length_prior is None:
            raise RuntimeError("length prior not set; fit or load a checkpoint first")
        return self.length_prior

    @torch.no_grad()
    def encode_records(self, records: Sequence[MaterialRecord]) -> np.ndarray:
        """Posterior means mu_z for each record, stacked to (N, d_z)."""
        self.eval()
        out = np.empty((len(records), self.shape.d_z))
        for i, record in enumerate(records):
            mu, _ = self.encoder(
                *single_material_tensors(record.material, self.dtype)
            )
            out[i] = mu[0].cpu().numpy()
        return out

    def surrogate(self) -> "ModelSurrogate":
        return ModelSurrogate(self.predictor, self.shape, self.dtype)

    @torch.no_grad()
    def decode_species(
        self, z: np.ndarray, dec_cfg: DecoderConfig | None = None
    ) -> tuple[int, ...]:
        """Beam-decode a species sequence; an empty best hypothesis falls back
        to the next-best non-empty one (a material needs at least one atom)."""
        self.eval()
        z_t = torch.tensor(z, dtype=self.dtype)
        z_mod = self.atom_decoder.modulate_latent(z_t.reshape(1, -1))
        hypotheses = self.atom_decoder.beam_search_all(z_mod, dec_cfg)
        for hyp in hypotheses:
            if hyp.species:
                return hyp.species
        # Reachable only with max_species = 0; keep a hard failure for safety.
        raise RuntimeError("beam search produced no non-empty hypothesis")

    @torch.no_grad()
    def decode_latents(
        self,
        latents: np.ndarray,
        flow_cfg: FlowConfig,
        rng: np.random.Generator,
        dec_cfg: DecoderConfig | None = None,
    ) -> list[Material]:
        """Full decode: beam-search species, then guided flow over geometry."""
        self.eval()
        latents = np.asarray(latents, dtype=np.float64)
        species_list = [self.decode_species(z, dec_cfg) for z in latents]
        geometries = integrate_batch(
            self.flow, latents, species_list, flow_cfg, self.require_prior(), rng
        )
        return [
            Material(seq, geom, vocab=self.vocab, max_atoms=self.cfg.max_atoms)
            for seq, geom in zip(species_list, geometries)
        ]


class ModelSurrogate:
    """Latent-space property surrogate f(z) = sum_c head(Z_c, c).

    ``__call__`` evaluates a (M, d_z) batch without gradients (for ES);
    ``gradient`` returns exact reverse-mode gradients (for BP).
    """

    def __init__(
        self, predictor: CliquePredictor, shape: CliqueShape, dtype: torch.dtype
    ) -> None:
        self.predictor = predictor
        self.shape = shape
        self.dtype = dtype

    def __call__(self, latents: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = torch.tensor(np.asarray(latents), dtype=self.dtype)
            return self.predictor.predict_latent(z).cpu().numpy()

    def gradient(self, latents: np.ndarray) -> np.ndarray:
        z = torch.tensor(np.asarray(latents), dtype=self.dtype, requires_grad=True)
        values = self.predictor.predict_latent(z)
        values.sum().backward()
        assert z.grad is not None
        return z.grad.cpu().numpy()


def build_model(
    cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float64
) -> CrystalModel:
    """Construct a model with seed-deterministic initialization."""
    torch.manual_seed(seed)
    return CrystalModel(cfg, dtype=dtype)


def geometry_close(
    a: Geometry,
    b: Geometry,
    length_rtol: float = 0.02,
    angle_atol_deg: float = 2.0,
    position_atol: float = 0.05,
) -> bool:
    """Documented reconstruction agreement: lengths within 2% relative,
    angles within 2 degrees, positions within 0.05 fractional after wrapping
    (per-coordinate, on the shorter-arc distance around the unit torus)."""
    if a.n_atom != b.n_atom:
        return False
    la, lb = np.asarray(a.lengths), np.asarray(b.lengths)
    if np.any(np.abs(la - lb) > length_rtol * np.abs(la)):
        return False
    ang_a, ang_b = np.degrees(a.angles), np.degrees(b.angles)
    if np.any(np.abs(ang_a - ang_b) > angle_atol_deg):
        return False
    delta = np.mod(a.positions - b.positions, 1.0)
    delta = np.minimum(delta, 1.0 - delta)
    return bool(np.all(delta <= position_atol))


def materials_match(a: Material, b: Material) -> bool:
    """Exact species-sequence equality plus geometry agreement."""
    return a.species == b.species and geometry_close(a.geometry, b.geometry)
