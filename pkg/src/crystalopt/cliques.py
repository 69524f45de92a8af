"""Chain-of-cliques latent structure and the decomposed property predictor.

A flat latent vector z of size d_z is viewed as an (n_cliques, d_clique)
matrix whose consecutive rows overlap in d_knot coordinates (the "knots"):
row i holds z[k] for k = i*(d_clique - d_knot) + j, j = 0..d_clique-1
(0-based). The property predictor sums one shared MLP head over the cliques,
so the prediction decomposes additively across them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class KnotMismatchError(ValueError):
    """Adjacent cliques disagree on a shared knot coordinate."""


@dataclass(frozen=True)
class CliqueShape:
    """Dimensions of the chain decomposition; d_z is derived."""

    n_cliques: int = 8
    d_clique: int = 16
    d_knot: int = 1

    def __post_init__(self) -> None:
        if self.n_cliques < 1 or self.d_clique < 1:
            raise ValueError("n_cliques and d_clique must be positive")
        if not 0 <= self.d_knot < self.d_clique:
            raise ValueError(
                f"d_knot must lie in [0, d_clique), got {self.d_knot}"
            )

    @property
    def d_z(self) -> int:
        return self.n_cliques * (self.d_clique - self.d_knot) + self.d_knot

    @property
    def stride(self) -> int:
        return self.d_clique - self.d_knot

    def clique_slice(self, c: int) -> slice:
        """Flat-coordinate slice of clique c (0-based), knots included."""
        if not 0 <= c < self.n_cliques:
            raise ValueError(f"clique index must lie in [0, {self.n_cliques}), got {c}")
        start = c * self.stride
        return slice(start, start + self.d_clique)

    def index_matrix(self) -> np.ndarray:
        """(n_cliques, d_clique) matrix of flat indices into z."""
        rows = np.arange(self.n_cliques)[:, None] * self.stride
        cols = np.arange(self.d_clique)[None, :]
        return rows + cols


def chain(z, shape: CliqueShape):
    """Reshape a flat latent (..., d_z) into clique rows (..., n_cliques, d_clique).

    Works on numpy arrays and torch tensors alike; knot coordinates are
    duplicated into both adjacent rows, so the knot invariant holds by
    construction.
    """
    if z.shape[-1] != shape.d_z:
        raise ValueError(
            f"latent has {z.shape[-1]} coordinates, shape requires d_z={shape.d_z}"
        )
    idx = shape.index_matrix()
    if isinstance(z, torch.Tensor):
        return z[..., torch.as_tensor(idx, device=z.device)]
    return np.asarray(z)[..., idx]


def flatten(Z: np.ndarray, shape: CliqueShape, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`chain` for a single (n_cliques, d_clique) matrix.

    Raises :class:`KnotMismatchError` naming the first violating
    (clique pair, knot offset) when adjacent rows disagree beyond ``tol``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != (shape.n_cliques, shape.d_clique):
        raise ValueError(
            f"expected shape {(shape.n_cliques, shape.d_clique)}, got {Z.shape}"
        )
    if shape.d_knot > 0:
        for i in range(shape.n_cliques - 1):
            tail = Z[i, shape.stride :]
            head = Z[i + 1, : shape.d_knot]
            diff = np.abs(tail - head)
            if np.any(diff > tol):
                offset = int(np.argmax(diff > tol))
                raise KnotMismatchError(
                    f"cliques ({i}, {i + 1}) disagree at knot offset {offset}: "
                    f"{tail[offset]!r} vs {head[offset]!r}"
                )
    z = np.empty(shape.d_z, dtype=Z.dtype)
    for i in range(shape.n_cliques):
        z[i * shape.stride : i * shape.stride + shape.d_clique] = Z[i]
    return z


def clique_kl(mu, log_sigma, shape: CliqueShape, c: int):
    """KL(N(mu_c, sigma_c^2) || N(0, I)) over the coordinates of clique c.

    Accepts numpy arrays or torch tensors with trailing dimension d_z;
    reduces over the clique's d_clique coordinates. Returns a scalar (or a
    batch of scalars for batched input).
    """
    sl = shape.clique_slice(c)
    mu_c = mu[..., sl]
    ls_c = log_sigma[..., sl]
    if isinstance(mu_c, torch.Tensor):
        var = torch.exp(2.0 * ls_c)
        return 0.5 * (var + mu_c * mu_c - 1.0 - 2.0 * ls_c).sum(dim=-1)
    mu_c = np.asarray(mu_c, dtype=np.float64)
    ls_c = np.asarray(ls_c, dtype=np.float64)
    var = np.exp(2.0 * ls_c)
    return 0.5 * np.sum(var + mu_c * mu_c - 1.0 - 2.0 * ls_c, axis=-1)


class CliquePredictor(nn.Module):
    """Additively decomposed property head: sum over cliques of a shared MLP
    applied to [clique values, learned clique-index embedding].
    """

    def __init__(
        self,
        shape: CliqueShape,
        mlp_dim: int = 128,
        n_mlp: int = 2,
        index_dim: int | None = None,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        self.shape = shape
        self.index_dim = shape.d_clique if index_dim is None else index_dim
        self.clique_embedding = nn.Embedding(
            shape.n_cliques, self.index_dim, dtype=dtype
        )
        layers: list[nn.Module] = []
        width = shape.d_clique + self.index_dim
        for _ in range(n_mlp):
            layers += [nn.Linear(width, mlp_dim, dtype=dtype), nn.GELU()]
            width = mlp_dim
        layers.append(nn.Linear(width, 1, dtype=dtype))
        self.head = nn.Sequential(*layers)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        """Map clique rows (..., n_cliques, d_clique) to scalar predictions (...)."""
        if Z.shape[-2:] != (self.shape.n_cliques, self.shape.d_clique):
            raise ValueError(
                f"expected trailing shape {(self.shape.n_cliques, self.shape.d_clique)}, "
                f"got {tuple(Z.shape[-2:])}"
            )
        idx = torch.arange(self.shape.n_cliques, device=Z.device)
        emb = self.clique_embedding(idx).expand(*Z.shape[:-2], -1, -1)
        per_clique = self.head(torch.cat([Z, emb], dim=-1)).squeeze(-1)
        return per_clique.sum(dim=-1)

    def predict_latent(self, z: torch.Tensor) -> torch.Tensor:
        """Predict from a flat latent (..., d_z)."""
        return self.forward(chain(z, self.shape))
