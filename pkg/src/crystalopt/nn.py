"""Differentiable compute layer: dense/attention/normalization primitives and
the adaptive-normalization, pooling, and cross-attention mechanisms the
encoder and decoders assemble.

Reverse-mode gradients come from torch autograd; every differentiable
operation here is checked against central finite differences in the test
suite. Dropout applies to attention weights and feed-forward activations
during training only; evaluation is dropout-free and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class AllMaskedError(ValueError):
    """An attention query row has no attendable key."""


class EmptySequenceError(ValueError):
    """Pooling or conditioning received an empty sequence."""


class NoGraphError(RuntimeError):
    """backward() was called on a value with no recorded forward graph."""


@dataclass(frozen=True)
class TransformerConfig:
    """Transformer stack dimensions. Defaults match the full-scale profile;
    ``desk()`` is the reduced profile used throughout the tests."""

    d_model: int = 256
    n_blocks: int = 4
    n_heads: int = 4
    n_registers: int = 2
    mlp_dim: int = 128
    n_mlp: int = 2
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def desk(cls) -> "TransformerConfig":
        return cls(d_model=64, n_blocks=2, n_heads=2)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    """x @ W^T + b over the last axis."""
    if x.shape[-1] != W.shape[-1]:
        raise ShapeMismatchError(
            f"linear: input width {x.shape[-1]} != weight width {W.shape[-1]}"
        )
    return F.linear(x, W, b)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf-based) GELU."""
    return F.gelu(x)


def layer_norm(
    x: torch.Tensor,
    scale: torch.Tensor | None = None,
    shift: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if scale is not None:
        if scale.shape[-1] != x.shape[-1]:
            raise ShapeMismatchError(
                f"layer_norm: scale width {scale.shape[-1]} != input width {x.shape[-1]}"
            )
        out = out * scale
    if shift is not None:
        out = out + shift
    return out


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 1e4) -> torch.Tensor:
    """Sinusoidal embedding of scalars t (...,) into (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period)
        * torch.arange(half, dtype=t.dtype, device=t.device)
        / max(half - 1, 1)
    )
    args = t[..., None] * freqs * max_period
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def causal_mask(n: int, device=None) -> torch.Tensor:
    """(n, n) boolean mask, True where position q may attend to position k <= q."""
    return torch.tril(torch.ones(n, n, dtype=torch.bool, device=device))


def backward(loss: torch.Tensor) -> None:
    """Accumulate reverse-mode gradients of a scalar loss into parameter
    gradient buffers. Raises :class:`NoGraphError` without a forward graph."""
    if loss.grad_fn is None and not loss.requires_grad:
        raise NoGraphError("backward() called on a value with no recorded graph")
    loss.backward()


class ParameterStore:
    """Named view of a module's parameters and gradient buffers."""

    def __init__(self, module: nn.Module) -> None:
        self.module = module

    def names(self) -> list[str]:
        return [name for name, _ in self.module.named_parameters()]

    def get(self, name: str) -> nn.Parameter:
        params = dict(self.module.named_parameters())
        if name not in params:
            raise KeyError(f"unknown parameter '{name}'")
        return params[name]

    def grad(self, name: str) -> torch.Tensor | None:
        return self.get(name).grad

    def zero_grad(self) -> None:
        self.module.zero_grad(set_to_none=False)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            name: p.detach().cpu().numpy().astype(np.float64)
            for name, p in self.module.named_parameters()
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.module.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(
                f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        with torch.no_grad():
            for name, p in params.items():
                arr = np.asarray(arrays[name])
                if tuple(arr.shape) != tuple(p.shape):
                    raise ShapeMismatchError(
                        f"parameter '{name}': checkpoint shape {arr.shape} != model shape "
                        f"{tuple(p.shape)}"
                    )
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))


class MultiheadAttention(nn.Module):
    """softmax(QK^T / sqrt(d_head) + mask) V per head, concatenated and projected.

    ``mask`` is boolean with True marking attendable positions, broadcastable
    to (batch, heads, n_q, n_k). A query row with no attendable key raises
    :class:`AllMaskedError`.
    """

    def __init__(self, cfg: TransformerConfig, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.q_proj = nn.Linear(d, d, dtype=dtype)
        self.k_proj = nn.Linear(d, d, dtype=dtype)
        self.v_proj = nn.Linear(d, d, dtype=dtype)
        self.out_proj = nn.Linear(d, d, dtype=dtype)
        self.attn_dropout = nn.Dropout(cfg.dropout)

    def forward(
        self,
        q_in: torch.Tensor,
        kv_in: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if kv_in.shape[-2] == 0:
            raise EmptySequenceError("attention requires at least one key")
        B, n_q, d = q_in.shape
        n_k = kv_in.shape[-2]
        h, d_head = self.cfg.n_heads, self.cfg.d_head

        def split(x: torch.Tensor, n: int) -> torch.Tensor:
            return x.view(B, n, h, d_head).transpose(1, 2)

        q = split(self.q_proj(q_in), n_q)
        k = split(self.k_proj(kv_in), n_k)
        v = split(self.v_proj(kv_in), n_k)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_head)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None, None, :, :]
            elif mask.dim() == 3:
                mask = mask[:, None, :, :]
            if not bool(mask.any(dim=-1).all()):
                raise AllMaskedError("attention query row with every key masked")
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = self.attn_dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, n_q, d)
        return self.out_proj(out)


class AdaLN(nn.Module):
    """Adaptive layer-norm: LN(h) * (1 + gamma(cond)) + beta(cond).

    The modulation maps are zero-initialized, so at init this is a plain
    layer-norm for every conditioning vector. ``cond`` may be per-sequence
    (batch, d_cond) or per-element (batch, seq, d_cond).
    """

    def __init__(self, d_model: int, d_cond: int, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.gamma_map = nn.Linear(d_cond, d_model, dtype=dtype)
        self.beta_map = nn.Linear(d_cond, d_model, dtype=dtype)
        nn.init.zeros_(self.gamma_map.weight)
        nn.init.zeros_(self.gamma_map.bias)
        nn.init.zeros_(self.beta_map.weight)
        nn.init.zeros_(self.beta_map.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.dim() == h.dim() - 1:
            cond = cond[..., None, :]
        elif cond.dim() != h.dim():
            raise ShapeMismatchError(
                f"conditioning rank {cond.dim()} incompatible with input rank {h.dim()}"
            )
        return layer_norm(h) * (1.0 + self.gamma_map(cond)) + self.beta_map(cond)


class AttentionPool(nn.Module):
    """Pool a sequence into one d_model vector with a learnable query.

    Single-head: scores = q . K(H) / sqrt(d_model), output = sum softmax * V(H).
    With one (unmasked) row the output is exactly that row's value projection.
    """

    def __init__(self, d_model: int, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.query = nn.Parameter(torch.randn(d_model, dtype=dtype) * 0.02)
        self.k_proj = nn.Linear(d_model, d_model, dtype=dtype)
        self.v_proj = nn.Linear(d_model, d_model, dtype=dtype)

    def forward(self, H: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if H.shape[-2] == 0:
            raise EmptySequenceError("attention pooling requires at least one row")
        scores = (self.k_proj(H) @ self.query) / math.sqrt(H.shape[-1])
        if key_mask is not None:
            if not bool(key_mask.any(dim=-1).all()):
                raise AllMaskedError("attention pool with every row masked")
            scores = scores.masked_fill(~key_mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        return (weights[..., None] * self.v_proj(H)).sum(dim=-2)


class CrossAttention(nn.Module):
    """Residual cross-attention: H + Att(H as queries, C as keys/values)."""

    def __init__(self, cfg: TransformerConfig, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.attn = MultiheadAttention(cfg, dtype=dtype)

    def forward(self, H: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
        if C.shape[-2] == 0:
            raise EmptySequenceError("cross-attention requires a non-empty context")
        return H + self.attn(H, C)


class Mlp(nn.Module):
    """n_mlp hidden layers of width mlp_dim with GELU; dropout on activations."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        mlp_dim: int,
        n_mlp: int,
        dropout: float = 0.0,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        width = d_in
        for _ in range(n_mlp):
            layers += [nn.Linear(width, mlp_dim, dtype=dtype), nn.GELU()]
            if dropout > 0:
                layers.append(nn.Dropout(dropout))
            width = mlp_dim
        layers.append(nn.Linear(width, d_out, dtype=dtype))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm block with AdaLN conditioning replacing plain layer-norm:

        h = h + Attn(AdaLN(h, cond))
        h = h + CrossAtt(h, context)        (only when built with cross=True)
        h = h + MLP(AdaLN(h, cond))
    """

    def __init__(
        self,
        cfg: TransformerConfig,
        cross: bool = False,
        dtype: torch.dtype = torch.float64,
    ) -> None:
        super().__init__()
        d = cfg.d_model
        self.adaln_attn = AdaLN(d, d, dtype=dtype)
        self.attn = MultiheadAttention(cfg, dtype=dtype)
        self.cross_attn = CrossAttention(cfg, dtype=dtype) if cross else None
        self.adaln_mlp = AdaLN(d, d, dtype=dtype)
        self.mlp = Mlp(d, d, cfg.mlp_dim, cfg.n_mlp, dropout=cfg.dropout, dtype=dtype)

    def forward(
        self,
        h: torch.Tensor,
        cond: torch.Tensor,
        attn_mask: torch.Tensor | None = None,
        context: torch.Tensor | None = None,
    ) -> torch.Tensor:
        normed = self.adaln_attn(h, cond)
        h = h + self.attn(normed, normed, mask=attn_mask)
        if self.cross_attn is not None:
            if context is None:
                raise EmptySequenceError("cross-attention block requires a context")
            h = self.cross_attn(h, context)
        h = h + self.mlp(self.adaln_mlp(h, cond))
        return h


class RegisterTokens(nn.Module):
    """Learnable tokens prepended to a sequence; outputs are discarded."""

    def __init__(self, n_registers: int, d_model: int, dtype: torch.dtype = torch.float64) -> None:
        super().__init__()
        self.tokens = nn.Parameter(torch.randn(n_registers, d_model, dtype=dtype) * 0.02)

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def prepend(self, h: torch.Tensor) -> torch.Tensor:
        reg = self.tokens.expand(h.shape[0], -1, -1)
        return torch.cat([reg, h], dim=-2)

    def strip(self, h: torch.Tensor) -> torch.Tensor:
        return h[..., self.count :, :]
