"""Pooling and shared/unique factor encoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericError

FLOWS = ("U", "G")
KINDS = ("sh", "uni")
LN_EPS = 1e-5


def pool(H: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis (second to last). Accepts (N, d) or (..., N, d)."""
    if H.ndim < 2 or H.shape[-2] == 0:
        raise ValueError(f"pool needs at least one token row, got shape {tuple(H.shape)}")
    return H.mean(dim=-2)


class GatedEncoder(nn.Module):
    """``z = LN(sigmoid(W h) * phi(h))`` with a 3-layer GELU MLP ``phi``."""

    def __init__(self, d: int, d_z: int):
        super().__init__()
        self.gate = nn.Linear(d, d_z, bias=False)
        self.phi = nn.Sequential(
            nn.Linear(d, d_z), nn.GELU(), nn.Linear(d_z, d_z), nn.GELU(), nn.Linear(d_z, d_z)
        )
        self.norm = nn.LayerNorm(d_z, eps=LN_EPS)
        nn.init.zeros_(self.gate.weight)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.norm(torch.sigmoid(self.gate(h)) * self.phi(h))


class LinearLNEncoder(nn.Module):
    """Ablation body: ``z = LN(W h + b)``."""

    def __init__(self, d: int, d_z: int):
        super().__init__()
        self.proj = nn.Linear(d, d_z)
        self.norm = nn.LayerNorm(d_z, eps=LN_EPS)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(h))


def make_encoder(kind: str, d: int, d_z: int) -> nn.Module:
    if kind == "gated-mlp":
        return GatedEncoder(d, d_z)
    if kind == "linear-ln":
        return LinearLNEncoder(d, d_z)
    raise ValueError(f"unknown encoder kind {kind!r}")


def make_encoders(kind: str, d: int, d_z: int, generator: torch.Generator | None = None) -> nn.ModuleDict:
    """The four encoders keyed ``sh_U``, ``uni_U``, ``sh_G``, ``uni_G``."""
    encs = nn.ModuleDict({f"{k}_{f}": make_encoder(kind, d, d_z) for f in FLOWS for k in KINDS})
    with torch.no_grad():
        for name, p in encs.named_parameters():
            if "norm" in name or name.endswith("gate.weight"):
                continue
            if name.endswith("bias"):
                # pooled states are small (rms ~0.1), so random biases would swamp
                # the input and every sample would map to nearly the same factor
                p.zero_()
            elif generator is not None:
                # fan-in scaled uniform init drawn from our own stream, not torch's global rng
                bound = 1.0 / (p.shape[1] ** 0.5)
                p.copy_((torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 - 1) * bound)
    return encs


def encode(h: torch.Tensor, encoder: nn.Module) -> torch.Tensor:
    if not torch.isfinite(h).all():
        raise NumericError("encoder input contains non-finite values")
    return encoder(h)


@dataclass
class FactorSet:
    """Factors for both flows over the mid layers.

    ``sh[flow]`` and ``uni[flow]`` are ``(B, n_layers, d_z)`` tensors whose
    second axis follows ``layers``.
    """

    layers: tuple[int, ...]
    sh: dict[str, torch.Tensor]
    uni: dict[str, torch.Tensor]

    def get(self, kind: str, flow: str, layer: int) -> torch.Tensor:
        store = self.sh if kind == "sh" else self.uni
        return store[flow][:, self.layers.index(layer)]


def _stack_pooled(states: list[tuple[int, torch.Tensor]]) -> torch.Tensor:
    return torch.stack([pool(H) for _, H in states], dim=-2)


def factorize(
    states_U: list[tuple[int, torch.Tensor]],
    states_G: list[tuple[int, torch.Tensor]],
    encoders: nn.ModuleDict,
) -> FactorSet:
    """Pool each layer and apply the per-flow shared and unique encoders.

    ``states_*`` are ``collect_mid_states`` outputs: ``(layer, (B, N, d))``
    pairs. Encoder weights are shared across layers within a flow.
    """
    layers_U = tuple(l for l, _ in states_U)
    layers_G = tuple(l for l, _ in states_G)
    if layers_U != layers_G:
        raise ContractError(f"layer sets differ between flows: {layers_U} vs {layers_G}")
    pooled = {"U": _stack_pooled(states_U), "G": _stack_pooled(states_G)}
    sh = {f: encode(pooled[f], encoders[f"sh_{f}"]) for f in FLOWS}
    uni = {f: encode(pooled[f], encoders[f"uni_{f}"]) for f in FLOWS}
    return FactorSet(layers_U, sh, uni)


def layer_norm_no_affine(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=LN_EPS)
