"""Contrastive mutual-information terms: InfoNCE, directed InfoNCE, NCE-CLUB, orthogonality."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError, NumericError
from .factorization import FLOWS, FactorSet

NORM_FLOOR = 1e-12


@dataclass
class FactorBatch:
    Z: torch.Tensor  # (B, d_z)
    sample_ids: list[int]

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Z.shape[0] != len(self.sample_ids):
            raise ContractError(f"Z shape {tuple(self.Z.shape)} does not match {len(self.sample_ids)} ids")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ContractError("sample_ids must be pairwise distinct within a batch")


class Critic(nn.Module):
    """Score function ``f(a, b)``: cosine/tau or bilinear ``a^T M b / tau``."""

    def __init__(self, kind: str = "cosine", d_z: int | None = None, tau: float = 0.1, init: str = "zeros"):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        if kind not in ("cosine", "bilinear"):
            raise ValueError(f"unknown critic kind {kind!r}")
        self.kind = kind
        self.tau = float(tau)
        if kind == "bilinear":
            if d_z is None:
                raise ValueError("bilinear critic needs d_z")
            M = torch.eye(d_z) if init == "identity" else torch.zeros(d_z, d_z)
            self.M = nn.Parameter(M)
        else:
            self.M = None


def _matrix(Z) -> torch.Tensor:
    return Z.Z if isinstance(Z, FactorBatch) else Z


def _unit_rows(Z: torch.Tensor) -> torch.Tensor:
    norms = Z.norm(dim=-1, keepdim=True)
    if (norms < NORM_FLOOR).any():
        raise NumericError("zero-norm factor under cosine normalisation")
    return Z / norms


def critic_score(Za, Zb, critic: Critic, detach_critic: bool = False) -> torch.Tensor:
    """(B, B) score matrix, entry ``(i, j) = f(Za_i, Zb_j)``."""
    A, Bm = _matrix(Za), _matrix(Zb)
    if A.shape != Bm.shape:
        raise ContractError(f"score inputs disagree: {tuple(A.shape)} vs {tuple(Bm.shape)}")
    if critic.kind == "cosine":
        return _unit_rows(A) @ _unit_rows(Bm).T / critic.tau
    M = critic.M.detach() if detach_critic else critic.M
    return A @ M.to(A.dtype) @ Bm.T / critic.tau


def _need_pairs(B: int) -> None:
    if B < 2:
        raise ContractError(f"contrastive estimate needs B >= 2, got {B}")


def infonce_from_scores(s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    B = s.shape[0]
    _need_pairs(B)
    # logsumexp subtracts the row max internally
    loss = (torch.logsumexp(s, dim=1) - s.diagonal()).mean()
    return loss, math.log(B) - loss


def infonce(Za, Zb, critic: Critic) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise InfoNCE with positives on the diagonal; returns ``(loss, ln B - loss)``."""
    return infonce_from_scores(critic_score(Za, Zb, critic))


def directed_infonce(Z_src, Z_tgt, critic: Critic) -> torch.Tensor:
    """InfoNCE of ``Z_src`` against a stop-gradient target; only ``Z_src`` and the critic learn."""
    return infonce(_matrix(Z_src), _matrix(Z_tgt).detach(), critic)[0]


def nce_club_from_scores(s: torch.Tensor) -> torch.Tensor:
    B = s.shape[0]
    _need_pairs(B)
    pos = s.diagonal().mean()
    neg = (s.sum() - s.diagonal().sum()) / (B * B - B)
    return pos - neg


def nce_club(Za, Zb, critic_star: Critic, detach_critic: bool = True) -> torch.Tensor:
    """Mean positive score minus mean off-diagonal score under the current critic.

    The critic is detached by default: it is trained by its own InfoNCE
    ascent, and the CLUB value only sends gradient into the representations.
    """
    return nce_club_from_scores(critic_score(Za, Zb, critic_star, detach_critic=detach_critic))


def ortho_penalty(fset: FactorSet) -> torch.Tensor:
    """Squared cosine between each flow's shared and unique factor.

    Averaged over batch and layers, summed over the two flows.
    """
    total = None
    for f in FLOWS:
        cos = (_unit_rows(fset.sh[f]) * _unit_rows(fset.uni[f])).sum(-1)
        term = cos.pow(2).mean()
        total = term if total is None else total + term
    return total


def layer_mean(fn, Za: torch.Tensor, Zb: torch.Tensor, *args) -> torch.Tensor:
    """Apply a two-batch objective per layer on (B, n_layers, d_z) inputs and average."""
    vals = [fn(Za[:, i], Zb[:, i], *args) for i in range(Za.shape[1])]
    return torch.stack([v[0] if isinstance(v, tuple) else v for v in vals]).mean()
