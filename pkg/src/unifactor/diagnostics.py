"""Layer-wise flow diagnostics and factor export.

All matrix metrics run in float64 numpy. Rows are observations, columns
are hidden dimensions.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .backbone import ForwardTrace, build_gen_flow, build_und_flow, collate, gen_loss, und_loss
from .checkpoint import write_atomic
from .factorization import FLOWS, KINDS, pool
from .seeding import rng_for
from .synthdata import Dataset, sample_mask

METRICS = ("residual", "er", "grad_conflict", "freq")
PROFILE_HEADER = ("layer", "value", "metric", "batch_size")


class DegenerateSubspaceWarning(UserWarning):
    """The reference matrix has no variance, so no subspace can be built."""


@dataclass
class LayerProfile:
    layer: int
    value: float
    metric: str
    batch_size: int
    flag: bool = False  # set when the value is a placeholder (e.g. zero gradient)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric} at layer {self.layer} is not finite: {self.value}")


@dataclass
class SubspaceBasis:
    columns: np.ndarray  # (d, k), orthonormal
    retained: float
    mean: np.ndarray  # (d,)


def _as64(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


# --- subspace residual ----------------------------------------------------


def principal_subspace(U, var_threshold: float = 0.95) -> SubspaceBasis | None:
    """Top principal directions of mean-centred ``U`` covering ``var_threshold`` of its variance.

    Returns ``None`` when ``U`` has zero variance.
    """
    U = _as64(U)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ValueError(f"need an n x d matrix with n >= 2, got shape {U.shape}")
    if not 0.0 < var_threshold <= 1.0:
        raise ValueError(f"var_threshold must lie in (0, 1], got {var_threshold}")
    mu = U.mean(axis=0)
    _, s, Vt = np.linalg.svd(U - mu, full_matrices=False)
    energy = s**2
    total = energy.sum()
    if total <= 0 or s[0] <= 1e-12 * max(1.0, np.abs(U).max()):
        return None
    frac = np.cumsum(energy) / total
    k = int(np.searchsorted(frac, var_threshold - 1e-12) + 1)
    k = min(k, len(s))
    return SubspaceBasis(Vt[:k].T.copy(), float(frac[k - 1]), mu)


def reconstruction_residual(G, U, var_threshold: float = 0.95) -> float:
    """Share of centred ``G`` energy outside the principal subspace of ``U``.

    ``G`` is centred by ``U``'s mean, projected onto the basis and the
    residual energy ratio ``||G - P G||^2 / ||G||^2`` is returned. A
    zero-variance ``U`` yields 1.0 and a :class:`DegenerateSubspaceWarning`.
    """
    G = _as64(G)
    if G.ndim != 2 or G.shape[0] < 2:
        raise ValueError(f"need an m x d matrix with m >= 2, got shape {G.shape}")
    if not np.any(G):
        raise ValueError("G is all zero")
    if G.shape[1] != _as64(U).shape[1]:
        raise ValueError(f"column mismatch: G has {G.shape[1]}, U has {_as64(U).shape[1]}")
    basis = principal_subspace(U, var_threshold)
    if basis is None:
        warnings.warn("reference matrix has zero variance; residual set to 1", DegenerateSubspaceWarning)
        return 1.0
    Gc = G - basis.mean
    denom = float((Gc**2).sum())
    if denom == 0.0:
        raise ValueError("G coincides with U's mean; residual undefined")
    V = basis.columns
    resid = Gc - (Gc @ V) @ V.T
    return float(min(1.0, max(0.0, (resid**2).sum() / denom)))


# --- effective rank -------------------------------------------------------


def effective_rank(H) -> float:
    """``exp`` of the entropy of the normalised singular-value distribution."""
    H = _as64(H)
    if H.ndim != 2:
        raise ValueError(f"need a matrix, got shape {H.shape}")
    s = np.linalg.svd(H, compute_uv=False)
    total = s.sum()
    if total == 0.0:
        raise ValueError("effective rank of an all-zero matrix is undefined")
    p = s / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def er_increment(H_U, H_G) -> float:
    H_U, H_G = _as64(H_U), _as64(H_G)
    if H_U.ndim != 2 or H_G.ndim != 2 or H_U.shape[1] != H_G.shape[1]:
        raise ValueError(f"column mismatch: {H_U.shape} vs {H_G.shape}")
    return effective_rank(np.vstack([H_U, H_G])) - effective_rank(H_U)


# --- gradient conflict ----------------------------------------------------


def _flat_grads(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def gradient_cosines(
    loss_a: torch.Tensor,
    loss_b: torch.Tensor,
    groups: dict[int, Sequence[torch.Tensor]],
    metric: str = "grad_conflict",
    batch_size: int = 0,
) -> list[LayerProfile]:
    """Per-group cosine between the gradients of two losses.

    Groups where either gradient vanishes are reported as 0 with ``flag``.
    """
    keys = sorted(groups)
    flat = [p for k in keys for p in groups[k]]
    ga = _flat_grads(loss_a, flat)
    gb = _flat_grads(loss_b, flat)
    out, i = [], 0
    for k in keys:
        n = len(groups[k])
        a = torch.cat([g.reshape(-1) for g in ga[i : i + n]]).double()
        b = torch.cat([g.reshape(-1) for g in gb[i : i + n]]).double()
        i += n
        na, nb = a.norm(), b.norm()
        if na == 0 or nb == 0:
            out.append(LayerProfile(k, 0.0, metric, batch_size, flag=True))
            continue
        c = float((a @ b) / (na * nb))
        out.append(LayerProfile(k, max(-1.0, min(1.0, c)), metric, batch_size))
    return out


def block_groups(model) -> dict[int, list[torch.Tensor]]:
    return {l + 1: list(b.parameters()) for l, b in enumerate(model.blocks)}


def grad_conflict_profile(model, U, G) -> list[LayerProfile]:
    """Cosine between the L_und and L_gen gradients of every transformer block."""
    with torch.enable_grad():
        params = [p for b in model.blocks for p in b.parameters()]
        saved = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(True)
        try:
            lu = und_loss(model(U), U)
            lg = gen_loss(model(G), G)
            return gradient_cosines(lu, lg, block_groups(model), "grad_conflict", U.size)
        finally:
            for p, r in zip(params, saved):
                p.requires_grad_(r)


# --- frequency ------------------------------------------------------------


def high_freq_mask(G: int, cutoff_fraction: float) -> np.ndarray:
    """Boolean (G, G) mask of DFT bins with radial frequency above ``cutoff * Nyquist``."""
    f = np.fft.fftfreq(G)
    r = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2) / 0.5
    return r > cutoff_fraction


def grid_high_freq_ratio(grid, cutoff_fraction: float = 0.5) -> float:
    """High-frequency energy share of a ``(..., G, G, d)`` grid, DC excluded, channel-averaged.

    Channels with no non-DC energy count as 0.
    """
    X = _as64(grid)
    if X.ndim < 3 or X.shape[-3] != X.shape[-2]:
        raise ValueError(f"expected (..., G, G, d) grid, got shape {X.shape}")
    G = X.shape[-2]
    X = X.reshape(-1, G, G, X.shape[-1])
    P = np.abs(np.fft.fft2(X, axes=(1, 2))) ** 2
    P[:, 0, 0, :] = 0.0
    total = P.sum(axis=(1, 2))
    high = P[:, high_freq_mask(G, cutoff_fraction)].sum(axis=1)
    tiny = 1e-20 * max(1.0, float(np.abs(X).max()) ** 2) * G * G
    ratio = np.where(total > tiny, high / np.where(total > tiny, total, 1.0), 0.0)
    return float(np.clip(ratio.mean(), 0.0, 1.0))


def freq_profile(trace: ForwardTrace, cutoff_fraction: float = 0.5) -> list[LayerProfile]:
    out = []
    for l, H in enumerate(trace.hidden, start=1):
        B, N, d = H.shape
        G = math.isqrt(N)
        if G * G != N:
            raise ValueError(f"{N} image positions do not form a square grid")
        out.append(LayerProfile(l, grid_high_freq_ratio(H.reshape(B, G, G, d), cutoff_fraction), "freq", B))
    return out


# --- projection -----------------------------------------------------------


def pca_project2d(Z) -> np.ndarray:
    """Mean-centred projection onto the top two principal directions.

    Each direction's sign makes its largest-magnitude loading positive.
    """
    Z = _as64(Z)
    if Z.ndim != 2 or Z.shape[0] < 3:
        raise ValueError(f"need at least 3 rows, got shape {Z.shape}")
    Zc = Z - Z.mean(axis=0)
    _, s, Vt = np.linalg.svd(Zc, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12 * max(1.0, np.abs(Z).max()):
        raise ValueError("input has rank 0 after centring")
    V = Vt[:2].T.copy()
    if V.shape[1] < 2:
        V = np.hstack([V, np.zeros((V.shape[0], 2 - V.shape[1]))])
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return Zc @ V


# --- model-level collection -----------------------------------------------


def _flows_for(state, samples, seed: int):
    bcfg = state.bcfg
    mask_rng = rng_for(seed, "diagnose", "mask")
    U = collate([build_und_flow(s, bcfg) for s in samples], bcfg)
    G = collate([build_gen_flow(s, sample_mask(state.cfg.mask, bcfg.G, mask_rng), bcfg) for s in samples], bcfg)
    return U, G


def factor_rows(state, dataset: Dataset, batch_size: int = 64) -> Iterable[tuple]:
    """Yield ``(sample, flow, layer, kind, vector)`` in export order."""
    from .training import mid_factors

    model = state.model
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(dataset), batch_size):
                samples = dataset.samples[start : start + batch_size]
                U, G = _flows_for(state, samples, dataset.seed)
                fset = mid_factors(state, model(U, upto=state.mid_range[1]), model(G, upto=state.mid_range[1]))
                for b, s in enumerate(samples):
                    for f in FLOWS:
                        for li, l in enumerate(fset.layers):
                            for k in KINDS:
                                z = (fset.sh if k == "sh" else fset.uni)[f][b, li]
                                yield s, f, l, k, z
    finally:
        model.train(was)


def factor_header(d_z: int) -> list[str]:
    return ["sample_id", "shape_class", "color_class", "quadrant", "flow", "layer", "factor_kind"] + [
        f"z{i}" for i in range(d_z)
    ]


def export_factors(state, dataset: Dataset, path: str | Path, batch_size: int = 64) -> int:
    """Write one CSV row per (sample, flow, layer, kind); returns the row count."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(factor_header(state.cfg.model.d_z))
    n = 0
    for s, f, l, k, z in factor_rows(state, dataset, batch_size):
        a = s.anchor
        w.writerow([s.sample_id, a.shape_class, a.color_class, a.quadrant, f, l, k] + [repr(float(v)) for v in z])
        n += 1
    write_atomic(path, buf.getvalue().encode("utf-8"))
    return n


def layer_states(state, U, G) -> dict[str, list[np.ndarray]]:
    """Pooled (B, d) states per layer for both flows, all layers."""
    with torch.no_grad():
        tU, tG = state.model(U, with_logits=False), state.model(G, with_logits=False)
    return {
        "U": [_as64(pool(h)) for h in tU.hidden],
        "G": [_as64(pool(h)) for h in tG.hidden],
        "trace_U": tU,
        "trace_G": tG,
    }


def run_diagnostics(state, dataset: Dataset, metrics: Sequence[str], batch_size: int = 64) -> dict[str, list[LayerProfile]]:
    """Compute the requested metric families on the first ``batch_size`` samples."""
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValueError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    samples = dataset.samples[:batch_size]
    if len(samples) < 2:
        raise ValueError("diagnostics need at least 2 samples")
    B = len(samples)
    thr = state.cfg.eval.var_threshold
    model = state.model
    was = model.training
    model.eval()
    U, G = _flows_for(state, samples, dataset.seed)
    out: dict[str, list[LayerProfile]] = {}
    try:
        st = layer_states(state, U, G)
        L = len(st["U"])
        if "residual" in metrics:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateSubspaceWarning)
                out["residual_G_given_U"] = [
                    LayerProfile(l + 1, reconstruction_residual(st["G"][l], st["U"][l], thr), "residual_G_given_U", B)
                    for l in range(L)
                ]
                out["residual_U_given_G"] = [
                    LayerProfile(l + 1, reconstruction_residual(st["U"][l], st["G"][l], thr), "residual_U_given_G", B)
                    for l in range(L)
                ]
        if "er" in metrics:
            out["er_U"] = [LayerProfile(l + 1, effective_rank(st["U"][l]), "er_U", B) for l in range(L)]
            out["er_increment"] = [
                LayerProfile(l + 1, er_increment(st["U"][l], st["G"][l]), "er_increment", B) for l in range(L)
            ]
        if "freq" in metrics:
            cut = state.cfg.eval.freq_cutoff
            out["freq_U"] = [LayerProfile(p.layer, p.value, "freq_U", B) for p in freq_profile(st["trace_U"], cut)]
            out["freq_G"] = [LayerProfile(p.layer, p.value, "freq_G", B) for p in freq_profile(st["trace_G"], cut)]
        if "grad_conflict" in metrics:
            out["grad_conflict"] = grad_conflict_profile(model, U, G)
    finally:
        model.train(was)
    return out


def profiles_csv(profiles: Sequence[LayerProfile]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for p in profiles:
        w.writerow([p.layer, repr(float(p.value)), p.metric, p.batch_size])
    return buf.getvalue()


def write_profiles(results: dict[str, list[LayerProfile]], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name, profs in results.items():
        p = out_dir / f"{name}.csv"
        write_atomic(p, profiles_csv(profs).encode("utf-8"))
        paths.append(p)
    return paths
