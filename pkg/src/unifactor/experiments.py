"""Reusable experiment protocols: estimator calibration and the train/compare pipeline."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .mi import Critic, critic_score, infonce, infonce_from_scores, nce_club, nce_club_from_scores
from .seeding import derive_seed, torch_generator
from .synthdata import Dataset, generate_dataset


# --- MI estimator calibration on Gaussians --------------------------------


def gaussian_mi(rho: float, d: int) -> float:
    """Analytic MI of ``d`` independent coordinate pairs with correlation ``rho``."""
    return -0.5 * d * math.log(1.0 - rho**2)


def gaussian_pairs(rho: float, d: int, B: int, gen: torch.Generator, dtype=torch.float64):
    x = torch.randn(B, d, generator=gen, dtype=dtype)
    e = torch.randn(B, d, generator=gen, dtype=dtype)
    return x, rho * x + math.sqrt(1.0 - rho**2) * e


def true_ratio_scores(x: torch.Tensor, y: torch.Tensor, rho: float) -> torch.Tensor:
    """Log density ratio up to terms in ``x`` alone (which row-wise InfoNCE ignores)."""
    c = 1.0 - rho**2
    return (rho / c) * (x @ y.T) - (rho**2 / (2 * c)) * (y**2).sum(-1)[None, :]


@dataclass
class Calibration:
    rho: float
    true_mi: float
    log_B: float
    infonce_lower: float
    club: float
    oracle_infonce_lower: float
    steps: int


def calibrate(rho: float, d_z: int = 8, B: int = 128, steps: int = 3000, seed: int = 0,
              lr: float = 5e-3, eval_batches: int = 50) -> Calibration:
    """Train a bilinear critic by InfoNCE on Gaussian pairs, then read both bounds.

    Estimates are averaged over ``eval_batches`` fresh batches. The oracle
    column scores the same batches with the true density ratio.
    """
    gen = torch_generator(seed, "calibrate", rho)
    critic = Critic("bilinear", d_z=d_z, tau=1.0).double()
    opt = torch.optim.Adam([critic.M], lr=lr)
    for _ in range(steps):
        x, y = gaussian_pairs(rho, d_z, B, gen)
        loss, _ = infonce(x, y, critic)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    lows, clubs, oracle = [], [], []
    with torch.no_grad():
        for _ in range(eval_batches):
            x, y = gaussian_pairs(rho, d_z, B, gen)
            s = critic_score(x, y, critic)
            lows.append(float(infonce_from_scores(s)[1]))
            clubs.append(float(nce_club_from_scores(s)))
            oracle.append(float(infonce_from_scores(true_ratio_scores(x, y, rho))[1]))
    return Calibration(rho, gaussian_mi(rho, d_z), math.log(B), float(np.mean(lows)), float(np.mean(clubs)),
                       float(np.mean(oracle)), steps)


# --- train / compare pipeline ---------------------------------------------


def small_config() -> RunConfig:
    """Reduced lab config used for the in-suite training comparisons."""
    cfg = RunConfig()
    d = cfg.data
    d.G, d.n = 8, 1024
    m = cfg.model
    m.num_layers, m.width, m.heads, m.d_z, m.rank = 4, 48, 4, 32, 8
    for sec in (cfg.pretrain, cfg.stage1, cfg.stage2, cfg.sft):
        sec.batch_size = 32
        sec.log_every = 25
    cfg.pretrain.steps, cfg.pretrain.warmup = 400, 20
    cfg.stage1.steps, cfg.stage1.warmup, cfg.stage1.lr = 200, 10, 1e-3
    cfg.stage2.steps, cfg.stage2.warmup, cfg.stage2.ramp_steps = 400, 20, 100
    cfg.sft.warmup = 20
    cfg.eval.batch_size = 256
    return cfg.validate()


@dataclass
class PipelineResult:
    seed: int
    base: dict
    factorized: dict
    sft: dict | None
    stage1: dict
    seconds: float
    reports: list
    variants: dict


def run_pipeline(cfg: RunConfig, seed: int, heldout_n: int = 256, with_sft: bool = True,
                 base_state=None, progress=None, variants: dict | None = None) -> PipelineResult:
    """Base pretrain, stage 1, stage 2 and (optionally) the matched SFT baseline.

    Training and held-out data come from disjoint seed streams of ``seed``.
    ``variants`` maps a name to stage-2 section overrides (e.g. ``{"no_uni":
    True}``); each variant starts from the same stage-1 state as the main run.
    """
    from . import training as T

    t0 = time.perf_counter()
    cfg = copy.deepcopy(cfg)
    train = generate_dataset(cfg.data, derive_seed(seed, "data", "train"))
    hcfg = copy.deepcopy(cfg.data)
    hcfg.n = heldout_n
    held = generate_dataset(hcfg, derive_seed(seed, "data", "heldout"))
    run_seed = derive_seed(seed, "train")
    rep = T.Reporter(None, 1)
    base = base_state if base_state is not None else T.run_pretrain(cfg, train, run_seed, progress=progress)
    base_eval = T.evaluate(base, held)
    s1 = T.run_stage1(cfg, train, run_seed, base=base, reporter=rep, progress=progress)
    s1_eval = T.evaluate(s1, held)
    snapshot = T.state_bytes(s1)
    s2 = T.run_stage2(None, s1, train, reporter=rep, progress=progress)
    fact_eval = T.evaluate(s2, held)
    out = {}
    for name, over in (variants or {}).items():
        vcfg = copy.deepcopy(s2.cfg)
        for k, v in over.items():
            setattr(vcfg.stage2, k, v)
        vs = T.run_stage2(vcfg, T.state_from_bytes(snapshot), train, progress=progress)
        out[name] = T.evaluate(vs, held)
    sft_eval = None
    if with_sft:
        sft = T.run_sft_baseline(cfg, train, run_seed, base=base, reporter=rep, progress=progress)
        sft_eval = T.evaluate(sft, held)
    return PipelineResult(seed, base_eval, fact_eval, sft_eval, s1_eval, time.perf_counter() - t0, rep.records, out)


def majority(flags) -> bool:
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)
