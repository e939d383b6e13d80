"""Two-stage factorized post-training, SFT baseline, checkpoints and evaluation.

Stage 1 freezes the backbone and fits the four factor encoders plus the
low-rank logit readouts through cross-flow logit injection. Stage 2 freezes
the encoders and refines the configured backbone layers with the native
losses, directed InfoNCE alignment of shared factors against EMA targets and
an NCE-CLUB penalty on unique factors.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .backbone import (
    Backbone,
    BackboneConfig,
    FlowBatch,
    build_backbone,
    build_gen_flow,
    build_und_flow,
    collate,
    collect_mid_states,
    gen_loss,
    mean_cross_entropy,
    target_logits,
    und_loss,
)
from .config import RunConfig
from .errors import CheckpointError, ContractError, InvariantViolation, TrainingDiverged
from .factorization import FactorSet, factorize, make_encoders
from .mi import Critic, critic_score, directed_infonce, infonce, layer_mean, nce_club, ortho_penalty
from .seeding import derive_seed, rng_for, torch_generator
from .synthdata import Dataset, PairedSample, sample_mask

TERMS = ("L_und", "L_gen", "L_ortho", "L_U2G", "L_G2U", "L_uni")
READOUTS = ("A_U", "A_G", "B_U", "B_G")


# --- readouts and injection -----------------------------------------------


class LowRankReadout(nn.Module):
    """``A = P Q^T`` mapping a factor (d_z) to a logit bias (V)."""

    def __init__(self, V: int, d_z: int, rank: int):
        super().__init__()
        self.P = nn.Parameter(torch.zeros(V, rank))
        self.Q = nn.Parameter(torch.zeros(d_z, rank))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return (z @ self.Q) @ self.P.T


def make_readouts(V_t: int, V_v: int, d_z: int, rank: int, generator: torch.Generator) -> nn.ModuleDict:
    r = nn.ModuleDict(
        {
            "A_U": LowRankReadout(V_t, d_z, rank),
            "B_U": LowRankReadout(V_t, d_z, rank),
            "A_G": LowRankReadout(V_v, d_z, rank),
            "B_G": LowRankReadout(V_v, d_z, rank),
        }
    )
    # P starts at zero so injection is a no-op at step 0; Q is random so P gets gradient
    with torch.no_grad():
        for name in READOUTS:
            Q = r[name].Q
            Q.copy_(torch.randn(Q.shape, generator=generator) / math.sqrt(d_z))
    return r


def inject_logits(
    s: torch.Tensor,
    z_sh_counter: torch.Tensor,
    z_uni_self: torch.Tensor | None,
    A: LowRankReadout,
    B: LowRankReadout | None,
    unique_enabled: bool,
    row_batch: torch.Tensor | None = None,
) -> torch.Tensor:
    """Add ``A z_sh_counter (+ B z_uni_self)`` to every scored row of ``s``.

    ``s`` holds one row per target position (positions x vocab). With
    ``row_batch`` the factors are per-sample ``(B, d_z)`` and row ``k`` takes
    the bias of sample ``row_batch[k]``; without it the factors are single
    vectors. ``s`` itself is never modified.
    """
    V = s.shape[-1]
    if A.P.shape[0] != V or A.Q.shape[0] != z_sh_counter.shape[-1]:
        raise ContractError(f"readout {tuple(A.P.shape)}x{tuple(A.Q.shape)} does not fit logits V={V}")
    bias = A(z_sh_counter)
    if unique_enabled:
        if B is None or z_uni_self is None:
            raise ContractError("unique injection enabled without a unique factor and readout")
        if B.P.shape[0] != V or B.Q.shape[0] != z_uni_self.shape[-1]:
            raise ContractError(f"readout {tuple(B.P.shape)}x{tuple(B.Q.shape)} does not fit logits V={V}")
        bias = bias + B(z_uni_self)
    if row_batch is not None:
        bias = bias[row_batch]
    return s + bias


# --- schedules ------------------------------------------------------------


def lr_at(step: int, total: int, peak: float, warmup: int = 0, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor`` at ``total``."""
    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total - warmup))
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def ramp(step: int, maximum: float, ramp_steps: int) -> float:
    if ramp_steps <= 0:
        return maximum
    return maximum * min(1.0, step / ramp_steps)


def ema_decay_at(step: int, total: int, start: float, end: float) -> float:
    if total <= 1:
        return end
    return start + (end - start) * min(1.0, step / (total - 1))


@torch.no_grad()
def ema_update(shadow, live, decay: float):
    """``shadow <- decay * shadow + (1 - decay) * live``; tensors or modules."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay {decay} outside [0, 1]")
    if isinstance(shadow, nn.Module):
        s_items = list(shadow.state_dict(keep_vars=True).items())
        l_items = list(live.state_dict(keep_vars=True).items())
        if [k for k, _ in s_items] != [k for k, _ in l_items]:
            raise ContractError("EMA shadow and live module have different structure")
        for (k, s), (_, l) in zip(s_items, l_items):
            ema_update(s, l, decay)
        return shadow
    if shadow.shape != live.shape:
        raise ContractError(f"EMA shape mismatch {tuple(shadow.shape)} vs {tuple(live.shape)}")
    shadow.mul_(decay).add_(live.detach(), alpha=1.0 - decay)
    return shadow


# --- state ----------------------------------------------------------------


@dataclass
class TrainState:
    cfg: RunConfig
    bcfg: BackboneConfig
    seed: int
    model: Backbone
    encoders: nn.ModuleDict
    readouts: nn.ModuleDict
    critic: Critic  # unique-factor bilinear critic
    stage: str = "init"
    step: int = 0
    ema: nn.ModuleDict | None = None
    optimizer: torch.optim.Optimizer | None = None
    critic_opt: torch.optim.Optimizer | None = None
    data_seed: int | None = None
    trace: list[float] = field(default_factory=list)

    @property
    def mid_range(self) -> tuple[int, int]:
        return self.bcfg.mid_range

    @property
    def dtype(self) -> torch.dtype:
        return self.model.head.weight.dtype

    def shared_critic(self) -> Critic:
        return Critic("cosine", tau=self.cfg.stage2.tau)

    def trainable_range(self) -> tuple[int, int]:
        if self.stage == "sft":
            r = self.cfg.sft.trainable_range
        else:
            r = self.cfg.stage2.trainable_range
        return tuple(r) if r is not None else self.mid_range


def init_state(cfg: RunConfig, seed: int, dtype=torch.float32) -> TrainState:
    cfg.validate()
    bcfg = BackboneConfig.from_run(cfg)
    model = build_backbone(bcfg, torch_generator(seed, "init", "backbone"), dtype)
    encoders = make_encoders(cfg.model.encoder, bcfg.width, cfg.model.d_z, torch_generator(seed, "init", "encoders"))
    readouts = make_readouts(bcfg.V_t, bcfg.V_v, cfg.model.d_z, cfg.model.rank, torch_generator(seed, "init", "readouts"))
    critic = Critic("bilinear", d_z=cfg.model.d_z, tau=1.0)
    return TrainState(cfg, bcfg, int(seed), model, encoders.to(dtype), readouts.to(dtype), critic.to(dtype))


def _set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)
        p.grad = None


def _freeze_all(state: TrainState) -> None:
    for m in (state.model, state.encoders, state.readouts, state.critic):
        _set_trainable(m, False)


def backbone_trainable_params(state: TrainState, layer_range: tuple[int, int], head: bool) -> list[nn.Parameter]:
    lo, hi = layer_range
    params = [p for l in range(lo, hi + 1) for p in state.model.blocks[l - 1].parameters()]
    if head:
        params += list(state.model.ln_f.parameters()) + list(state.model.head.parameters())
    return params


# --- batches --------------------------------------------------------------


def batch_indices(seed: int, stage: str, step: int, n: int, B: int) -> np.ndarray:
    if n < B:
        raise ValueError(f"dataset of {n} samples is smaller than batch size {B}")
    return rng_for(seed, stage, "batch", step).choice(n, size=B, replace=False)


def make_flows(state: TrainState, samples: list[PairedSample], mask_rng: np.random.Generator) -> tuple[FlowBatch, FlowBatch]:
    bcfg = state.bcfg
    U = collate([build_und_flow(s, bcfg) for s in samples], bcfg)
    masks = [sample_mask(state.cfg.mask, bcfg.G, mask_rng) for _ in samples]
    G = collate([build_gen_flow(s, m, bcfg) for s, m in zip(samples, masks)], bcfg)
    return U, G


def step_flows(state: TrainState, dataset: Dataset, stage: str, step: int, batch_size: int):
    idx = batch_indices(state.seed, stage, step, len(dataset), batch_size)
    samples = [dataset[int(i)] for i in idx]
    return make_flows(state, samples, rng_for(state.seed, stage, "mask", step))


def mid_factors(state: TrainState, tU, tG) -> FactorSet:
    mid = state.mid_range
    return factorize(collect_mid_states(tU, mid), collect_mid_states(tG, mid), state.encoders)


# --- objectives -----------------------------------------------------------


def _weighted_total(terms: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    total = None
    for k in TERMS:
        w = weights.get(k, 0.0)
        if w == 0.0 or k not in terms:
            continue
        v = w * terms[k].double()
        total = v if total is None else total + v
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total


def stage1_terms(state: TrainState, U: FlowBatch, G: FlowBatch, unique_enabled: bool, traces=None) -> dict:
    """Injected native losses averaged over mid layers, plus the orthogonality term."""
    if traces is None:
        with torch.no_grad():
            traces = (state.model(U), state.model(G))
    tU, tG = traces
    fset = mid_factors(state, tU, tG)
    sU = target_logits(tU, U).detach()
    sG = target_logits(tG, G).detach()
    r = state.readouts
    l_und, l_gen = [], []
    for i in range(len(fset.layers)):
        tilde_U = inject_logits(sU, fset.sh["G"][:, i], fset.uni["U"][:, i], r["A_U"], r["B_U"], unique_enabled, U.target_batch)
        tilde_G = inject_logits(sG, fset.sh["U"][:, i], fset.uni["G"][:, i], r["A_G"], r["B_G"], unique_enabled, G.target_batch)
        l_und.append(mean_cross_entropy(tilde_U, U.target_tokens))
        l_gen.append(mean_cross_entropy(tilde_G, G.target_tokens))
    if unique_enabled:
        ortho_set = fset
    else:
        # unique encoders stay untouched until the unique phase begins
        ortho_set = FactorSet(fset.layers, fset.sh, {f: z.detach() for f, z in fset.uni.items()})
    c = state.cfg.stage1
    terms = {"L_und": torch.stack(l_und).mean(), "L_gen": torch.stack(l_gen).mean(), "L_ortho": ortho_penalty(ortho_set)}
    weights = {"L_und": c.lambda_und, "L_gen": c.lambda_gen, "L_ortho": c.lambda_ortho}
    return {"terms": terms, "weights": weights, "total": _weighted_total(terms, weights), "factors": fset}


@torch.no_grad()
def ema_target_factors(state: TrainState, U: FlowBatch, G: FlowBatch) -> FactorSet:
    """Shared/unique factors computed through the EMA shadow of the trainable blocks."""
    hi = state.mid_range[1]
    override = {int(k): m for k, m in state.ema.items()} if state.ema is not None else None
    tU = state.model(U, upto=hi, block_override=override)
    tG = state.model(G, upto=hi, block_override=override)
    return mid_factors(state, tU, tG)


def stage2_terms(
    state: TrainState,
    U: FlowBatch,
    G: FlowBatch,
    lam_sha: float,
    lam_uni: float,
    targets: FactorSet | None,
    traces=None,
    fset: FactorSet | None = None,
) -> dict:
    """Native losses, directed shared alignment and the unique CLUB penalty.

    ``targets`` holds the EMA-side factors; ``None`` selects the no-stop-gradient
    ablation where both sides come from live parameters.
    """
    c = state.cfg.stage2
    if traces is None:
        traces = (state.model(U), state.model(G))
    tU, tG = traces
    if fset is None:
        fset = mid_factors(state, tU, tG)
    crit = state.shared_critic()
    if targets is not None:
        l_ug = layer_mean(directed_infonce, fset.sh["U"], targets.sh["G"], crit)
        l_gu = layer_mean(directed_infonce, fset.sh["G"], targets.sh["U"], crit)
    else:
        l_ug = layer_mean(infonce, fset.sh["U"], fset.sh["G"], crit)
        l_gu = layer_mean(infonce, fset.sh["G"], fset.sh["U"], crit)
    terms = {
        "L_und": und_loss(tU, U),
        "L_gen": gen_loss(tG, G),
        "L_U2G": l_ug,
        "L_G2U": l_gu,
        "L_uni": layer_mean(nce_club, fset.uni["U"], fset.uni["G"], state.critic),
    }
    weights = {"L_und": c.lambda_und, "L_gen": c.lambda_gen, "L_U2G": lam_sha, "L_G2U": lam_sha, "L_uni": lam_uni}
    return {"terms": terms, "weights": weights, "total": _weighted_total(terms, weights), "factors": fset}


def critic_step(state: TrainState, fset: FactorSet) -> float:
    """One InfoNCE ascent step of the unique critic on detached unique factors."""
    zU, zG = fset.uni["U"].detach(), fset.uni["G"].detach()
    state.critic.M.requires_grad_(True)
    loss = layer_mean(infonce, zU, zG, state.critic)
    state.critic_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.critic_opt.step()
    state.critic_opt.zero_grad(set_to_none=True)
    state.critic.M.requires_grad_(False)
    return math.log(zU.shape[0]) - float(loss.detach())


# --- reports --------------------------------------------------------------


def loss_report(stage: str, step: int, out: dict, lr: float, lambdas: dict, extra: dict | None = None) -> dict:
    terms = {k: float(out["terms"][k].detach()) if k in out["terms"] else 0.0 for k in TERMS}
    weights = {k: float(out["weights"].get(k, 0.0)) for k in TERMS}
    rep = {
        "kind": "loss",
        "stage": stage,
        "step": step,
        "terms": terms,
        "weights": weights,
        "total": float(out["total"].detach()),
        "lambdas": lambdas,
        "lr": lr,
    }
    if extra:
        rep["aux"] = extra
    return rep


class Reporter:
    """Collects loss reports and appends every ``log_every``-th one to a JSON-lines file."""

    def __init__(self, path: str | Path | None = None, log_every: int = 50):
        self.path = Path(path) if path is not None else None
        self.log_every = max(1, int(log_every))
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, rec: dict, force: bool = False) -> None:
        if not force and rec.get("kind") == "loss" and rec["step"] % self.log_every:
            return
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _check_finite(rep: dict, reporter: Reporter | None) -> None:
    vals = [rep["total"], *rep["terms"].values()]
    if not all(math.isfinite(v) for v in vals):
        bad = dict(rep, status="diverged")
        if reporter is not None:
            reporter.emit(bad, force=True)
        raise TrainingDiverged(bad)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


# --- steps ----------------------------------------------------------------


def _params_with_grad(module: nn.Module) -> list[str]:
    return [n for n, p in module.named_parameters() if p.grad is not None]


def prepare_stage1(state: TrainState) -> None:
    _freeze_all(state)
    _set_trainable(state.encoders, True)
    _set_trainable(state.readouts, True)
    state.model.eval()
    c = state.cfg.stage1
    params = list(state.encoders.parameters()) + list(state.readouts.parameters())
    state.optimizer = torch.optim.AdamW(params, lr=c.lr, weight_decay=c.weight_decay)
    state.stage, state.step, state.trace = "stage1", 0, []


def unique_enabled_at(state: TrainState, step: int) -> bool:
    c = state.cfg.stage1
    return step >= c.shared_only_fraction * c.steps


def stage1_step(state: TrainState, dataset: Dataset, reporter: Reporter | None = None) -> dict:
    if state.stage != "stage1":
        raise ContractError(f"stage1_step on a state in stage {state.stage!r}")
    if any(p.requires_grad for p in state.model.parameters()):
        raise InvariantViolation("backbone must be frozen during stage 1")
    c = state.cfg.stage1
    step = state.step
    U, G = step_flows(state, dataset, "stage1", step, c.batch_size)
    uniq = unique_enabled_at(state, step)
    lr = lr_at(step, c.steps, c.lr, c.warmup, c.lr_floor)
    _set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    out = stage1_terms(state, U, G, uniq)
    out["total"].backward()
    touched = _params_with_grad(state.model)
    if touched:
        raise InvariantViolation(f"backbone received gradient in stage 1: {touched[:3]}")
    state.optimizer.step()
    rep = loss_report("stage1", step, out, lr, {"lambda_ortho": c.lambda_ortho, "unique_enabled": uniq})
    _check_finite(rep, reporter)
    state.step += 1
    state.trace.append(rep["total"])
    if reporter is not None:
        reporter.emit(rep, force=state.step == c.steps)
    return rep


def prepare_stage2(state: TrainState) -> None:
    _freeze_all(state)
    c = state.cfg.stage2
    state.stage = "stage2"
    lo, hi = state.trainable_range()
    params = backbone_trainable_params(state, (lo, hi), c.train_head)
    for p in params:
        p.requires_grad_(True)
    state.model.train()
    state.optimizer = torch.optim.AdamW(params, lr=c.lr, weight_decay=c.weight_decay)
    state.ema = nn.ModuleDict({str(l): copy.deepcopy(state.model.blocks[l - 1]) for l in range(lo, hi + 1)})
    _set_trainable(state.ema, False)
    state.critic_opt = torch.optim.Adam([state.critic.M], lr=c.critic_lr)
    state.step, state.trace = 0, []


def stage2_lambdas(state: TrainState, step: int) -> tuple[float, float]:
    c = state.cfg.stage2
    lam_sha = ramp(step, c.lambda_sha_max, c.ramp_steps)
    lam_uni = 0.0 if c.no_uni else ramp(step, c.lambda_uni_max, c.ramp_steps)
    return lam_sha, lam_uni


def stage2_step(state: TrainState, dataset: Dataset, reporter: Reporter | None = None) -> dict:
    if state.stage != "stage2":
        raise ContractError(f"stage2_step on a state in stage {state.stage!r}")
    if any(p.requires_grad for p in state.encoders.parameters()):
        raise InvariantViolation("encoders must be frozen during stage 2")
    c = state.cfg.stage2
    step = state.step
    U, G = step_flows(state, dataset, "stage2", step, c.batch_size)
    lam_sha, lam_uni = stage2_lambdas(state, step)
    lr = lr_at(step, c.steps, c.lr, c.warmup, c.lr_floor)
    _set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)

    traces = (state.model(U), state.model(G))
    fset = mid_factors(state, *traces)
    targets = None if c.no_sg else ema_target_factors(state, U, G)
    critic_mi = critic_step(state, fset)
    out = stage2_terms(state, U, G, lam_sha, lam_uni, targets, traces=traces, fset=fset)
    out["total"].backward()
    touched = _params_with_grad(state.encoders) + _params_with_grad(state.readouts)
    if touched:
        raise InvariantViolation(f"encoders received gradient in stage 2: {touched[:3]}")
    state.optimizer.step()
    decay = ema_decay_at(step, c.steps, c.ema_start, c.ema_end)
    lo, hi = state.trainable_range()
    for l in range(lo, hi + 1):
        ema_update(state.ema[str(l)], state.model.blocks[l - 1], decay)
    rep = loss_report(
        "stage2", step, out, lr, {"lambda_sha": lam_sha, "lambda_uni": lam_uni},
        {"ema_decay": decay, "unique_critic_mi_lower": critic_mi},
    )
    _check_finite(rep, reporter)
    state.step += 1
    state.trace.append(rep["total"])
    if reporter is not None:
        reporter.emit(rep, force=state.step == c.steps)
    return rep


def prepare_native(state: TrainState, stage: str) -> None:
    """Native-loss training: ``pretrain`` updates the whole backbone, ``sft`` the trainable range."""
    _freeze_all(state)
    state.stage = stage
    if stage == "pretrain":
        c = state.cfg.pretrain
        params = list(state.model.parameters())
    else:
        c = state.cfg.sft
        params = backbone_trainable_params(state, state.trainable_range(), state.cfg.stage2.train_head)
    for p in params:
        p.requires_grad_(True)
    state.model.train()
    state.optimizer = torch.optim.AdamW(params, lr=c.lr, weight_decay=c.weight_decay)
    state.step, state.trace = 0, []


def native_total_steps(state: TrainState) -> int:
    return state.cfg.pretrain.steps if state.stage == "pretrain" else state.cfg.sft_steps()


def native_step(state: TrainState, dataset: Dataset, reporter: Reporter | None = None) -> dict:
    c = state.cfg.pretrain if state.stage == "pretrain" else state.cfg.sft
    total_steps = native_total_steps(state)
    step = state.step
    U, G = step_flows(state, dataset, state.stage, step, c.batch_size)
    lr = lr_at(step, total_steps, c.lr, c.warmup, c.lr_floor)
    _set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    tU, tG = state.model(U), state.model(G)
    terms = {"L_und": und_loss(tU, U), "L_gen": gen_loss(tG, G)}
    weights = {"L_und": 1.0, "L_gen": 1.0}
    out = {"terms": terms, "weights": weights, "total": _weighted_total(terms, weights)}
    out["total"].backward()
    state.optimizer.step()
    rep = loss_report(state.stage, step, out, lr, {"lambda_sha": 0.0, "lambda_uni": 0.0, "lambda_ortho": 0.0})
    _check_finite(rep, reporter)
    state.step += 1
    state.trace.append(rep["total"])
    if reporter is not None:
        reporter.emit(rep, force=state.step == total_steps)
    return rep


# --- loops ----------------------------------------------------------------


def _loop(state, dataset, step_fn, total, reporter, until, progress):
    end = total if until is None else min(total, until)
    while state.step < end:
        rep = step_fn(state, dataset, reporter)
        if progress is not None:
            progress(rep)
    return state


def run_pretrain(cfg: RunConfig, dataset: Dataset, seed: int, reporter=None, until=None, progress=None, dtype=torch.float32) -> TrainState:
    state = init_state(cfg, seed, dtype)
    state.data_seed = dataset.seed
    prepare_native(state, "pretrain")
    return _loop(state, dataset, native_step, cfg.pretrain.steps, reporter, until, progress)


def _adopt_base(cfg: RunConfig, seed: int, base: TrainState | None, dtype) -> TrainState:
    state = init_state(cfg, seed, dtype)
    if base is not None:
        # mid_range only selects which layers feed the factors; weights are unaffected
        if dataclasses.replace(base.bcfg, mid_range=state.bcfg.mid_range) != state.bcfg:
            raise ContractError("base checkpoint has a different backbone configuration")
        state.model.load_state_dict(base.model.state_dict())
    return state


def run_stage1(cfg: RunConfig, dataset: Dataset, seed: int, base: TrainState | None = None, reporter=None,
               until=None, progress=None, dtype=torch.float32) -> TrainState:
    """Encoder warmup from ``base`` (or a fresh backbone) for ``cfg.stage1.steps``."""
    state = _adopt_base(cfg, seed, base, dtype)
    state.data_seed = dataset.seed
    prepare_stage1(state)
    return _loop(state, dataset, stage1_step, cfg.stage1.steps, reporter, until, progress)


def run_stage2(cfg: RunConfig | None, stage1_state: TrainState, dataset: Dataset, reporter=None,
               until=None, progress=None) -> TrainState:
    """Backbone refinement. A state already in stage 2 resumes where it stopped.

    ``cfg`` supplies the stage-2, mask and eval sections when starting from a
    stage-1 state; a resumed stage-2 state keeps its own config.
    """
    state = stage1_state
    if state.stage == "stage1":
        if cfg is not None:
            _merge_stage2_cfg(state, cfg)
        if state.step < state.cfg.stage1.steps:
            raise ContractError(f"stage-1 checkpoint incomplete ({state.step}/{state.cfg.stage1.steps} steps)")
        prepare_stage2(state)
    elif state.stage != "stage2":
        raise ContractError(f"stage 2 needs a stage-1 checkpoint, got stage {state.stage!r}")
    state.data_seed = dataset.seed
    return _loop(state, dataset, stage2_step, state.cfg.stage2.steps, reporter, until, progress)


def _merge_stage2_cfg(state: TrainState, cfg: RunConfig) -> None:
    # stage 2 inherits data/model/encoder settings from the stage-1 run
    state.cfg.stage2 = copy.deepcopy(cfg.stage2)
    state.cfg.mask = copy.deepcopy(cfg.mask)
    state.cfg.eval = copy.deepcopy(cfg.eval)
    state.cfg.validate()


def run_sft_baseline(cfg: RunConfig, dataset: Dataset, seed: int, base: TrainState | None = None, reporter=None,
                     until=None, progress=None, dtype=torch.float32) -> TrainState:
    state = _adopt_base(cfg, seed, base, dtype)
    state.data_seed = dataset.seed
    prepare_native(state, "sft")
    return _loop(state, dataset, native_step, cfg.sft_steps(), reporter, until, progress)


def resume(state: TrainState, dataset: Dataset, reporter=None, until=None, progress=None) -> TrainState:
    if state.stage == "stage1":
        return _loop(state, dataset, stage1_step, state.cfg.stage1.steps, reporter, until, progress)
    if state.stage == "stage2":
        return _loop(state, dataset, stage2_step, state.cfg.stage2.steps, reporter, until, progress)
    if state.stage in ("pretrain", "sft"):
        return _loop(state, dataset, native_step, native_total_steps(state), reporter, until, progress)
    raise ContractError(f"nothing to resume for stage {state.stage!r}")


# --- checkpoints ----------------------------------------------------------


def _optim_tree(opt: torch.optim.Optimizer | None):
    return None if opt is None else opt.state_dict()


def state_bytes(state: TrainState) -> bytes:
    meta = {
        "stage": state.stage,
        "step": state.step,
        "seed": state.seed,
        "data_seed": state.data_seed,
        "dtype": str(state.dtype).replace("torch.", ""),
        "trace": state.trace,
        "ema_layers": sorted(int(k) for k in state.ema.keys()) if state.ema is not None else None,
    }
    trees = {
        "model": state.model.state_dict(),
        "encoders": state.encoders.state_dict(),
        "readouts": state.readouts.state_dict(),
        "critic": state.critic.state_dict(),
        "ema": state.ema.state_dict() if state.ema is not None else None,
        "optimizer": _optim_tree(state.optimizer),
        "critic_opt": _optim_tree(state.critic_opt),
    }
    return ckpt_io.encode(state.cfg.to_dict(), meta, trees)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    ckpt_io.write_atomic(path, state_bytes(state))


def state_from_bytes(data: bytes) -> TrainState:
    config, meta, trees = ckpt_io.decode(data)
    try:
        cfg = RunConfig.from_dict(config).validate()
    except Exception as e:
        raise CheckpointError("config", f"invalid config echo ({e})") from None
    dtype = getattr(torch, meta["dtype"])
    state = init_state(cfg, meta["seed"], dtype)
    try:
        state.model.load_state_dict(trees["model"])
        state.encoders.load_state_dict(trees["encoders"])
        state.readouts.load_state_dict(trees["readouts"])
        state.critic.load_state_dict(trees["critic"])
    except RuntimeError as e:
        raise CheckpointError("tensors", str(e)) from None
    stage = meta["stage"]
    state.data_seed = meta["data_seed"]
    if stage == "stage1":
        prepare_stage1(state)
    elif stage == "stage2":
        prepare_stage2(state)
        state.ema.load_state_dict(trees["ema"])
        state.critic_opt.load_state_dict(trees["critic_opt"])
    elif stage in ("pretrain", "sft"):
        prepare_native(state, stage)
    if state.optimizer is not None and trees["optimizer"] is not None:
        state.optimizer.load_state_dict(trees["optimizer"])
    state.stage = stage
    state.step = meta["step"]
    state.trace = list(meta["trace"])
    return state


def load_checkpoint(path: str | Path) -> TrainState:
    return state_from_bytes(ckpt_io.read_file(path))


# --- evaluation -----------------------------------------------------------


def retrieval_at_1(zU: torch.Tensor, zG: torch.Tensor) -> float:
    """Fraction of rows whose own partner attains the maximum cosine (ties count as hits)."""
    a = zU / zU.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b = zG / zG.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sims = a @ b.T
    return float((sims.diagonal() >= sims.max(dim=1).values).double().mean())


def _chunked_forward(model: Backbone, batch_flows: list, bcfg: BackboneConfig, chunk: int = 32):
    """Forward a long list of flows in chunks; returns per-chunk (batch, trace)."""
    out = []
    for i in range(0, len(batch_flows), chunk):
        b = collate(batch_flows[i : i + chunk], bcfg)
        out.append((b, model(b)))
    return out


@torch.no_grad()
def evaluate(state: TrainState, heldout: Dataset, batch_size: int | None = None) -> dict:
    """Held-out native losses, top-1 accuracies and cross-flow factor statistics."""
    if len(heldout) == 0:
        raise ValueError("evaluation dataset is empty")
    if state.data_seed is not None and heldout.seed == state.data_seed:
        raise ValueError(f"held-out seed {heldout.seed} equals the training data seed")
    B = batch_size or state.cfg.eval.batch_size
    model = state.model
    was_training = model.training
    model.eval()
    bcfg = state.bcfg
    mask_rng = rng_for(heldout.seed, "eval", "mask")
    sums = {"und": 0.0, "gen": 0.0, "und_n": 0, "gen_n": 0, "und_hit": 0, "gen_hit": 0}
    fac_stats = {"retrieval_at_1": [], "shared_infonce_lower": [], "unique_club": [], "unique_infonce_lower": []}
    weights = []
    crit = state.shared_critic()
    for start in range(0, len(heldout), B):
        samples = heldout.samples[start : start + B]
        und_flows = [build_und_flow(s, bcfg) for s in samples]
        gen_flows = [build_gen_flow(s, sample_mask(state.cfg.mask, bcfg.G, mask_rng), bcfg) for s in samples]
        hid_U, hid_G = [], []
        for flows, key, hid in ((und_flows, "und", hid_U), (gen_flows, "gen", hid_G)):
            for b, tr in _chunked_forward(model, flows, bcfg):
                lg = target_logits(tr, b)
                k = b.target_tokens.numel()
                if k:
                    sums[key] += float(mean_cross_entropy(lg.double(), b.target_tokens)) * k
                    sums[f"{key}_hit"] += int((lg.argmax(-1) == b.target_tokens).sum())
                    sums[f"{key}_n"] += k
                hid.append(tr.hidden)
        if len(samples) < 2:
            continue
        cat = lambda hs: [torch.cat([h[i] for h in hs]) for i in range(len(hs[0]))]
        from .backbone import ForwardTrace

        fset = mid_factors(state, ForwardTrace(None, cat(hid_U)), ForwardTrace(None, cat(hid_G)))
        n_l = len(fset.layers)
        zs = lambda kind, f, i: (fset.sh if kind == "sh" else fset.uni)[f][:, i]
        fac_stats["retrieval_at_1"].append(np.mean([retrieval_at_1(zs("sh", "U", i), zs("sh", "G", i)) for i in range(n_l)]))
        fac_stats["shared_infonce_lower"].append(
            np.mean([float(infonce(zs("sh", "U", i), zs("sh", "G", i), crit)[1]) for i in range(n_l)])
        )
        fac_stats["unique_club"].append(
            np.mean([float(nce_club(zs("uni", "U", i), zs("uni", "G", i), state.critic)) for i in range(n_l)])
        )
        fac_stats["unique_infonce_lower"].append(
            np.mean([float(infonce(zs("uni", "U", i), zs("uni", "G", i), state.critic)[1]) for i in range(n_l)])
        )
        weights.append(len(samples))
    model.train(was_training)
    w = np.asarray(weights, dtype=float)
    report = {
        "kind": "eval",
        "stage": state.stage,
        "step": state.step,
        "n": len(heldout),
        "heldout_seed": heldout.seed,
        "val_L_und": sums["und"] / max(1, sums["und_n"]),
        "val_L_gen": sums["gen"] / max(1, sums["gen_n"]),
        "caption_acc": sums["und_hit"] / max(1, sums["und_n"]),
        "masked_cell_acc": sums["gen_hit"] / max(1, sums["gen_n"]),
    }
    for k, vals in fac_stats.items():
        report[k] = float(np.dot(w, vals) / w.sum()) if len(vals) else float("nan")
    return report


EVAL_KEYS = (
    "kind", "stage", "step", "n", "heldout_seed", "val_L_und", "val_L_gen", "caption_acc",
    "masked_cell_acc", "retrieval_at_1", "shared_infonce_lower", "unique_club", "unique_infonce_lower",
)
LOSS_KEYS = ("kind", "stage", "step", "terms", "weights", "total", "lambdas", "lr")


def check_loss_record(rec: dict) -> None:
    missing = [k for k in LOSS_KEYS if k not in rec]
    if missing:
        raise ValueError(f"loss record missing {missing}")
    if sorted(rec["terms"]) != sorted(TERMS) or sorted(rec["weights"]) != sorted(TERMS):
        raise ValueError(f"loss record terms {sorted(rec['terms'])} != {sorted(TERMS)}")
    expect = sum(rec["weights"][k] * rec["terms"][k] for k in TERMS)
    if abs(expect - rec["total"]) > 1e-6:
        raise ValueError(f"total {rec['total']} != weighted sum {expect}")


def check_eval_record(rec: dict) -> None:
    missing = [k for k in EVAL_KEYS if k not in rec]
    if missing:
        raise ValueError(f"eval record missing {missing}")


def timed(fn: Callable, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t


def derive_run_seed(master: int, label: str) -> int:
    return derive_seed(master, label)
