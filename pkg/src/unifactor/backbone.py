"""Miniature shared-transformer backbone and the two information flows.

Joint token id space::

    [0, V_t)              text tokens
    [V_t, V_t + V_v)      visual tokens (local id + V_t)
    V_t + V_v + 0..4      BOS, BOI, EOI, MASK, PAD

The output head predicts over the first ``V_t + V_v`` ids; flows slice it:
text targets read columns ``[0, V_t)``, image targets ``[V_t, V_t + V_v)``.

Attention is prefix-LM: causal over text, bidirectional inside the image
block, PAD keys never visible. A flow stores this as a per-position
``segments`` array (0 = text, 1 = image, 2 = pad).

``target_positions`` index the logit rows that are scored. For the
understanding flow that is the row *before* each caption token (next-token
teacher forcing); for the generation flow it is the masked cell itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .errors import ConfigError, ContractError, InputError
from .synthdata import Mask, PairedSample, apply_mask, prompt_tokens

TEXT, IMAGE, PADSEG = 0, 1, 2
UND, GEN = "understanding", "generation"


@dataclass
class BackboneConfig:
    num_layers: int
    width: int
    heads: int
    V_t: int
    V_v: int
    G: int
    mid_range: tuple[int, int]
    prompt: tuple[int, ...] = ()
    max_caption: int = 8

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("width", f"{self.width} not divisible by heads {self.heads}")
        lo, hi = self.mid_range
        if not 1 <= lo <= hi <= self.num_layers:
            raise ConfigError("mid_range", f"[{lo}, {hi}] not within [1, {self.num_layers}]")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "BackboneConfig":
        m, d = cfg.model, cfg.data
        return cls(
            num_layers=m.num_layers, width=m.width, heads=m.heads, V_t=d.V_t, V_v=d.V_v, G=d.G,
            mid_range=m.resolved_mid_range(), prompt=prompt_tokens(d), max_caption=d.max_caption,
        )

    @property
    def BOS(self) -> int:
        return self.V_t + self.V_v

    @property
    def BOI(self) -> int:
        return self.V_t + self.V_v + 1

    @property
    def EOI(self) -> int:
        return self.V_t + self.V_v + 2

    @property
    def MASK(self) -> int:
        return self.V_t + self.V_v + 3

    @property
    def PAD(self) -> int:
        return self.V_t + self.V_v + 4

    @property
    def vocab_in(self) -> int:
        return self.V_t + self.V_v + 5

    @property
    def vocab_out(self) -> int:
        return self.V_t + self.V_v

    @property
    def N(self) -> int:
        return self.G * self.G

    @property
    def max_len(self) -> int:
        return 3 + self.N + len(self.prompt) + self.max_caption


@dataclass
class FlowInstance:
    flow_kind: str
    input_tokens: np.ndarray
    segments: np.ndarray
    image_positions: np.ndarray
    target_positions: np.ndarray
    target_tokens: np.ndarray
    source_sample_id: int


@dataclass
class FlowBatch:
    """Collated flows of one kind, padded at the tail."""

    flow_kind: str
    tokens: torch.Tensor  # (B, T)
    segments: torch.Tensor  # (B, T)
    image_index: torch.Tensor  # (B, N)
    target_batch: torch.Tensor  # (K,)
    target_rows: torch.Tensor  # (K,)
    target_tokens: torch.Tensor  # (K,) slice-local ids
    sample_ids: list[int]
    V_t: int

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ForwardTrace:
    logits: torch.Tensor | None  # (B, T, V_t + V_v)
    hidden: list[torch.Tensor] = field(default_factory=list)  # per layer (B, N, d)


# --- flow construction ----------------------------------------------------


def image_to_joint(image_tokens: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    return np.asarray(image_tokens, dtype=np.int64).reshape(-1) + cfg.V_t


def build_und_flow(sample: PairedSample, cfg: BackboneConfig) -> FlowInstance:
    cap = np.asarray(sample.caption_tokens, dtype=np.int64)
    if len(cap) > cfg.max_caption:
        raise InputError(f"caption of sample {sample.sample_id} has {len(cap)} tokens > max {cfg.max_caption}")
    if len(cap) == 0:
        raise InputError(f"caption of sample {sample.sample_id} is empty")
    img = image_to_joint(sample.image_tokens, cfg)
    prompt = np.asarray(cfg.prompt, dtype=np.int64)
    tokens = np.concatenate([[cfg.BOS, cfg.BOI], img, [cfg.EOI], prompt, cap]).astype(np.int64)
    segments = np.zeros(len(tokens), dtype=np.int64)
    segments[2 : 2 + cfg.N] = IMAGE
    cap_start = 3 + cfg.N + len(prompt)
    return FlowInstance(
        flow_kind=UND,
        input_tokens=tokens,
        segments=segments,
        image_positions=np.arange(2, 2 + cfg.N),
        target_positions=np.arange(cap_start - 1, cap_start - 1 + len(cap)),
        target_tokens=cap.copy(),
        source_sample_id=sample.sample_id,
    )


def build_gen_flow(sample: PairedSample, mask: Mask, cfg: BackboneConfig) -> FlowInstance:
    if mask.cells.shape != (cfg.G, cfg.G):
        raise ValueError(f"mask shape {mask.cells.shape} != ({cfg.G}, {cfg.G})")
    cap = np.asarray(sample.caption_tokens, dtype=np.int64)
    if len(cap) > cfg.max_caption:
        raise InputError(f"caption of sample {sample.sample_id} has {len(cap)} tokens > max {cfg.max_caption}")
    joint = np.asarray(sample.image_tokens, dtype=np.int64) + cfg.V_t
    masked = apply_mask(joint, mask, cfg.MASK).reshape(-1)
    img_start = 2 + len(cap)
    tokens = np.concatenate([[cfg.BOS], cap, [cfg.BOI], masked]).astype(np.int64)
    segments = np.zeros(len(tokens), dtype=np.int64)
    segments[img_start:] = IMAGE
    cells = np.flatnonzero(mask.cells.reshape(-1))
    return FlowInstance(
        flow_kind=GEN,
        input_tokens=tokens,
        segments=segments,
        image_positions=np.arange(img_start, img_start + cfg.N),
        target_positions=img_start + cells,
        target_tokens=np.asarray(sample.image_tokens, dtype=np.int64).reshape(-1)[cells],
        source_sample_id=sample.sample_id,
    )


def collate(instances: Sequence[FlowInstance], cfg: BackboneConfig) -> FlowBatch:
    if not instances:
        raise ValueError("cannot collate an empty list of flows")
    kinds = {x.flow_kind for x in instances}
    if len(kinds) != 1:
        raise ContractError(f"mixed flow kinds in one batch: {sorted(kinds)}")
    T = max(len(x.input_tokens) for x in instances)
    if T > cfg.max_len:
        raise InputError(f"sequence length {T} exceeds configured max {cfg.max_len}")
    B = len(instances)
    tokens = np.full((B, T), cfg.PAD, dtype=np.int64)
    segments = np.full((B, T), PADSEG, dtype=np.int64)
    image_index = np.zeros((B, cfg.N), dtype=np.int64)
    tb, tr, tt = [], [], []
    for b, x in enumerate(instances):
        bad = np.flatnonzero((x.input_tokens < 0) | (x.input_tokens >= cfg.vocab_in))
        if len(bad):
            p = int(bad[0])
            raise InputError(f"token {int(x.input_tokens[p])} at position {p} outside [0, {cfg.vocab_in})")
        n = len(x.input_tokens)
        tokens[b, :n] = x.input_tokens
        segments[b, :n] = x.segments
        image_index[b] = x.image_positions
        tb.append(np.full(len(x.target_positions), b))
        tr.append(x.target_positions)
        tt.append(x.target_tokens)
    return FlowBatch(
        flow_kind=instances[0].flow_kind,
        tokens=torch.from_numpy(tokens),
        segments=torch.from_numpy(segments),
        image_index=torch.from_numpy(image_index),
        target_batch=torch.from_numpy(np.concatenate(tb).astype(np.int64)),
        target_rows=torch.from_numpy(np.concatenate(tr).astype(np.int64)),
        target_tokens=torch.from_numpy(np.concatenate(tt).astype(np.int64)),
        sample_ids=[x.source_sample_id for x in instances],
        V_t=cfg.V_t,
    )


def attention_mask(segments: torch.Tensor) -> torch.Tensor:
    """Boolean (B, T, T) visibility: ``[b, q, k]`` is True when q may attend to k."""
    T = segments.shape[-1]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    img = segments == IMAGE
    allowed = causal.unsqueeze(0) | (img.unsqueeze(2) & img.unsqueeze(1))
    allowed = allowed & (segments != PADSEG).unsqueeze(1)
    # pad queries see only themselves so softmax stays defined
    eye = torch.eye(T, dtype=torch.bool).unsqueeze(0)
    return allowed | (eye & (segments == PADSEG).unsqueeze(2))


# --- model ----------------------------------------------------------------


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc = nn.Linear(width, 4 * width)
        self.proj = nn.Linear(4 * width, width)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(D, dim=-1)
        q, k, v = (t.view(B, T, self.heads, D // self.heads).transpose(1, 2) for t in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask.unsqueeze(1))
        x = x + self.out(a.transpose(1, 2).reshape(B, T, D))
        return x + self.proj(F.gelu(self.fc(self.ln2(x))))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_in, cfg.width)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.vocab_out)

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_f"):
                    p.fill_(1.0)
                else:
                    std = 0.02
                    if name.endswith("out.weight") or name.endswith("proj.weight"):
                        std = 0.02 / math.sqrt(2 * self.cfg.num_layers)
                    p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)

    def forward(
        self,
        batch: FlowBatch,
        upto: int | None = None,
        block_override: dict[int, nn.Module] | None = None,
        with_logits: bool = True,
    ) -> ForwardTrace:
        """Run the stack. ``upto`` stops after that (1-based) layer and skips the head.

        ``block_override`` maps 1-based layer index to a replacement block,
        used to evaluate EMA targets without copying the whole model.
        """
        L = self.cfg.num_layers if upto is None else upto
        tokens = batch.tokens
        T = tokens.shape[1]
        x = self.tok_emb(tokens) + self.pos_emb(torch.arange(T)).unsqueeze(0)
        mask = attention_mask(batch.segments)
        idx = batch.image_index.unsqueeze(-1).expand(-1, -1, x.shape[-1])
        hidden = []
        for i in range(L):
            block = self.blocks[i]
            if block_override and (i + 1) in block_override:
                block = block_override[i + 1]
            x = block(x, mask)
            hidden.append(torch.gather(x, 1, idx))
        logits = None
        if with_logits and upto is None:
            logits = self.head(self.ln_f(x))
        return ForwardTrace(logits, hidden)


def build_backbone(cfg: BackboneConfig, seed_generator: torch.Generator, dtype=torch.float32) -> Backbone:
    model = Backbone(cfg).to(dtype)
    model.reset_parameters(seed_generator)
    return model


def forward(model: Backbone, flows: FlowBatch | FlowInstance | Sequence[FlowInstance], **kw) -> ForwardTrace:
    if isinstance(flows, FlowInstance):
        flows = [flows]
    if not isinstance(flows, FlowBatch):
        flows = collate(flows, model.cfg)
    return model(flows, **kw)


# --- losses ---------------------------------------------------------------


def target_logits(trace: ForwardTrace, batch: FlowBatch) -> torch.Tensor:
    """(K, V_slice) logits at scored rows, sliced to the flow's vocabulary."""
    rows = trace.logits[batch.target_batch, batch.target_rows]
    return rows[:, : batch.V_t] if batch.flow_kind == UND else rows[:, batch.V_t :]


def mean_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if targets.numel() == 0:
        return logits.new_zeros(())
    return F.cross_entropy(logits, targets)


def und_loss(trace: ForwardTrace, batch: FlowBatch, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Caption cross-entropy; ``bias`` is an optional per-sample (B, V_t) logit offset."""
    if batch.flow_kind != UND:
        raise ContractError(f"und_loss needs an understanding flow, got {batch.flow_kind}")
    s = target_logits(trace, batch)
    if bias is not None:
        s = s + bias[batch.target_batch]
    return mean_cross_entropy(s, batch.target_tokens)


def gen_loss(trace: ForwardTrace, batch: FlowBatch, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Masked-cell cross-entropy over the visual slice."""
    if batch.flow_kind != GEN:
        raise ContractError(f"gen_loss needs a generation flow, got {batch.flow_kind}")
    s = target_logits(trace, batch)
    if bias is not None:
        s = s + bias[batch.target_batch]
    return mean_cross_entropy(s, batch.target_tokens)


def collect_mid_states(trace: ForwardTrace, mid_range: tuple[int, int]) -> list[tuple[int, torch.Tensor]]:
    lo, hi = mid_range
    if lo > hi or lo < 1 or hi > len(trace.hidden):
        raise ConfigError("mid_range", f"[{lo}, {hi}] invalid for {len(trace.hidden)} layers")
    return [(l, trace.hidden[l - 1]) for l in range(lo, hi + 1)]
