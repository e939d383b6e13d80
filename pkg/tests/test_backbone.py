import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from unifactor.backbone import (
    GEN,
    IMAGE,
    PADSEG,
    TEXT,
    UND,
    BackboneConfig,
    ForwardTrace,
    attention_mask,
    build_backbone,
    build_gen_flow,
    build_und_flow,
    collate,
    collect_mid_states,
    forward,
    gen_loss,
    und_loss,
)
from unifactor.errors import ConfigError, ContractError, InputError
from unifactor.synthdata import Mask, generate_dataset, sample_mask
from unifactor.seeding import torch_generator


@pytest.fixture
def setup():
    cfg = tiny_config()
    bcfg = BackboneConfig.from_run(cfg)
    ds = generate_dataset(cfg.data, 3)
    model = build_backbone(bcfg, torch_generator(0, "t"), torch.float64)
    return cfg, bcfg, ds, model


def _mask(G, cells):
    m = np.zeros((G, G), bool)
    for r, c in cells:
        m[r, c] = True
    return Mask(m, len(cells) / G / G)


def test_und_flow_layout(setup):
    cfg, bcfg, ds, _ = setup
    s = ds[0]
    f = build_und_flow(s, bcfg)
    N = bcfg.N
    assert f.flow_kind == UND
    assert f.input_tokens[0] == bcfg.BOS and f.input_tokens[1] == bcfg.BOI and f.input_tokens[2 + N] == bcfg.EOI
    np.testing.assert_array_equal(f.input_tokens[2 : 2 + N], s.image_tokens.reshape(-1) + bcfg.V_t)
    assert len(f.target_positions) == len(s.caption_tokens)
    # next-token alignment: the token after each scored row is the target
    np.testing.assert_array_equal(f.input_tokens[f.target_positions + 1], f.target_tokens)
    np.testing.assert_array_equal(f.target_tokens, s.caption_tokens)
    assert (f.target_tokens < bcfg.V_t).all()


def test_und_flow_shared_prefix_for_equal_images(setup):
    _, bcfg, ds, _ = setup
    a = ds[0]
    b = type(a)(99, a.image_tokens, np.array([0, 1], dtype=np.int64), a.anchor, 0, 0)
    fa, fb = build_und_flow(a, bcfg), build_und_flow(b, bcfg)
    end = 3 + bcfg.N + len(bcfg.prompt)
    np.testing.assert_array_equal(fa.input_tokens[:end], fb.input_tokens[:end])


def test_und_flow_caption_too_long(setup):
    _, bcfg, ds, _ = setup
    s = ds[0]
    long = type(s)(0, s.image_tokens, np.zeros(bcfg.max_caption + 1, dtype=np.int64), s.anchor, 0, 0)
    with pytest.raises(InputError):
        build_und_flow(long, bcfg)


def test_gen_flow_targets(setup):
    _, bcfg, ds, _ = setup
    s = ds[1]
    G = bcfg.G
    f0 = build_gen_flow(s, _mask(G, []), bcfg)
    assert len(f0.target_positions) == 0
    cells = [(0, 1), (2, 3), (3, 0)]
    f = build_gen_flow(s, _mask(G, cells), bcfg)
    assert f.flow_kind == GEN and len(f.target_positions) == 3
    np.testing.assert_array_equal(f.target_tokens, [s.image_tokens[r, c] for r, c in cells])
    assert (f.input_tokens[f.target_positions] == bcfg.MASK).all()
    assert f.input_tokens[1 + len(s.caption_tokens)] == bcfg.BOI
    with pytest.raises(ValueError):
        build_gen_flow(s, Mask(np.zeros((G + 1, G + 1), bool), 0.0), bcfg)


def test_collate_rejects_bad_token(setup):
    _, bcfg, ds, _ = setup
    f = build_und_flow(ds[0], bcfg)
    f.input_tokens = f.input_tokens.copy()
    f.input_tokens[5] = bcfg.vocab_in
    with pytest.raises(InputError, match="position 5"):
        collate([f], bcfg)


def test_attention_mask_topology():
    seg = torch.tensor([[TEXT, TEXT, IMAGE, IMAGE, IMAGE, TEXT, PADSEG]])
    m = attention_mask(seg)[0]
    # text causal
    assert m[1, 0] and not m[0, 1]
    # image block bidirectional
    assert m[2, 4] and m[4, 2]
    # image cannot see later text, later text sees image
    assert not m[3, 5] and m[5, 3]
    # pad keys invisible to everyone else
    assert not m[:6, 6].any()


def test_zero_head_gives_zero_logits(setup):
    _, bcfg, ds, model = setup
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    b = collate([build_und_flow(s, bcfg) for s in ds.samples[:3]], bcfg)
    assert torch.count_nonzero(model(b).logits) == 0


def test_pad_isolation(setup):
    _, bcfg, ds, model = setup
    flows = [build_und_flow(ds[i], bcfg) for i in range(4)]
    b = collate(flows, bcfg)
    pad = b.segments == PADSEG
    assert pad.any()
    ref = model(b).logits
    with torch.no_grad():
        model.tok_emb.weight[bcfg.PAD].normal_()
    out = model(b).logits
    assert torch.equal(ref[~pad], out[~pad])
    # permuting two pad positions of one row leaves non-pad logits unchanged
    row = int(torch.nonzero(pad.any(1))[0])
    idx = torch.nonzero(pad[row]).flatten()
    if len(idx) >= 2:
        t = b.tokens.clone()
        t[row, idx[0]], t[row, idx[1]] = t[row, idx[1]].item(), t[row, idx[0]].item()
        b2 = type(b)(**{**b.__dict__, "tokens": t})
        assert torch.equal(model(b2).logits[~pad], out[~pad])


def _reference_forward(model, tokens, segments):
    """Straight-line numpy re-evaluation of the forward arithmetic."""
    P = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    T = tokens.shape[0]
    x = P["tok_emb.weight"][tokens] + P["pos_emb.weight"][:T]

    def ln(v, w, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * w + b

    def gelu(v):
        from math import erf

        return v * 0.5 * (1 + np.vectorize(erf)(v / math.sqrt(2)))

    allowed = np.zeros((T, T), bool)
    for q in range(T):
        for k in range(T):
            if segments[k] == PADSEG:
                allowed[q, k] = q == k and segments[q] == PADSEG
            else:
                allowed[q, k] = k <= q or (segments[q] == IMAGE and segments[k] == IMAGE)
    D = x.shape[1]
    H = model.cfg.heads
    hd = D // H
    for l in range(model.cfg.num_layers):
        p = lambda n: P[f"blocks.{l}.{n}"]
        h = ln(x, p("ln1.weight"), p("ln1.bias"))
        qkv = h @ p("qkv.weight").T + p("qkv.bias")
        q, k, v = qkv[:, :D], qkv[:, D : 2 * D], qkv[:, 2 * D :]
        heads = []
        for i in range(H):
            sl = slice(i * hd, (i + 1) * hd)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
            s = np.where(allowed, s, -np.inf)
            s = np.exp(s - s.max(1, keepdims=True))
            s /= s.sum(1, keepdims=True)
            heads.append(s @ v[:, sl])
        x = x + np.concatenate(heads, 1) @ p("out.weight").T + p("out.bias")
        h = ln(x, p("ln2.weight"), p("ln2.bias"))
        x = x + gelu(h @ p("fc.weight").T + p("fc.bias")) @ p("proj.weight").T + p("proj.bias")
    return ln(x, P["ln_f.weight"], P["ln_f.bias"]) @ P["head.weight"].T + P["head.bias"]


def test_forward_matches_reference(setup):
    _, bcfg, ds, model = setup
    mask = sample_mask(tiny_config().mask, bcfg.G, np.random.default_rng(0))
    for flow in (build_und_flow(ds[2], bcfg), build_gen_flow(ds[2], mask, bcfg)):
        b = collate([flow], bcfg)
        got = model(b).logits[0].detach().numpy()
        ref = _reference_forward(model, b.tokens[0].numpy(), b.segments[0].numpy())
        np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9)


def test_forward_rejects_out_of_range(setup):
    _, bcfg, ds, model = setup
    f = build_und_flow(ds[0], bcfg)
    f.input_tokens = f.input_tokens.copy()
    f.input_tokens[3] = -1
    with pytest.raises(InputError):
        forward(model, f)


def _trace_with_logits(batch, logits):
    return ForwardTrace(logits, [])


def test_loss_oracles(setup):
    _, bcfg, ds, _ = setup
    bu = collate([build_und_flow(ds[0], bcfg)], bcfg)
    T = bu.tokens.shape[1]
    V = bcfg.vocab_out
    flat = torch.zeros(1, T, V, dtype=torch.float64)
    assert float(und_loss(ForwardTrace(flat), bu)) == pytest.approx(math.log(bcfg.V_t), abs=1e-12)
    sharp = flat.clone()
    sharp[0, bu.target_rows, bu.target_tokens] = 30.0
    assert float(und_loss(ForwardTrace(sharp), bu)) <= bcfg.V_t * math.exp(-30) + 1e-12
    bg = collate([build_gen_flow(ds[0], _mask(bcfg.G, [(1, 1)]), bcfg)], bcfg)
    flat_g = torch.zeros(1, bg.tokens.shape[1], V, dtype=torch.float64)
    assert float(gen_loss(ForwardTrace(flat_g), bg)) == pytest.approx(math.log(bcfg.V_v), abs=1e-12)
    # single masked cell, hand-set logits: two non-zero entries
    lg = flat_g.clone()
    tgt = int(bg.target_tokens[0])
    row = int(bg.target_rows[0])
    lg[0, row, bcfg.V_t + tgt] = 2.0
    lg[0, row, bcfg.V_t + (tgt + 1) % bcfg.V_v] = 1.0
    expect = -(2.0 - math.log(math.exp(2) + math.e + bcfg.V_v - 2))
    assert float(gen_loss(ForwardTrace(lg), bg)) == pytest.approx(expect, abs=1e-12)
    empty = collate([build_gen_flow(ds[0], _mask(bcfg.G, []), bcfg)], bcfg)
    assert float(gen_loss(ForwardTrace(torch.zeros(1, empty.tokens.shape[1], V)), empty)) == 0.0
    with pytest.raises(ContractError):
        und_loss(ForwardTrace(flat_g), bg)
    with pytest.raises(ContractError):
        gen_loss(ForwardTrace(flat), bu)


def test_hand_ce_two_targets():
    # 2 targets over a 3-word text slice, hand arithmetic
    bcfg = BackboneConfig(1, 4, 1, 3, 2, 4, (1, 1))
    from unifactor.backbone import FlowBatch

    b = FlowBatch(UND, torch.zeros(1, 3, dtype=torch.long), torch.zeros(1, 3, dtype=torch.long),
                  torch.zeros(1, 16, dtype=torch.long), torch.tensor([0, 0]), torch.tensor([0, 1]),
                  torch.tensor([2, 0]), [0], 3)
    logits = torch.zeros(1, 3, 5, dtype=torch.float64)
    logits[0, 0, :3] = torch.tensor([1.0, 2.0, 3.0])
    logits[0, 1, :3] = torch.tensor([0.5, -1.0, 0.0])
    l1 = -(3.0 - math.log(math.e + math.e**2 + math.e**3))
    l2 = -(0.5 - math.log(math.exp(0.5) + math.exp(-1.0) + 1.0))
    assert float(und_loss(ForwardTrace(logits), b)) == pytest.approx((l1 + l2) / 2, abs=1e-12)


def test_collect_mid_states(setup):
    _, bcfg, ds, model = setup
    hidden = [torch.randn(2, 16, 8) for _ in range(8)]
    tr = ForwardTrace(None, hidden)
    got = collect_mid_states(tr, (3, 6))
    assert [l for l, _ in got] == [3, 4, 5, 6]
    assert all(h is hidden[l - 1] for l, h in got)
    assert len(collect_mid_states(tr, (1, 8))) == 8
    for bad in [(5, 4), (0, 2), (2, 9)]:
        with pytest.raises(ConfigError):
            collect_mid_states(tr, bad)


def test_hidden_states_cover_all_layers(setup):
    _, bcfg, ds, model = setup
    b = collate([build_und_flow(ds[0], bcfg)], bcfg)
    tr = model(b)
    assert len(tr.hidden) == bcfg.num_layers
    assert tr.hidden[0].shape == (1, bcfg.N, bcfg.width)
    assert torch.isfinite(tr.logits).all()


def test_native_loss_gradients_match_finite_differences(setup):
    _, bcfg, ds, model = setup
    bu = collate([build_und_flow(s, bcfg) for s in ds.samples[:2]], bcfg)
    m = sample_mask(tiny_config().mask, bcfg.G, np.random.default_rng(1))
    bg = collate([build_gen_flow(s, m, bcfg) for s in ds.samples[:2]], bcfg)
    params = dict(model.named_parameters())
    for loss_fn, b in ((und_loss, bu), (gen_loss, bg)):
        model.zero_grad()
        loss_fn(model(b), b).backward()
        for name, p in params.items():
            if name.startswith("tok_emb") or name.startswith("pos_emb"):
                idx = [tuple(i) for i in torch.nonzero(p.grad.abs() > 0)[:6].tolist()]
            else:
                idx = [tuple(np.unravel_index(i, p.shape)) for i in range(0, p.numel(), max(1, p.numel() // 6))]
            for i in idx:
                with torch.no_grad():
                    old = p[i].item()
                    p[i] = old + 1e-5
                    up = float(loss_fn(model(b), b))
                    p[i] = old - 1e-5
                    dn = float(loss_fn(model(b), b))
                    p[i] = old
                fd = (up - dn) / 2e-5
                g = p.grad[i].item()
                assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g), 1e-6), (name, i, fd, g)
