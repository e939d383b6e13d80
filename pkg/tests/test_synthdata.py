import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unifactor.config import DataConfig, MaskConfig
from unifactor.errors import ConfigError
from unifactor.synthdata import (
    Anchor,
    Mask,
    anchor_histogram,
    anchor_slot_tokens,
    apply_mask,
    dumps_dataset,
    generate_dataset,
    load_dataset,
    object_box,
    render_caption,
    render_image,
    sample_mask,
    save_dataset,
)


def object_block(grid, cfg, anchor):
    r, c, k = object_box(cfg, anchor.quadrant)
    return grid[r : r + k, c : c + k]


def test_dataset_bytes_are_reproducible():
    cfg = DataConfig(S=4, C=4, G=16, n=8)
    assert dumps_dataset(generate_dataset(cfg, 7)) == dumps_dataset(generate_dataset(cfg, 7))
    assert dumps_dataset(generate_dataset(cfg, 7)) != dumps_dataset(generate_dataset(cfg, 8))


def test_empty_dataset():
    assert len(generate_dataset(DataConfig(n=0), 3)) == 0


def test_anchor_coverage_counts():
    cfg = DataConfig(S=2, C=2, n=64)
    hist = anchor_histogram(generate_dataset(cfg, 1).samples)
    # 2 shapes x 2 colors x 4 quadrants
    assert len(hist) == 16
    assert sum(hist.values()) == 64


@pytest.mark.parametrize("S,C", [(1, 1), (3, 2), (4, 4)])
def test_every_anchor_appears_once_per_cycle(S, C):
    cfg = DataConfig(S=S, C=C, n=4 * S * C)
    hist = anchor_histogram(generate_dataset(cfg, 5).samples)
    assert len(hist) == 4 * S * C and set(hist.values()) == {1}


def test_invalid_config_names_field():
    with pytest.raises(ConfigError) as e:
        generate_dataset(DataConfig(G=5), 0)
    assert e.value.field == "G"
    with pytest.raises(ConfigError) as e:
        generate_dataset(DataConfig(V_t=10), 0)
    assert e.value.field == "V_t"


def test_samples_are_valid_tokens():
    cfg = DataConfig(n=40)
    for s in generate_dataset(cfg, 2).samples:
        assert s.image_tokens.shape == (cfg.G, cfg.G)
        assert s.image_tokens.min() >= 0 and s.image_tokens.max() < cfg.V_v
        assert 0 < len(s.caption_tokens) <= cfg.max_caption
        assert s.caption_tokens.min() >= 0 and s.caption_tokens.max() < cfg.V_t
        np.testing.assert_array_equal(s.image_tokens, render_image(s.anchor, s.img_nuisance_seed, cfg))
        np.testing.assert_array_equal(s.caption_tokens, render_caption(s.anchor, s.txt_nuisance_seed, cfg))


def test_render_image_nuisance_only_touches_background():
    cfg = DataConfig()
    a = Anchor(1, 2, 3)
    g1, g2 = render_image(a, 11, cfg), render_image(a, 12, cfg)
    np.testing.assert_array_equal(object_block(g1, cfg, a), object_block(g2, cfg, a))
    assert (g1 != g2).any()
    np.testing.assert_array_equal(g1, render_image(a, 11, cfg))


def test_quadrant_moves_object():
    cfg = DataConfig()
    a, b = Anchor(0, 0, 0), Anchor(0, 0, 3)
    ra, ca, _ = object_box(cfg, a.quadrant)
    rb, cb, _ = object_box(cfg, b.quadrant)
    half = cfg.G // 2
    assert (ra < half and ca < half) and (rb >= half and cb >= half)


def test_caption_anchor_slots():
    cfg = DataConfig()
    a = Anchor(2, 1, 0)
    c1, c2 = render_caption(a, 1, cfg), render_caption(a, 99, cfg)
    assert anchor_slot_tokens(c1, cfg) == anchor_slot_tokens(c2, cfg) == (1, cfg.C + 2, cfg.C + cfg.S + 0)
    other = render_caption(Anchor(2, 3, 0), 1, cfg)
    assert anchor_slot_tokens(other, cfg)[0] != anchor_slot_tokens(c1, cfg)[0]
    np.testing.assert_array_equal(c1, render_caption(a, 1, cfg))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3),
       st.integers(0, 2**31), st.integers(0, 2**31))
def test_shared_ground_truth(s1, c1, q1, s2, c2, q2, n1, n2):
    cfg = DataConfig()
    a, b = Anchor(s1, c1, q1), Anchor(s2, c2, q2)
    ga, gb = render_image(a, n1, cfg), render_image(b, n2, cfg)
    same_block = object_box(cfg, q1) == object_box(cfg, q2) and np.array_equal(
        object_block(ga, cfg, a), object_block(gb, cfg, b)
    )
    same_slots = anchor_slot_tokens(render_caption(a, n1, cfg), cfg) == anchor_slot_tokens(
        render_caption(b, n2, cfg), cfg
    )
    assert (a == b) == same_block == same_slots


def test_dataset_roundtrip(tmp_path):
    ds = generate_dataset(DataConfig(n=12, G=8), 4)
    p = tmp_path / "d.jsonl"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert dumps_dataset(back) == dumps_dataset(ds)
    assert p.read_text().splitlines()[0].startswith('{"C": 4')


def test_mask_boundaries():
    rng = np.random.default_rng(0)
    assert sample_mask(MaskConfig(0, 0), 8, rng).cells.sum() == 0
    assert sample_mask(MaskConfig(0.25, 0.25), 16, rng).cells.sum() == 64
    assert sample_mask(MaskConfig(0.25, 0.25, "contiguous"), 16, rng).cells.sum() == 64


def test_mask_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        sample_mask(MaskConfig(0.7, 0.2), 8, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_mask(MaskConfig(0.2, 1.2), 8, np.random.default_rng(0))


def test_mask_mean_ratio():
    rng = np.random.default_rng(123)
    ratios = [sample_mask(MaskConfig(0.2, 0.6), 16, rng).ratio_used for _ in range(10_000)]
    assert 0.38 <= np.mean(ratios) <= 0.42


def _is_one_rectangle(cells):
    rows, cols = np.flatnonzero(cells.any(1)), np.flatnonzero(cells.any(0))
    if len(rows) == 0:
        return True
    box = cells[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return box.all() and box.sum() == cells.sum()


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 16), st.integers(0, 2**31), st.sampled_from(["random", "contiguous"]))
def test_mask_count_property(a, b, G, seed, pattern):
    lo, hi = min(a, b), max(a, b)
    m = sample_mask(MaskConfig(lo, hi, pattern), G, np.random.default_rng(seed))
    assert m.cells.shape == (G, G)
    if pattern == "random":
        assert lo <= m.ratio_used <= hi
        assert abs(m.cells.sum() - m.ratio_used * G * G) <= 0.5
    else:
        assert _is_one_rectangle(m.cells)
        assert m.cells.sum() == round(m.ratio_used * G * G)


def test_contiguous_prefers_wide_rectangles():
    # 6 cells in a 4x4 grid: 2x3 and 3x2 tie, wider wins
    m = sample_mask(MaskConfig(6 / 16, 6 / 16, "contiguous"), 4, np.random.default_rng(0))
    rows, cols = np.flatnonzero(m.cells.any(1)), np.flatnonzero(m.cells.any(0))
    assert (len(rows), len(cols)) == (2, 3)


def test_apply_mask():
    img = np.arange(64).reshape(8, 8)
    none = Mask(np.zeros((8, 8), bool), 0.0)
    np.testing.assert_array_equal(apply_mask(img, none, 99), img)
    full = Mask(np.ones((8, 8), bool), 1.0)
    assert (apply_mask(img, full, 99) == 99).all()
    cells = np.zeros((8, 8), bool)
    cells[3, 5] = True
    out = apply_mask(img, Mask(cells, 1 / 64), 99)
    assert out[3, 5] == 99 and (out != img).sum() == 1
    with pytest.raises(ValueError):
        apply_mask(img[:4], full, 99)
    with pytest.raises(ValueError):
        apply_mask(img, full, 3, V_v=64)
