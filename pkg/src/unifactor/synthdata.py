"""Anchor-grounded synthetic image/caption pairs and generation-flow masks.

Visual vocabulary layout (local ids in ``[0, V_v)``)::

    [0, S*C)              object tokens, id = shape * C + color
    [S*C, S*C + C)        object fill tokens, id = S*C + color
    [S*C + C, V_v)        background texture tokens

Text vocabulary layout (ids in ``[0, V_t)``)::

    [0, C)                color words
    [C, C+S)              shape words
    [C+S, C+S+4)          quadrant words
    next 6                prompt words ("please describe this image in detail")
    next n_fillers        filler words
    rest                  unused

An image is a ``G x G`` grid. The object is a ``k x k`` block (``k = G // 4``)
centred in the anchor's quadrant; its cells depend only on the anchor. Every
other cell is texture drawn from a per-image palette chosen by the image
nuisance seed. Captions fill one of the configured templates (``C``/``S``/``Q``
anchor slots, ``F`` filler slots); template and fillers come from the text
nuisance seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import DataConfig, MaskConfig
from .errors import ConfigError

FORMAT_VERSION = 1
PROMPT_WORDS = ("please", "describe", "this", "image", "in", "detail")


@dataclass(frozen=True)
class Anchor:
    shape_class: int
    color_class: int
    quadrant: int

    def validate(self, cfg: DataConfig) -> None:
        if not 0 <= self.shape_class < cfg.S:
            raise ConfigError("shape_class", f"{self.shape_class} not in [0, {cfg.S})")
        if not 0 <= self.color_class < cfg.C:
            raise ConfigError("color_class", f"{self.color_class} not in [0, {cfg.C})")
        if not 0 <= self.quadrant < 4:
            raise ConfigError("quadrant", f"{self.quadrant} not in [0, 4)")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.shape_class, self.color_class, self.quadrant)


@dataclass
class PairedSample:
    sample_id: int
    image_tokens: np.ndarray  # (G, G) int64
    caption_tokens: np.ndarray  # (T,) int64
    anchor: Anchor
    img_nuisance_seed: int
    txt_nuisance_seed: int

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "anchor": {
                "shape_class": self.anchor.shape_class,
                "color_class": self.anchor.color_class,
                "quadrant": self.anchor.quadrant,
            },
            "img_nuisance_seed": self.img_nuisance_seed,
            "txt_nuisance_seed": self.txt_nuisance_seed,
            "image_tokens": self.image_tokens.tolist(),
            "caption_tokens": self.caption_tokens.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PairedSample":
        a = rec["anchor"]
        return cls(
            sample_id=int(rec["id"]),
            image_tokens=np.asarray(rec["image_tokens"], dtype=np.int64),
            caption_tokens=np.asarray(rec["caption_tokens"], dtype=np.int64),
            anchor=Anchor(int(a["shape_class"]), int(a["color_class"]), int(a["quadrant"])),
            img_nuisance_seed=int(rec["img_nuisance_seed"]),
            txt_nuisance_seed=int(rec["txt_nuisance_seed"]),
        )


@dataclass
class Mask:
    cells: np.ndarray  # (G, G) bool, True = masked
    ratio_used: float


@dataclass
class Dataset:
    cfg: DataConfig
    seed: int
    samples: list[PairedSample]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PairedSample:
        return self.samples[i]


# --- vocab layout helpers -------------------------------------------------


def object_token(cfg: DataConfig, shape: int, color: int) -> int:
    return shape * cfg.C + color


def fill_token(cfg: DataConfig, color: int) -> int:
    return cfg.S * cfg.C + color


def texture_range(cfg: DataConfig) -> tuple[int, int]:
    return cfg.S * cfg.C + cfg.C, cfg.V_v


def color_word(cfg: DataConfig, color: int) -> int:
    return color


def shape_word(cfg: DataConfig, shape: int) -> int:
    return cfg.C + shape


def quadrant_word(cfg: DataConfig, quadrant: int) -> int:
    return cfg.C + cfg.S + quadrant


def prompt_tokens(cfg: DataConfig) -> tuple[int, ...]:
    base = cfg.C + cfg.S + 4
    return tuple(range(base, base + len(PROMPT_WORDS)))


def filler_range(cfg: DataConfig) -> tuple[int, int]:
    base = cfg.C + cfg.S + 4 + len(PROMPT_WORDS)
    return base, base + cfg.n_fillers


def object_box(cfg: DataConfig, quadrant: int) -> tuple[int, int, int]:
    """Top-left (row, col) and side of the object block for ``quadrant``."""
    half = cfg.G // 2
    k = max(1, cfg.G // 4)
    off = (half - k) // 2
    row = (quadrant // 2) * half + off
    col = (quadrant % 2) * half + off
    return row, col, k


def shape_pattern(shape: int, k: int) -> np.ndarray:
    """Boolean k x k footprint of a shape class; fixed for a given (shape, k)."""
    if k == 1:
        return np.ones((1, 1), dtype=bool)
    r, c = np.mgrid[0:k, 0:k]
    base = [
        np.ones((k, k), dtype=bool),  # square
        (r == k // 2) | (c == k // 2) | (r == (k - 1) // 2) | (c == (k - 1) // 2),  # plus
        r >= c,  # triangle
        (r == 0) | (c == 0) | (r == k - 1) | (c == k - 1),  # ring
    ]
    if shape < len(base):
        return base[shape]
    # further classes: seeded footprints with the centre always set
    pat = np.random.default_rng(1_000_003 + shape).random((k, k)) < 0.5
    pat[k // 2, k // 2] = True
    return pat


# --- rendering ------------------------------------------------------------


def render_image(anchor: Anchor, nuisance_seed: int, cfg: DataConfig) -> np.ndarray:
    """Render the G x G visual-token grid for ``anchor``.

    Object cells are a function of the anchor alone; background texture is a
    function of ``nuisance_seed`` alone.
    """
    anchor.validate(cfg)
    rng = np.random.default_rng(nuisance_seed)
    lo, hi = texture_range(cfg)
    palette = rng.choice(np.arange(lo, hi), size=min(cfg.palette_size, hi - lo), replace=False)
    grid = palette[rng.integers(0, len(palette), size=(cfg.G, cfg.G))].astype(np.int64)
    row, col, k = object_box(cfg, anchor.quadrant)
    pat = shape_pattern(anchor.shape_class, k)
    block = np.where(
        pat,
        object_token(cfg, anchor.shape_class, anchor.color_class),
        fill_token(cfg, anchor.color_class),
    )
    grid[row : row + k, col : col + k] = block
    return grid


def render_caption(anchor: Anchor, nuisance_seed: int, cfg: DataConfig) -> np.ndarray:
    """Fill a caption template; anchor slots are fixed, fillers follow the seed."""
    anchor.validate(cfg)
    rng = np.random.default_rng(nuisance_seed)
    template = cfg.templates[int(rng.integers(len(cfg.templates)))].split()
    f_lo, f_hi = filler_range(cfg)
    out = []
    for slot in template:
        if slot == "C":
            out.append(color_word(cfg, anchor.color_class))
        elif slot == "S":
            out.append(shape_word(cfg, anchor.shape_class))
        elif slot == "Q":
            out.append(quadrant_word(cfg, anchor.quadrant))
        else:
            out.append(int(rng.integers(f_lo, f_hi)))
    return np.asarray(out, dtype=np.int64)


def anchor_slot_tokens(caption: np.ndarray, cfg: DataConfig) -> tuple[int, int, int]:
    """Recover the (color, shape, quadrant) words from a caption."""
    color = shape = quad = None
    for t in caption.tolist():
        if t < cfg.C:
            color = t
        elif t < cfg.C + cfg.S:
            shape = t
        elif t < cfg.C + cfg.S + 4:
            quad = t
    return color, shape, quad


# --- dataset --------------------------------------------------------------


def _anchor_for(index: int, cfg: DataConfig, seed: int) -> Anchor:
    # each block of K consecutive samples is a seeded permutation of all K anchors
    K = 4 * cfg.S * cfg.C
    cycle, pos = divmod(index, K)
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, cycle))).permutation(K)
    code = int(perm[pos])
    shape, rest = divmod(code, cfg.C * 4)
    color, quadrant = divmod(rest, 4)
    return Anchor(shape, color, quadrant)


def make_sample(index: int, cfg: DataConfig, seed: int) -> PairedSample:
    anchor = _anchor_for(index, cfg, seed)
    img_seed, txt_seed = (
        int(x) for x in np.random.SeedSequence(seed, spawn_key=(1, index)).generate_state(2, np.uint32)
    )
    return PairedSample(
        sample_id=index,
        image_tokens=render_image(anchor, img_seed, cfg),
        caption_tokens=render_caption(anchor, txt_seed, cfg),
        anchor=anchor,
        img_nuisance_seed=img_seed,
        txt_nuisance_seed=txt_seed,
    )


def generate_dataset(cfg: DataConfig, seed: int) -> Dataset:
    """Generate ``cfg.n`` samples; sample ``i`` depends only on ``(cfg, seed, i)``."""
    cfg.validate()
    return Dataset(cfg, int(seed), [make_sample(i, cfg, int(seed)) for i in range(cfg.n)])


def _header(ds: Dataset) -> dict:
    c = ds.cfg
    return {
        "kind": "header",
        "version": FORMAT_VERSION,
        "S": c.S,
        "C": c.C,
        "G": c.G,
        "V_t": c.V_t,
        "V_v": c.V_v,
        "seed": ds.seed,
        "n": len(ds.samples),
        "max_caption": c.max_caption,
        "n_fillers": c.n_fillers,
        "palette_size": c.palette_size,
        "templates": list(c.templates),
    }


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps(_header(ds), sort_keys=True)]
    lines += [json.dumps(s.to_record(), sort_keys=True) for s in ds.samples]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_dataset(ds), encoding="utf-8")
    tmp.replace(path)


def load_dataset(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("dataset", f"{path} is empty")
    head = json.loads(lines[0])
    if head.get("kind") != "header" or head.get("version") != FORMAT_VERSION:
        raise ConfigError("dataset.version", f"unsupported dataset header in {path}")
    cfg = DataConfig(
        S=head["S"], C=head["C"], G=head["G"], V_t=head["V_t"], V_v=head["V_v"],
        n=head["n"], max_caption=head["max_caption"], n_fillers=head["n_fillers"],
        palette_size=head["palette_size"], templates=tuple(head["templates"]),
    )
    samples = [PairedSample.from_record(json.loads(ln)) for ln in lines[1:]]
    if len(samples) != cfg.n:
        raise ConfigError("dataset.n", f"header says {cfg.n} samples, file holds {len(samples)}")
    return Dataset(cfg, int(head["seed"]), samples)


def anchor_histogram(samples: Iterable[PairedSample]) -> dict[tuple[int, int, int], int]:
    hist: dict[tuple[int, int, int], int] = {}
    for s in samples:
        key = s.anchor.as_tuple()
        hist[key] = hist.get(key, 0) + 1
    return hist


# --- masks ----------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _rectangle_for(count: int, G: int) -> tuple[int, int]:
    """(height, width) with area closest to ``count``; ties go to the wider one."""
    best = None
    for h in range(1, G + 1):
        for w in range(1, G + 1):
            key = (abs(h * w - count), -w, h)
            if best is None or key < best[0]:
                best = (key, h, w)
    return best[1], best[2]


def sample_mask(mcfg: MaskConfig, G: int, rng: np.random.Generator) -> Mask:
    if G < 2:
        raise ConfigError("G", f"mask grid side must be >= 2, got {G}")
    mcfg.validate()
    ratio = float(rng.uniform(mcfg.ratio_min, mcfg.ratio_max))
    count = round_half_up(ratio * G * G)
    cells = np.zeros((G, G), dtype=bool)
    if count == 0:
        return Mask(cells, ratio)
    if mcfg.pattern == "random":
        flat = rng.choice(G * G, size=count, replace=False)
        cells.reshape(-1)[flat] = True
        return Mask(cells, ratio)
    h, w = _rectangle_for(count, G)
    r0 = int(rng.integers(0, G - h + 1))
    c0 = int(rng.integers(0, G - w + 1))
    cells[r0 : r0 + h, c0 : c0 + w] = True
    # report the realised ratio so popcount == round(ratio_used * G^2) holds
    return Mask(cells, h * w / (G * G))


def apply_mask(image_tokens: np.ndarray, mask: Mask, mask_token: int, V_v: int | None = None) -> np.ndarray:
    image_tokens = np.asarray(image_tokens)
    if image_tokens.shape != mask.cells.shape:
        raise ValueError(f"image shape {image_tokens.shape} != mask shape {mask.cells.shape}")
    if V_v is not None and 0 <= mask_token < V_v:
        raise ValueError(f"mask_token {mask_token} collides with visual vocab [0, {V_v})")
    return np.where(mask.cells, mask_token, image_tokens)
