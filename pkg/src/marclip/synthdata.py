"""Procedural image-caption pairs: one colored shape per image, caption
made of four attribute words. 4 shapes x 8 colors x 3 sizes x 4 quadrants
= 384 distinct scenes; captions and scenes are a bijection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import STREAM_DATA, substream

SHAPES = ["circle", "square", "triangle", "cross"]
COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"]
SIZES = ["small", "medium", "large"]
QUADRANTS = ["TL", "TR", "BL", "BR"]

# Palette values are multiples of 1/8 so tokenizer normalization math in
# float64 round-trips to the exact float32 pixel values.
COLOR_RGB = {
    "red": (1.0, -0.875, -0.875),
    "green": (-0.875, 1.0, -0.875),
    "blue": (-0.875, -0.875, 1.0),
    "yellow": (1.0, 1.0, -0.875),
    "cyan": (-0.875, 1.0, 1.0),
    "magenta": (1.0, -0.875, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.25, -0.875),
}
BACKGROUND = -0.75

PAD_TOKEN = 0
NULL_TOKEN = 1
CAPTION_LEN = 8

# token id layout: [PAD, NULL, colors..., shapes..., sizes..., quadrants...]
_WORDS = COLORS + SHAPES + SIZES + QUADRANTS
WORD_TO_ID = {w: i + 2 for i, w in enumerate(_WORDS)}
ID_TO_WORD = {i: w for w, i in WORD_TO_ID.items()}
VOCAB_SIZE = 2 + len(_WORDS)

N_SCENES = len(SHAPES) * len(COLORS) * len(SIZES) * len(QUADRANTS)

CACHE_MAGIC = b"DRM1"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SceneSpec:
    shape_id: int
    color_id: int
    size_id: int
    quadrant_id: int
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.shape_id < len(SHAPES) and 0 <= self.color_id < len(COLORS)
                and 0 <= self.size_id < len(SIZES) and 0 <= self.quadrant_id < len(QUADRANTS)):
            raise ValueError(f"attribute id out of range: {self}")

    @property
    def index(self) -> int:
        i = self.shape_id
        i = i * len(COLORS) + self.color_id
        i = i * len(SIZES) + self.size_id
        i = i * len(QUADRANTS) + self.quadrant_id
        return i


def spec_from_index(index: int) -> SceneSpec:
    q = index % len(QUADRANTS)
    index //= len(QUADRANTS)
    s = index % len(SIZES)
    index //= len(SIZES)
    c = index % len(COLORS)
    sh = index // len(COLORS)
    return SceneSpec(shape_id=sh, color_id=c, size_id=s, quadrant_id=q)


def caption_of(spec: SceneSpec) -> np.ndarray:
    """Fixed-length token ids: color, shape, size, quadrant, then PAD."""
    toks = [
        WORD_TO_ID[COLORS[spec.color_id]],
        WORD_TO_ID[SHAPES[spec.shape_id]],
        WORD_TO_ID[SIZES[spec.size_id]],
        WORD_TO_ID[QUADRANTS[spec.quadrant_id]],
    ]
    toks += [PAD_TOKEN] * (CAPTION_LEN - len(toks))
    return np.array(toks, dtype=np.uint16)


def spec_of(caption: np.ndarray) -> SceneSpec:
    caption = np.asarray(caption)
    if caption.shape != (CAPTION_LEN,):
        raise ValueError(f"caption must have length {CAPTION_LEN}, got {caption.shape}")
    words = []
    for tok in caption.tolist():
        if tok == PAD_TOKEN:
            continue
        if tok == NULL_TOKEN or tok not in ID_TO_WORD:
            raise ValueError(f"unknown caption token id {tok}")
        words.append(ID_TO_WORD[tok])
    if len(words) != 4:
        raise ValueError(f"caption must contain exactly 4 attribute words, got {words}")
    color, shape, size, quad = words
    try:
        return SceneSpec(
            shape_id=SHAPES.index(shape),
            color_id=COLORS.index(color),
            size_id=SIZES.index(size),
            quadrant_id=QUADRANTS.index(quad),
        )
    except ValueError as e:
        raise ValueError(f"caption words out of order or invalid: {words}") from e


def null_caption() -> np.ndarray:
    return np.full(CAPTION_LEN, NULL_TOKEN, dtype=np.uint16)


def caption_from_words(words: list[str]) -> np.ndarray:
    """Prompt parser: whitespace attributes in any order -> caption."""
    by_kind = {}
    for w in words:
        if w in COLORS:
            by_kind["color"] = w
        elif w in SHAPES:
            by_kind["shape"] = w
        elif w in SIZES:
            by_kind["size"] = w
        elif w in QUADRANTS:
            by_kind["quadrant"] = w
        else:
            raise ValueError(f"unknown prompt word '{w}'")
    missing = {"color", "shape", "size", "quadrant"} - set(by_kind)
    if missing:
        raise ValueError(f"prompt missing attributes: {sorted(missing)}")
    spec = SceneSpec(
        shape_id=SHAPES.index(by_kind["shape"]),
        color_id=COLORS.index(by_kind["color"]),
        size_id=SIZES.index(by_kind["size"]),
        quadrant_id=QUADRANTS.index(by_kind["quadrant"]),
    )
    return caption_of(spec)


def render_scene(spec: SceneSpec, side: int = 32) -> np.ndarray:
    """Rasterize to (side, side, 3) float32 in [-1, 1]; hard-edged shape
    over a constant background, centered in the spec's quadrant."""
    if side % 4 != 0:
        raise ValueError(f"side must be divisible by 4, got {side}")
    img = np.full((side, side, 3), BACKGROUND, dtype=np.float32)
    half = side // 2
    quarter = side // 4
    row = 0 if spec.quadrant_id in (0, 1) else half   # TL/TR on top
    col = 0 if spec.quadrant_id in (0, 2) else half   # TL/BL on left
    cy = row + quarter - 0.5
    cx = col + quarter - 0.5
    radius = {0: side / 10.0, 1: side / 7.0, 2: side / 5.0}[spec.size_id]

    yy, xx = np.mgrid[0:side, 0:side]
    dy = yy - cy
    dx = xx - cx
    if SHAPES[spec.shape_id] == "circle":
        mask = dy * dy + dx * dx <= radius * radius
    elif SHAPES[spec.shape_id] == "square":
        mask = np.maximum(np.abs(dy), np.abs(dx)) <= radius
    elif SHAPES[spec.shape_id] == "triangle":
        # isoceles, apex up; the quadrant center lies inside
        mask = (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2.0)
    else:  # cross
        arm = max(1.0, radius / 3.0)
        box = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        mask = box & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    img[mask] = np.array(COLOR_RGB[COLORS[spec.color_id]], dtype=np.float32)
    return img


def render_background(side: int = 32) -> np.ndarray:
    """Degenerate scene with no shape; used by rasterizer tests."""
    if side % 4 != 0:
        raise ValueError(f"side must be divisible by 4, got {side}")
    return np.full((side, side, 3), BACKGROUND, dtype=np.float32)


def split_spec_indices(seed: int, val_count: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint train/val partition of the 384-scene space."""
    perm = substream(seed, STREAM_DATA, 0).permutation(N_SCENES)
    return np.sort(perm[val_count:]), np.sort(perm[:val_count])


def dataset(seed: int, n: int, split: str, side: int = 32):
    """Yield n (image, caption, spec) samples, reproducible from (seed, split)."""
    train_idx, val_idx = split_spec_indices(seed)
    if split == "train":
        pool = train_idx
    elif split == "val":
        pool = val_idx
    else:
        raise ValueError(f"unknown split '{split}'")
    tag = 1 if split == "train" else 2
    for i in range(n):
        rng = substream(seed, STREAM_DATA, tag, i)
        spec = spec_from_index(int(pool[rng.integers(len(pool))]))
        yield render_scene(spec, side=side), caption_of(spec), spec


def generate_arrays(seed: int, n: int, split: str, side: int = 32):
    """Materialized dataset: (n, side, side, 3) float32 + (n, 8) uint16."""
    images = np.empty((n, side, side, 3), dtype=np.float32)
    captions = np.empty((n, CAPTION_LEN), dtype=np.uint16)
    for i, (img, cap, _) in enumerate(dataset(seed, n, split, side=side)):
        images[i] = img
        captions[i] = cap
    return images, captions


def save_cache(path, images: np.ndarray, captions: np.ndarray):
    n, side = images.shape[0], images.shape[1]
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, n, side))
        f.write(images.astype("<f4").tobytes())
        f.write(captions.astype("<u2").tobytes())


def load_cache(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CACHE_MAGIC:
            raise IOError(f"bad cache magic {magic!r}")
        version, n, side = struct.unpack("<III", f.read(12))
        if version != CACHE_VERSION:
            raise IOError(f"unsupported cache version {version}")
        images = np.frombuffer(f.read(n * side * side * 3 * 4), dtype="<f4")
        images = images.reshape(n, side, side, 3).copy()
        captions = np.frombuffer(f.read(n * CAPTION_LEN * 2), dtype="<u2")
        captions = captions.reshape(n, CAPTION_LEN).copy()
    return images, captions
