"""Procedural fine-grained image/caption generator and few-shot splitting.

Every image is a function of ``(subcategory, attributes, image_seed)`` so the
manifest alone is enough to reproduce the pixels.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
CHANNELS = 3

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.12, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.88, 0.15),
    "purple": (0.60, 0.15, 0.75),
    "orange": (0.97, 0.55, 0.08),
    "cyan": (0.10, 0.85, 0.85),
    "pink": (0.98, 0.55, 0.75),
}
SIZES: dict[str, int] = {"small": 6, "medium": 10, "large": 14}
BACKGROUNDS = ("plain", "checkered", "striped", "speckled")
POSITIONS: dict[str, tuple[int, int]] = {
    # (row, col) centre of each quadrant
    "top-left": (8, 8),
    "top-right": (8, 24),
    "bottom-left": (24, 8),
    "bottom-right": (24, 24),
}
ATTRIBUTE_KEYS = ("color", "size", "background", "position")
SCHEMA: dict[str, tuple[str, ...]] = {
    "color": tuple(COLORS),
    "size": tuple(SIZES),
    "background": BACKGROUNDS,
    "position": tuple(POSITIONS),
}

SHAPES = (
    "disc", "square", "triangle", "diamond", "cross",
    "ring", "hbar", "vbar", "octagon", "star",
)

SPLITS = ("pretrain_base", "train", "val", "test")

CAPTION_TEMPLATE = (
    "a {size} {color} {subcategory}, a type of {meta_category}, "
    "on a {background} background in the {position}"
)
_CAPTION_RE = re.compile(
    r"^a (?P<size>\S+) (?P<color>\S+) (?P<subcategory>\S+), a type of (?P<meta_category>\S+), "
    r"on a (?P<background>\S+) background in the (?P<position>\S+)$"
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    metas: tuple[str, ...]
    subcategories: dict[str, tuple[str, ...]]
    shape_of: dict[str, str]
    motif_of: dict[str, int]
    schema: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(SCHEMA))

    def meta_of(self, sub: str) -> str:
        for meta, subs in self.subcategories.items():
            if sub in subs:
                return meta
        raise KeyError(sub)

    def siblings(self, sub: str) -> tuple[str, ...]:
        return tuple(s for s in self.subcategories[self.meta_of(sub)] if s != sub)

    def all_subcategories(self) -> list[str]:
        return [s for m in self.metas for s in self.subcategories[m]]


@dataclass
class CaptionRecord:
    id: str
    split: str
    meta_category: str
    subcategory: str
    attributes: dict[str, str]
    caption: str
    image_seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CaptionRecord":
        return cls(**json.loads(line))


def gen_taxonomy(n_meta: int, n_sub: int, seed: int) -> Taxonomy:
    if n_meta < 1:
        raise DatasetError("n_meta must be >= 1")
    if n_sub < 2:
        raise DatasetError("n_sub must be >= 2 so every subcategory has a sibling")
    if n_meta > len(SHAPES):
        raise DatasetError(f"at most {len(SHAPES)} meta-categories have distinct shapes")
    rng = np.random.default_rng(seed)
    shape_order = rng.permutation(len(SHAPES))
    metas = tuple(f"meta{i}" for i in range(n_meta))
    subs = {m: tuple(f"{m}_sub{j}" for j in range(n_sub)) for m in metas}
    shape_of = {m: SHAPES[shape_order[i]] for i, m in enumerate(metas)}
    motif_of: dict[str, int] = {}
    for m in metas:
        # motif ids are a per-meta permutation so siblings never collide
        perm = rng.permutation(n_sub)
        for j, s in enumerate(subs[m]):
            motif_of[s] = int(perm[j])
    return Taxonomy(metas=metas, subcategories=subs, shape_of=shape_of, motif_of=motif_of)


def caption_for(size: str, color: str, subcategory: str, meta_category: str,
                background: str, position: str) -> str:
    return CAPTION_TEMPLATE.format(
        size=size, color=color, subcategory=subcategory,
        meta_category=meta_category, background=background, position=position,
    )


def parse_caption(caption: str) -> dict[str, str]:
    """Inverse of :func:`caption_for`."""
    m = _CAPTION_RE.match(caption)
    if m is None:
        raise DatasetError(f"caption does not follow the template: {caption!r}")
    return m.groupdict()


def _shape_mask(shape: str, side: int) -> np.ndarray:
    c = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(c, c, indexing="ij")
    r = np.sqrt(x * x + y * y)
    if shape == "disc":
        m = r <= 1.0
    elif shape == "square":
        m = np.ones((side, side), dtype=bool)
    elif shape == "triangle":
        m = (y >= -1.0) & (np.abs(x) <= (y + 1.0) / 2.0)
    elif shape == "diamond":
        m = np.abs(x) + np.abs(y) <= 1.0
    elif shape == "cross":
        m = (np.abs(x) <= 0.35) | (np.abs(y) <= 0.35)
    elif shape == "ring":
        m = (r <= 1.0) & (r >= 0.5)
    elif shape == "hbar":
        m = np.abs(y) <= 0.45
    elif shape == "vbar":
        m = np.abs(x) <= 0.45
    elif shape == "octagon":
        m = (np.abs(x) <= 0.95) & (np.abs(y) <= 0.95) & (np.abs(x) + np.abs(y) <= 1.35)
    elif shape == "star":
        m = (np.abs(x) + np.abs(y) <= 0.6) | ((np.abs(x) <= 0.2) | (np.abs(y) <= 0.2)) & (r <= 1.0)
        m |= np.abs(np.abs(x) - np.abs(y)) <= 0.2
        m &= r <= 1.0
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    return m


def _motif(motif: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Boolean pattern marking foreground pixels to darken; low contrast by design."""
    kind = motif % 4
    period = 2 + (motif // 4) % 3
    if kind == 0:
        return np.zeros_like(rows, dtype=bool)
    if kind == 1:
        return (rows // period) % 2 == 0
    if kind == 2:
        return (cols // period) % 2 == 0
    return ((rows + cols) // period) % 2 == 0


def _background(kind: str, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if kind == "plain":
        g = np.full((IMAGE_SIZE, IMAGE_SIZE), 0.5)
    elif kind == "checkered":
        g = np.where(((rows // 4) + (cols // 4)) % 2 == 0, 0.38, 0.62)
    elif kind == "striped":
        g = np.where((rows // 2) % 2 == 0, 0.35, 0.65)
    elif kind == "speckled":
        g = 0.5 + rng.uniform(-0.2, 0.2, size=(IMAGE_SIZE, IMAGE_SIZE))
    else:
        raise DatasetError(f"unknown background {kind!r}")
    return np.repeat(g[:, :, None], CHANNELS, axis=2)


def render_layers(taxonomy: Taxonomy, sub: str, attrs: dict[str, str],
                  image_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render an image and return it together with its foreground mask."""
    for key in ATTRIBUTE_KEYS:
        if key not in attrs:
            raise DatasetError(f"missing attribute {key!r}")
        if attrs[key] not in SCHEMA[key]:
            raise DatasetError(f"unknown {key} value {attrs[key]!r}")
    rng = np.random.default_rng(image_seed)
    img = _background(attrs["background"], rng)

    side = SIZES[attrs["size"]]
    cy, cx = POSITIONS[attrs["position"]]
    dy, dx = rng.integers(-2, 3, size=2)
    top = cy + dy - side // 2
    left = cx + dx - side // 2
    shape = _shape_mask(taxonomy.shape_of[taxonomy.meta_of(sub)], side)

    rows, cols = np.mgrid[0:side, 0:side]
    pattern = _motif(taxonomy.motif_of[sub], rows, cols)
    color = np.asarray(COLORS[attrs["color"]]) * (1.0 + rng.uniform(-0.05, 0.05))
    patch = np.broadcast_to(color, (side, side, CHANNELS)).copy()
    patch[pattern] *= 0.72

    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    r0, r1 = max(top, 0), min(top + side, IMAGE_SIZE)
    c0, c1 = max(left, 0), min(left + side, IMAGE_SIZE)
    sub_shape = shape[r0 - top:r1 - top, c0 - left:c1 - left]
    region = img[r0:r1, c0:c1]
    region[sub_shape] = patch[r0 - top:r1 - top, c0 - left:c1 - left][sub_shape]
    mask[r0:r1, c0:c1] = sub_shape
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def render_image(taxonomy: Taxonomy, sub: str, attrs: dict[str, str], image_seed: int) -> np.ndarray:
    return render_layers(taxonomy, sub, attrs, image_seed)[0]


def render_records(taxonomy: Taxonomy, records: list[CaptionRecord]) -> np.ndarray:
    """Stack rendered images for ``records`` as an (N, H, W, C) float32 array."""
    out = np.empty((len(records), IMAGE_SIZE, IMAGE_SIZE, CHANNELS), dtype=np.float32)
    for i, r in enumerate(records):
        out[i] = render_image(taxonomy, r.subcategory, r.attributes, r.image_seed)
    return out


def gen_dataset(taxonomy: Taxonomy, per_sub: int, seed: int, n_base_meta: int = 0) -> list[CaptionRecord]:
    """Generate ``per_sub`` records per subcategory.

    The first ``n_base_meta`` meta-categories are reserved for backbone
    pretraining (split ``pretrain_base``); the rest form the downstream pool,
    tagged ``test`` until :func:`few_shot_split` assigns train/val.
    """
    if per_sub < 1:
        raise DatasetError("per_sub must be >= 1")
    if not 0 <= n_base_meta <= len(taxonomy.metas):
        raise DatasetError("n_base_meta out of range")
    combos = list(itertools.product(*(taxonomy.schema[k] for k in ATTRIBUTE_KEYS)))
    if per_sub > len(combos):
        log.warning("per_sub=%d exceeds %d attribute combinations; duplicates allowed",
                    per_sub, len(combos))
    rng = np.random.default_rng(seed)
    base = set(taxonomy.metas[:n_base_meta])
    records = []
    for meta in taxonomy.metas:
        for sub in taxonomy.subcategories[meta]:
            replace = per_sub > len(combos)
            picks = rng.choice(len(combos), size=per_sub, replace=replace)
            seeds = rng.integers(0, 2**31 - 1, size=per_sub)
            for i, (ci, s) in enumerate(zip(picks, seeds)):
                attrs = dict(zip(ATTRIBUTE_KEYS, combos[ci]))
                records.append(CaptionRecord(
                    id=f"{sub}_{i:04d}",
                    split="pretrain_base" if meta in base else "test",
                    meta_category=meta,
                    subcategory=sub,
                    attributes=attrs,
                    caption=caption_for(subcategory=sub, meta_category=meta, **attrs),
                    image_seed=int(s),
                ))
    return records


def few_shot_split(records: list[CaptionRecord], shots: int, seed: int,
                   val_fraction: float = 0.25) -> dict[str, list[CaptionRecord]]:
    """Per subcategory: ``shots`` records to train, the rest split 25/75 into val/test.

    Base-split records are passed through untouched under ``pretrain_base``.
    """
    if shots < 1:
        raise DatasetError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    by_sub: dict[str, list[CaptionRecord]] = {}
    out: dict[str, list[CaptionRecord]] = {s: [] for s in SPLITS}
    for r in records:
        if r.split == "pretrain_base":
            out["pretrain_base"].append(r)
        else:
            by_sub.setdefault(r.subcategory, []).append(r)
    for sub, recs in by_sub.items():
        if len(recs) <= shots:
            raise DatasetError(
                f"subcategory {sub} has {len(recs)} records; need more than shots={shots}")
        order = rng.permutation(len(recs))
        rest = [recs[i] for i in order[shots:]]
        n_val = int(round(len(rest) * val_fraction))
        for i in order[:shots]:
            out["train"].append(_with_split(recs[i], "train"))
        val_ids = {r.id for r in rest[:n_val]}
        for r in sorted(rest, key=lambda r: r.id):
            split = "val" if r.id in val_ids else "test"
            out[split].append(_with_split(r, split))
    out["train"].sort(key=lambda r: r.id)
    return out


def _with_split(r: CaptionRecord, split: str) -> CaptionRecord:
    return CaptionRecord(**{**asdict(r), "split": split})


def write_manifest(path: Path, records: list[CaptionRecord]) -> None:
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(path: Path) -> list[CaptionRecord]:
    return [CaptionRecord.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())
