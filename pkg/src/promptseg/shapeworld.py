"""Deterministic synthetic scene generator with panoptic ground truth.

Compositional thing categories (shape x texture x color) over single-stuff
backgrounds, referring-expression rendering, train/val/test splits with
held-out combinations, and the on-disk "SHPW" dataset format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .maskops import BitMask, RleMask, rle_decode, rle_encode
from .numerics import Rng, derive_seed, fnv1a64

SHAPES = ("circle", "square", "triangle", "bar")
TEXTURES = ("solid", "striped", "dotted")
COLORS = ("red", "green", "blue", "yellow")
STUFF_NAMES = ("grass", "sky", "water", "floor")

COLOR_RGB = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
}
STUFF_RGB = {
    "grass": (0.33, 0.52, 0.24),
    "sky": (0.66, 0.80, 0.95),
    "water": (0.18, 0.42, 0.58),
    "floor": (0.52, 0.45, 0.38),
}

RELATIONS = ("left of", "right of", "above", "below")

MAGIC = b"SHPW"
FORMAT_VERSION = 1


class ShapeWorldError(Exception):
    pass


class VocabularyError(ShapeWorldError):
    pass


class DatasetReadError(ShapeWorldError):
    pass


class MagicMismatchError(DatasetReadError):
    pass


class VersionMismatchError(DatasetReadError):
    pass


class TruncationError(DatasetReadError):
    pass


@dataclass(frozen=True)
class Category:
    name: str
    is_thing: bool
    shape: Optional[str] = None
    texture: Optional[str] = None
    color: Optional[str] = None


def thing_name(texture: str, color: str, shape: str) -> str:
    return f"{texture} {color} {shape}"


def all_thing_categories() -> list[Category]:
    out = []
    for shape in SHAPES:
        for texture in TEXTURES:
            for color in COLORS:
                out.append(Category(thing_name(texture, color, shape), True, shape, texture, color))
    return out


def stuff_categories() -> list[Category]:
    return [Category(n, False) for n in STUFF_NAMES]


def parse_category(name: str) -> Category:
    """Recover the attribute triple from a category name (order-insensitive)."""
    if name in STUFF_NAMES:
        return Category(name, False)
    shape = texture = color = None
    for tok in name.split():
        if tok in SHAPES:
            shape = tok
        elif tok in TEXTURES:
            texture = tok
        elif tok in COLORS:
            color = tok
        else:
            raise VocabularyError(f"unknown token {tok!r} in category {name!r}")
    if shape is None or texture is None or color is None:
        raise VocabularyError(f"incomplete category name {name!r}")
    return Category(thing_name(texture, color, shape), True, shape, texture, color)


@dataclass
class Instance:
    name: str
    mask: BitMask
    is_thing: bool


@dataclass
class Scene:
    image: np.ndarray  # (R, R, 3) float32 in [0, 1]
    instances: list[Instance]
    scene_id: int

    @property
    def raster(self) -> int:
        return self.image.shape[0]

    def present_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for inst in self.instances:
            seen.setdefault(inst.name, None)
        return list(seen)

    def masks_of(self, name: str) -> list[BitMask]:
        return [i.mask for i in self.instances if i.name == name]


@dataclass
class SceneConfig:
    raster: int = 64
    min_instances: int = 1
    max_instances: int = 6
    allowed_things: tuple[str, ...] = tuple(c.name for c in all_thing_categories())
    stuff_names: tuple[str, ...] = STUFF_NAMES
    required: Optional[str] = None
    size_lo: float = 0.13
    size_hi: float = 0.24
    min_visible: int = 40
    max_retries: int = 16


_grid_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _grids(r: int):
    if r not in _grid_cache:
        yy, xx = np.mgrid[0:r, 0:r]
        _grid_cache[r] = (yy.astype(np.float32), xx.astype(np.float32))
    return _grid_cache[r]


def _draw_shape(shape: str, cy: float, cx: float, s: float, orient: int, r: int) -> np.ndarray:
    yy, xx = _grids(r)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= s * s
    if shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= s
    if shape == "triangle":
        # up-pointing isoceles: apex (cy-s, cx), base y = cy+s
        return (yy >= cy - s) & (yy <= cy + s) & (np.abs(xx - cx) <= (yy - cy + s) * 0.5)
    if shape == "bar":
        thin, long = s * 0.55, s * 1.9
        dy, dx = (thin, long) if orient == 0 else (long, thin)
        return (np.abs(yy - cy) <= dy) & (np.abs(xx - cx) <= dx)
    raise ShapeWorldError(f"unknown shape {shape!r}")


def _paint_texture(image: np.ndarray, mask: np.ndarray, texture: str, color_name: str) -> None:
    r = image.shape[0]
    yy, xx = _grids(r)
    rgb = np.asarray(COLOR_RGB[color_name], dtype=np.float32)
    dim = rgb * np.float32(0.42)
    if texture == "solid":
        image[mask] = rgb
    elif texture == "striped":
        bright = ((yy + xx).astype(np.int64) // 3) % 2 == 0
        image[mask & bright] = rgb
        image[mask & ~bright] = dim
    elif texture == "dotted":
        dots = (yy.astype(np.int64) % 4 < 2) & (xx.astype(np.int64) % 4 < 2)
        image[mask & dots] = rgb
        image[mask & ~dots] = dim
    else:
        raise ShapeWorldError(f"unknown texture {texture!r}")


def generate_scene(seed: int, cfg: SceneConfig, scene_id: int = 0) -> tuple[Scene, int]:
    """Deterministic scene for (seed, cfg); returns (scene, reseed_count).

    Occlusion is resolved back to front so instance masks record only
    visible pixels; the stuff region fills the remainder. If bounded
    placement retries fail, a derived seed restarts generation and the
    reseed count reports it.
    """
    reseeds = 0
    cur_seed = seed
    while True:
        scene = _try_generate(cur_seed, cfg, scene_id)
        if scene is not None:
            return scene, reseeds
        reseeds += 1
        cur_seed = derive_seed(cur_seed, "reseed", reseeds)


def _try_generate(seed: int, cfg: SceneConfig, scene_id: int) -> Optional[Scene]:
    rng = Rng(seed)
    r = cfg.raster
    stuff = cfg.stuff_names[rng.randint(0, len(cfg.stuff_names))]
    n = rng.randint(cfg.min_instances, cfg.max_instances + 1)
    names = []
    for i in range(n):
        if i == 0 and cfg.required is not None:
            names.append(cfg.required)
        else:
            names.append(cfg.allowed_things[rng.randint(0, len(cfg.allowed_things))])

    for attempt in range(cfg.max_retries):
        arng = rng.split(f"try{attempt}")
        shapes = []
        for i, name in enumerate(names):
            cat = parse_category(name)
            irng = arng.split(i)
            s = float(irng.uniform(cfg.size_lo, cfg.size_hi)) * r
            cy = float(irng.uniform(0.18, 0.82)) * r
            cx = float(irng.uniform(0.18, 0.82)) * r
            orient = irng.randint(0, 2)
            shapes.append(_draw_shape(cat.shape, cy, cx, s, orient, r))
        visible = []
        ok = True
        front = np.zeros((r, r), dtype=bool)
        for cov in reversed(shapes):
            vis = cov & ~front
            front |= cov
            visible.append(vis)
            if int(vis.sum()) < cfg.min_visible:
                ok = False
                break
        if not ok:
            continue
        visible.reverse()

        image = np.empty((r, r, 3), dtype=np.float32)
        image[:] = np.asarray(STUFF_RGB[stuff], dtype=np.float32)
        instances = []
        for name, vis in zip(names, visible):
            cat = parse_category(name)
            _paint_texture(image, vis, cat.texture, cat.color)
            instances.append(Instance(name, BitMask(vis), True))
        stuff_mask = ~front
        if stuff_mask.any():
            instances.append(Instance(stuff, BitMask(stuff_mask), False))
        return Scene(image, instances, scene_id)
    return None


# ---------------------------------------------------------------------------
# Referring expressions
# ---------------------------------------------------------------------------


def expression_text(cat: Category) -> str:
    return f"the {cat.color} {cat.texture} {cat.shape}"


def _centroid(mask: BitMask) -> tuple[float, float]:
    ys, xs = np.nonzero(mask.bits)
    return float(ys.mean()), float(xs.mean())


def _relation_holds(rel: str, a: tuple[float, float], b: tuple[float, float]) -> bool:
    if rel == "left of":
        return a[1] < b[1]
    if rel == "right of":
        return a[1] > b[1]
    if rel == "above":
        return a[0] < b[0]
    if rel == "below":
        return a[0] > b[0]
    raise ShapeWorldError(f"unknown relation {rel!r}")


def _satisfiers(scene: Scene, target_name: str, rel: Optional[str], ref_name: Optional[str]) -> list[int]:
    cents = {i: _centroid(inst.mask) for i, inst in enumerate(scene.instances) if inst.is_thing}
    out = []
    for i, inst in enumerate(scene.instances):
        if not inst.is_thing or inst.name != target_name:
            continue
        if rel is None:
            out.append(i)
            continue
        for j, other in enumerate(scene.instances):
            if j == i or not other.is_thing or other.name != ref_name:
                continue
            if _relation_holds(rel, cents[i], cents[j]):
                out.append(i)
                break
    return out


def render_expression(scene: Scene, target_index: int) -> Optional[str]:
    """Unique referring expression for a thing instance, or None (skip flag)."""
    target = scene.instances[target_index]
    if not target.is_thing:
        return None
    cat = parse_category(target.name)
    if len(_satisfiers(scene, target.name, None, None)) == 1:
        return expression_text(cat)
    for rel in RELATIONS:
        ref_names: dict[str, None] = {}
        for j, other in enumerate(scene.instances):
            if j != target_index and other.is_thing:
                ref_names.setdefault(other.name, None)
        for ref in ref_names:
            sats = _satisfiers(scene, target.name, rel, ref)
            if sats == [target_index]:
                ref_cat = parse_category(ref)
                return f"{expression_text(cat)} {rel} {expression_text(ref_cat)}"
    return None


def parse_expression(text: str) -> tuple[str, Optional[str], Optional[str]]:
    """Split an expression into (target category, relation, reference category)."""
    for rel in RELATIONS:
        sep = f" {rel} "
        if sep in text:
            left, right = text.split(sep, 1)
            return _phrase_to_name(left), rel, _phrase_to_name(right)
    return _phrase_to_name(text), None, None


def _phrase_to_name(phrase: str) -> str:
    words = [w for w in phrase.strip().split() if w != "the"]
    return parse_category(" ".join(words)).name


def expression_target(scene: Scene, text: str) -> Optional[int]:
    """Index of the unique instance an expression denotes, or None."""
    name, rel, ref = parse_expression(text)
    sats = _satisfiers(scene, name, rel, ref)
    return sats[0] if len(sats) == 1 else None


def referring_pairs(scene: Scene) -> list[tuple[str, int]]:
    """All (expression, instance index) pairs with verified-unique expressions."""
    out = []
    for i, inst in enumerate(scene.instances):
        if not inst.is_thing:
            continue
        text = render_expression(scene, i)
        if text is not None and expression_target(scene, text) == i:
            out.append((text, i))
    return out


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    raster: int = 64
    train_scenes: int = 2000
    val_scenes: int = 300
    test_scenes: int = 300
    min_instances: int = 1
    max_instances: int = 6
    holdout_fraction: float = 0.2
    size_lo: float = 0.13
    size_hi: float = 0.24
    min_heldout_test: int = 20


@dataclass
class DatasetSplit:
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    held_out_names: list[str]
    train_categories: list[str]  # thing names visible in train, plus stuff
    all_categories: list[str]
    reseeds: dict[str, dict[int, int]] = field(default_factory=dict)


def build_splits(seed: int, cfg: DataConfig) -> DatasetSplit:
    """Generate train/val/test with held-out category combinations.

    Held-out combinations never occur in train or val; each appears in at
    least `min_heldout_test` test scenes (round-robin seeding).
    """
    combos = [c.name for c in all_thing_categories()]
    if len(combos) < 2:
        raise ShapeWorldError("need at least 2 thing combinations")
    n_hold = int(round(cfg.holdout_fraction * len(combos)))
    if len(combos) - n_hold < 2:
        raise ShapeWorldError(f"holdout of {n_hold} leaves fewer than 2 train categories")
    held = sorted(Rng(seed).split("holdout").shuffled(combos)[:n_hold])
    train_things = tuple(n for n in combos if n not in held)
    if held and cfg.test_scenes < cfg.min_heldout_test * len(held):
        raise ShapeWorldError(
            f"{cfg.test_scenes} test scenes cannot give {len(held)} held-out "
            f"categories >= {cfg.min_heldout_test} appearances each")

    def scene_cfg(allowed, required=None):
        return SceneConfig(raster=cfg.raster, min_instances=cfg.min_instances,
                           max_instances=cfg.max_instances, allowed_things=allowed,
                           required=required, size_lo=cfg.size_lo, size_hi=cfg.size_hi)

    reseeds: dict[str, dict[int, int]] = {"train": {}, "val": {}, "test": {}}

    def gen(split: str, count: int, allowed, required_of=None):
        scenes = []
        for i in range(count):
            required = required_of(i) if required_of else None
            scene, n_reseed = generate_scene(derive_seed(seed, split, i),
                                             scene_cfg(allowed, required), scene_id=i)
            if n_reseed:
                reseeds[split][i] = n_reseed
            scenes.append(scene)
        return scenes

    train = gen("train", cfg.train_scenes, train_things)
    val = gen("val", cfg.val_scenes, train_things)
    all_things = tuple(combos)
    required_of = (lambda i: held[i % len(held)]) if held else None
    test = gen("test", cfg.test_scenes, all_things, required_of)

    split = DatasetSplit(
        train=train, val=val, test=test, held_out_names=held,
        train_categories=sorted(train_things) + list(STUFF_NAMES),
        all_categories=sorted(combos) + list(STUFF_NAMES),
        reseeds=reseeds,
    )
    _check_split(split, cfg)
    return split


def _check_split(split: DatasetSplit, cfg: DataConfig) -> None:
    held = set(split.held_out_names)
    for scene in split.train + split.val:
        for inst in scene.instances:
            if inst.name in held:
                raise ShapeWorldError(f"held-out {inst.name!r} leaked into train/val")
    counts = {h: 0 for h in held}
    for scene in split.test:
        for name in scene.present_names():
            if name in counts:
                counts[name] += 1
    for name, c in counts.items():
        if c < cfg.min_heldout_test:
            raise ShapeWorldError(f"held-out {name!r} appears in only {c} test scenes")


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def _encode_scene(scene: Scene) -> bytes:
    r = scene.raster
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, r)]
    planar = np.ascontiguousarray(scene.image.transpose(2, 0, 1), dtype="<f4")
    parts.append(planar.tobytes())
    parts.append(struct.pack("<H", len(scene.instances)))
    for inst in scene.instances:
        nb = inst.name.encode("utf-8")
        runs = rle_encode(inst.mask).runs
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", 1 if inst.is_thing else 0))
        parts.append(struct.pack("<I", len(runs)))
        parts.append(struct.pack(f"<{len(runs)}I", *runs))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(f"truncated scene file at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_scene(buf: bytes, scene_id: int) -> Scene:
    rd = _Reader(buf)
    magic = rd.take(4)
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}")
    version, r = rd.unpack("<HH")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    raster = np.frombuffer(rd.take(3 * r * r * 4), dtype="<f4").reshape(3, r, r)
    image = np.ascontiguousarray(raster.transpose(1, 2, 0))
    (count,) = rd.unpack("<H")
    instances = []
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (is_thing,) = rd.unpack("<B")
        (nruns,) = rd.unpack("<I")
        runs = rd.unpack(f"<{nruns}I")
        mask = rle_decode(RleMask(r, r, tuple(runs)))
        instances.append(Instance(name, mask, bool(is_thing)))
    if rd.pos != len(buf):
        raise DatasetReadError(f"{len(buf) - rd.pos} trailing bytes")
    return Scene(image, instances, scene_id)


def write_split(root, split: DatasetSplit, config_echo: dict) -> None:
    root = Path(root)
    for name in ("train", "val", "test"):
        scenes: list[Scene] = getattr(split, name)
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        table = split.train_categories if name in ("train", "val") else split.all_categories
        manifest = {
            "schema_version": 1,
            "tool_version": __version__,
            "split": name,
            "scene_ids": [s.scene_id for s in scenes],
            "category_table": table,
            "held_out_names": split.held_out_names,
            "reseeds": {str(k): v for k, v in sorted(split.reseeds.get(name, {}).items())},
            "config_echo": config_echo,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        for s in scenes:
            (d / f"scene_{s.scene_id:05d}.shpw").write_bytes(_encode_scene(s))


def read_split(root) -> tuple[DatasetSplit, dict]:
    """Load a written dataset; returns (split, train manifest)."""
    root = Path(root)
    parts: dict[str, list[Scene]] = {}
    manifests: dict[str, dict] = {}
    for name in ("train", "val", "test"):
        d = root / name
        manifest = json.loads((d / "manifest.json").read_text())
        manifests[name] = manifest
        scenes = []
        for sid in manifest["scene_ids"]:
            buf = (d / f"scene_{sid:05d}.shpw").read_bytes()
            scenes.append(_decode_scene(buf, sid))
        parts[name] = scenes
    split = DatasetSplit(
        train=parts["train"], val=parts["val"], test=parts["test"],
        held_out_names=list(manifests["train"]["held_out_names"]),
        train_categories=list(manifests["train"]["category_table"]),
        all_categories=list(manifests["test"]["category_table"]),
        reseeds={k: {int(i): c for i, c in m["reseeds"].items()} for k, m in manifests.items()},
    )
    return split, manifests["train"]


def read_one_scene(root, split_name: str, scene_id: int) -> Scene:
    buf = (Path(root) / split_name / f"scene_{scene_id:05d}.shpw").read_bytes()
    return _decode_scene(buf, scene_id)


def dataset_fingerprint(root) -> int:
    """Order-stable FNV-1a over every manifest and scene file."""
    root = Path(root)
    acc = 0xCBF29CE484222325
    for name in ("train", "val", "test"):
        d = root / name
        if not d.is_dir():
            continue
        for f in sorted(d.iterdir()):
            acc = fnv1a64(f.name.encode(), acc)
            acc = fnv1a64(f.read_bytes(), acc)
    return acc
