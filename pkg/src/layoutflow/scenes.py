"""Synthetic multi-object scenes: generation, dataset persistence, and the
descriptor-based evaluation metrics.

Scenes are 32x32 RGB images built from a quantized palette so PNG
round-trips are lossless. Object masks are exact (no anti-aliasing).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .rng import substream
from .tokens import BACKGROUND_ID, COLOR_IDS, SHAPE_IDS, TokenSeq

CANVAS = 32

OBJECT_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 200, 30),
    "blue": (30, 30, 220),
    "yellow": (235, 235, 30),
    "cyan": (30, 215, 215),
    "magenta": (215, 30, 215),
    "orange": (245, 150, 20),
    "purple": (130, 30, 200),
    "gray": (150, 150, 150),
}

BG_COLORS: dict[str, tuple[int, int, int]] = {
    "night": (18, 18, 30),
    "slate": (60, 66, 78),
    "moss": (86, 106, 82),
    "paper": (210, 208, 198),
    "ivory": (226, 222, 210),
}

# gradients stay within one brightness family so rows never drift toward
# an object color
_GRADIENT_PAIRS = [
    ("night", "slate"),
    ("slate", "night"),
    ("slate", "moss"),
    ("moss", "slate"),
    ("paper", "ivory"),
    ("ivory", "paper"),
]

SHAPES = ("circle", "square", "triangle")
TEXTURES = ("solid", "stripes", "dots")

MAX_OBJECTS = 4
_BG_NOISE = 3  # uint8 amplitude of seeded background jitter
_TEXTURE_DELTA = 30  # uint8 amplitude of texture modulation (~0.12)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    texture: str
    center: tuple[int, int]
    size: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in OBJECT_COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.size < 2:
            raise ValueError(f"object size must be >= 2, got {self.size}")


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str  # "solid" | "gradient"
    colors: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("solid", "gradient"):
            raise ValueError(f"unknown background kind {self.kind!r}")
        want = 1 if self.kind == "solid" else 2
        if len(self.colors) != want:
            raise ValueError(f"{self.kind} background needs {want} colors, got {self.colors}")
        for c in self.colors:
            if c not in BG_COLORS:
                raise ValueError(f"unknown background color {c!r}")


@dataclass(frozen=True)
class SceneSpec:
    """0 objects is the degenerate background-only scene; datasets use 1-4."""

    background: BackgroundSpec
    objects: tuple[ObjectSpec, ...]

    def __post_init__(self):
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"at most {MAX_OBJECTS} objects per scene, got {len(self.objects)}")


def _shape_mask(obj: ObjectSpec) -> np.ndarray:
    cx, cy = obj.center
    s = obj.size
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    if obj.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= s * s
    if obj.shape == "square":
        return (np.abs(xx - cx) <= s) & (np.abs(yy - cy) <= s)
    # upward triangle: apex (cx, cy-s), base corners (cx -/+ s, cy+s)
    inside = yy <= cy + s
    inside &= (yy - (cy - s)) >= 2.0 * np.abs(xx - cx) - 0.5
    return inside


def _render_background(spec: BackgroundSpec, gen: np.random.Generator) -> np.ndarray:
    if spec.kind == "solid":
        base = np.tile(np.array(BG_COLORS[spec.colors[0]], dtype=np.float64), (CANVAS, CANVAS, 1))
    else:
        top = np.array(BG_COLORS[spec.colors[0]], dtype=np.float64)
        bot = np.array(BG_COLORS[spec.colors[1]], dtype=np.float64)
        w = np.linspace(0.0, 1.0, CANVAS)[:, None]
        rows = np.round(top[None, :] * (1 - w) + bot[None, :] * w)
        base = np.tile(rows[:, None, :], (1, CANVAS, 1))
    noise = gen.integers(-_BG_NOISE, _BG_NOISE + 1, size=(CANVAS, CANVAS, 1))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _apply_texture(img: np.ndarray, mask: np.ndarray, obj: ObjectSpec) -> None:
    base = np.array(OBJECT_COLORS[obj.color], dtype=np.int64)
    cx, cy = obj.center
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    delta = np.zeros((CANVAS, CANVAS), dtype=np.int64)
    if obj.texture == "stripes":
        delta = np.where((yy - cy) % 2 == 0, _TEXTURE_DELTA, -_TEXTURE_DELTA)
    elif obj.texture == "dots":
        on = ((yy - cy) % 2 == 0) & ((xx - cx) % 2 == 0)
        delta = np.where(on, _TEXTURE_DELTA + 5, -12)
    vals = np.clip(base[None, None, :] + delta[:, :, None], 0, 255).astype(np.uint8)
    img[mask] = vals[mask]


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rasterize a scene. Returns (image float32 [0,1], exact boolean masks).

    Rejects specs whose objects leave the canvas, touch the border, or come
    within one pixel of each other.
    """
    masks = [_shape_mask(o) for o in spec.objects]
    border = np.zeros((CANVAS, CANVAS), dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    occupied = np.zeros((CANVAS, CANVAS), dtype=bool)
    for obj, m in zip(spec.objects, masks):
        if not m.any():
            raise ValueError(f"object {obj} rasterizes to an empty mask")
        if (m & border).any():
            raise ValueError(f"object {obj} is not fully inside the canvas")
        if (ndimage.binary_dilation(m) & occupied).any():
            raise ValueError(f"object {obj} overlaps or touches another object")
        occupied |= m
    img = _render_background(spec.background, substream(seed, "background-noise"))
    for obj, m in zip(spec.objects, masks):
        _apply_texture(img, m, obj)
    return img.astype(np.float32) / 255.0, masks


def scene_tokens(spec: SceneSpec) -> TokenSeq:
    """Per-object (shape, color) class tokens left to right, then <bg>.

    The trailing background token gives every spatial position a column
    that is allowed to hold its attention mass; without one, positions
    off the objects are forced to spread over object tokens and no token
    column can concentrate on its own region.
    """
    if not spec.objects:
        return TokenSeq((BACKGROUND_ID,))
    order = sorted(range(len(spec.objects)), key=lambda i: (spec.objects[i].center[0], spec.objects[i].center[1]))
    ids: list[int] = []
    for i in order:
        o = spec.objects[i]
        ids.extend((SHAPE_IDS[o.shape], COLOR_IDS[o.color]))
    ids.append(BACKGROUND_ID)
    return TokenSeq(tuple(ids))


def sorted_objects(spec: SceneSpec) -> list[int]:
    """Indices of spec.objects in the canonical left-to-right token order."""
    return sorted(range(len(spec.objects)), key=lambda i: (spec.objects[i].center[0], spec.objects[i].center[1]))


@dataclass
class SceneRecord:
    image: np.ndarray  # (32, 32, 3) float32 in [0, 1]
    tokens: tuple[int, ...]
    masks: list[np.ndarray]  # per object, canonical order, bool
    spec: SceneSpec | None = None


def random_scene_spec(gen: np.random.Generator, n_objects: int) -> SceneSpec:
    """Rejection-sample a valid spec with the requested object count."""
    for _ in range(200):
        if gen.random() < 0.5:
            bg = BackgroundSpec("solid", (str(gen.choice(list(BG_COLORS))),))
        else:
            bg = BackgroundSpec("gradient", _GRADIENT_PAIRS[int(gen.integers(len(_GRADIENT_PAIRS)))])
        objs: list[ObjectSpec] = []
        occupied = np.zeros((CANVAS, CANVAS), dtype=bool)
        ok = True
        for _k in range(n_objects):
            placed = False
            for _try in range(60):
                s = int(gen.integers(3, 6))
                cx = int(gen.integers(s + 1, CANVAS - s - 1))
                cy = int(gen.integers(s + 1, CANVAS - s - 1))
                cand = ObjectSpec(
                    shape=str(gen.choice(SHAPES)),
                    color=str(gen.choice(list(OBJECT_COLORS))),
                    texture=str(gen.choice(TEXTURES)),
                    center=(cx, cy),
                    size=s,
                )
                m = _shape_mask(cand)
                if (ndimage.binary_dilation(m) & occupied).any():
                    continue
                occupied |= m
                objs.append(cand)
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return SceneSpec(background=bg, objects=tuple(objs))
    raise RuntimeError(f"could not place {n_objects} objects after many attempts")


def translate_scene(spec: SceneSpec, gen: np.random.Generator) -> SceneSpec:
    """Same background and objects at freshly sampled non-overlapping positions."""
    for _ in range(200):
        occupied = np.zeros((CANVAS, CANVAS), dtype=bool)
        moved: list[ObjectSpec] = []
        ok = True
        for obj in spec.objects:
            placed = False
            for _try in range(60):
                s = obj.size
                cx = int(gen.integers(s + 1, CANVAS - s - 1))
                cy = int(gen.integers(s + 1, CANVAS - s - 1))
                cand = ObjectSpec(obj.shape, obj.color, obj.texture, (cx, cy), s)
                m = _shape_mask(cand)
                if (ndimage.binary_dilation(m) & occupied).any():
                    continue
                occupied |= m
                moved.append(cand)
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return SceneSpec(background=spec.background, objects=tuple(moved))
    raise RuntimeError("could not re-place the objects after many attempts")


def make_dataset(
    n: int,
    seed: int,
    object_counts: tuple[int, ...] = (1, 2, 3, 4),
    bg_fraction: float = 0.0,
    out_dir: str | Path | None = None,
) -> list[SceneRecord]:
    """Generate n records; masks follow the canonical token order.

    bg_fraction > 0 mixes in background-only records (single <bg> token)
    so the background condition is in-distribution.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    records: list[SceneRecord] = []
    for i in range(n):
        gen = substream(seed, f"scene-{i}")
        if bg_fraction > 0 and gen.random() < bg_fraction:
            spec = SceneSpec(
                background=BackgroundSpec("solid", (str(gen.choice(list(BG_COLORS))),)), objects=()
            )
        else:
            count = int(object_counts[int(gen.integers(len(object_counts)))])
            spec = random_scene_spec(gen, count)
        img, masks = generate_scene(spec, seed=seed * 100003 + i)
        order = sorted_objects(spec)
        records.append(
            SceneRecord(
                image=img,
                tokens=scene_tokens(spec).ids,
                masks=[masks[j] for j in order],
                spec=SceneSpec(spec.background, tuple(spec.objects[j] for j in order)),
            )
        )
    if out_dir is not None:
        save_dataset(records, out_dir)
    return records


# ---------------------------------------------------------------------------
# persistence: directory of PNGs + index.json


def save_png(path: Path, arr: np.ndarray) -> None:
    if arr.dtype == bool:
        Image.fromarray(arr.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def image_to_png_bytes(image01: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    arr = np.clip(np.round(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_dataset(records: list[SceneRecord], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"version": 1, "records": []}
    for i, rec in enumerate(records):
        img_name = f"img_{i:05d}.png"
        save_png(out / img_name, np.round(rec.image * 255.0).astype(np.uint8))
        mask_names = []
        for k, m in enumerate(rec.masks):
            mn = f"img_{i:05d}_m{k}.png"
            save_png(out / mn, m)
            mask_names.append(mn)
        entry = {"image": img_name, "tokens": list(rec.tokens), "masks": mask_names}
        if rec.spec is not None:
            entry["background"] = {"kind": rec.spec.background.kind, "colors": list(rec.spec.background.colors)}
            entry["objects"] = [
                {"shape": o.shape, "color": o.color, "texture": o.texture, "center": list(o.center), "size": o.size}
                for o in rec.spec.objects
            ]
        index["records"].append(entry)
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return out


def load_dataset(in_dir: str | Path) -> list[SceneRecord]:
    root = Path(in_dir)
    index = json.loads((root / "index.json").read_text())
    if index.get("version") != 1:
        raise ValueError(f"unsupported dataset version {index.get('version')!r}")
    records = []
    for entry in index["records"]:
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float32) / 255.0
        masks = [np.asarray(Image.open(root / m)) > 127 for m in entry["masks"]]
        spec = None
        if "objects" in entry:
            spec = SceneSpec(
                background=BackgroundSpec(entry["background"]["kind"], tuple(entry["background"]["colors"])),
                objects=tuple(
                    ObjectSpec(o["shape"], o["color"], o["texture"], tuple(o["center"]), o["size"])
                    for o in entry["objects"]
                ),
            )
        records.append(SceneRecord(image=img, tokens=tuple(entry["tokens"]), masks=masks, spec=spec))
    return records


# ---------------------------------------------------------------------------
# descriptors and metrics


@dataclass(frozen=True)
class ObjectDescriptor:
    mean_color: tuple[float, float, float]
    area_fraction: float
    moments: tuple[float, float, float]  # normalized central mu20, mu02, mu11
    texture_energy: float


def describe_region(image: np.ndarray, mask: np.ndarray) -> ObjectDescriptor:
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("cannot describe an empty region")
    mean_color = tuple(float(c) for c in img[m].mean(axis=0))
    area = n / m.size

    ys, xs = np.nonzero(m)
    cy, cx = ys.mean(), xs.mean()
    dy, dx = ys - cy, xs - cx
    mu20 = float((dx * dx).mean() / n)
    mu02 = float((dy * dy).mean() / n)
    mu11 = float((dx * dy).mean() / n)

    gray = img.mean(axis=2)
    interior = ndimage.binary_erosion(m)
    if interior.any():
        lap = ndimage.laplace(gray)
        tex = float(np.mean(lap[interior] ** 2))
    else:
        tex = 0.0
    return ObjectDescriptor(mean_color=mean_color, area_fraction=area, moments=(mu20, mu02, mu11), texture_energy=tex)


def descriptor_distance(a: ObjectDescriptor, b: ObjectDescriptor) -> float:
    """Normalized distance in [0, 1]; 0 exactly for identical descriptors."""
    color = float(np.mean(np.abs(np.subtract(a.mean_color, b.mean_color))))
    area = abs(a.area_fraction - b.area_fraction) / max(a.area_fraction, b.area_fraction)
    mom = float(np.mean(np.abs(np.subtract(a.moments, b.moments)))) / 0.15
    tex_scale = max(a.texture_energy, b.texture_energy, 1e-3)
    tex = abs(a.texture_energy - b.texture_energy) / tex_scale
    parts = (min(color, 1.0), min(area, 1.0), min(mom, 1.0), min(tex, 1.0))
    return float(np.mean(parts))


COLOR_MATCH_THRESHOLD = 0.35
_MIN_REGION_PIXELS = 3


def _candidate_regions(image: np.ndarray, color: np.ndarray) -> list[np.ndarray]:
    dist = np.linalg.norm(np.asarray(image, dtype=np.float64) - color[None, None, :], axis=2)
    close = dist < COLOR_MATCH_THRESHOLD
    labels, count = ndimage.label(close)
    out = []
    for lab in range(1, count + 1):
        region = labels == lab
        if region.sum() >= _MIN_REGION_PIXELS:
            out.append(region)
    return out


@dataclass
class VisualSimReport:
    score: float
    per_object: list[float]
    unmatched: list[int]  # indices of objects with no candidate region
    matched_masks: list[np.ndarray | None] = field(default_factory=list)


def visual_similarity(img_a: np.ndarray, img_b: np.ndarray, masks: list[np.ndarray]) -> VisualSimReport:
    """Object-appearance preservation between two same-size images.

    For each mask over img_a, finds the best color-matched connected region
    in img_b and scores 1 - descriptor distance; objects with no candidate
    score 0.
    """
    if np.asarray(img_a).shape != np.asarray(img_b).shape:
        raise ValueError(f"image shapes differ: {np.asarray(img_a).shape} vs {np.asarray(img_b).shape}")
    if not masks:
        raise ValueError("need at least one object mask")
    scores: list[float] = []
    unmatched: list[int] = []
    matched: list[np.ndarray | None] = []
    for i, mask in enumerate(masks):
        ref = describe_region(img_a, mask)
        best = None
        best_d = None
        for region in _candidate_regions(img_b, np.asarray(ref.mean_color)):
            d = descriptor_distance(ref, describe_region(img_b, region))
            if best_d is None or d < best_d:
                best_d, best = d, region
        if best is None:
            scores.append(0.0)
            unmatched.append(i)
            matched.append(None)
        else:
            scores.append(1.0 - best_d)
            matched.append(best)
    return VisualSimReport(
        score=float(np.mean(scores)), per_object=scores, unmatched=unmatched, matched_masks=matched
    )


@dataclass
class AlignmentReport:
    attention: float | None  # mean in-target attention mass fraction
    iou: float | None  # mean target-vs-matched-segment IoU
    per_object_attention: list[float] = field(default_factory=list)
    per_object_iou: list[float] = field(default_factory=list)

    @property
    def score(self) -> float:
        if self.attention is not None:
            return self.attention
        if self.iou is not None:
            return self.iou
        return 0.0


def attention_alignment(summed_maps: list[np.ndarray], target_masks_16: list[np.ndarray]) -> AlignmentReport:
    """In-target attention mass fraction per object from summed 16x16 maps."""
    if len(summed_maps) != len(target_masks_16):
        raise ValueError("one attention map per target mask required")
    per = []
    for amap, mask in zip(summed_maps, target_masks_16):
        amap = np.asarray(amap, dtype=np.float64)
        total = float(amap.sum())
        if total <= 0:
            per.append(0.0)
            continue
        per.append(float(amap[np.asarray(mask, dtype=bool)].sum()) / total)
    return AlignmentReport(attention=float(np.mean(per)), iou=None, per_object_attention=per)


def segment_alignment(image: np.ndarray, reference_descriptors: list[ObjectDescriptor], target_masks: list[np.ndarray]) -> AlignmentReport:
    """IoU between each target mask and the best color/texture-matched segment."""
    per = []
    for ref, target in zip(reference_descriptors, target_masks):
        best_iou = 0.0
        best_d = None
        tgt = np.asarray(target, dtype=bool)
        for region in _candidate_regions(image, np.asarray(ref.mean_color)):
            d = descriptor_distance(ref, describe_region(image, region))
            if best_d is None or d < best_d:
                best_d = d
                inter = float((region & tgt).sum())
                union = float((region | tgt).sum())
                best_iou = inter / union if union else 0.0
        per.append(best_iou)
    return AlignmentReport(attention=None, iou=float(np.mean(per)), per_object_iou=per)
