"""Procedural "flora" dataset: colored shapes on a dark textured background.

Categories are the cross product of a color palette and a shape set. Each
rendered sample carries templated descriptions naming its color word and
shape word, so the text pipeline has something attribute-like to embed.
The attribute oracle scores any image against a category without looking at
how it was made.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, MissingArtifactError, SpecError

DEFAULT_PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "orange": (1.00, 0.55, 0.05),
    "yellow": (0.92, 0.88, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "purple": (0.60, 0.15, 0.85),
}
DEFAULT_SHAPES = ("disc", "ring", "cross", "triangle")

SHAPE_WORDS = {"disc": "round", "ring": "ringed", "cross": "crossed", "triangle": "triangular"}

_TEMPLATES = (
    "this {noun} has {shape} petals that are {color}",
    "the petals of this {noun} are {color} and {shape}",
    "a {color} {noun} with {shape} petals",
    "this {noun} has {color} {shape} petals",
    "the {shape} petals are bright {color}",
    "{color} petals form a {shape} {noun}",
    "this {noun} shows {shape} petals colored {color}",
    "a {noun} with {shape} and {color} petals and a dark center",
)
_NOUNS = ("flower", "bloom", "blossom", "plant")

# a pixel is foreground when its chroma (max - min channel, in [0, 1]) exceeds this
FOREGROUND_CHROMA = 0.35


@dataclass(frozen=True)
class Category:
    id: int
    color: str
    shape: str

    @property
    def name(self) -> str:
        return f"{self.color}_{self.shape}"


@dataclass
class FloraSpec:
    palette: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    image_size: int = 16
    samples_per_category: int = 64
    descriptions_per_image: int = 10
    position_jitter: float = 0.15
    scale_jitter: float = 0.02
    color_jitter: float = 0.04
    pixel_noise: float = 0.02
    background_level: float = 0.08
    background_noise: float = 0.03
    n_unseen: int = 4

    def validate(self) -> None:
        if not self.palette or not self.shapes:
            raise SpecError("palette and shape set must be nonempty")
        unknown = [s for s in self.shapes if s not in SHAPE_WORDS]
        if unknown:
            raise SpecError(f"unknown shapes {unknown}; known: {sorted(SHAPE_WORDS)}")
        if len(set(self.shapes)) != len(self.shapes):
            raise SpecError("duplicate shapes in spec")
        if self.samples_per_category < 10:
            raise SpecError("samples_per_category must be >= 10")
        if self.image_size < 8:
            raise SpecError("image_size must be >= 8")
        if self.descriptions_per_image < 1:
            raise SpecError("descriptions_per_image must be >= 1")
        for name, rgb in self.palette.items():
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise SpecError(f"palette color {name!r} must be 3 values in [0, 1]")
            if max(rgb) - min(rgb) < FOREGROUND_CHROMA + 0.2:
                raise SpecError(f"palette color {name!r} is too unsaturated to separate from the background")
        radius = self.jitter_radius()
        names = list(self.palette)
        for a, b in itertools.combinations(names, 2):
            d = float(np.linalg.norm(np.subtract(self.palette[a], self.palette[b])))
            if d <= 2.0 * radius:
                raise SpecError(f"palette collision: {a!r} and {b!r} are {d:.3f} apart, "
                                f"jitter radius is {radius:.3f}")

    def jitter_radius(self) -> float:
        return float(np.sqrt(3.0) * (self.color_jitter + 2.0 * self.pixel_noise))

    def categories(self) -> list[Category]:
        return [Category(i, c, s) for i, (c, s) in enumerate(itertools.product(self.palette, self.shapes))]

    def to_json(self) -> dict:
        d = asdict(self)
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        d["shapes"] = list(self.shapes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> FloraSpec:
        d = dict(d)
        if "palette" in d:
            d["palette"] = {k: tuple(float(c) for c in v) for k, v in d["palette"].items()}
        if "shapes" in d:
            d["shapes"] = tuple(d["shapes"])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class DatasetSplit:
    seen: list[int]
    unseen: list[int]

    def to_json(self) -> dict:
        return {"seen": list(self.seen), "unseen": list(self.unseen)}


@dataclass
class Sample:
    image: np.ndarray
    category: int
    descriptions: list[str]


class FloraDataset:
    """Rendered corpus. ``images`` is ``(N, 3, H, W)`` in [-1, 1]."""

    def __init__(self, spec: FloraSpec, seed: int, images: np.ndarray, labels: np.ndarray,
                 descriptions: list[list[str]], split: DatasetSplit | None = None):
        self.spec = spec
        self.seed = int(seed)
        self.images = images
        self.labels = labels
        self.descriptions = descriptions
        self.categories = spec.categories()
        self.split = split

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), list(self.descriptions[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_for(self, categories: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, np.asarray(list(categories))))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        for ds in self.descriptions:
            h.update("\x1f".join(ds).encode())
            h.update(b"\x1e")
        return h.hexdigest()


# ---------------------------------------------------------------- rendering


def shape_mask(shape: str, size: int, cx: float | None = None, cy: float | None = None,
               scale: float = 1.0) -> np.ndarray:
    """Boolean ``(size, size)`` mask sampled at pixel centers."""
    cx = size / 2.0 if cx is None else cx
    cy = size / 2.0 if cy is None else cy
    R = 0.37 * size * scale
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "disc":
        return dx * dx + dy * dy <= R * R
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= R * R) & (r2 >= (0.465 * R) ** 2)
    if shape == "cross":
        w = 0.3 * R
        return ((np.abs(dx) <= w) & (np.abs(dy) <= R)) | ((np.abs(dy) <= w) & (np.abs(dx) <= R))
    if shape == "triangle":
        # apex up, base at cy + R/2, inscribed in the radius-R circle
        top = cy - R
        return (ys <= cy + 0.5 * R) & (np.abs(dx) <= (ys - top) / np.sqrt(3.0))
    raise SpecError(f"unknown shape {shape!r}")


def render_sample(spec: FloraSpec, category: Category, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    base = spec.background_level + spec.background_noise * rng.standard_normal()
    bg = np.clip(base + spec.background_noise * rng.standard_normal((n, n)), 0.0, 0.3)
    img = np.repeat(bg[None], 3, axis=0)
    cx = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter)
    cy = n / 2.0 + rng.uniform(-spec.position_jitter, spec.position_jitter)
    s = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    mask = shape_mask(category.shape, n, cx, cy, s)
    color = np.asarray(spec.palette[category.color]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    fg = color[:, None, None] + spec.pixel_noise * rng.standard_normal((3, n, n))
    img = np.where(mask[None], fg, img)
    # quantize to the 8-bit grid so PPM round-trips are exact
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 127.5 - 1.0


def describe(category: Category, rng: np.random.Generator, k: int) -> list[str]:
    out = []
    for _ in range(k):
        tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
        noun = _NOUNS[rng.integers(len(_NOUNS))]
        out.append(tpl.format(color=category.color, shape=SHAPE_WORDS[category.shape], noun=noun))
    return out


def generate_dataset(spec: FloraSpec | None = None, seed: int = 0) -> FloraDataset:
    """Render every category ``samples_per_category`` times and split it."""
    spec = spec or FloraSpec()
    spec.validate()
    images, labels, descriptions = [], [], []
    for cat in spec.categories():
        for k in range(spec.samples_per_category):
            rng = np.random.default_rng([seed, cat.id, k])
            images.append(render_sample(spec, cat, rng))
            labels.append(cat.id)
            descriptions.append(describe(cat, rng, spec.descriptions_per_image))
    ds = FloraDataset(spec, seed, np.stack(images), np.asarray(labels, dtype=np.int64), descriptions)
    ds.split = split_categories(ds.categories, spec.n_unseen, seed)
    return ds


def split_categories(categories: Sequence[Category], n_unseen: int, seed: int,
                     max_tries: int = 10_000) -> DatasetSplit:
    """Random seen/unseen split in which every color and shape stays seen."""
    cats = list(categories)
    if not 0 <= n_unseen < len(cats):
        raise SpecError(f"n_unseen={n_unseen} must be in [0, {len(cats)})")
    colors = {c.color for c in cats}
    shapes = {c.shape for c in cats}
    rng = np.random.default_rng([seed, 0x5EED])
    for _ in range(max_tries):
        held = set(rng.choice(len(cats), size=n_unseen, replace=False).tolist())
        seen = [c for i, c in enumerate(cats) if i not in held]
        if {c.color for c in seen} == colors and {c.shape for c in seen} == shapes:
            return DatasetSplit(sorted(c.id for c in seen), sorted(cats[i].id for i in held))
    raise SpecError(f"no split with {n_unseen} unseen categories keeps every attribute seen")


# ------------------------------------------------------------------- oracle


def oracle_attribute_check(image: np.ndarray, category: Category, spec: FloraSpec) -> tuple[float, float]:
    """``(color_score, shape_score)`` of one ``(3, H, W)`` image in [-1, 1].

    Color: one minus the distance between the mean color inside the ideal
    shape mask and the palette anchor, over the RGB cube diagonal. Shape:
    IoU between chroma-thresholded foreground and the ideal mask.
    """
    img = np.asarray(image, dtype=np.float64)
    n = spec.image_size
    if img.shape != (3, n, n):
        raise ContractError(f"oracle: expected image of shape (3, {n}, {n}), got {img.shape}")
    p = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    ideal = shape_mask(category.shape, n)
    mean_color = p[:, ideal].mean(axis=1)
    dist = np.linalg.norm(mean_color - np.asarray(spec.palette[category.color]))
    color_score = float(np.clip(1.0 - dist / np.sqrt(3.0), 0.0, 1.0))
    fg = (p.max(axis=0) - p.min(axis=0)) > FOREGROUND_CHROMA
    union = np.logical_or(fg, ideal).sum()
    shape_score = float(np.logical_and(fg, ideal).sum() / union) if union else 0.0
    return color_score, shape_score


def oracle_scores(images: np.ndarray, category: Category, spec: FloraSpec) -> np.ndarray:
    """Vectorized oracle over ``(N, 3, H, W)``; returns ``(N, 2)``."""
    p = np.clip((np.asarray(images, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    ideal = shape_mask(category.shape, spec.image_size)
    mean_color = p[:, :, ideal].mean(axis=2)
    dist = np.linalg.norm(mean_color - np.asarray(spec.palette[category.color]), axis=1)
    color = np.clip(1.0 - dist / np.sqrt(3.0), 0.0, 1.0)
    fg = (p.max(axis=1) - p.min(axis=1)) > FOREGROUND_CHROMA
    inter = (fg & ideal).sum(axis=(1, 2))
    union = (fg | ideal).sum(axis=(1, 2))
    shape = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return np.stack([color, shape], axis=1)


# -------------------------------------------------------------- persistence


def write_ppm(path: Path, image: np.ndarray, comment: str | None = None) -> None:
    """Binary P6 from a ``(3, H, W)`` array in [-1, 1]."""
    img = np.asarray(image)
    _, h, w = img.shape
    px = np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    note = f"# {comment}\n" if comment else ""
    Path(path).write_bytes(f"P6\n{note}{w} {h}\n255\n".encode() + px.transpose(1, 2, 0).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is 4 whitespace-separated fields, then exactly one whitespace byte
    m = re.match(rb"(P6)(?:\s+#[^\n]*)*\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise SpecError(f"{path}: not a binary PPM")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    data = raw[m.end():m.end() + w * h * 3]
    if len(data) != w * h * 3:
        raise SpecError(f"{path}: truncated pixel data")
    px = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        raise SpecError(f"{path}: only 8-bit PPM is supported")
    return px.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def save_dataset(ds: FloraDataset, out_dir: str | Path) -> Path:
    """Write images as PPM, plus ``manifest.json`` and ``split.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(len(ds)):
        fname = f"images/{i:05d}.ppm"
        write_ppm(out / fname, ds.images[i])
        samples.append({"file": fname, "category": int(ds.labels[i]), "descriptions": ds.descriptions[i]})
    manifest = {
        "spec": ds.spec.to_json(),
        "seed": ds.seed,
        "checksum": ds.checksum(),
        "categories": [{"id": c.id, "name": c.name, "color": c.color, "shape": c.shape} for c in ds.categories],
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (out / "split.json").write_text(json.dumps(ds.split.to_json(), indent=1))
    return out


def load_dataset(path: str | Path) -> FloraDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    spec = FloraSpec.from_json(manifest["spec"])
    images, labels, descriptions = [], [], []
    for s in manifest["samples"]:
        f = path / s["file"]
        if not f.exists():
            raise MissingArtifactError(f"dataset image missing: {f}")
        images.append(read_ppm(f))
        labels.append(int(s["category"]))
        descriptions.append(list(s["descriptions"]))
    ds = FloraDataset(spec, manifest["seed"], np.stack(images), np.asarray(labels, dtype=np.int64), descriptions)
    if ds.checksum() != manifest["checksum"]:
        raise SpecError(f"{path}: image data does not match the recorded checksum")
    spath = path / "split.json"
    if not spath.exists():
        raise MissingArtifactError(f"no split file at {spath}")
    sp = json.loads(spath.read_text())
    ds.split = DatasetSplit(list(sp["seen"]), list(sp["unseen"]))
    return ds
