"""Synthetic shapes benchmark and COCO-style annotation handling.

The generator draws flat-colored shapes on a textured background and
annotates every instance exhaustively with a tight box and a run-length
encoded mask. Categories split into a seen palette (convex, simple:
square, circle) and an unseen palette differing in convexity and topology
(triangle, star, ring, capsule), so category-overfitting shows up as a
recall gap. Annotation files are COCO JSON plus a ``seen`` boolean on
categories, so real COCO subsets drop in unchanged (with a user-supplied
seen-category name list).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masks import decode_rle, encode_rle, mask_to_bbox

logger = logging.getLogger(__name__)

SHAPE_NAMES = ("square", "circle", "triangle", "star", "ring", "capsule")

# COCO-2017 spellings of the 20 VOC classes, for flagging seen categories
# when loading a genuine COCO annotation file.
COCO_VOC_SEEN_NAMES = (
    "airplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "dining table", "dog", "horse", "motorcycle", "person",
    "potted plant", "sheep", "couch", "train", "tv",
)


class AnnotationError(ValueError):
    """Malformed or referentially broken annotation file."""


@dataclass
class SceneSpec:
    """Parameters of the synthetic scene distribution."""

    image_size: tuple[int, int] = (128, 128)
    min_objects: int = 2
    max_objects: int = 5
    seen_categories: tuple[str, ...] = ("square", "circle")
    unseen_categories: tuple[str, ...] = ("triangle", "star", "ring", "capsule")
    min_size: float = 18.0
    max_size: float = 48.0
    overlap_cap: float = 0.2
    noise_level: float = 6.0
    seen_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.seen_categories) & set(self.unseen_categories)
        if overlap:
            raise ValueError(f"categories cannot be both seen and unseen: {overlap}")
        unknown = set(self.seen_categories + self.unseen_categories) - set(SHAPE_NAMES)
        if unknown:
            raise ValueError(f"unknown shape categories: {sorted(unknown)}")
        if not 0.0 <= self.overlap_cap < 1.0:
            raise ValueError("overlap_cap must be in [0, 1)")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 0.0 <= self.seen_probability <= 1.0:
            raise ValueError("seen_probability must be in [0, 1]")

    @property
    def categories(self) -> list[tuple[str, bool]]:
        return [(n, True) for n in self.seen_categories] + [
            (n, False) for n in self.unseen_categories
        ]


def _pixel_centers(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _polygon_mask(h: int, w: int, vertices: np.ndarray) -> np.ndarray:
    """Even-odd rasterization of a polygon over pixel centers."""
    xx, yy = _pixel_centers(h, w)
    inside = np.zeros((h, w), dtype=bool)
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (yy - y1) / (y2 - y1) + x1
        inside ^= crosses & (xx < x_at)
    return inside


def _regular_polygon(center, radius, angles):
    cx, cy = center
    return np.stack(
        [cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=-1
    )


def rasterize_shape(
    name: str, h: int, w: int, center, size: float, rotation: float
) -> np.ndarray:
    """Binary (h, w) mask of one shape instance.

    ``size`` is the nominal diameter/side; ``rotation`` in radians is used
    by the rotatable shapes.
    """
    cx, cy = center
    xx, yy = _pixel_centers(h, w)
    r = size / 2.0
    if name == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if name == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    if name == "ring":
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if name == "triangle":
        angles = rotation + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        return _polygon_mask(h, w, _regular_polygon(center, r, angles))
    if name == "star":
        angles = rotation + np.arange(10) * np.pi / 5
        radii = np.where(np.arange(10) % 2 == 0, r, 0.42 * r)
        verts = np.stack(
            [cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=-1
        )
        return _polygon_mask(h, w, verts)
    if name == "capsule":
        half_len = 0.6 * r
        radius = 0.45 * r
        dx, dy = np.cos(rotation), np.sin(rotation)
        px, py = xx - cx, yy - cy
        t = np.clip(px * dx + py * dy, -half_len, half_len)
        return (px - t * dx) ** 2 + (py - t * dy) ** 2 <= radius**2
    raise ValueError(f"unknown shape {name!r}")


def _pick_color(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    for _ in range(10):
        color = rng.integers(0, 256, 3)
        if np.abs(color - background).sum() > 120:
            return color
    return (background + 128) % 256


def generate_image(spec: SceneSpec, image_index: int):
    """Render one scene; returns (uint8 image, list of instance dicts).

    Instances carry the visible-pixel mask (later objects occlude earlier
    ones), its tight bbox, and the category name. Fully occluded or
    unplaceable objects are skipped.
    """
    rng = np.random.default_rng([spec.seed, image_index])
    width, height = spec.image_size
    background = rng.integers(30, 90, 3)
    image = np.clip(
        background[None, None, :]
        + rng.normal(0.0, spec.noise_level, (height, width, 3)),
        0,
        255,
    ).astype(np.uint8)

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed = []  # (name, mask, color, bbox)
    boxes = []
    for _ in range(n_objects):
        if spec.seen_categories and (
            not spec.unseen_categories or rng.random() < spec.seen_probability
        ):
            pool = spec.seen_categories
        else:
            pool = spec.unseen_categories
        name = pool[int(rng.integers(0, len(pool)))]
        size = float(rng.uniform(spec.min_size, spec.max_size))
        color = _pick_color(rng, background)
        accepted = False
        for _attempt in range(20):
            margin = size / 2.0 + 1.0
            cx = float(rng.uniform(margin, width - margin))
            cy = float(rng.uniform(margin, height - margin))
            rotation = float(rng.uniform(0, 2 * np.pi))
            mask = rasterize_shape(name, height, width, (cx, cy), size, rotation)
            bbox = mask_to_bbox(mask)
            if bbox is None:
                continue
            x, y, w, h = bbox
            box = np.array([x, y, x + w, y + h])
            if all(_box_iou(box, other) <= spec.overlap_cap for other in boxes):
                accepted = True
                break
        if not accepted:
            logger.info("image %d: could not place %s within overlap cap", image_index, name)
            continue
        placed.append((name, mask, color))
        boxes.append(box)

    instances = []
    for i, (name, mask, color) in enumerate(placed):
        image[mask] = color
        visible = mask.copy()
        for _, later_mask, _ in placed[i + 1:]:
            visible &= ~later_mask
        bbox = mask_to_bbox(visible)
        if bbox is None or visible.sum() < 12:
            continue
        instances.append({"category": name, "mask": visible, "bbox": bbox})
    return image, instances


def _box_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def generate_dataset(spec: SceneSpec, n_images: int, out_dir) -> Path:
    """Write images plus an exhaustive annotation file; returns its path.

    Deterministic under ``spec.seed``: two runs produce byte-identical
    annotation JSON (and identical images).
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    width, height = spec.image_size

    categories = [
        {"id": i + 1, "name": name, "seen": seen}
        for i, (name, seen) in enumerate(spec.categories)
    ]
    cat_id = {c["name"]: c["id"] for c in categories}
    images, annotations = [], []
    ann_id = 1
    for idx in range(n_images):
        image, instances = generate_image(spec, idx)
        file_name = f"images/img_{idx:05d}.png"
        Image.fromarray(image).save(out_dir / file_name)
        images.append(
            {"id": idx + 1, "file_name": file_name, "width": width, "height": height}
        )
        for inst in instances:
            x, y, w, h = inst["bbox"]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": idx + 1,
                    "category_id": cat_id[inst["category"]],
                    "bbox": [x, y, w, h],
                    "area": float(inst["mask"].sum()),
                    "iscrowd": 0,
                    "segmentation": encode_rle(inst["mask"]),
                }
            )
            ann_id += 1

    payload = {"images": images, "annotations": annotations, "categories": categories}
    ann_path = out_dir / "annotations.json"
    with open(ann_path, "w") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    return ann_path


@dataclass
class GTImage:
    image_id: int
    file_name: str
    width: int
    height: int
    boxes: np.ndarray  # (G, 4) xyxy
    category_ids: np.ndarray  # (G,)
    seen: np.ndarray  # (G,) bool
    masks: list  # per-instance RLE dict or None


@dataclass
class GroundTruthSet:
    images: list[GTImage]
    categories: dict[int, tuple[str, bool]]  # id -> (name, seen)
    root: Path | None = None

    def image_path(self, image: GTImage) -> Path:
        if self.root is None:
            raise ValueError("ground-truth set was not loaded from a file")
        return self.root / image.file_name

    def seen_category_ids(self) -> set[int]:
        return {cid for cid, (_, seen) in self.categories.items() if seen}


def _require(condition: bool, where: str, message: str) -> None:
    if not condition:
        raise AnnotationError(f"{where}: {message}")


def load_annotations(path, seen_names=None) -> GroundTruthSet:
    """Parse a COCO-style annotation file into a :class:`GroundTruthSet`.

    Seen flags come from the ``seen`` field on categories when present,
    otherwise from ``seen_names`` (category names to flag as seen, e.g.
    :data:`COCO_VOC_SEEN_NAMES` for genuine COCO files).
    """
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise AnnotationError(f"{path}: invalid JSON: {e}") from e
    for key in ("images", "annotations", "categories"):
        _require(isinstance(data.get(key), list), f"{path}: $.{key}", "missing or not a list")

    seen_names = set(seen_names or ())
    categories: dict[int, tuple[str, bool]] = {}
    for i, cat in enumerate(data["categories"]):
        where = f"{path}: $.categories[{i}]"
        _require("id" in cat and "name" in cat, where, "needs id and name")
        if "seen" in cat:
            seen = bool(cat["seen"])
        else:
            seen = cat["name"] in seen_names
        categories[int(cat["id"])] = (cat["name"], seen)

    image_meta: dict[int, dict] = {}
    for i, im in enumerate(data["images"]):
        where = f"{path}: $.images[{i}]"
        for key in ("id", "width", "height"):
            _require(key in im, where, f"missing {key}")
        image_meta[int(im["id"])] = im

    per_image: dict[int, list[dict]] = {im_id: [] for im_id in image_meta}
    for i, ann in enumerate(data["annotations"]):
        where = f"{path}: $.annotations[{i}]"
        for key in ("image_id", "category_id", "bbox"):
            _require(key in ann, where, f"missing {key}")
        _require(
            int(ann["image_id"]) in image_meta,
            f"{where}.image_id",
            f"unknown image id {ann['image_id']}",
        )
        _require(
            int(ann["category_id"]) in categories,
            f"{where}.category_id",
            f"unknown category id {ann['category_id']}",
        )
        bbox = ann["bbox"]
        _require(
            isinstance(bbox, list) and len(bbox) == 4 and bbox[2] > 0 and bbox[3] > 0,
            f"{where}.bbox",
            "bbox must be [x, y, w, h] with positive size",
        )
        im = image_meta[int(ann["image_id"])]
        _require(
            0 <= bbox[0] and 0 <= bbox[1]
            and bbox[0] + bbox[2] <= im["width"] and bbox[1] + bbox[3] <= im["height"],
            f"{where}.bbox",
            "bbox exceeds image bounds",
        )
        per_image[int(ann["image_id"])].append(ann)

    images = []
    for im_id, im in sorted(image_meta.items()):
        anns = per_image[im_id]
        boxes = np.array(
            [[a["bbox"][0], a["bbox"][1], a["bbox"][0] + a["bbox"][2], a["bbox"][1] + a["bbox"][3]]
             for a in anns],
            dtype=np.float64,
        ).reshape(-1, 4)
        images.append(
            GTImage(
                image_id=im_id,
                file_name=im.get("file_name", ""),
                width=int(im["width"]),
                height=int(im["height"]),
                boxes=boxes,
                category_ids=np.array([int(a["category_id"]) for a in anns], dtype=np.int64),
                seen=np.array(
                    [categories[int(a["category_id"])][1] for a in anns], dtype=bool
                ),
                masks=[a.get("segmentation") for a in anns],
            )
        )
    return GroundTruthSet(images=images, categories=categories, root=path.parent)


def load_gt_masks(image: GTImage) -> list[np.ndarray | None]:
    """Decode the per-instance RLE masks of one image (None where absent)."""
    return [decode_rle(m) if m else None for m in image.masks]
