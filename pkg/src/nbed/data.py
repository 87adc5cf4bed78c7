"""Samples, list-file loading, augmentation and a synthetic edge dataset."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image, UnidentifiedImageError
from skimage import draw


class DataError(ValueError):
    """A list file, image or ground-truth map could not be used."""


@dataclass
class Sample:
    image: np.ndarray                  # H x W x 3, uint8
    consensus_gt: np.ndarray           # H x W, float32 in [0, 1]
    annotator_gts: list[np.ndarray]    # each H x W, bool
    id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


def consensus_groundtruth(annotations: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise mean of the annotators' binary edge maps."""
    if len(annotations) == 0:
        raise DataError("consensus of an empty annotation list is undefined")
    shape = annotations[0].shape
    for k, a in enumerate(annotations):
        if a.shape != shape:
            raise DataError(f"annotation {k} has shape {a.shape}, expected {shape}")
    stack = np.stack([np.asarray(a, dtype=np.float64) for a in annotations])
    return stack.mean(axis=0).astype(np.float32)


def make_sample(image: np.ndarray, annotator_gts: Sequence[np.ndarray], id: str = "") -> Sample:
    gts = [np.asarray(g).astype(bool) for g in annotator_gts]
    return Sample(np.ascontiguousarray(image, dtype=np.uint8), consensus_groundtruth(gts), gts, id)


# --------------------------------------------------------------------------
# list files

def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def parse_listfile(path) -> list[tuple[int, Path, list[Path]]]:
    """Return ``(line_number, image_path, gt_paths)`` per non-comment line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"list file not found: {path}")
    root = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected an image path and at least one ground-truth path")
        entries.append((lineno, root / parts[0], [root / p for p in parts[1:]]))
    return entries


def load_listfile(path) -> list[Sample]:
    """Load every sample of a list file, in file order.

    A single ground-truth map with intermediate gray values is read as a
    consensus map (value / 255); its annotator map is its support.
    Otherwise every ground-truth file is an annotator map, edge where > 127.
    """
    samples = []
    for lineno, img_path, gt_paths in parse_listfile(path):
        where = f"{path}:{lineno}"
        try:
            image = _read_rgb(img_path)
            raw = [_read_gray(p) for p in gt_paths]
        except FileNotFoundError as exc:
            raise DataError(f"{where}: missing file {exc.filename}") from exc
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"{where}: unreadable image ({exc})") from exc
        for p, g in zip(gt_paths, raw):
            if g.shape != image.shape[:2]:
                raise DataError(f"{where}: ground truth {p.name} is {g.shape[0]}x{g.shape[1]} "
                                f"but image {img_path.name} is {image.shape[0]}x{image.shape[1]}")
        if len(raw) == 1 and np.any((raw[0] > 0) & (raw[0] < 255)):
            consensus = (raw[0].astype(np.float32) / 255.0)
            samples.append(Sample(image, consensus, [raw[0] > 0], img_path.stem))
        else:
            samples.append(make_sample(image, [g > 127 for g in raw], img_path.stem))
    return samples


# --------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationPlan:
    """Multipliers of the augmentation product.

    ``crop_or_resize`` is ``None``, ``("resize", h, w)`` or
    ``("random_crop", h, w)``. A resize target keeps the orientation of
    each augmented image: a portrait image resized with a landscape target
    gets the transposed target.
    """
    flip_variants: int = 1
    scale_factors: tuple[float, ...] = (1.0,)
    rotation_count: int = 1
    gamma_values: tuple[float, ...] = (1.0,)
    crop_or_resize: tuple | None = None

    def __post_init__(self):
        if self.flip_variants not in (1, 2, 4):
            raise DataError("flip_variants must be 1, 2 or 4")
        if self.rotation_count < 1 or not self.scale_factors or not self.gamma_values:
            raise DataError("augmentation counts must be >= 1")
        if any(s <= 0 for s in self.scale_factors) or any(g <= 0 for g in self.gamma_values):
            raise DataError("scale factors and gamma values must be positive")
        if self.crop_or_resize is not None:
            kind = self.crop_or_resize[0]
            if kind not in ("resize", "random_crop") or len(self.crop_or_resize) != 3:
                raise DataError(f"bad crop_or_resize {self.crop_or_resize!r}")

    @property
    def cardinality(self) -> int:
        return self.flip_variants * len(self.scale_factors) * self.rotation_count * len(self.gamma_values)

    def angles(self) -> list[float]:
        return [360.0 * k / self.rotation_count for k in range(self.rotation_count)]


BSDS_PLAN = AugmentationPlan(flip_variants=4, rotation_count=25, crop_or_resize=("resize", 321, 481))
NYUD_PLAN = AugmentationPlan(flip_variants=2, scale_factors=(0.5, 1.0, 1.5), rotation_count=4,
                             crop_or_resize=("random_crop", 400, 400))
BIPED_PLAN = AugmentationPlan(flip_variants=2, scale_factors=(0.5, 1.0, 1.5), rotation_count=16,
                              gamma_values=(1.0, 0.3030, 0.6060), crop_or_resize=("random_crop", 400, 400))

_FLIPS = [(False, False), (True, False), (False, True), (True, True)]  # (horizontal, vertical)


def _flip(a: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        a = a[:, ::-1]
    if vertical:
        a = a[::-1]
    return np.ascontiguousarray(a)


def _resize(a: np.ndarray, h: int, w: int, nearest: bool) -> np.ndarray:
    if a.shape[:2] == (h, w):
        return a
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.resize(a.astype(np.uint8), (w, h), interpolation=interp)
    return out


def inscribed_rect(w: int, h: int, angle_deg: float) -> tuple[int, int]:
    """Largest axis-aligned rectangle inside a ``w`` x ``h`` rectangle rotated by ``angle_deg``."""
    angle = math.radians(angle_deg)
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    if sin_a < 1e-12 or cos_a < 1e-12:
        return (h, w) if sin_a > cos_a else (w, h)
    long_side, short_side = max(w, h), min(w, h)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return max(1, int(math.floor(wr))), max(1, int(math.floor(hr)))


def _rotate(a: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    """Rotate about the centre, reflect-fill, then crop the largest valid rectangle."""
    quarter = angle_deg / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        return np.ascontiguousarray(np.rot90(a, k=int(round(quarter)) % 4))
    h, w = a.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_deg, 1.0)
    cos_a, sin_a = abs(m[0, 0]), abs(m[0, 1])
    bw = int(math.ceil(h * sin_a + w * cos_a))
    bh = int(math.ceil(h * cos_a + w * sin_a))
    m[0, 2] += (bw - w) / 2.0
    m[1, 2] += (bh - h) / 2.0
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.warpAffine(a.astype(np.uint8), m, (bw, bh), flags=interp, borderMode=cv2.BORDER_REFLECT_101)
    cw, ch = inscribed_rect(w, h, angle_deg)
    cw, ch = min(cw, bw), min(ch, bh)
    top, left = (bh - ch) // 2, (bw - cw) // 2
    return np.ascontiguousarray(out[top:top + ch, left:left + cw])


def _gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return image
    lut = np.clip(np.round(255.0 * (np.arange(256) / 255.0) ** gamma), 0, 255).astype(np.uint8)
    return lut[image]


def augment(sample: Sample, plan: AugmentationPlan, seed: int = 0) -> list[Sample]:
    """Expand one sample into the product flips x scales x rotations x gammas.

    The same geometric transform is applied to the image (bilinear) and to
    every annotator map (nearest neighbour); the consensus map is
    re-averaged from the transformed annotator maps.
    """
    rng = np.random.default_rng(seed)
    out = []
    combos = itertools.product(_FLIPS[:plan.flip_variants], plan.scale_factors, plan.angles(), plan.gamma_values)
    for k, ((fh, fv), scale, angle, gamma) in enumerate(combos):
        img = _flip(sample.image, fh, fv)
        gts = [_flip(g.astype(np.uint8), fh, fv) for g in sample.annotator_gts]
        if scale != 1.0:
            h, w = img.shape[:2]
            nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
            img = _resize(img, nh, nw, nearest=False)
            gts = [_resize(g, nh, nw, nearest=True) for g in gts]
        if angle != 0.0:
            img = _rotate(img, angle, nearest=False)
            gts = [_rotate(g, angle, nearest=True) for g in gts]
        if plan.crop_or_resize is not None:
            kind, th, tw = plan.crop_or_resize
            h, w = img.shape[:2]
            if kind == "resize":
                if (h > w) != (th > tw) and h != w and th != tw:
                    th, tw = tw, th
                img = _resize(img, th, tw, nearest=False)
                gts = [_resize(g, th, tw, nearest=True) for g in gts]
            else:
                if th > h or tw > w:
                    raise DataError(f"crop {th}x{tw} larger than augmented image {h}x{w} ({sample.id})")
                top = int(rng.integers(0, h - th + 1))
                left = int(rng.integers(0, w - tw + 1))
                img = img[top:top + th, left:left + tw]
                gts = [g[top:top + th, left:left + tw] for g in gts]
        img = _gamma(img, gamma)
        out.append(make_sample(img, gts, f"{sample.id}_aug{k}"))
    return out


# --------------------------------------------------------------------------
# synthetic data

def shape_mask(size: int, shape: tuple) -> np.ndarray:
    """Rasterize one shape description into a ``size`` x ``size`` boolean mask.

    Specs: ``("rect", r0, c0, r1, c1)`` with inclusive corners,
    ``("ellipse", r, c, r_radius, c_radius, rotation)`` and
    ``("polygon", rows, cols)``.
    """
    mask = np.zeros((size, size), dtype=bool)
    kind = shape[0]
    if kind == "rect":
        _, r0, c0, r1, c1 = shape
        mask[max(r0, 0):r1 + 1, max(c0, 0):c1 + 1] = True
    elif kind == "ellipse":
        _, r, c, rr, cr, rot = shape
        rows, cols = draw.ellipse(r, c, rr, cr, shape=mask.shape, rotation=rot)
        mask[rows, cols] = True
    elif kind == "polygon":
        _, pr, pc = shape
        rows, cols = draw.polygon(np.asarray(pr), np.asarray(pc), shape=mask.shape)
        mask[rows, cols] = True
    else:
        raise DataError(f"unknown shape kind {kind!r}")
    return mask


def label_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbour belongs to a lower label (the occluded side is not marked)."""
    edge = np.zeros(labels.shape, dtype=bool)
    for axis in (0, 1):
        a = labels
        diff_fwd = np.zeros_like(edge)
        diff_bwd = np.zeros_like(edge)
        if axis == 0:
            diff_fwd[:-1] = a[:-1] > a[1:]
            diff_bwd[1:] = a[1:] > a[:-1]
        else:
            diff_fwd[:, :-1] = a[:, :-1] > a[:, 1:]
            diff_bwd[:, 1:] = a[:, 1:] > a[:, :-1]
        edge |= diff_fwd | diff_bwd
    return edge


def render_shapes(size: int, shapes: Sequence[tuple], seed: int = 0, noise: float = 3.0,
                  levels: Sequence[int] | None = None, id: str = "") -> Sample:
    """Paint ``shapes`` in order over a background; later shapes occlude earlier ones.

    Gray levels increase with paint order so every boundary pixel sits on
    the brighter side of its intensity step.
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.int32)
    for k, shape in enumerate(shapes, start=1):
        labels[shape_mask(size, shape)] = k
    n = len(shapes)
    if levels is None:
        base = np.linspace(30.0, 225.0, n + 1)
        jitter = rng.uniform(-6.0, 6.0, size=n + 1) if n else np.zeros(1)
        levels = np.round(base + jitter)
    gray = np.asarray(levels, dtype=np.float64)[labels]
    tint = rng.uniform(0.85, 1.0, size=3)
    img = gray[..., None] * tint[None, None, :]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return make_sample(img, [label_boundaries(labels)], id)


def random_shape(size: int, rng: np.random.Generator) -> tuple:
    lo, hi = size / 8.0, size / 3.0
    r, c = rng.uniform(0.2 * size, 0.8 * size, size=2)
    if rng.random() < 0.5:
        rr, cr = rng.uniform(lo, hi, size=2) / 1.5
        return ("ellipse", float(r), float(c), float(rr), float(cr), float(rng.uniform(0, math.pi)))
    k = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
    radii = rng.uniform(lo, hi, size=k) / 1.5
    return ("polygon", r + radii * np.sin(angles), c + radii * np.cos(angles))


def synth_sample(size: int = 64, shape_count: int = 3, seed: int = 0) -> Sample:
    """A deterministic image of random ellipses and polygons with its exact boundary map."""
    if size < 32:
        raise DataError("synthetic samples need size >= 32")
    rng = np.random.default_rng(seed)
    shapes = [random_shape(size, rng) for _ in range(shape_count)]
    return render_shapes(size, shapes, seed=int(rng.integers(2 ** 31)), id=f"synth{seed:05d}")


def synth_dataset(count: int, size: int = 64, shape_count: int = 3, seed: int = 0) -> list[Sample]:
    return [synth_sample(size, shape_count, seed * 100003 + k) for k in range(count)]


def save_sample(sample: Sample, directory, stem: str | None = None,
                gt_directory=None) -> tuple[Path, list[Path]]:
    """Write the image and annotator maps as PNGs; returns their paths.

    Annotator maps go to ``gt_directory`` when given, else next to the image.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gt_directory = Path(gt_directory) if gt_directory is not None else directory
    gt_directory.mkdir(parents=True, exist_ok=True)
    stem = stem or sample.id
    img_path = directory / f"{stem}.png"
    Image.fromarray(sample.image).save(img_path)
    gt_paths = []
    for k, g in enumerate(sample.annotator_gts):
        p = gt_directory / f"{stem}_gt{k}.png"
        Image.fromarray((g.astype(np.uint8) * 255)).save(p)
        gt_paths.append(p)
    return img_path, gt_paths
