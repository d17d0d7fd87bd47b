"""Dataset ingestion, splitting, balancing, annotation rescale, augmentation.

Two on-disk layouts are supported: a folder-per-class tree for
classification (`<root>/<class>/<image>.png`), and a CSV of one row per
object (`filename,width,height,class,xmin,ymin,xmax,ymax`) for detection.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import imaging
from .imaging import BBox, Image


class DatasetError(Exception):
    pass


class EmptyDatasetError(DatasetError):
    pass


class EmptyClassError(DatasetError):
    pass


class UnreadableDirectoryError(DatasetError):
    pass


class MissingColumnError(DatasetError):
    pass


class NonNumericCoordinateError(DatasetError):
    pass


class BoxOutOfBoundsError(DatasetError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class BadFractionsError(DatasetError):
    pass


class InsufficientClassCountError(DatasetError):
    def __init__(self, class_name: str, have: int, want: int):
        super().__init__(f"class {class_name!r} has {have} samples, need {want}")
        self.class_name = class_name
        self.have = have
        self.want = want


class DimensionMismatchError(DatasetError):
    pass


class NoPositivesError(DatasetError):
    pass


class ExhaustedNegativesError(DatasetError):
    pass


IMAGE_EXTENSIONS = (".png", ".ppm")

DETECTION_CSV_COLUMNS = ["filename", "width", "height", "class", "xmin", "ymin", "xmax", "ymax"]


@dataclass(frozen=True)
class ClassificationSample:
    image_path: str
    class_id: int
    class_name: str


@dataclass(frozen=True)
class DetectionSample:
    image_path: str
    image_w: int
    image_h: int
    objects: tuple  # of (class_name, BBox)


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    valid: list
    test: list
    class_names: list[str]
    seed: int


@dataclass(frozen=True)
class AugmentationSpec:
    """Which random transforms to apply and with what ranges.

    Transforms run in a fixed order (flips, 90-degree rotation, continuous
    rotation, centered crop + resize back, blur) so a seed fully determines
    the output.
    """

    flip_h_prob: float = 0.0
    flip_v_prob: float = 0.0
    rotation_deg: tuple[float, float] = (0.0, 0.0)
    rotation90: str = "none"  # none | random
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    crop_frac: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (0 <= self.flip_h_prob <= 1 and 0 <= self.flip_v_prob <= 1):
            raise ValueError("flip probabilities must be in [0,1]")
        for lo, hi in (self.rotation_deg, self.blur_sigma, self.crop_frac):
            if lo > hi:
                raise ValueError(f"range ({lo},{hi}) has min > max")
        if not (0 <= self.crop_frac[0] and self.crop_frac[1] < 1):
            raise ValueError("crop fractions must lie in [0,1)")
        if self.rotation90 not in ("none", "random"):
            raise ValueError(f"rotation90 must be 'none' or 'random', got {self.rotation90!r}")


# The two augmentation recipes baked into the source datasets.
RIPENESS_AUGMENTATION = AugmentationSpec(
    flip_h_prob=0.5, flip_v_prob=0.5, rotation_deg=(-15.0, 15.0), blur_sigma=(0.0, 2.3)
)
DISEASE_AUGMENTATION = AugmentationSpec(
    flip_h_prob=0.5, rotation90="random", crop_frac=(0.0, 0.2), blur_sigma=(0.0, 2.5)
)


def load_classification_tree(root: str):
    """Scan a folder-per-class tree.

    Returns (samples, class_names) with class names sorted lexicographically
    and class ids assigned by that order.
    """
    if not os.path.isdir(root):
        raise UnreadableDirectoryError(f"not a readable directory: {root}")
    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise EmptyDatasetError(f"no class directories under {root}")
    samples = []
    for class_id, name in enumerate(class_names):
        class_dir = os.path.join(root, name)
        files = sorted(
            f for f in os.listdir(class_dir) if f.lower().endswith(IMAGE_EXTENSIONS)
        )
        if not files:
            raise EmptyClassError(f"class directory {class_dir!r} contains no images")
        for f in files:
            samples.append(ClassificationSample(os.path.join(class_dir, f), class_id, name))
    return samples, class_names


def load_detection_csv(csv_path: str, image_dir: str) -> list[DetectionSample]:
    """Parse an object-per-row CSV, merging rows of the same filename."""
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumnError("empty CSV file") from None
        if [h.strip() for h in header] != DETECTION_CSV_COLUMNS:
            missing = set(DETECTION_CSV_COLUMNS) - set(h.strip() for h in header)
            raise MissingColumnError(
                f"expected header {','.join(DETECTION_CSV_COLUMNS)}; missing {sorted(missing)}"
            )
        by_file: dict[str, DetectionSample] = {}
        order: list[str] = []
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DETECTION_CSV_COLUMNS):
                raise MissingColumnError(f"row {row_num} has {len(row)} fields")
            filename, width, height, cls = row[0], row[1], row[2], row[3]
            try:
                w, h = int(width), int(height)
                xmin, ymin, xmax, ymax = (float(v) for v in row[4:8])
            except ValueError:
                raise NonNumericCoordinateError(f"row {row_num} has non-numeric fields") from None
            if xmax <= xmin or ymax <= ymin:
                raise BoxOutOfBoundsError(row_num, f"degenerate box ({xmin},{ymin},{xmax},{ymax})")
            if xmin < 0 or ymin < 0 or xmax > w or ymax > h:
                raise BoxOutOfBoundsError(row_num, f"box ({xmin},{ymin},{xmax},{ymax}) outside {w}x{h}")
            box = BBox(xmin, ymin, xmax - xmin, ymax - ymin)
            if filename not in by_file:
                by_file[filename] = DetectionSample(
                    os.path.join(image_dir, filename), w, h, ((cls, box),)
                )
                order.append(filename)
            else:
                prev = by_file[filename]
                if (prev.image_w, prev.image_h) != (w, h):
                    raise BoxOutOfBoundsError(row_num, f"inconsistent dimensions for {filename}")
                by_file[filename] = replace(prev, objects=prev.objects + ((cls, box),))
    return [by_file[f] for f in order]


def write_detection_csv(samples: list[DetectionSample], csv_path: str) -> None:
    """Inverse of load_detection_csv (paths written as bare filenames)."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_CSV_COLUMNS)
        for s in samples:
            name = os.path.basename(s.image_path)
            for cls, box in s.objects:
                writer.writerow(
                    [name, s.image_w, s.image_h, cls,
                     _fmt(box.x), _fmt(box.y), _fmt(box.x + box.w), _fmt(box.y + box.h)]
                )


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _allocate(n: int, fractions) -> list[int]:
    """Split n items into len(fractions) integer counts by largest remainder."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    leftovers = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: -(raw[i] - counts[i]))
    for i in range(leftovers):
        counts[order[i % len(order)]] += 1
    return counts


def split_dataset(samples, fractions, seed: int) -> DatasetSplit:
    """Deterministic seeded split into train/valid/test.

    Classification samples are stratified per class; anything else is a
    plain shuffle followed by a contiguous partition.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise BadFractionsError(f"need 3 nonnegative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractionsError(f"fractions must sum to 1, got {sum(fractions)}")
    samples = list(samples)
    rng = np.random.default_rng(seed)
    stratified = all(isinstance(s, ClassificationSample) for s in samples) and samples
    parts: list[list] = [[], [], []]
    if stratified:
        class_names = sorted({s.class_name for s in samples})
        for name in class_names:
            group = [s for s in samples if s.class_name == name]
            perm = rng.permutation(len(group))
            counts = _allocate(len(group), fractions)
            offset = 0
            for part, count in zip(parts, counts):
                part.extend(group[perm[i]] for i in range(offset, offset + count))
                offset += count
    else:
        class_names = sorted(
            {cls for s in samples for cls, _ in getattr(s, "objects", ())}
        )
        perm = rng.permutation(len(samples))
        counts = _allocate(len(samples), fractions)
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(samples[perm[i]] for i in range(offset, offset + count))
            offset += count
    return DatasetSplit(parts[0], parts[1], parts[2], class_names or ["object"], seed)


def balanced_subsample(samples, n_per_class: int, seed: int):
    """Pick exactly n_per_class samples of each class by seeded shuffle."""
    rng = np.random.default_rng(seed)
    by_class: dict[str, list] = {}
    for s in samples:
        by_class.setdefault(s.class_name, []).append(s)
    picked = []
    for name in sorted(by_class):
        group = by_class[name]
        if len(group) < n_per_class:
            raise InsufficientClassCountError(name, len(group), n_per_class)
        perm = rng.permutation(len(group))
        picked.extend(group[perm[i]] for i in range(n_per_class))
    final = rng.permutation(len(picked))
    return [picked[i] for i in final]


def resize_with_boxes(sample: DetectionSample, image: Image, out_w: int, out_h: int):
    """Resize an image and rescale its annotation boxes by the same ratios."""
    if (image.width, image.height) != (sample.image_w, sample.image_h):
        raise DimensionMismatchError(
            f"image is {image.width}x{image.height}, sample says {sample.image_w}x{sample.image_h}"
        )
    sx = out_w / sample.image_w
    sy = out_h / sample.image_h
    resized = imaging.resize_bilinear(image, out_w, out_h)
    objects = tuple(
        (cls, BBox(box.x * sx, box.y * sy, box.w * sx, box.h * sy))
        for cls, box in sample.objects
    )
    return resized, DetectionSample(sample.image_path, out_w, out_h, objects)


def augment(image: Image, spec: AugmentationSpec, rng_seed: int) -> Image:
    """Apply the spec's random transforms; same seed means same output."""
    rng = np.random.default_rng(rng_seed)
    out = image
    if spec.flip_h_prob > 0 and rng.random() < spec.flip_h_prob:
        out = imaging.flip(out, "horizontal")
    if spec.flip_v_prob > 0 and rng.random() < spec.flip_v_prob:
        out = imaging.flip(out, "vertical")
    if spec.rotation90 == "random":
        choice = int(rng.integers(3))  # none, clockwise, counterclockwise
        if choice == 1:
            out = imaging.rotate(out, 90.0)
        elif choice == 2:
            out = imaging.rotate(out, -90.0)
    if spec.rotation_deg != (0.0, 0.0):
        degrees = float(rng.uniform(*spec.rotation_deg))
        if degrees != 0.0:
            out = imaging.rotate(out, degrees)
    if spec.crop_frac != (0.0, 0.0):
        f = float(rng.uniform(*spec.crop_frac))
        if f > 0.0:
            w, h = out.width, out.height
            cw = max(1.0, w * (1.0 - f))
            ch = max(1.0, h * (1.0 - f))
            box = BBox((w - cw) / 2.0, (h - ch) / 2.0, cw, ch)
            out = imaging.resize_bilinear(imaging.crop(out, box), w, h)
    if spec.blur_sigma != (0.0, 0.0):
        sigma = float(rng.uniform(*spec.blur_sigma))
        if sigma > 0.0:
            out = imaging.gaussian_blur(out, sigma)
    return out


def extract_positive_windows(samples, images: dict, class_filter: str, window: tuple[int, int]):
    """Crop every box of the given class, grayscale it, resize to the window."""
    win_w, win_h = window
    if win_w < 8 or win_h < 8:
        raise ValueError(f"window must be at least 8x8, got {window}")
    out = []
    for sample in samples:
        image = images[sample.image_path]
        for cls, box in sample.objects:
            if cls != class_filter:
                continue
            patch = imaging.crop(image, box)
            if patch.channels == 3:
                patch = imaging.to_grayscale(patch)
            out.append(imaging.resize_bilinear(patch, win_w, win_h))
    if not out:
        raise NoPositivesError(f"no objects of class {class_filter!r} found")
    return out


def sample_negative_windows(
    samples, images: dict, class_filter: str, window: tuple[int, int],
    n: int, seed: int, reject_iou: float,
):
    """Sample n windows at random positions/scales that avoid labeled boxes.

    A candidate is kept only if its IoU with every class_filter box in its
    image stays below reject_iou. Raises ExhaustedNegativesError when the
    attempt budget (200 per requested window) runs out.
    """
    from .metrics import iou as box_iou

    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= reject_iou <= 1):
        raise ValueError(f"reject_iou must be in [0,1], got {reject_iou}")
    win_w, win_h = window
    rng = np.random.default_rng(seed)
    samples = list(samples)
    out = []
    attempts = 0
    max_attempts = 200 * n
    while len(out) < n:
        if attempts >= max_attempts:
            raise ExhaustedNegativesError(
                f"found {len(out)}/{n} negatives after {attempts} attempts"
            )
        attempts += 1
        sample = samples[int(rng.integers(len(samples)))]
        image = images[sample.image_path]
        max_scale = min(image.width / win_w, image.height / win_h)
        if max_scale < 1.0:
            continue
        scale = float(rng.uniform(1.0, max_scale))
        w = win_w * scale
        h = win_h * scale
        x = float(rng.uniform(0, image.width - w))
        y = float(rng.uniform(0, image.height - h))
        candidate = BBox(x, y, w, h)
        boxes = [box for cls, box in sample.objects if cls == class_filter]
        if any(box_iou(candidate, box) >= reject_iou for box in boxes):
            continue
        patch = imaging.crop(image, candidate)
        if patch.channels == 3:
            patch = imaging.to_grayscale(patch)
        out.append(imaging.resize_bilinear(patch, win_w, win_h))
    return out


def save_split_manifest(split: DatasetSplit, path: str) -> None:
    """Persist a split as JSON: {seed, class_names, train, valid, test}."""
    doc = {
        "seed": split.seed,
        "class_names": split.class_names,
        "train": [s.image_path for s in split.train],
        "valid": [s.image_path for s in split.valid],
        "test": [s.image_path for s in split.test],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_split_manifest(path: str, samples) -> DatasetSplit:
    """Rebuild a DatasetSplit by matching manifest paths against samples."""
    with open(path) as fh:
        doc = json.load(fh)
    by_path = {s.image_path: s for s in samples}
    parts = []
    for key in ("train", "valid", "test"):
        missing = [p for p in doc[key] if p not in by_path]
        if missing:
            raise DatasetError(f"manifest {key} references unknown paths: {missing[:3]}")
        parts.append([by_path[p] for p in doc[key]])
    return DatasetSplit(parts[0], parts[1], parts[2], doc["class_names"], doc["seed"])
