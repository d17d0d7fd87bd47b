"""Two-stage grading workflow and single-file model persistence.

A PipelineModel bundles the cascade detector with the ripeness and disease
classifiers. grade_image runs detection, crops each hit (with padding), and
classifies ripeness; crops graded into a trigger label (default "bad mango")
get the disease classifier as well.

The container on disk is: 8-byte magic ``FGPM0001``, an 8-byte little-endian
manifest length, the UTF-8 JSON manifest, contiguous little-endian float32
tensor blobs, and a trailing CRC-32 of all preceding bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import cascade as cascade_mod
from . import imaging, nn
from .cascade import CascadeModel, ScanParams
from .imaging import BBox, Image
from .nn import Network, Prediction

MAGIC_PREFIX = b"FGPM"
CONTAINER_VERSION = 1
NET_MAGIC_PREFIX = b"FGNC"

CROP_PADDING = 0.1  # fraction of box size added on each side before classifying

RIPENESS_CLASSES = ["bad mango", "raw mango", "ripe mango"]
DISEASE_CLASSES = ["alternaria", "anthracnose", "black mold rot", "healthy", "stem end rot"]


class PipelineError(Exception):
    pass


class VersionMismatchError(PipelineError):
    pass


class CorruptContainerError(PipelineError):
    pass


@dataclass
class PipelineModel:
    detector: CascadeModel
    ripeness_net: Network
    disease_net: Network
    disease_trigger: tuple = ("bad mango",)
    version: int = 1

    def __post_init__(self):
        if self.ripeness_net.num_classes != 3:
            raise ValueError("ripeness classifier must have 3 classes")
        if self.disease_net.num_classes != 5:
            raise ValueError("disease classifier must have 5 classes")
        unknown = set(self.disease_trigger) - set(self.ripeness_net.class_names)
        if unknown:
            raise ValueError(f"trigger labels not in ripeness classes: {sorted(unknown)}")

    @property
    def ripeness_classes(self) -> list[str]:
        return list(self.ripeness_net.class_names)

    @property
    def disease_classes(self) -> list[str]:
        return list(self.disease_net.class_names)


@dataclass(frozen=True)
class FruitReport:
    box: BBox
    detection_score: float
    ripeness: Prediction
    disease: Prediction | None


def padded_box(box: BBox, image_w: int, image_h: int, pad: float = CROP_PADDING) -> BBox:
    """Grow a box by pad * size on each side, clamped to the image."""
    px = box.w * pad
    py = box.h * pad
    x0 = max(0.0, box.x - px)
    y0 = max(0.0, box.y - py)
    x1 = min(float(image_w), box.x2 + px)
    y1 = min(float(image_h), box.y2 + py)
    return BBox(x0, y0, x1 - x0, y1 - y0)


def grade_image(
    model: PipelineModel,
    image: Image,
    force_disease: bool = False,
    scan: ScanParams | None = None,
) -> list[FruitReport]:
    """Detect fruit, then classify each crop; reports sorted by score."""
    detections = cascade_mod.detect(model.detector, image, scan)
    reports = []
    for det in detections:
        patch = imaging.crop(image, padded_box(det.box, image.width, image.height))
        ripeness = nn.predict(model.ripeness_net, patch)
        disease = None
        if force_disease or ripeness.label in model.disease_trigger:
            disease = nn.predict(model.disease_net, patch)
        reports.append(FruitReport(det.box, det.score, ripeness, disease))
    return reports


# ---------------------------------------------------------------------------
# Container serialization


def _net_entries(prefix: str, net: Network):
    """(name, array) pairs covering every parameter and BN statistic."""
    for i, params in enumerate(net.params):
        if params:
            for key in sorted(params):
                yield f"{prefix}/node{i}/{key}", params[key]
        stats = net.bn_stats[i]
        if stats:
            for key in sorted(stats):
                yield f"{prefix}/node{i}/running_{key}", stats[key]


def _net_manifest(net: Network) -> dict:
    return {"spec": nn.spec_to_json(net.spec), "class_names": list(net.class_names)}


def _net_restore(doc: dict, prefix: str, tensors: dict) -> Network:
    spec = nn.spec_from_json(doc["spec"])
    net = nn.init_network(spec, seed=0, class_names=doc["class_names"])
    for i, params in enumerate(net.params):
        if params:
            for key in list(params):
                params[key] = tensors[f"{prefix}/node{i}/{key}"]
        stats = net.bn_stats[i]
        if stats:
            for key in list(stats):
                stats[key] = tensors[f"{prefix}/node{i}/running_{key}"]
    return net


def _write_container(path: str, magic: bytes, manifest: dict, arrays) -> None:
    blob = bytearray()
    directory = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob.extend(data)
    manifest = dict(manifest)
    manifest["tensors"] = directory
    doc = json.dumps(manifest).encode("utf-8")
    out = bytearray()
    out += magic
    out += struct.pack("<Q", len(doc))
    out += doc
    out += blob
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(out)


def _read_container(path: str, magic_prefix: bytes, version: int):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20:
        raise CorruptContainerError("file too short to be a model container")
    if data[:4] != magic_prefix:
        raise CorruptContainerError(f"bad magic {data[:8]!r}")
    try:
        file_version = int(data[4:8])
    except ValueError:
        raise CorruptContainerError(f"bad magic {data[:8]!r}") from None
    if file_version != version:
        raise VersionMismatchError(
            f"container is format version {file_version}, this build reads version {version}"
        )
    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc_stored:
        raise CorruptContainerError("checksum mismatch: container is corrupt or truncated")
    (doc_len,) = struct.unpack("<Q", data[8:16])
    if 16 + doc_len > len(data) - 4:
        raise CorruptContainerError("manifest length exceeds file size")
    manifest = json.loads(data[16 : 16 + doc_len].decode("utf-8"))
    blob = data[16 + doc_len : -4]
    tensors = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    return manifest, tensors


def save_pipeline(model: PipelineModel, path: str) -> None:
    manifest = {
        "model_version": model.version,
        "detector": cascade_mod.cascade_to_json(model.detector),
        "ripeness": _net_manifest(model.ripeness_net),
        "disease": _net_manifest(model.disease_net),
        "disease_trigger": list(model.disease_trigger),
    }
    arrays = list(_net_entries("ripeness", model.ripeness_net))
    arrays += list(_net_entries("disease", model.disease_net))
    magic = MAGIC_PREFIX + f"{CONTAINER_VERSION:04d}".encode()
    _write_container(path, magic, manifest, arrays)


def load_pipeline(path: str) -> PipelineModel:
    manifest, tensors = _read_container(path, MAGIC_PREFIX, CONTAINER_VERSION)
    detector = cascade_mod.cascade_from_json(manifest["detector"])
    ripeness = _net_restore(manifest["ripeness"], "ripeness", tensors)
    disease = _net_restore(manifest["disease"], "disease", tensors)
    return PipelineModel(
        detector, ripeness, disease,
        tuple(manifest["disease_trigger"]),
        manifest["model_version"],
    )


def save_network(net: Network, path: str) -> None:
    """Standalone classifier container (same layout, FGNC magic)."""
    magic = NET_MAGIC_PREFIX + f"{CONTAINER_VERSION:04d}".encode()
    _write_container(path, magic, {"net": _net_manifest(net)}, _net_entries("net", net))


def load_network(path: str) -> Network:
    manifest, tensors = _read_container(path, NET_MAGIC_PREFIX, CONTAINER_VERSION)
    return _net_restore(manifest["net"], "net", tensors)
