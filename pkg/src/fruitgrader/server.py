"""HTTP API backing the operator UI.

The ApiService methods implement the endpoints against plain Python values
(bytes in, dicts out) so they can be tested without sockets; the handler
class wraps them in HTTP/1.1 with JSON bodies. Uploaded images are stored
content-addressed (SHA-256 of the bytes), which makes uploads idempotent.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import imaging, nn, pipeline as pipeline_mod
from .cascade import ScanParams, detect
from .imaging import BBox

DEFAULT_MAX_UPLOAD = 16 * 1024 * 1024


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class ApiService:
    """Endpoint logic: an image store plus the loaded pipeline model."""

    def __init__(self, store_dir: str, model: pipeline_mod.PipelineModel | None = None,
                 max_upload: int = DEFAULT_MAX_UPLOAD, scan: ScanParams | None = None):
        self.store_dir = store_dir
        self.model = model
        self.max_upload = max_upload
        self.scan = scan or ScanParams()
        os.makedirs(store_dir, exist_ok=True)

    # -- image store

    def _path(self, image_id: str) -> str:
        if not (len(image_id) == 64 and all(c in "0123456789abcdef" for c in image_id)):
            raise ApiError(404, f"unknown image id {image_id!r}")
        return os.path.join(self.store_dir, image_id + ".png")

    def upload(self, body: bytes) -> dict:
        if len(body) > self.max_upload:
            raise ApiError(413, f"upload exceeds {self.max_upload} bytes")
        try:
            imaging.decode_image(body, "png")
        except imaging.ImagingError as exc:
            raise ApiError(415, f"body is not a decodable PNG: {exc}") from exc
        image_id = hashlib.sha256(body).hexdigest()
        path = self._path(image_id)
        if not os.path.exists(path):
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(body)
            os.replace(tmp, path)
        return {"image_id": image_id}

    def image_bytes(self, image_id: str) -> bytes:
        path = self._path(image_id)
        if not os.path.exists(path):
            raise ApiError(404, f"unknown image id {image_id!r}")
        with open(path, "rb") as fh:
            return fh.read()

    def _load_image(self, image_id: str) -> imaging.Image:
        return imaging.decode_image(self.image_bytes(image_id), "png")

    # -- inference endpoints

    def _require_model(self) -> pipeline_mod.PipelineModel:
        if self.model is None:
            raise ApiError(503, "no model loaded")
        return self.model

    def detect(self, image_id: str) -> dict:
        model = self._require_model()
        image = self._load_image(image_id)
        try:
            found = detect(model.detector, image, self.scan)
        except Exception as exc:
            raise ApiError(422, f"detection failed: {exc}") from exc
        return {
            "boxes": [
                {"box": _box_json(d.box), "score": d.score} for d in found
            ]
        }

    def classify(self, image_id: str, box: dict | None, model_name: str) -> dict:
        model = self._require_model()
        if model_name == "ripeness":
            net = model.ripeness_net
        elif model_name == "disease":
            net = model.disease_net
        else:
            raise ApiError(400, f"model must be 'ripeness' or 'disease', got {model_name!r}")
        image = self._load_image(image_id)
        if box is not None:
            bbox = _box_from_json(box)
            if (bbox.x < 0 or bbox.y < 0 or bbox.x2 > image.width or bbox.y2 > image.height):
                raise ApiError(400, f"box {box} outside {image.width}x{image.height} image")
            patch = imaging.crop(image, pipeline_mod.padded_box(bbox, image.width, image.height))
        else:
            patch = image
        pred = nn.predict(net, patch)
        return _prediction_json(pred, net.class_names)

    def grade(self, image_id: str, force_disease: bool = False) -> dict:
        model = self._require_model()
        image = self._load_image(image_id)
        reports = pipeline_mod.grade_image(model, image, force_disease=force_disease, scan=self.scan)
        detections = []
        for r in reports:
            entry = {
                "box": _box_json(r.box),
                "score": r.detection_score,
                "ripeness": _prediction_json(r.ripeness, model.ripeness_classes),
            }
            if r.disease is not None:
                entry["disease"] = _prediction_json(r.disease, model.disease_classes)
            detections.append(entry)
        return {"image_id": image_id, "detections": detections}

    def models_info(self) -> dict:
        if self.model is None:
            return {"loaded": False}
        return {
            "loaded": True,
            "version": self.model.version,
            "detector_window": [self.model.detector.window_w, self.model.detector.window_h],
            "detector_stages": len(self.model.detector.stages),
            "ripeness_classes": self.model.ripeness_classes,
            "disease_classes": self.model.disease_classes,
            "disease_trigger": list(self.model.disease_trigger),
        }

    def gc(self, keep_hours: float = 0.0) -> int:
        """Delete stored images older than keep_hours; returns count removed."""
        import time

        cutoff = time.time() - keep_hours * 3600.0
        removed = 0
        for name in os.listdir(self.store_dir):
            path = os.path.join(self.store_dir, name)
            if name.endswith(".png") and os.path.getmtime(path) <= cutoff:
                os.remove(path)
                removed += 1
        return removed


def _box_json(box: BBox) -> dict:
    return {"x": box.x, "y": box.y, "w": box.w, "h": box.h}


def _box_from_json(doc: dict) -> BBox:
    try:
        return BBox(float(doc["x"]), float(doc["y"]), float(doc["w"]), float(doc["h"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ApiError(400, f"bad box {doc!r}: {exc}") from exc


def _prediction_json(pred: nn.Prediction, class_names) -> dict:
    return {"label": pred.label, "probs": {n: p for n, p in zip(class_names, pred.probs)}}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: ApiService = None
    ui_origin: str | None = None
    ui_dir: str | None = None

    # quiet by default; tests and the CLI configure logging explicitly
    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, body: bytes, content_type: str):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        if self.ui_origin:
            self.send_header("Access-Control-Allow-Origin", self.ui_origin)
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, doc: dict):
        self._send(status, json.dumps(doc).encode("utf-8"), "application/json; charset=utf-8")

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        try:
            doc = json.loads(self._read_body() or b"{}")
        except json.JSONDecodeError as exc:
            raise ApiError(400, f"request body is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ApiError(400, "request body must be a JSON object")
        return doc

    def do_OPTIONS(self):
        self._send(204, b"", "text/plain")

    def do_GET(self):
        try:
            if self.path == "/api/models":
                self._send_json(200, self.service.models_info())
            elif self.path.startswith("/api/images/"):
                image_id = self.path.rsplit("/", 1)[-1]
                self._send(200, self.service.image_bytes(image_id), "image/png")
            elif self.ui_dir:
                self._serve_static()
            else:
                raise ApiError(404, f"no route for {self.path}")
        except ApiError as exc:
            self._send_json(exc.status, {"error": exc.message})

    def do_POST(self):
        try:
            if self.path == "/api/images":
                self._send_json(200, self.service.upload(self._read_body()))
                return
            doc = self._json_body()
            if self.path == "/api/detect":
                self._send_json(200, self.service.detect(_require_id(doc)))
            elif self.path == "/api/classify":
                self._send_json(
                    200,
                    self.service.classify(
                        _require_id(doc), doc.get("box"), doc.get("model", "ripeness")
                    ),
                )
            elif self.path == "/api/grade":
                self._send_json(
                    200, self.service.grade(_require_id(doc), bool(doc.get("force_disease", False)))
                )
            else:
                raise ApiError(404, f"no route for {self.path}")
        except ApiError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except Exception as exc:  # noqa: BLE001 - surface as a 500, keep serving
            self._send_json(500, {"error": f"internal error: {exc}"})

    def _serve_static(self):
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        base = os.path.realpath(self.ui_dir)
        full = os.path.realpath(os.path.join(base, rel))
        if not full.startswith(base + os.sep) and full != base:
            raise ApiError(404, "not found")
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.isfile(full):
            raise ApiError(404, f"no file {rel!r}")
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as fh:
            self._send(200, fh.read(), ctype)


def _require_id(doc: dict) -> str:
    image_id = doc.get("image_id")
    if not image_id:
        raise ApiError(400, "missing image_id")
    return str(image_id)


def create_server(
    service: ApiService,
    port: int = 8080,
    host: str = "127.0.0.1",
    ui_origin: str | None = None,
    ui_dir: str | None = None,
) -> ThreadingHTTPServer:
    handler = type(
        "BoundHandler", (_Handler,), {"service": service, "ui_origin": ui_origin, "ui_dir": ui_dir}
    )
    return ThreadingHTTPServer((host, port), handler)


def serve_forever_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
