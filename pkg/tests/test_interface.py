import hashlib
import json
import os
import urllib.error
import urllib.request

import numpy as np
import pytest

from fruitgrader import cli, imaging, pipeline, server
from fruitgrader.server import ApiError, ApiService

from conftest import grading_scene, rand_image_8bit


@pytest.fixture
def service(stub_pipeline, tmp_path):
    return ApiService(str(tmp_path / "store"), stub_pipeline)


def png_bytes(seed=0, size=64):
    img, _ = grading_scene(np.random.default_rng(seed), size)
    return imaging.encode_png(img)


class TestUpload:
    def test_idempotent_content_addressing(self, service):
        body = png_bytes(0)
        first = service.upload(body)
        second = service.upload(body)
        assert first == second
        assert first["image_id"] == hashlib.sha256(body).hexdigest()
        assert len(first["image_id"]) == 64

    def test_empty_body_415(self, service):
        with pytest.raises(ApiError) as err:
            service.upload(b"")
        assert err.value.status == 415

    def test_not_png_415(self, service):
        with pytest.raises(ApiError) as err:
            service.upload(b"P6\n1 1\n255\n\x00\x00\x00")
        assert err.value.status == 415

    def test_oversize_413(self, stub_pipeline, tmp_path):
        small = ApiService(str(tmp_path / "s"), stub_pipeline, max_upload=100)
        with pytest.raises(ApiError) as err:
            small.upload(png_bytes(1))
        assert err.value.status == 413

    def test_image_roundtrip(self, service):
        body = png_bytes(2)
        image_id = service.upload(body)["image_id"]
        assert service.image_bytes(image_id) == body

    def test_unknown_id_404(self, service):
        with pytest.raises(ApiError) as err:
            service.image_bytes("ab" * 32)
        assert err.value.status == 404


class TestEndpoints:
    def test_detect_blank_image_empty(self, service):
        flat = imaging.Image.from_array(np.full((64, 64, 3), 0.5))
        image_id = service.upload(imaging.encode_png(flat))["image_id"]
        assert service.detect(image_id)["boxes"] == []

    def test_detect_planted_object(self, service):
        image_id = service.upload(png_bytes(3))["image_id"]
        boxes = service.detect(image_id)["boxes"]
        assert boxes
        assert all(set(b["box"]) == {"x", "y", "w", "h"} for b in boxes)

    def test_detect_no_model_503(self, tmp_path):
        svc = ApiService(str(tmp_path / "s"), None)
        image_id = svc.upload(png_bytes(4))["image_id"]
        with pytest.raises(ApiError) as err:
            svc.detect(image_id)
        assert err.value.status == 503

    def test_classify_probs_sum_to_one(self, service):
        image_id = service.upload(png_bytes(5))["image_id"]
        for model, k in (("ripeness", 3), ("disease", 5)):
            doc = service.classify(image_id, None, model)
            assert len(doc["probs"]) == k
            assert sum(doc["probs"].values()) == pytest.approx(1.0, abs=1e-5)
            assert doc["label"] in doc["probs"]

    def test_classify_box_outside_400(self, service):
        image_id = service.upload(png_bytes(6))["image_id"]
        with pytest.raises(ApiError) as err:
            service.classify(image_id, {"x": 50, "y": 50, "w": 100, "h": 100}, "ripeness")
        assert err.value.status == 400

    def test_classify_bad_model_400(self, service):
        image_id = service.upload(png_bytes(7))["image_id"]
        with pytest.raises(ApiError) as err:
            service.classify(image_id, None, "maturity")
        assert err.value.status == 400

    def test_grade_schema(self, service):
        image_id = service.upload(png_bytes(8))["image_id"]
        doc = service.grade(image_id)
        assert doc["image_id"] == image_id
        for det in doc["detections"]:
            assert set(det) <= {"box", "score", "ripeness", "disease"}
            assert sum(det["ripeness"]["probs"].values()) == pytest.approx(1.0, abs=1e-5)

    def test_grade_force_disease(self, service):
        image_id = service.upload(png_bytes(9))["image_id"]
        doc = service.grade(image_id, force_disease=True)
        assert doc["detections"]
        assert all("disease" in det for det in doc["detections"])

    def test_grade_equals_detect_plus_classify(self, service, stub_pipeline):
        """Composition oracle: grade must equal detect + classify per box."""
        for seed in range(6):
            image_id = service.upload(png_bytes(20 + seed))["image_id"]
            graded = service.grade(image_id)
            boxes = service.detect(image_id)["boxes"]
            assert len(graded["detections"]) == len(boxes)
            for got, det in zip(graded["detections"], boxes):
                assert got["box"] == det["box"]
                assert got["score"] == det["score"]
                ripeness = service.classify(image_id, det["box"], "ripeness")
                assert got["ripeness"] == ripeness
                if ripeness["label"] in stub_pipeline.disease_trigger:
                    assert got["disease"] == service.classify(image_id, det["box"], "disease")
                else:
                    assert "disease" not in got

    def test_models_info(self, service):
        doc = service.models_info()
        assert doc["loaded"] is True
        assert doc["ripeness_classes"] == pipeline.RIPENESS_CLASSES
        assert doc["disease_classes"] == pipeline.DISEASE_CLASSES

    def test_gc(self, service):
        service.upload(png_bytes(10))
        assert service.gc(keep_hours=0.0) >= 1
        assert service.gc(keep_hours=1.0) == 0


class TestHttpServer:
    @pytest.fixture
    def base_url(self, service):
        httpd = server.create_server(service, port=0)
        server.serve_forever_in_thread(httpd)
        host, port = httpd.server_address
        yield f"http://{host}:{port}"
        httpd.shutdown()
        httpd.server_close()

    def post(self, url, body, content_type="application/json"):
        data = body if isinstance(body, bytes) else json.dumps(body).encode()
        req = urllib.request.Request(url, data=data, headers={"Content-Type": content_type})
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read())

    def test_full_workflow_over_http(self, base_url):
        body = png_bytes(30)
        status, doc = self.post(f"{base_url}/api/images", body, "image/png")
        assert status == 200
        image_id = doc["image_id"]

        with urllib.request.urlopen(f"{base_url}/api/images/{image_id}") as resp:
            assert resp.read() == body

        status, det = self.post(f"{base_url}/api/detect", {"image_id": image_id})
        assert status == 200 and det["boxes"]

        status, cls = self.post(
            f"{base_url}/api/classify",
            {"image_id": image_id, "box": det["boxes"][0]["box"], "model": "ripeness"},
        )
        assert status == 200
        assert sum(cls["probs"].values()) == pytest.approx(1.0, abs=1e-5)

        status, graded = self.post(f"{base_url}/api/grade", {"image_id": image_id})
        assert status == 200
        assert graded["detections"][0]["box"] == det["boxes"][0]["box"]

        with urllib.request.urlopen(f"{base_url}/api/models") as resp:
            assert json.loads(resp.read())["loaded"] is True

    def test_errors_surface_as_json(self, base_url):
        with pytest.raises(urllib.error.HTTPError) as err:
            self.post(f"{base_url}/api/detect", {"image_id": "ff" * 32})
        assert err.value.code == 404
        assert "error" in json.loads(err.value.read())

        with pytest.raises(urllib.error.HTTPError) as err:
            self.post(f"{base_url}/api/images", b"not a png", "image/png")
        assert err.value.code == 415

    def test_cors_header(self, service):
        httpd = server.create_server(service, port=0, ui_origin="http://localhost:5173")
        server.serve_forever_in_thread(httpd)
        host, port = httpd.server_address
        try:
            with urllib.request.urlopen(f"http://{host}:{port}/api/models") as resp:
                assert resp.headers["Access-Control-Allow-Origin"] == "http://localhost:5173"
        finally:
            httpd.shutdown()
            httpd.server_close()

    def test_static_ui_dir(self, service, tmp_path):
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<html>operator</html>")
        httpd = server.create_server(service, port=0, ui_dir=str(ui))
        server.serve_forever_in_thread(httpd)
        host, port = httpd.server_address
        try:
            with urllib.request.urlopen(f"http://{host}:{port}/") as resp:
                assert b"operator" in resp.read()
            with pytest.raises(urllib.error.HTTPError) as err:
                urllib.request.urlopen(f"http://{host}:{port}/../secrets")
            assert err.value.code == 404
        finally:
            httpd.shutdown()
            httpd.server_close()


def write_class_tree(root, per_class=3, size=16):
    rng = np.random.default_rng(0)
    names = ["bad_mango", "raw_mango", "ripe_mango"]
    for name in names:
        d = os.path.join(root, name)
        os.makedirs(d)
        for i in range(per_class):
            img = rand_image_8bit(rng, size, size, 3)
            with open(os.path.join(d, f"{i}.png"), "wb") as fh:
                fh.write(imaging.encode_png(img))
    return names


class TestCli:
    def test_no_arguments_usage_error(self, capsys):
        assert cli.main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert cli.main(["polish"]) == 1

    def test_runtime_error_exit_2(self, capsys, tmp_path):
        assert cli.main(["prepare", "--root", str(tmp_path / "missing"), "--out", "x.json"]) == 2

    def test_prepare_writes_manifest(self, tmp_path, capsys):
        write_class_tree(tmp_path / "data")
        out = tmp_path / "split.json"
        code = cli.main([
            "prepare", "--root", str(tmp_path / "data"), "--out", str(out),
            "--fractions", "0.7,0.3,0", "--seed", "3",
        ])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["seed"] == 3
        assert doc["class_names"] == ["bad_mango", "raw_mango", "ripe_mango"]
        assert len(doc["train"]) + len(doc["valid"]) == 9

    def test_train_classifier_and_evaluate(self, tmp_path, capsys):
        write_class_tree(tmp_path / "data", per_class=4)
        model_path = tmp_path / "net.fgnc"
        history = tmp_path / "history.csv"
        code = cli.main([
            "train-classifier", "--data", str(tmp_path / "data"),
            "--arch", "mini-resnet", "--classes", "3",
            "--lr", "0.001", "--batch", "4", "--epochs", "2",
            "--drop-factor", "0.01", "--drop-period", "1",
            "--input-size", "16", "--seed", "1",
            "--out", str(model_path), "--history", str(history),
        ])
        assert code == 0
        assert model_path.exists()
        lines = history.read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,train_loss,train_acc,valid_acc"
        assert len(lines) == 3

        report = tmp_path / "report.json"
        code = cli.main([
            "evaluate", "--data", str(tmp_path / "data"), "--model", str(model_path),
            "--split", "all", "--format", "json", "--out", str(report),
        ])
        assert code == 0
        doc = json.loads(report.read_text())
        assert doc["class_names"] == ["bad_mango", "raw_mango", "ripe_mango"]
        assert sum(sum(row) for row in doc["counts"]) == 12

    def test_train_classifier_identical_seeds_identical_history(self, tmp_path):
        write_class_tree(tmp_path / "data", per_class=4)
        args = [
            "train-classifier", "--data", str(tmp_path / "data"),
            "--arch", "mini-resnet", "--classes", "3",
            "--lr", "0.01", "--batch", "4", "--epochs", "2",
            "--input-size", "16", "--seed", "7",
        ]
        h1 = tmp_path / "h1.csv"
        h2 = tmp_path / "h2.csv"
        assert cli.main(args + ["--out", str(tmp_path / "a.fgnc"), "--history", str(h1)]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b.fgnc"), "--history", str(h2)]) == 0
        assert h1.read_text() == h2.read_text()

    def test_bundle_and_grade(self, tmp_path, stub_pipeline, capsys):
        from fruitgrader import cascade as cascade_mod

        detector = tmp_path / "detector.json"
        detector.write_text(json.dumps(cascade_mod.cascade_to_json(stub_pipeline.detector)))
        ripeness = tmp_path / "ripeness.fgnc"
        disease = tmp_path / "disease.fgnc"
        pipeline.save_network(stub_pipeline.ripeness_net, str(ripeness))
        pipeline.save_network(stub_pipeline.disease_net, str(disease))
        bundle = tmp_path / "pipeline.fgpm"
        assert cli.main([
            "bundle", "--detector", str(detector), "--ripeness", str(ripeness),
            "--disease", str(disease), "--out", str(bundle),
        ]) == 0

        img, _ = grading_scene(np.random.default_rng(40), 64)
        img_path = tmp_path / "scene.png"
        img_path.write_bytes(imaging.encode_png(img))
        out = tmp_path / "graded.json"
        assert cli.main([
            "grade", "--pipeline", str(bundle), "--image", str(img_path), "--out", str(out),
        ]) == 0
        doc = json.loads(out.read_text())
        assert doc["detections"]
        for det in doc["detections"]:
            assert sum(det["ripeness"]["probs"].values()) == pytest.approx(1.0, abs=1e-5)

    def test_gc_command(self, tmp_path, capsys):
        store = tmp_path / "store"
        store.mkdir()
        (store / ("aa" * 32 + ".png")).write_bytes(b"x")
        assert cli.main(["gc", "--store", str(store)]) == 0
        assert "removed 1" in capsys.readouterr().out
