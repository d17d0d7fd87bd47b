"""Command-line workflows: prepare, train, evaluate, grade, serve.

Exit codes: 0 success, 1 usage error (synopsis on stderr), 2 runtime error.
Configuration precedence is flags, then FRUITGRADER_* environment variables,
then defaults (port 8080, models directory ./models).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import cascade as cascade_mod
from . import dataset, imaging, metrics, nn
from . import pipeline as pipeline_mod
from . import server as server_mod

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080
DEFAULT_MODELS_DIR = "./models"

ARCH_BUILDERS = {
    "mini-resnet": (nn.build_mini_resnet, (3, 64, 64)),
    "mini-plain": (nn.build_mini_plain, (3, 64, 64)),
    "resnet18": (nn.build_resnet18, (3, 224, 224)),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fruitgrader", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    prep = sub.add_parser("prepare", help="split a dataset and write a manifest")
    prep.add_argument("--root", help="folder-per-class tree (classification)")
    prep.add_argument("--csv", help="detection CSV")
    prep.add_argument("--images", help="image directory for --csv")
    prep.add_argument("--fractions", default="0.7,0.3,0")
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--out", required=True)

    tc = sub.add_parser("train-classifier", help="train a ripeness/disease classifier")
    tc.add_argument("--data", required=True, help="folder-per-class tree")
    tc.add_argument("--arch", choices=sorted(ARCH_BUILDERS), default="mini-resnet")
    tc.add_argument("--classes", type=int, required=True)
    tc.add_argument("--lr", type=float, default=0.001)
    tc.add_argument("--batch", type=int, default=32)
    tc.add_argument("--epochs", type=int, default=10)
    tc.add_argument("--drop-period", type=int, default=0, help="0 disables the schedule")
    tc.add_argument("--drop-factor", type=float, default=0.1)
    tc.add_argument("--l2", type=float, default=0.0)
    tc.add_argument("--momentum", type=float, default=0.9)
    tc.add_argument("--balance", type=int, default=0, help="images per class (0 = all)")
    tc.add_argument("--valid-frac", type=float, default=0.3)
    tc.add_argument("--input-size", type=int, default=0, help="0 = architecture default")
    tc.add_argument("--seed", type=int, default=0)
    tc.add_argument("--out", required=True, help="output network container")
    tc.add_argument("--history", help="write per-epoch CSV here")

    td = sub.add_parser("train-detector", help="train the cascade detector")
    td.add_argument("--positives", help="directory of cropped positive images")
    td.add_argument("--negatives", required=True, help="directory of negative images")
    td.add_argument("--csv", help="detection CSV to extract positives from")
    td.add_argument("--images", help="image directory for --csv")
    td.add_argument("--class-filter", default="mango")
    td.add_argument("--far", type=float, default=0.05)
    td.add_argument("--stages", type=int, default=10)
    td.add_argument("--window", default="auto", help="'auto' or WxH, e.g. 24x24")
    td.add_argument("--feature-budget", type=int, default=5000)
    td.add_argument("--seed", type=int, default=0)
    td.add_argument("--out", required=True, help="output detector JSON")

    ev = sub.add_parser("evaluate", help="confusion matrix / detection PR report")
    ev.add_argument("--data", help="folder-per-class tree (classification)")
    ev.add_argument("--csv", help="detection CSV")
    ev.add_argument("--images", help="image directory for --csv")
    ev.add_argument("--model", help="network container or detector JSON")
    ev.add_argument("--arch", choices=sorted(ARCH_BUILDERS))
    ev.add_argument("--pretrained", help="network container with externally trained weights")
    ev.add_argument("--iou", type=float, default=0.5)
    ev.add_argument("--fractions", default="0.7,0.3,0")
    ev.add_argument("--split", choices=["train", "valid", "test", "all"], default="valid")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--format", choices=["text", "csv", "json"], default="text")
    ev.add_argument("--out", help="write the report here instead of stdout")

    gr = sub.add_parser("grade", help="grade one image with a saved pipeline")
    gr.add_argument("--pipeline", help="pipeline container (.fgpm)")
    gr.add_argument("--models", help="models directory to assemble from")
    gr.add_argument("--image", required=True)
    gr.add_argument("--force-disease", action="store_true")
    gr.add_argument("--out", help="write the JSON report here instead of stdout")

    bu = sub.add_parser("bundle", help="bundle detector + classifiers into one container")
    bu.add_argument("--detector", required=True, help="detector JSON")
    bu.add_argument("--ripeness", required=True, help="ripeness network container")
    bu.add_argument("--disease", required=True, help="disease network container")
    bu.add_argument("--trigger", default="bad mango", help="comma-separated trigger labels")
    bu.add_argument("--out", required=True)

    sv = sub.add_parser("serve", help="run the HTTP API for the operator UI")
    sv.add_argument("--pipeline", help="pipeline container (.fgpm)")
    sv.add_argument("--models", help="models directory (default from FRUITGRADER_MODELS)")
    sv.add_argument("--port", type=int, default=0, help="default from FRUITGRADER_PORT or 8080")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--store", default="./image-store")
    sv.add_argument("--ui-origin", help="CORS origin allowed to call the API")
    sv.add_argument("--ui-dir", help="serve these static files at /")

    gc = sub.add_parser("gc", help="prune the image store")
    gc.add_argument("--store", default="./image-store")
    gc.add_argument("--keep-hours", type=float, default=0.0)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    return {
        "prepare": _cmd_prepare,
        "train-classifier": _cmd_train_classifier,
        "train-detector": _cmd_train_detector,
        "evaluate": _cmd_evaluate,
        "grade": _cmd_grade,
        "bundle": _cmd_bundle,
        "serve": _cmd_serve,
        "gc": _cmd_gc,
    }[args.command](args)


def _parse_fractions(text: str):
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"bad fractions {text!r}") from None
    if len(parts) != 3:
        raise UsageError("fractions must be three comma-separated numbers")
    return parts


def _load_images(samples) -> dict:
    images = {}
    for s in samples:
        with open(s.image_path, "rb") as fh:
            images[s.image_path] = imaging.decode_image(fh.read())
    return images


def _cmd_prepare(args) -> int:
    fractions = _parse_fractions(args.fractions)
    if args.root:
        samples, _ = dataset.load_classification_tree(args.root)
    elif args.csv:
        if not args.images:
            raise UsageError("--csv requires --images")
        samples = dataset.load_detection_csv(args.csv, args.images)
    else:
        raise UsageError("prepare needs --root or --csv")
    split = dataset.split_dataset(samples, fractions, args.seed)
    dataset.save_split_manifest(split, args.out)
    print(
        f"wrote {args.out}: {len(split.train)} train / {len(split.valid)} valid / "
        f"{len(split.test)} test"
    )
    return 0


def _default_input(arch: str, size: int):
    builder, default_shape = ARCH_BUILDERS[arch]
    if size:
        return builder, (3, size, size)
    return builder, default_shape


def _cmd_train_classifier(args) -> int:
    samples, class_names = dataset.load_classification_tree(args.data)
    if len(class_names) != args.classes:
        raise UsageError(
            f"--classes {args.classes} but {args.data} has {len(class_names)} class dirs"
        )
    if args.balance:
        samples = dataset.balanced_subsample(samples, args.balance, args.seed)
    split = dataset.split_dataset(samples, (1.0 - args.valid_frac, args.valid_frac, 0.0), args.seed)

    builder, input_shape = _default_input(args.arch, args.input_size)
    spec = builder(input_shape, args.classes)
    schedule = None
    if args.drop_period:
        schedule = nn.PiecewiseSchedule(args.drop_period, args.drop_factor)
    config = nn.TrainConfig(
        initial_learn_rate=args.lr,
        momentum=args.momentum,
        mini_batch_size=args.batch,
        max_epochs=args.epochs,
        schedule=schedule,
        l2_regularization=args.l2,
        shuffle_seed=args.seed,
    )

    def pairs(part):
        out = []
        for s in part:
            with open(s.image_path, "rb") as fh:
                img = imaging.decode_image(fh.read())
            out.append((imaging.resize_bilinear(img, input_shape[2], input_shape[1]), s.class_id))
        return out

    log.info("training %s on %d samples (%d valid)", args.arch, len(split.train), len(split.valid))
    net, history = nn.train_classifier(
        pairs(split.train), pairs(split.valid), spec, config,
        class_names=class_names, seed=args.seed,
    )
    pipeline_mod.save_network(net, args.out)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write(nn.history_to_csv(history))
    last = history[-1]
    print(
        f"trained {args.arch}: train acc {last.train_acc:.3f}, "
        f"valid acc {last.valid_acc if last.valid_acc is not None else float('nan'):.3f}; "
        f"saved to {args.out}"
    )
    return 0


def _dir_images(path: str):
    files = sorted(
        os.path.join(path, f) for f in os.listdir(path)
        if f.lower().endswith(dataset.IMAGE_EXTENSIONS)
    )
    out = []
    for f in files:
        with open(f, "rb") as fh:
            out.append(imaging.decode_image(fh.read()))
    return out


def _cmd_train_detector(args) -> int:
    if args.positives:
        positives = _dir_images(args.positives)
    elif args.csv:
        if not args.images:
            raise UsageError("--csv requires --images")
        samples = dataset.load_detection_csv(args.csv, args.images)
        images = _load_images(samples)
        window = (24, 24) if args.window == "auto" else _parse_window(args.window)
        positives = dataset.extract_positive_windows(samples, images, args.class_filter, window)
    else:
        raise UsageError("train-detector needs --positives or --csv")
    negatives = _dir_images(args.negatives)
    config = cascade_mod.CascadeTrainConfig(
        false_alarm_rate=args.far,
        num_cascade_stages=args.stages,
        object_training_size="auto" if args.window == "auto" else _parse_window(args.window),
        feature_budget=args.feature_budget,
        seed=args.seed,
    )
    model = cascade_mod.train_cascade(positives, negatives, config)
    with open(args.out, "w") as fh:
        json.dump(cascade_mod.cascade_to_json(model), fh)
    fars = [f"{st.trained_far:.3f}" for st in model.stages]
    print(
        f"trained cascade: {len(model.stages)} stages, window "
        f"{model.window_w}x{model.window_h}, per-stage FAR [{', '.join(fars)}]; "
        f"saved to {args.out}"
    )
    return 0


def _parse_window(text: str):
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError:
        raise UsageError(f"bad window {text!r}, expected WxH") from None


def _cmd_evaluate(args) -> int:
    if args.data:
        return _evaluate_classifier(args)
    if args.csv:
        return _evaluate_detector(args)
    raise UsageError("evaluate needs --data (classifier) or --csv (detector)")


def _evaluate_classifier(args) -> int:
    model_path = args.pretrained or args.model
    if not model_path:
        raise UsageError("evaluate --data needs --model or --pretrained")
    net = pipeline_mod.load_network(model_path)
    if args.arch and net.spec.name != args.arch:
        raise UsageError(f"--arch {args.arch} but container holds {net.spec.name!r}")
    samples, class_names = dataset.load_classification_tree(args.data)
    if len(class_names) != net.num_classes:
        raise UsageError(
            f"dataset has {len(class_names)} classes, model head is {net.num_classes}"
        )
    if args.split == "all":
        part = samples
    else:
        split = dataset.split_dataset(samples, _parse_fractions(args.fractions), args.seed)
        part = getattr(split, args.split)
    truths, preds = [], []
    c, h, w = net.spec.input_shape
    for s in part:
        with open(s.image_path, "rb") as fh:
            img = imaging.decode_image(fh.read())
        pred = nn.predict(net, imaging.resize_bilinear(img, w, h))
        truths.append(s.class_id)
        preds.append(net.class_names.index(pred.label))
    cm = metrics.confusion_matrix(truths, preds, net.num_classes, class_names)
    report = {
        "text": metrics.report_text,
        "csv": metrics.report_csv,
        "json": metrics.report_json,
    }[args.format](cm)
    _emit(report, args.out)
    return 0


def _evaluate_detector(args) -> int:
    if not args.images:
        raise UsageError("--csv requires --images")
    if not args.model:
        raise UsageError("evaluate --csv needs --model (detector JSON)")
    with open(args.model) as fh:
        model = cascade_mod.cascade_from_json(json.load(fh))
    samples = dataset.load_detection_csv(args.csv, args.images)
    images = _load_images(samples)
    dets, gts = [], []
    for s in samples:
        dets.append(cascade_mod.detect(model, images[s.image_path]))
        gts.append([box for _, box in s.objects])
    pr = metrics.detection_pr(dets, gts, args.iou)
    report = json.dumps(
        {"iou_threshold": args.iou, "precision": pr.precision, "recall": pr.recall,
         "images": len(samples), "matches": len(pr.matches)},
        indent=2,
    )
    _emit(report + "\n", args.out)
    return 0


def _emit(text: str, out_path: str | None):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_pipeline_from_args(pipeline_path, models_dir) -> pipeline_mod.PipelineModel | None:
    if pipeline_path:
        return pipeline_mod.load_pipeline(pipeline_path)
    models_dir = models_dir or os.environ.get("FRUITGRADER_MODELS") or DEFAULT_MODELS_DIR
    bundle = os.path.join(models_dir, "pipeline.fgpm")
    if os.path.exists(bundle):
        return pipeline_mod.load_pipeline(bundle)
    detector = os.path.join(models_dir, "detector.json")
    ripeness = os.path.join(models_dir, "ripeness.fgnc")
    disease = os.path.join(models_dir, "disease.fgnc")
    if all(os.path.exists(p) for p in (detector, ripeness, disease)):
        with open(detector) as fh:
            det = cascade_mod.cascade_from_json(json.load(fh))
        return pipeline_mod.PipelineModel(
            det, pipeline_mod.load_network(ripeness), pipeline_mod.load_network(disease)
        )
    return None


def _cmd_grade(args) -> int:
    model = _load_pipeline_from_args(args.pipeline, args.models)
    if model is None:
        raise UsageError("no pipeline found: pass --pipeline or a --models directory")
    with open(args.image, "rb") as fh:
        image = imaging.decode_image(fh.read())
    service_like = pipeline_mod.grade_image(model, image, force_disease=args.force_disease)
    doc = {
        "image": args.image,
        "detections": [
            {
                "box": {"x": r.box.x, "y": r.box.y, "w": r.box.w, "h": r.box.h},
                "score": r.detection_score,
                "ripeness": {
                    "label": r.ripeness.label,
                    "probs": dict(zip(model.ripeness_classes, r.ripeness.probs)),
                },
                **(
                    {
                        "disease": {
                            "label": r.disease.label,
                            "probs": dict(zip(model.disease_classes, r.disease.probs)),
                        }
                    }
                    if r.disease is not None
                    else {}
                ),
            }
            for r in service_like
        ],
    }
    _emit(json.dumps(doc, indent=2) + "\n", args.out)
    return 0


def _cmd_bundle(args) -> int:
    with open(args.detector) as fh:
        detector = cascade_mod.cascade_from_json(json.load(fh))
    ripeness = pipeline_mod.load_network(args.ripeness)
    try:
        model = pipeline_mod.PipelineModel(
            detector,
            ripeness,
            pipeline_mod.load_network(args.disease),
            tuple(t.strip() for t in args.trigger.split(",")),
        )
    except ValueError as exc:
        raise UsageError(
            f"{exc}; the ripeness classes are {ripeness.class_names}, "
            "pass a matching --trigger"
        ) from exc
    pipeline_mod.save_pipeline(model, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args) -> int:
    port = args.port or int(os.environ.get("FRUITGRADER_PORT") or DEFAULT_PORT)
    model = _load_pipeline_from_args(args.pipeline, args.models)
    if model is None:
        log.warning("serving without a model: inference endpoints will answer 503")
    service = server_mod.ApiService(args.store, model)
    httpd = server_mod.create_server(
        service, port=port, host=args.host, ui_origin=args.ui_origin, ui_dir=args.ui_dir
    )
    print(f"listening on http://{args.host}:{port}/ (store: {args.store})")
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()
    return 0


def _cmd_gc(args) -> int:
    service = server_mod.ApiService(args.store)
    removed = service.gc(args.keep_hours)
    print(f"removed {removed} stored images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
