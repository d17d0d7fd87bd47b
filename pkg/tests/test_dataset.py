import os

import numpy as np
import pytest

from fruitgrader import dataset, imaging
from fruitgrader.dataset import (
    AugmentationSpec,
    BadFractionsError,
    BoxOutOfBoundsError,
    EmptyClassError,
    EmptyDatasetError,
    ExhaustedNegativesError,
    InsufficientClassCountError,
    MissingColumnError,
    NonNumericCoordinateError,
    NoPositivesError,
)
from fruitgrader.imaging import BBox

from conftest import rand_image_8bit


def write_tree(root, classes, per_class=2, size=8):
    rng = np.random.default_rng(0)
    for name in classes:
        d = os.path.join(root, name)
        os.makedirs(d)
        for i in range(per_class):
            img = rand_image_8bit(rng, size, size, 3)
            with open(os.path.join(d, f"img_{i}.png"), "wb") as fh:
                fh.write(imaging.encode_png(img))


class TestClassificationTree:
    def test_mango_classes_sorted(self, tmp_path):
        write_tree(tmp_path, ["ripe_mango", "bad_mango", "raw_mango"])
        samples, names = dataset.load_classification_tree(str(tmp_path))
        assert names == ["bad_mango", "raw_mango", "ripe_mango"]
        ids = {s.class_name: s.class_id for s in samples}
        assert ids == {"bad_mango": 0, "raw_mango": 1, "ripe_mango": 2}

    def test_counts(self, tmp_path):
        write_tree(tmp_path, ["a", "b", "c"], per_class=2)
        samples, _ = dataset.load_classification_tree(str(tmp_path))
        assert len(samples) == 6

    def test_empty_class_dir(self, tmp_path):
        write_tree(tmp_path, ["a"])
        os.makedirs(tmp_path / "empty_class")
        with pytest.raises(EmptyClassError, match="empty_class"):
            dataset.load_classification_tree(str(tmp_path))

    def test_no_classes(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            dataset.load_classification_tree(str(tmp_path))

    def test_unreadable(self, tmp_path):
        with pytest.raises(dataset.UnreadableDirectoryError):
            dataset.load_classification_tree(str(tmp_path / "nope"))


CSV_HEADER = "filename,width,height,class,xmin,ymin,xmax,ymax"


class TestDetectionCsv:
    def write(self, tmp_path, rows):
        path = tmp_path / "ann.csv"
        path.write_text("\n".join([CSV_HEADER] + rows) + "\n")
        return str(path)

    def test_single_row(self, tmp_path):
        path = self.write(tmp_path, ["a.png,640,640,mango,100,100,300,300"])
        samples = dataset.load_detection_csv(path, str(tmp_path))
        assert len(samples) == 1
        (cls, box), = samples[0].objects
        assert cls == "mango"
        assert (box.x, box.y, box.w, box.h) == (100, 100, 200, 200)

    def test_rows_merge_by_filename(self, tmp_path):
        path = self.write(tmp_path, [
            "a.png,640,640,mango,10,10,50,50",
            "a.png,640,640,banana,100,100,200,150",
        ])
        samples = dataset.load_detection_csv(path, str(tmp_path))
        assert len(samples) == 1
        assert len(samples[0].objects) == 2

    def test_xmax_before_xmin(self, tmp_path):
        path = self.write(tmp_path, ["a.png,640,640,mango,300,100,100,300"])
        with pytest.raises(BoxOutOfBoundsError) as err:
            dataset.load_detection_csv(path, str(tmp_path))
        assert err.value.row == 2

    def test_box_outside_image(self, tmp_path):
        path = self.write(tmp_path, ["a.png,100,100,mango,50,50,150,90"])
        with pytest.raises(BoxOutOfBoundsError):
            dataset.load_detection_csv(path, str(tmp_path))

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("filename,width,height,class,xmin,ymin,xmax\n")
        with pytest.raises(MissingColumnError):
            dataset.load_detection_csv(str(path), str(tmp_path))

    def test_non_numeric(self, tmp_path):
        path = self.write(tmp_path, ["a.png,640,640,mango,ten,10,50,50"])
        with pytest.raises(NonNumericCoordinateError):
            dataset.load_detection_csv(path, str(tmp_path))

    def test_write_then_load_is_identity(self, tmp_path):
        rows = [
            "a.png,640,640,mango,100,100,300,300",
            "a.png,640,640,mango,5,7,20,22",
            "b.png,320,240,banana,1,2,30,40",
        ]
        path = self.write(tmp_path, rows)
        samples = dataset.load_detection_csv(path, str(tmp_path))
        out = tmp_path / "out.csv"
        dataset.write_detection_csv(samples, str(out))
        again = dataset.load_detection_csv(str(out), str(tmp_path))
        assert again == samples


def make_samples(per_class):
    out = []
    for cid, (name, n) in enumerate(per_class.items()):
        for i in range(n):
            out.append(dataset.ClassificationSample(f"{name}/{i}.png", cid, name))
    return out


class TestSplit:
    def test_all_train(self):
        samples = make_samples({"a": 10, "b": 10})
        split = dataset.split_dataset(samples, (1.0, 0.0, 0.0), seed=1)
        assert len(split.train) == 20 and not split.valid and not split.test

    def test_stratified_70_30(self):
        samples = make_samples({"a": 50, "b": 50})
        split = dataset.split_dataset(samples, (0.7, 0.3, 0.0), seed=2)
        for part, want in ((split.train, 35), (split.valid, 15)):
            by_class = {}
            for s in part:
                by_class[s.class_name] = by_class.get(s.class_name, 0) + 1
            assert by_class == {"a": want, "b": want}

    def test_same_seed_identical(self):
        samples = make_samples({"a": 13, "b": 7, "c": 21})
        one = dataset.split_dataset(samples, (0.6, 0.2, 0.2), seed=9)
        two = dataset.split_dataset(samples, (0.6, 0.2, 0.2), seed=9)
        assert one == two

    def test_partition_no_overlap(self):
        samples = make_samples({"a": 11, "b": 17, "c": 5})
        split = dataset.split_dataset(samples, (0.5, 0.25, 0.25), seed=3)
        paths = [s.image_path for part in (split.train, split.valid, split.test) for s in part]
        assert len(paths) == len(samples)
        assert len(set(paths)) == len(samples)

    def test_bad_fractions(self):
        with pytest.raises(BadFractionsError):
            dataset.split_dataset(make_samples({"a": 4}), (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(BadFractionsError):
            dataset.split_dataset(make_samples({"a": 4}), (0.5, 0.5), seed=0)

    def test_manifest_roundtrip(self, tmp_path):
        samples = make_samples({"a": 6, "b": 6})
        split = dataset.split_dataset(samples, (0.5, 0.5, 0.0), seed=4)
        path = tmp_path / "split.json"
        dataset.save_split_manifest(split, str(path))
        loaded = dataset.load_split_manifest(str(path), samples)
        assert loaded == split


class TestBalancedSubsample:
    def test_counts_750(self):
        samples = make_samples({"a": 800, "b": 900, "c": 751})
        out = dataset.balanced_subsample(samples, 750, seed=0)
        assert len(out) == 2250
        for name in ("a", "b", "c"):
            assert sum(1 for s in out if s.class_name == name) == 750

    def test_counts_300_five_classes(self):
        samples = make_samples({c: 320 for c in "abcde"})
        out = dataset.balanced_subsample(samples, 300, seed=0)
        assert len(out) == 1500

    def test_full_class_is_permutation(self):
        samples = make_samples({"a": 12, "b": 12})
        out = dataset.balanced_subsample(samples, 12, seed=5)
        assert sorted(s.image_path for s in out) == sorted(s.image_path for s in samples)

    def test_insufficient(self):
        samples = make_samples({"a": 10, "b": 3})
        with pytest.raises(InsufficientClassCountError) as err:
            dataset.balanced_subsample(samples, 5, seed=0)
        assert err.value.class_name == "b"
        assert (err.value.have, err.value.want) == (3, 5)

    def test_deterministic(self):
        samples = make_samples({"a": 30, "b": 30})
        assert dataset.balanced_subsample(samples, 10, 7) == dataset.balanced_subsample(samples, 10, 7)


class TestResizeWithBoxes:
    def sample(self, w=640, h=640):
        return dataset.DetectionSample(
            "x.png", w, h, (("mango", BBox(64, 64, 128, 128)),)
        )

    def test_same_size_unchanged(self):
        rng = np.random.default_rng(0)
        img = rand_image_8bit(rng, 16, 16, 1)
        s = dataset.DetectionSample("x.png", 16, 16, (("mango", BBox(2, 3, 4, 5)),))
        _, out = dataset.resize_with_boxes(s, img, 16, 16)
        assert out.objects[0][1] == BBox(2, 3, 4, 5)

    def test_640_to_224_hand_scale(self):
        rng = np.random.default_rng(1)
        img = rand_image_8bit(rng, 640, 640, 1)
        _, out = dataset.resize_with_boxes(self.sample(), img, 224, 224)
        box = out.objects[0][1]
        assert (box.x, box.y, box.w, box.h) == pytest.approx((22.4, 22.4, 44.8, 44.8))

    def test_per_axis_scaling(self):
        rng = np.random.default_rng(2)
        img = rand_image_8bit(rng, 640, 320, 1)
        s = dataset.DetectionSample("x.png", 640, 320, (("mango", BBox(100, 60, 200, 100)),))
        _, out = dataset.resize_with_boxes(s, img, 320, 320)
        box = out.objects[0][1]
        assert (box.x, box.w) == (50, 100)
        assert (box.y, box.h) == (60, 100)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        img = rand_image_8bit(rng, 32, 32, 1)
        with pytest.raises(dataset.DimensionMismatchError):
            dataset.resize_with_boxes(self.sample(), img, 224, 224)

    def test_roundtrip_within_half_pixel(self):
        rng = np.random.default_rng(4)
        img640 = rand_image_8bit(rng, 640, 640, 1)
        boxes = []
        for _ in range(50):
            x = rng.uniform(0, 500)
            y = rng.uniform(0, 500)
            boxes.append(("mango", BBox(x, y, rng.uniform(5, 640 - x), rng.uniform(5, 640 - y))))
        sample = dataset.DetectionSample("x.png", 640, 640, tuple(boxes))
        small_img, small = dataset.resize_with_boxes(sample, img640, 224, 224)
        _, back = dataset.resize_with_boxes(small, small_img, 640, 640)
        for (_, orig), (_, rt) in zip(sample.objects, back.objects):
            for a, b in ((rt.x, orig.x), (rt.y, orig.y), (rt.w, orig.w), (rt.h, orig.h)):
                assert abs(a - b) < 0.5


class TestAugment:
    def identity_spec(self):
        return AugmentationSpec()

    def test_identity_spec_bit_exact(self):
        rng = np.random.default_rng(5)
        img = rand_image_8bit(rng, 12, 12, 3)
        out = dataset.augment(img, self.identity_spec(), rng_seed=3)
        assert np.array_equal(out.data, img.data)

    def test_ripeness_recipe_preserves_dims(self):
        rng = np.random.default_rng(6)
        img = rand_image_8bit(rng, 20, 14, 3)
        for seed in range(5):
            out = dataset.augment(img, dataset.RIPENESS_AUGMENTATION, rng_seed=seed)
            assert (out.width, out.height, out.channels) == (20, 14, 3)

    def test_disease_recipe_preserves_dims(self):
        rng = np.random.default_rng(7)
        img = rand_image_8bit(rng, 16, 16, 3)
        for seed in range(5):
            out = dataset.augment(img, dataset.DISEASE_AUGMENTATION, rng_seed=seed)
            assert (out.width, out.height) == (16, 16)

    def test_same_seed_identical(self):
        rng = np.random.default_rng(8)
        img = rand_image_8bit(rng, 16, 16, 3)
        a = dataset.augment(img, dataset.RIPENESS_AUGMENTATION, rng_seed=42)
        b = dataset.augment(img, dataset.RIPENESS_AUGMENTATION, rng_seed=42)
        assert np.array_equal(a.data, b.data)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(flip_h_prob=1.5)
        with pytest.raises(ValueError):
            AugmentationSpec(rotation_deg=(10, -10))
        with pytest.raises(ValueError):
            AugmentationSpec(crop_frac=(0.0, 1.0))


class TestWindows:
    def detection_setup(self, rng, n_boxes=2):
        img = rand_image_8bit(rng, 64, 48, 3)
        boxes = tuple(("mango", BBox(4 + 20 * i, 6, 16, 12)) for i in range(n_boxes))
        sample = dataset.DetectionSample("img.png", 64, 48, boxes)
        return [sample], {"img.png": img}

    def test_positive_window_count_and_size(self):
        rng = np.random.default_rng(9)
        samples, images = self.detection_setup(rng, n_boxes=2)
        wins = dataset.extract_positive_windows(samples, images, "mango", (24, 24))
        assert len(wins) == 2
        assert all((w.width, w.height, w.channels) == (24, 24, 1) for w in wins)

    def test_aspect_distortion_by_design(self):
        rng = np.random.default_rng(10)
        img = rand_image_8bit(rng, 220, 120, 3)
        sample = dataset.DetectionSample("i.png", 220, 120, (("mango", BBox(0, 0, 200, 100)),))
        wins = dataset.extract_positive_windows([sample], {"i.png": img}, "mango", (24, 24))
        assert (wins[0].width, wins[0].height) == (24, 24)

    def test_no_positives(self):
        rng = np.random.default_rng(11)
        samples, images = self.detection_setup(rng)
        with pytest.raises(NoPositivesError):
            dataset.extract_positive_windows(samples, images, "banana", (24, 24))

    def test_negatives_no_boxes_any_window(self):
        rng = np.random.default_rng(12)
        img = rand_image_8bit(rng, 64, 48, 3)
        samples = [dataset.DetectionSample("i.png", 64, 48, ())]
        wins = dataset.sample_negative_windows(samples, {"i.png": img}, "mango", (16, 16), 5, 0, 0.0)
        assert len(wins) == 5

    def test_fully_boxed_exhausts(self):
        rng = np.random.default_rng(13)
        img = rand_image_8bit(rng, 32, 32, 3)
        samples = [dataset.DetectionSample("i.png", 32, 32, (("mango", BBox(0, 0, 32, 32)),))]
        with pytest.raises(ExhaustedNegativesError):
            dataset.sample_negative_windows(samples, {"i.png": img}, "mango", (16, 16), 3, 0, 0.0)

    def test_negatives_deterministic(self):
        rng = np.random.default_rng(14)
        samples, images = self.detection_setup(rng)
        a = dataset.sample_negative_windows(samples, images, "mango", (16, 16), 8, 99, 0.2)
        b = dataset.sample_negative_windows(samples, images, "mango", (16, 16), 8, 99, 0.2)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_negatives_found_around_labeled_box(self):
        # a mid-size box leaves plenty of low-overlap room to sample from
        rng = np.random.default_rng(15)
        img = rand_image_8bit(rng, 64, 64, 3)
        box = BBox(10, 10, 30, 30)
        samples = [dataset.DetectionSample("i.png", 64, 64, (("mango", box),))]
        wins = dataset.sample_negative_windows(samples, {"i.png": img}, "mango", (16, 16), 10, 1, 0.3)
        assert len(wins) == 10
