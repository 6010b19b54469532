import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from spillkit.datasets import (
    CocoDataset,
    SplitManifest,
    YoloRecord,
    coco_to_yolo,
    dedup,
    dhash,
    hamming,
    make_splits,
    parse_coco,
    read_yolo_file,
    serialize_coco,
    write_yolo_file,
    yolo_to_coco,
)
from spillkit.errors import (
    CocoParseError,
    CocoValidationError,
    DegenerateBoxError,
    RangeError,
    SplitCountError,
)


def sample_doc():
    return {
        "images": [{"id": 134, "file_name": "scene.png",
                    "width": 1024, "height": 1024}],
        "annotations": [{"id": 1, "image_id": 134, "category_id": 3,
                         "bbox": [256, 411, 142, 95], "score": 0.97}],
        "categories": [{"id": 3, "name": "chemical-discoloration"}],
    }


class TestParseCoco:
    def test_annotation_record_parses(self):
        ds = parse_coco(json.dumps(sample_doc()).encode())
        assert len(ds.annotations) == 1
        ann = ds.annotations[0]
        assert ann["image_id"] == 134
        assert ann["category_id"] == 3
        assert ann["bbox"] == [256, 411, 142, 95]
        assert ann["score"] == 0.97

    def test_empty_annotations_valid(self):
        doc = sample_doc()
        doc["annotations"] = []
        ds = parse_coco(json.dumps(doc))
        assert ds.annotations == []

    def test_dangling_image_reference(self):
        doc = sample_doc()
        doc["annotations"][0]["image_id"] = 999
        # independent check: the referenced id really is absent
        assert 999 not in {img["id"] for img in doc["images"]}
        with pytest.raises(CocoValidationError) as err:
            parse_coco(json.dumps(doc))
        assert err.value.ids == [999]
        assert "999" in str(err.value)

    def test_dangling_category_reference(self):
        doc = sample_doc()
        doc["annotations"][0]["category_id"] = 42
        with pytest.raises(CocoValidationError) as err:
            parse_coco(json.dumps(doc))
        assert err.value.ids == [42]

    def test_malformed_json_reports_offset(self):
        with pytest.raises(CocoParseError) as err:
            parse_coco(b'{"images": [}')
        assert err.value.offset == 12

    def test_round_trip_is_fixed_point(self):
        doc = sample_doc()
        doc["info"] = {"year": 2025}  # unknown top-level field
        doc["annotations"][0]["extra_flag"] = True
        first = parse_coco(json.dumps(doc))
        text = serialize_coco(first)
        second = parse_coco(text)
        assert serialize_coco(second) == text
        assert second.extra["info"] == {"year": 2025}
        assert second.annotations[0]["extra_flag"] is True

    def test_overflowing_bbox_clamped_with_warning(self):
        doc = sample_doc()
        doc["annotations"][0]["bbox"] = [1000, 1000, 30, 30]
        ds = parse_coco(json.dumps(doc))
        assert len(ds.warnings) == 1
        assert ds.annotations[0]["bbox"] == [1000, 1000, 24, 24]

    def test_zero_extent_annotation_rejected(self):
        doc = sample_doc()
        doc["annotations"][0]["bbox"] = [10, 10, 0, 5]
        with pytest.raises(CocoValidationError):
            parse_coco(json.dumps(doc))


class TestYoloConversion:
    def test_known_conversion(self):
        rec = coco_to_yolo([10, 20, 30, 40], 100, 100)
        assert (rec.cx, rec.cy, rec.w, rec.h) == (0.25, 0.40, 0.30, 0.40)
        # algebraic inverse recovers the input
        assert yolo_to_coco(rec, 100, 100) == pytest.approx([10, 20, 30, 40])

    def test_full_image_bbox(self):
        rec = coco_to_yolo([0, 0, 640, 480], 640, 480)
        assert (rec.cx, rec.cy, rec.w, rec.h) == (0.5, 0.5, 1.0, 1.0)
        assert yolo_to_coco(YoloRecord(0, 0.5, 0.5, 1.0, 1.0), 640, 480) == \
            pytest.approx([0, 0, 640, 480])

    def test_degenerate_bbox_rejected(self):
        with pytest.raises(DegenerateBoxError):
            coco_to_yolo([0, 0, 0, 10], 100, 100)

    def test_out_of_range_record_rejected(self):
        with pytest.raises(RangeError):
            YoloRecord(0, 1.2, 0.5, 0.1, 0.1)

    @given(st.floats(min_value=0, max_value=1000),
           st.floats(min_value=0, max_value=1000),
           st.floats(min_value=0.01, max_value=1000),
           st.floats(min_value=0.01, max_value=1000))
    @settings(max_examples=500)
    def test_round_trip_within_tolerance(self, x, y, w, h):
        image_w, image_h = x + w + 1, y + h + 1
        rec = coco_to_yolo([x, y, w, h], image_w, image_h)
        back = yolo_to_coco(rec, image_w, image_h)
        for got, want, dim in zip(back, [x, y, w, h],
                                  [image_w, image_h, image_w, image_h]):
            assert abs(got - want) <= 1e-6 * dim

    def test_yolo_file_round_trip(self, tmp_path):
        records = [YoloRecord(0, 0.25, 0.4, 0.3, 0.4),
                   YoloRecord(2, 0.5, 0.5, 1.0, 1.0)]
        path = tmp_path / "labels.txt"
        write_yolo_file(records, path)
        lines = path.read_text().splitlines()
        assert lines[0].split()[0] == "0"
        back = read_yolo_file(path)
        assert [r.class_idx for r in back] == [0, 2]
        assert back[0].cx == pytest.approx(0.25)


def make_image(seed, size=(64, 64)):
    rng = np.random.default_rng(seed)
    return Image.fromarray(rng.integers(0, 255, (*size, 3), dtype=np.uint8))


class TestDedup:
    def test_identical_copies_cluster(self, tmp_path):
        img = make_image(1)
        a, b = tmp_path / "a.png", tmp_path / "b.png"
        img.save(a)
        img.save(b)
        assert hamming(dhash(a), dhash(b)) == 0
        result = dedup({"a": a, "b": b})
        assert result.clusters == [["a", "b"]]

    def test_brightness_shift_clusters(self):
        base = make_image(2, size=(128, 128))
        arr = np.asarray(base).astype(np.float64)
        shifted = Image.fromarray(
            np.clip(arr * 1.01, 0, 255).astype(np.uint8))
        distance = hamming(dhash(base), dhash(shifted))
        assert distance <= 8
        result = dedup({"orig": base, "shift": shifted}, max_hamming=8)
        assert len(result.clusters) == 1

    def test_unrelated_noise_images_distinct(self):
        distances = []
        for seed in range(0, 20, 2):
            a, b = make_image(seed), make_image(seed + 1)
            distances.append(hamming(dhash(a), dhash(b)))
        mean = sum(distances) / len(distances)
        assert 24 <= mean <= 40  # expected around 32 bits for noise
        result = dedup({"a": make_image(100), "b": make_image(101)},
                       max_hamming=8)
        assert len(result.clusters) == 2

    def test_order_independence(self, tmp_path):
        imgs = {f"img{i}": make_image(i) for i in range(6)}
        imgs["img0_copy"] = imgs["img0"].copy()
        forward = dedup(list(imgs.items()))
        backward = dedup(list(reversed(list(imgs.items()))))
        assert forward.clusters == backward.clusters

    def test_undecodable_image_skipped(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        good = tmp_path / "good.png"
        make_image(5).save(good)
        result = dedup({"bad": bad, "good": good})
        assert [k for k, _ in result.skipped] == ["bad"]
        assert result.clusters == [["good"]]


def dataset_of(n):
    return CocoDataset(
        images=[{"id": i, "file_name": f"{i}.png", "width": 10, "height": 10}
                for i in range(n)],
        annotations=[], categories=[])


class TestSplits:
    def test_eval_split_of_published_size(self):
        ds = dataset_of(1520)
        manifest = make_splits(ds, {"eval": 520, "adapt": 100}, seed=0,
                               source="public")
        assert len(manifest.splits["eval"]) == 520
        assert len(manifest.splits["adapt"]) == 100

    def test_deterministic_for_seed(self):
        ds = dataset_of(100)
        a = make_splits(ds, {"eval": 30, "tune": 20}, seed=9)
        b = make_splits(ds, {"eval": 30, "tune": 20}, seed=9)
        assert a.to_json() == b.to_json()
        c = make_splits(ds, {"eval": 30, "tune": 20}, seed=10)
        assert c.to_json() != a.to_json()

    def test_oversubscription_rejected(self):
        with pytest.raises(SplitCountError):
            make_splits(dataset_of(1520), {"eval": 1500, "tune": 500}, seed=0)

    def test_disjoint_for_all_seeds(self):
        ds = dataset_of(50)
        for seed in range(25):
            manifest = make_splits(ds, {"a": 20, "b": 20, "c": 10}, seed=seed)
            seen = set()
            for ids in manifest.splits.values():
                as_set = set(ids)
                assert not (seen & as_set)
                seen |= as_set

    def test_manifest_json_round_trip(self):
        manifest = make_splits(dataset_of(10), {"eval": 4}, seed=1)
        back = SplitManifest.from_json(manifest.to_json())
        assert back.splits == manifest.splits
        assert back.source == manifest.source
