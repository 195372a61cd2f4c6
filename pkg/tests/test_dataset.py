import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streetstudy.dataset import (BoxAnnotation, CategoryRegistry, dataset_stats,
                                 relative_area, size_bin, stratified_split)
from streetstudy.errors import ValidationError
from streetstudy.geo import GeoPoint, ImageRecord


def make_image(image_id="img", width=4000, height=13312):
    return ImageRecord(image_id, GeoPoint(4.6, -74.0), width, height)


class TestRelativeArea:
    def test_full_image_box(self):
        im = make_image(width=640, height=480)
        box = BoxAnnotation("a", "img", 0, (0, 0, 640, 480))
        assert relative_area(box, im) == 1.0

    def test_panorama_scale_examples(self):
        im = make_image(width=4000, height=13312)
        box = BoxAnnotation("a", "img", 0, (10, 10, 100, 100))
        assert relative_area(box, im) == pytest.approx(10_000 / 53_248_000)
        assert relative_area(box, im) == pytest.approx(1.878e-4, rel=1e-3)
        tiny = BoxAnnotation("b", "img", 0, (0, 0, 1, 1))
        assert relative_area(tiny, im) == pytest.approx(1.878e-8, rel=1e-3)

    def test_box_outside_image_names_annotation(self):
        im = make_image(width=100, height=100)
        box = BoxAnnotation("bad_box", "img", 0, (90, 0, 20, 20))
        with pytest.raises(ValidationError, match="bad_box"):
            relative_area(box, im)

    def test_degenerate_boxes_rejected(self):
        with pytest.raises(ValidationError):
            BoxAnnotation("a", "img", 0, (0, 0, 0, 10))
        with pytest.raises(ValidationError):
            BoxAnnotation("a", "img", 0, (0, 0, 0.5, 0.5))


class TestSizeBin:
    def test_paper_thresholds(self):
        assert size_bin(0.5e-4) == "small"
        assert size_bin(1e-4) == "medium"  # boundary is inclusive for medium
        assert size_bin(0.2) == "large"

    def test_more_boundaries(self):
        assert size_bin(0.1) == "medium"
        assert size_bin(np.nextafter(0.1, 1.0)) == "large"
        assert size_bin(np.nextafter(1e-4, 0.0)) == "small"
        assert size_bin(1.0) == "large"

    @given(st.floats(min_value=1e-300, max_value=1.0, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_partitions_unit_interval(self, rel):
        assert size_bin(rel) in ("small", "medium", "large")

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            size_bin(0.0)
        with pytest.raises(ValidationError):
            size_bin(1.5)


def synthetic_split_inputs(n, seed, n_classes=27, boxes_mean=20):
    rng = np.random.default_rng(seed)
    images = [ImageRecord(f"i{i:05d}", GeoPoint(4.6, -74.0), 1000, 500) for i in range(n)]
    p = 1.0 / np.arange(1, n_classes + 1) ** 1.1
    p /= p.sum()
    annotations = []
    labels = {}
    aid = 0
    for im in images:
        m = max(2, int(rng.negative_binomial(3, 3 / (3 + boxes_mean))))
        for c in rng.choice(n_classes, size=m, p=p):
            annotations.append(
                BoxAnnotation(f"a{aid:07d}", im.image_id, int(c), (0.0, 0.0, 10.0, 10.0))
            )
            aid += 1
        labels[im.image_id] = int(rng.negative_binomial(2, 2 / (2 + 6)))
    return images, annotations, labels


def fold_class_counts(assignments, annotations):
    counts = collections.defaultdict(collections.Counter)
    for a in annotations:
        counts[assignments[a.image_id]][a.category_id] += 1
    return counts


class TestStratifiedSplit:
    def test_two_images_one_per_fold(self):
        images, annotations, labels = synthetic_split_inputs(2, 0)
        split = stratified_split(images, annotations, labels, k=2, seed=0)
        assert sorted(split.assignments.values()) == ["fold0", "fold1"]

    def test_balance_on_thousand_images(self):
        images, annotations, labels = synthetic_split_inputs(1000, 7)
        split = stratified_split(images, annotations, labels, k=2, seed=7)
        sizes = collections.Counter(split.assignments.values())
        assert abs(sizes["fold0"] - sizes["fold1"]) <= 1

        counts = fold_class_counts(split.assignments, annotations)
        for c in range(27):
            a, b = counts["fold0"][c], counts["fold1"][c]
            rel = abs(a - b) / max(1.0, (a + b) / 2)
            assert rel <= 0.05, f"class {c}: {a} vs {b}"

        means = {
            f: np.mean([labels[i] for i, ff in split.assignments.items() if ff == f])
            for f in ("fold0", "fold1")
        }
        assert abs(means["fold0"] - means["fold1"]) / max(means.values()) <= 0.10

    def test_deterministic_per_seed(self):
        images, annotations, labels = synthetic_split_inputs(200, 1)
        a = stratified_split(images, annotations, labels, k=2, seed=3)
        b = stratified_split(images, annotations, labels, k=2, seed=3)
        assert a.assignments == b.assignments
        c = stratified_split(images, annotations, labels, k=2, seed=4)
        assert c.assignments != a.assignments

    def test_partition_property(self):
        images, annotations, labels = synthetic_split_inputs(101, 2)
        split = stratified_split(images, annotations, labels, k=3, seed=0)
        assert set(split.assignments) == {im.image_id for im in images}
        sizes = collections.Counter(split.assignments.values())
        assert sum(sizes.values()) == 101
        assert max(sizes.values()) - min(sizes.values()) <= 1

    def test_errors(self):
        images, annotations, labels = synthetic_split_inputs(3, 0)
        with pytest.raises(ValidationError):
            stratified_split(images, annotations, labels, k=4, seed=0)
        with pytest.raises(ValidationError):
            stratified_split(images, annotations, labels, k=1, seed=0)
        del labels[images[0].image_id]
        with pytest.raises(ValidationError, match="without a collision label"):
            stratified_split(images, annotations, labels, k=2, seed=0)


class TestDatasetStats:
    def test_empty_dataset_is_all_zero(self):
        report = dataset_stats([], [], {})
        assert report.total_boxes == 0
        assert report.boxes_per_image_mean == 0.0
        assert report.collisions_mean == 0.0
        assert sum(report.boxes_per_image_hist.counts) == 0

    def test_tiny_dataset(self):
        im = make_image("img", 100, 100)
        boxes = [BoxAnnotation(f"a{i}", "img", i % 2, (0, 0, 10, 10)) for i in range(3)]
        report = dataset_stats([im], boxes, {"img": 2})
        assert report.total_boxes == 3
        assert report.boxes_per_image_mean == 3.0
        assert report.boxes_per_image_min == 3
        assert report.boxes_per_image_max == 3
        assert report.collisions_mean == 2.0
        assert report.per_class_counts == {0: 2, 1: 1}
        assert report.relative_area_mean == pytest.approx(0.01)

    def test_histogram_totals_match_counts(self):
        images, annotations, labels = synthetic_split_inputs(50, 9)
        report = dataset_stats(images, annotations, labels)
        assert report.boxes_per_image_hist.total() == 50
        assert report.relative_area_hist.total() == len(annotations)
        assert report.collisions_hist.total() == 50

    def test_order_invariance(self):
        images, annotations, labels = synthetic_split_inputs(40, 10)
        fwd = dataset_stats(images, annotations, labels)
        rev = dataset_stats(images[::-1], annotations[::-1], labels)
        assert fwd.to_dict() == rev.to_dict()

    def test_dangling_reference_rejected(self):
        im = make_image("img")
        stray = BoxAnnotation("a0", "ghost", 0, (0, 0, 5, 5))
        with pytest.raises(ValidationError, match="ghost"):
            dataset_stats([im], [stray], {"img": 0})

    def test_missing_label_rejected(self):
        im = make_image("img")
        with pytest.raises(ValidationError, match="without a collision label"):
            dataset_stats([im], [], {})


class TestCategoryRegistry:
    def test_default_has_27_unique_named_classes(self):
        reg = CategoryRegistry.default()
        assert len(reg) == 27
        assert len(set(reg.names)) == 27
        assert "crosswalk" in reg.names and "traffic light" in reg.names

    def test_unknown_id_rejected(self):
        reg = CategoryRegistry.default()
        with pytest.raises(ValidationError):
            reg.name_of(27)

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValidationError):
            CategoryRegistry(names=["a", "a"])
