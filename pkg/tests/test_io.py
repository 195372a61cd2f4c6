import numpy as np
import pytest

from streetstudy import io
from streetstudy.baselines import LinearModel
from streetstudy.dataset import BoxAnnotation, CategoryRegistry, Histogram
from streetstudy.errors import ValidationError
from streetstudy.geo import (CrossingPoint, GeoPoint, ImageRecord, MatchOutcome,
                             MatchResult)
from streetstudy.metrics import DetectionRecord
from streetstudy.pcpm import EmbeddingSet


@pytest.fixture
def emb():
    rng = np.random.default_rng(0)
    return EmbeddingSet(
        queries=rng.normal(0, 1, (5, 4)),
        noise_mask=np.array([0, 1, 0, 0, 1], dtype=bool),
        backbone_map=rng.normal(0, 1, (2, 3, 4)),
        coords=np.array([0.25, 0.75]),
        label=7.0,
    )


class TestCsvRoundTrips:
    def test_crossings(self, tmp_path):
        pts = [CrossingPoint("c0", GeoPoint(4.6, -74.0), 3),
               CrossingPoint("c1", GeoPoint(4.7, -74.1), 0)]
        path = tmp_path / "crossings.csv"
        io.write_crossings_csv(path, pts)
        assert io.read_crossings_csv(path) == pts

    def test_images(self, tmp_path):
        imgs = [ImageRecord("i0", GeoPoint(4.6, -74.0), 4000, 13312)]
        path = tmp_path / "images.csv"
        io.write_images_csv(path, imgs)
        assert io.read_images_csv(path) == imgs

    def test_matches_and_labels(self, tmp_path):
        pts = [CrossingPoint("c0", GeoPoint(4.6, -74.0), 3)]
        outcome = MatchOutcome([MatchResult("i0", "c0", 12.5)], ["i9"], 1.0)
        io.write_matches_csv(tmp_path / "m.csv", outcome, pts)
        rows = io.read_matches_csv(tmp_path / "m.csv")
        assert rows == [{"image_id": "i0", "crossing_id": "c0",
                         "distance_m": 12.5, "collisions": 3}]
        labels = io.read_labels_csv(tmp_path / "m.csv")  # matches file doubles as labels
        assert labels == {"i0": 3}
        io.write_rejected_csv(tmp_path / "r.csv", ["i9"])
        assert (tmp_path / "r.csv").read_text() == "image_id,reason\ni9,beyond_max_radius\n"

    def test_predictions_and_split(self, tmp_path):
        io.write_predictions_csv(tmp_path / "p.csv", ["a", "b"], [1.5, 0.0])
        assert io.read_predictions_csv(tmp_path / "p.csv") == {"a": 1.5, "b": 0.0}
        io.write_split_csv(tmp_path / "s.csv", {"a": "fold0", "b": "fold1"})
        assert io.read_split_csv(tmp_path / "s.csv") == {"a": "fold0", "b": "fold1"}

    def test_counts(self, tmp_path):
        mat = np.array([[1.0, 2.0, 0.25, 0.5], [0.0, 3.0, 0.75, 1.0]])
        io.write_counts_csv(tmp_path / "c.csv", ["a", "b"], mat, includes_coords=True)
        ids, back, coords = io.read_counts_csv(tmp_path / "c.csv")
        assert ids == ["a", "b"] and coords is True
        assert np.allclose(back, mat)

    def test_missing_column_errors_name_the_file(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,lat\nx,1\n")
        with pytest.raises(ValidationError, match="bad.csv"):
            io.read_images_csv(path)

    def test_bad_value_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("crossing_id,lat,lon,collisions\nc0,notanumber,0,0\n")
        with pytest.raises(ValidationError, match="row 1"):
            io.read_crossings_csv(path)

    def test_duplicate_label_rejected(self, tmp_path):
        path = tmp_path / "l.csv"
        path.write_text("image_id,collisions\na,1\na,2\n")
        with pytest.raises(ValidationError, match="duplicate"):
            io.read_labels_csv(path)


class TestAnnotationsJson:
    def test_round_trip(self, tmp_path):
        images = [ImageRecord("i0", GeoPoint(0, 0), 100, 80)]
        anns = [BoxAnnotation("a0", "i0", 1, (1.0, 2.0, 3.0, 4.0))]
        reg = CategoryRegistry(["stop", "tree"])
        path = tmp_path / "ann.json"
        io.write_annotations_json(path, images, anns, reg)
        images2, anns2, reg2 = io.read_annotations_json(path)
        assert [im.image_id for im in images2] == ["i0"]
        assert anns2 == anns
        assert reg2.names == ["stop", "tree"]

    def test_non_contiguous_categories_rejected(self, tmp_path):
        path = tmp_path / "ann.json"
        io.write_json(path, {"images": [], "annotations": [],
                             "categories": [{"id": 1, "name": "x"}]})
        with pytest.raises(ValidationError, match="contiguous"):
            io.read_annotations_json(path)

    def test_detections_round_trip(self, tmp_path):
        dets = [DetectionRecord("i0", 0, (0.0, 0.0, 5.0, 6.0), 0.5)]
        path = tmp_path / "dets.json"
        io.write_detections_json(path, dets)
        assert io.read_detections_json(path) == dets

    def test_detection_record_errors_name_index(self, tmp_path):
        path = tmp_path / "dets.json"
        path.write_text('[{"image_id": "i", "category_id": 0, "bbox": [0,0,1,1]}]')
        with pytest.raises(ValidationError, match="detection 0"):
            io.read_detections_json(path)


class TestSebFormat:
    def test_round_trip(self, tmp_path, emb):
        path = tmp_path / "e.seb"
        io.write_embedding_seb(path, emb)
        back = io.read_embedding_seb(path)
        # stored as float32: compare at that precision
        assert np.allclose(back.queries, emb.queries, atol=1e-6)
        assert np.array_equal(back.noise_mask, emb.noise_mask)
        assert np.allclose(back.backbone_map, emb.backbone_map, atol=1e-6)
        assert np.allclose(back.coords, emb.coords, atol=1e-6)
        assert back.label == emb.label

    def test_bad_magic_rejected(self, tmp_path, emb):
        path = tmp_path / "e.seb"
        io.write_embedding_seb(path, emb)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(ValidationError, match="magic"):
            io.read_embedding_seb(path)

    def test_truncated_rejected(self, tmp_path, emb):
        path = tmp_path / "e.seb"
        io.write_embedding_seb(path, emb)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValidationError, match="size"):
            io.read_embedding_seb(path)

    def test_bad_mask_byte_rejected(self, tmp_path, emb):
        path = tmp_path / "e.seb"
        io.write_embedding_seb(path, emb)
        data = bytearray(path.read_bytes())
        mask_offset = 4 + 20 + 4 * emb.queries.size
        data[mask_offset] = 7
        path.write_bytes(bytes(data))
        with pytest.raises(ValidationError, match="mask"):
            io.read_embedding_seb(path)

    def test_manifest_round_trip_and_label_check(self, tmp_path, emb):
        io.write_embedding_seb(tmp_path / "e.seb", emb)
        io.write_manifest_csv(tmp_path / "manifest.csv", [("img_0", "e.seb", 7.0)])
        ids, embs = io.load_embeddings(tmp_path / "manifest.csv")
        assert ids == ["img_0"] and len(embs) == 1

        io.write_manifest_csv(tmp_path / "manifest.csv", [("img_0", "e.seb", 9.0)])
        with pytest.raises(ValidationError, match="label mismatch"):
            io.load_embeddings(tmp_path / "manifest.csv")


class TestModelJson:
    def test_round_trip(self, tmp_path):
        model = LinearModel(np.array([1.0, -2.0]), 0.5, np.zeros(2), np.ones(2), 1.0)
        io.write_model_json(tmp_path / "m.json", model)
        back = io.read_model_json(tmp_path / "m.json")
        assert np.array_equal(back.weights, model.weights)
        assert back.intercept == model.intercept

    def test_wrong_kind_rejected(self, tmp_path):
        io.write_json(tmp_path / "m.json", {"kind": "constant", "value": 2.0})
        with pytest.raises(ValidationError):
            io.read_model_json(tmp_path / "m.json")


class TestWriterDeterminism:
    def test_repeated_writes_are_byte_identical(self, tmp_path, emb):
        pts = [CrossingPoint("c0", GeoPoint(4.612345678901, -74.0987654321), 3)]
        for writer, name in ((lambda p: io.write_crossings_csv(p, pts), "a.csv"),
                             (lambda p: io.write_embedding_seb(p, emb), "b.seb")):
            writer(tmp_path / name)
            first = (tmp_path / name).read_bytes()
            writer(tmp_path / name)
            assert (tmp_path / name).read_bytes() == first

    def test_float_round_trip_exact(self, tmp_path):
        pts = [CrossingPoint("c0", GeoPoint(4.612345678901234, -74.09876543210987), 3)]
        io.write_crossings_csv(tmp_path / "c.csv", pts)
        back = io.read_crossings_csv(tmp_path / "c.csv")
        assert back[0].location.lat == pts[0].location.lat
        assert back[0].location.lon == pts[0].location.lon


class TestSvg:
    def test_histogram_svg_is_valid_markup(self, tmp_path):
        hist = Histogram(bin_edges=[0.0, 1.0, 2.0], counts=[3, 5])
        io.write_histogram_svg(tmp_path / "h.svg", hist, "demo")
        text = (tmp_path / "h.svg").read_text()
        assert text.startswith("<svg")
        assert text.rstrip().endswith("</svg>")
        assert text.count("<rect") == 2
