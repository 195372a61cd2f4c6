"""File formats: CSV tables, COCO-style annotation JSON, detection JSON,
the SEB1 binary embedding container, and direct SVG bar charts.

All writers emit deterministic bytes for identical inputs: fixed field
order, ``\\n`` newlines, shortest-roundtrip float formatting, and sorted
JSON keys. Readers validate and raise ValidationError naming the file and
offending record.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .baselines import LinearModel
from .dataset import BoxAnnotation, CategoryRegistry
from .errors import ValidationError
from .geo import CrossingPoint, GeoPoint, ImageRecord, MatchOutcome, MatchResult
from .metrics import DetectionRecord
from .pcpm import EmbeddingSet

SEB_MAGIC = b"SEB1"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv(path: Path, required: list[str]) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        return list(reader)


def _parse(path: Path, row_no: int, field: str, raw: str, kind):
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ValidationError(
            f"{path}: row {row_no}: cannot parse {field}={raw!r} as {kind.__name__}"
        ) from None


def write_crossings_csv(path: Path, crossings: list[CrossingPoint]) -> None:
    write_csv(path, ["crossing_id", "lat", "lon", "collisions"],
              [[c.crossing_id, c.location.lat, c.location.lon, c.collisions]
               for c in crossings])


def read_crossings_csv(path: Path) -> list[CrossingPoint]:
    out = []
    for i, row in enumerate(_read_csv(path, ["crossing_id", "lat", "lon", "collisions"]), 1):
        try:
            out.append(CrossingPoint(
                crossing_id=row["crossing_id"],
                location=GeoPoint(_parse(path, i, "lat", row["lat"], float),
                                  _parse(path, i, "lon", row["lon"], float)),
                collisions=_parse(path, i, "collisions", row["collisions"], int),
            ))
        except ValidationError as e:
            raise ValidationError(f"{path}: row {i}: {e}") from None
    return out


def write_images_csv(path: Path, images: list[ImageRecord]) -> None:
    write_csv(path, ["image_id", "lat", "lon", "width", "height"],
              [[im.image_id, im.location.lat, im.location.lon, im.width, im.height]
               for im in images])


def read_images_csv(path: Path) -> list[ImageRecord]:
    out = []
    for i, row in enumerate(_read_csv(path, ["image_id", "lat", "lon", "width", "height"]), 1):
        try:
            out.append(ImageRecord(
                image_id=row["image_id"],
                location=GeoPoint(_parse(path, i, "lat", row["lat"], float),
                                  _parse(path, i, "lon", row["lon"], float)),
                width=_parse(path, i, "width", row["width"], int),
                height=_parse(path, i, "height", row["height"], int),
            ))
        except ValidationError as e:
            raise ValidationError(f"{path}: row {i}: {e}") from None
    return out


def write_matches_csv(path: Path, outcome: MatchOutcome,
                      crossings: list[CrossingPoint]) -> None:
    collisions = {c.crossing_id: c.collisions for c in crossings}
    write_csv(path, ["image_id", "crossing_id", "distance_m", "collisions"],
              [[m.image_id, m.crossing_id, m.distance, collisions[m.crossing_id]]
               for m in outcome.matches])


def read_matches_csv(path: Path) -> list[dict]:
    rows = _read_csv(path, ["image_id", "crossing_id", "distance_m", "collisions"])
    return [{
        "image_id": r["image_id"],
        "crossing_id": r["crossing_id"],
        "distance_m": _parse(path, i, "distance_m", r["distance_m"], float),
        "collisions": _parse(path, i, "collisions", r["collisions"], int),
    } for i, r in enumerate(rows, 1)]


def write_rejected_csv(path: Path, rejected: list[str], reason: str = "beyond_max_radius") -> None:
    write_csv(path, ["image_id", "reason"], [[r, reason] for r in rejected])


def write_labels_csv(path: Path, labels: dict[str, int]) -> None:
    write_csv(path, ["image_id", "collisions"],
              [[k, labels[k]] for k in sorted(labels)])


def read_labels_csv(path: Path) -> dict[str, int]:
    """Accepts any CSV carrying image_id and a collisions column
    (labels files and match outputs both qualify)."""
    rows = _read_csv(path, ["image_id", "collisions"])
    out = {}
    for i, r in enumerate(rows, 1):
        if r["image_id"] in out:
            raise ValidationError(f"{path}: row {i}: duplicate image_id {r['image_id']!r}")
        out[r["image_id"]] = _parse(path, i, "collisions", r["collisions"], int)
    return out


def write_split_csv(path: Path, assignments: dict[str, str]) -> None:
    write_csv(path, ["image_id", "fold"],
              [[k, assignments[k]] for k in sorted(assignments)])


def read_split_csv(path: Path) -> dict[str, str]:
    rows = _read_csv(path, ["image_id", "fold"])
    return {r["image_id"]: r["fold"] for r in rows}


def write_predictions_csv(path: Path, image_ids: list[str], preds) -> None:
    write_csv(path, ["image_id", "predicted_collisions"],
              [[i, float(p)] for i, p in zip(image_ids, preds)])


def read_predictions_csv(path: Path) -> dict[str, float]:
    rows = _read_csv(path, ["image_id", "predicted_collisions"])
    return {r["image_id"]: _parse(path, i, "predicted_collisions",
                                  r["predicted_collisions"], float)
            for i, r in enumerate(rows, 1)}


def write_counts_csv(path: Path, image_ids: list[str], matrix: np.ndarray,
                     includes_coords: bool) -> None:
    n_classes = matrix.shape[1] - (2 if includes_coords else 0)
    header = ["image_id"] + [f"count_{c}" for c in range(n_classes)]
    if includes_coords:
        header += ["lat_norm", "lon_norm"]
    rows = []
    for i, img_id in enumerate(image_ids):
        row = [img_id] + [int(v) for v in matrix[i, :n_classes]]
        if includes_coords:
            row += [float(matrix[i, n_classes]), float(matrix[i, n_classes + 1])]
        rows.append(row)
    write_csv(path, header, rows)


def read_counts_csv(path: Path) -> tuple[list[str], np.ndarray, bool]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "image_id" not in reader.fieldnames:
            raise ValidationError(f"{path}: expected an image_id column")
        count_cols = [c for c in reader.fieldnames if c.startswith("count_")]
        has_coords = "lat_norm" in reader.fieldnames and "lon_norm" in reader.fieldnames
        cols = count_cols + (["lat_norm", "lon_norm"] if has_coords else [])
        ids, rows = [], []
        for i, r in enumerate(reader, 1):
            ids.append(r["image_id"])
            rows.append([_parse(path, i, c, r[c], float) for c in cols])
    return ids, np.array(rows) if rows else np.zeros((0, len(cols))), has_coords


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from None


def write_annotations_json(path: Path, images: list[ImageRecord],
                           annotations: list[BoxAnnotation],
                           categories: CategoryRegistry) -> None:
    payload = {
        "images": [{"id": im.image_id, "width": im.width, "height": im.height}
                   for im in images],
        "annotations": [{"id": a.annotation_id, "image_id": a.image_id,
                         "category_id": a.category_id, "bbox": list(a.bbox)}
                        for a in annotations],
        "categories": [{"id": i, "name": n} for i, n in enumerate(categories.names)],
    }
    write_json(path, payload)


def read_annotations_json(path: Path, locations: dict[str, GeoPoint] | None = None,
                          ) -> tuple[list[ImageRecord], list[BoxAnnotation], CategoryRegistry]:
    """Read a COCO-style annotation file.

    Image locations are not part of the format; pass them separately when
    needed, otherwise images get a (0, 0) placeholder location.
    """
    payload = read_json(path)
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise ValidationError(f"{path}: missing top-level key {key!r}")
    cats = sorted(payload["categories"], key=lambda c: c["id"])
    ids = [c["id"] for c in cats]
    if ids != list(range(len(ids))):
        raise ValidationError(f"{path}: category ids must be contiguous from 0, got {ids}")
    registry = CategoryRegistry(names=[c["name"] for c in cats])

    images = []
    for rec in payload["images"]:
        loc = (locations or {}).get(rec["id"], GeoPoint(0.0, 0.0))
        try:
            images.append(ImageRecord(str(rec["id"]), loc, int(rec["width"]), int(rec["height"])))
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise ValidationError(f"{path}: image record {rec!r}: {e}") from None

    annotations = []
    for rec in payload["annotations"]:
        try:
            bbox = tuple(float(v) for v in rec["bbox"])
            annotations.append(BoxAnnotation(str(rec["id"]), str(rec["image_id"]),
                                             int(rec["category_id"]), bbox))
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise ValidationError(f"{path}: annotation record {rec.get('id')!r}: {e}") from None
    return images, annotations, registry


def write_detections_json(path: Path, detections: list[DetectionRecord]) -> None:
    payload = [{"image_id": d.image_id, "category_id": d.category_id,
                "bbox": list(d.bbox), "score": d.score} for d in detections]
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_detections_json(path: Path) -> list[DetectionRecord]:
    try:
        with open(path) as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(payload, list):
        raise ValidationError(f"{path}: expected a JSON array of detections")
    out = []
    for i, rec in enumerate(payload):
        try:
            out.append(DetectionRecord(
                image_id=str(rec["image_id"]),
                category_id=int(rec["category_id"]),
                bbox=tuple(float(v) for v in rec["bbox"]),
                score=float(rec["score"]),
            ))
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise ValidationError(f"{path}: detection {i}: {e}") from None
    return out


def write_model_json(path: Path, model) -> None:
    write_json(path, model.to_dict())


def read_model_json(path: Path) -> LinearModel:
    payload = read_json(path)
    if payload.get("kind") != "ridge":
        raise ValidationError(f"{path}: not a ridge model file")
    return LinearModel.from_dict(payload)


# --- SEB1 binary embeddings -------------------------------------------------
#
# Layout (little-endian):
#   magic  "SEB1"
#   u32    N, d, Hf, Wf, Cb
#   f32    N*d   queries, row-major
#   u8     N     noise mask (0/1)
#   f32    Hf*Wf*Cb backbone map, row-major channel-last
#   f32    2     normalized coords
#   f32    1     label


def write_embedding_seb(path: Path, emb: EmbeddingSet) -> None:
    n, d = emb.queries.shape
    hf, wf, cb = emb.backbone_map.shape
    with open(path, "wb") as f:
        f.write(SEB_MAGIC)
        f.write(struct.pack("<5I", n, d, hf, wf, cb))
        f.write(emb.queries.astype("<f4").tobytes(order="C"))
        f.write(emb.noise_mask.astype(np.uint8).tobytes())
        f.write(emb.backbone_map.astype("<f4").tobytes(order="C"))
        f.write(np.asarray(emb.coords, dtype="<f4").tobytes())
        f.write(struct.pack("<f", float(emb.label)))


def read_embedding_seb(path: Path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if data[:4] != SEB_MAGIC:
        raise ValidationError(f"{path}: bad magic {data[:4]!r}, expected {SEB_MAGIC!r}")
    n, d, hf, wf, cb = struct.unpack_from("<5I", data, 4)
    off = 4 + 20
    expected = off + 4 * n * d + n + 4 * hf * wf * cb + 8 + 4
    if len(data) != expected:
        raise ValidationError(f"{path}: size {len(data)} != expected {expected}")
    queries = np.frombuffer(data, "<f4", n * d, off).reshape(n, d).astype(float)
    off += 4 * n * d
    mask_raw = np.frombuffer(data, np.uint8, n, off)
    if np.any(mask_raw > 1):
        raise ValidationError(f"{path}: noise mask bytes must be 0/1")
    mask = mask_raw.astype(bool)
    off += n
    bmap = np.frombuffer(data, "<f4", hf * wf * cb, off).reshape(hf, wf, cb).astype(float)
    off += 4 * hf * wf * cb
    coords = np.frombuffer(data, "<f4", 2, off).astype(float)
    off += 8
    (label,) = struct.unpack_from("<f", data, off)
    try:
        return EmbeddingSet(queries=queries, noise_mask=mask, backbone_map=bmap,
                            coords=np.clip(coords, 0.0, 1.0), label=float(label))
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from None


def write_manifest_csv(path: Path, entries: list[tuple[str, str, float]]) -> None:
    """entries: (image_id, relative path, label)."""
    write_csv(path, ["image_id", "path", "label"], [list(e) for e in entries])


def read_manifest_csv(path: Path) -> list[dict]:
    rows = _read_csv(path, ["image_id", "path", "label"])
    return [{"image_id": r["image_id"], "path": r["path"],
             "label": _parse(path, i, "label", r["label"], float)}
            for i, r in enumerate(rows, 1)]


def load_embeddings(manifest_path: Path) -> tuple[list[str], list[EmbeddingSet]]:
    """Load every embedding listed in a manifest (paths relative to it)."""
    base = Path(manifest_path).parent
    ids, embs = [], []
    for rec in read_manifest_csv(manifest_path):
        emb = read_embedding_seb(base / rec["path"])
        if abs(emb.label - rec["label"]) > 1e-6:
            raise ValidationError(
                f"{manifest_path}: label mismatch for {rec['image_id']!r}: "
                f"manifest {rec['label']} vs file {emb.label}"
            )
        ids.append(rec["image_id"])
        embs.append(emb)
    return ids, embs


def write_histogram_csv(path: Path, hist) -> None:
    write_csv(path, ["bin_start", "bin_end", "count"],
              [[hist.bin_edges[i], hist.bin_edges[i + 1], hist.counts[i]]
               for i in range(len(hist.counts))])


def bar_chart_svg(labels: list[str], values: list[float], title: str,
                  width: int = 640, height: int = 360) -> str:
    """Minimal standalone SVG bar chart (no plotting dependency)."""
    margin = 40
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    vmax = max(max(values), 1e-12) if values else 1.0
    n = max(len(values), 1)
    bar_w = plot_w / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin - 6}" y="{margin}" text-anchor="end" font-size="9">{_fmt(vmax)}</text>',
    ]
    for i, v in enumerate(values):
        h = plot_h * (v / vmax)
        x = margin + i * bar_w
        y = height - margin - h
        parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w * 0.9)}" '
            f'height="{_fmt(h)}" fill="steelblue"/>'
        )
    step = max(1, n // 16)
    for i in range(0, len(labels), step):
        x = margin + (i + 0.45) * bar_w
        parts.append(
            f'<text x="{_fmt(x)}" y="{height - margin + 14}" text-anchor="middle" '
            f'font-size="8">{labels[i]}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_histogram_svg(path: Path, hist, title: str) -> None:
    labels = [_fmt(e) for e in hist.bin_edges[:-1]]
    with open(path, "w", newline="\n") as f:
        f.write(bar_chart_svg(labels, [float(c) for c in hist.counts], title))
