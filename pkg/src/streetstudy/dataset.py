"""Detection annotations, size bins, fold splitting, and dataset statistics.

Size bins follow the benchmark's relative-area convention: small < 0.01%,
medium 0.01%..10% (inclusive), large > 10% of the image area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geo import ImageRecord

SMALL_MAX_REL_AREA = 1e-4
MEDIUM_MAX_REL_AREA = 0.1

# Street furniture classes named in the benchmark's category scheme; the
# remaining ids are configurable placeholders.
NAMED_CLASSES = [
    "crosswalk", "stop line", "speed bump", "traffic sign", "pedestrian sign",
    "stop sign", "traffic light", "road lane", "curb", "sidewalk",
    "street light", "tree", "roundabout", "brt station", "median barrier",
]
DEFAULT_NUM_CLASSES = 27


@dataclass(frozen=True)
class BoxAnnotation:
    """Ground-truth bounding box, pixel units, top-left origin."""

    annotation_id: str
    image_id: str
    category_id: int
    bbox: tuple[float, float, float, float]  # (x, y, w, h)

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValidationError(
                f"annotation {self.annotation_id!r}: box sides must be positive, got w={w}, h={h}"
            )
        if w * h < 1.0:
            raise ValidationError(
                f"annotation {self.annotation_id!r}: box area {w * h} is below 1 px^2"
            )

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass
class CategoryRegistry:
    """Ordered category id/name table; ids must be contiguous from 0."""

    names: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError("category names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def ids(self) -> range:
        return range(len(self.names))

    def name_of(self, category_id: int) -> str:
        if not 0 <= category_id < len(self.names):
            raise ValidationError(f"unknown category_id {category_id}")
        return self.names[category_id]

    @classmethod
    def default(cls, num_classes: int = DEFAULT_NUM_CLASSES) -> "CategoryRegistry":
        names = list(NAMED_CLASSES[:num_classes])
        for i in range(len(names), num_classes):
            names.append(f"class_{i:02d}")
        return cls(names=names)


@dataclass
class SplitAssignment:
    """Maps every image_id to a fold label (fold0, fold1, ..., or test)."""

    assignments: dict[str, str]

    def fold_ids(self, fold: str) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def folds(self) -> list[str]:
        return sorted(set(self.assignments.values()))


@dataclass
class Histogram:
    bin_edges: list[float]
    counts: list[int]

    def total(self) -> int:
        return sum(self.counts)


@dataclass
class StatsReport:
    total_boxes: int
    boxes_per_image_mean: float
    boxes_per_image_min: int
    boxes_per_image_max: int
    boxes_per_image_hist: Histogram
    per_class_counts: dict[int, int]
    relative_area_mean: float
    relative_area_hist: Histogram
    collisions_mean: float
    collisions_std: float
    collisions_min: int
    collisions_max: int
    collisions_hist: Histogram

    def to_dict(self) -> dict:
        return {
            "total_boxes": self.total_boxes,
            "boxes_per_image": {
                "mean": self.boxes_per_image_mean,
                "min": self.boxes_per_image_min,
                "max": self.boxes_per_image_max,
                "histogram": {
                    "bin_edges": self.boxes_per_image_hist.bin_edges,
                    "counts": self.boxes_per_image_hist.counts,
                },
            },
            "per_class_counts": {str(k): v for k, v in sorted(self.per_class_counts.items())},
            "relative_area": {
                "mean": self.relative_area_mean,
                "histogram": {
                    "bin_edges": self.relative_area_hist.bin_edges,
                    "counts": self.relative_area_hist.counts,
                },
            },
            "collisions": {
                "mean": self.collisions_mean,
                "std": self.collisions_std,
                "min": self.collisions_min,
                "max": self.collisions_max,
                "histogram": {
                    "bin_edges": self.collisions_hist.bin_edges,
                    "counts": self.collisions_hist.counts,
                },
            },
        }


def relative_area(box: BoxAnnotation, image: ImageRecord) -> float:
    """Box area as a fraction of its image area, in (0, 1]."""
    x, y, w, h = box.bbox
    if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
        raise ValidationError(
            f"annotation {box.annotation_id!r} lies outside image {image.image_id!r} "
            f"({image.width}x{image.height})"
        )
    return (w * h) / (image.width * image.height)


def size_bin(rel_area: float) -> str:
    """Classify a relative area into 'small', 'medium', or 'large'."""
    if not 0.0 < rel_area <= 1.0:
        raise ValidationError(f"relative area {rel_area} outside (0, 1]")
    if rel_area < SMALL_MAX_REL_AREA:
        return "small"
    if rel_area <= MEDIUM_MAX_REL_AREA:
        return "medium"
    return "large"


def _quantile_bucket(values: np.ndarray, n_buckets: int) -> np.ndarray:
    """Assign each value a quantile bucket index in [0, n_buckets)."""
    if len(values) == 0:
        return np.zeros(0, dtype=int)
    edges = np.quantile(values, np.linspace(0, 1, n_buckets + 1)[1:-1])
    return np.searchsorted(edges, values, side="left")


def stratified_split(
    images: list[ImageRecord],
    annotations: list[BoxAnnotation],
    collision_labels: dict[str, int],
    k: int = 2,
    seed: int = 0,
) -> SplitAssignment:
    """Distribution-preserving k-fold assignment of images.

    Images are grouped into strata keyed by (collision-count quantile
    bucket x boxes-per-image quartile), shuffled within each stratum by
    seed, then dealt k at a time: each group of k images is placed in the
    arrangement that best balances the folds' per-class box counts, total
    boxes, and collision mass. Fold sizes never differ by more than one,
    and the result is deterministic per seed.
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if len(images) < k:
        raise ValidationError(f"cannot split {len(images)} images into {k} folds")
    image_ids = [im.image_id for im in images]
    id_set = set(image_ids)
    if len(id_set) != len(image_ids):
        raise ValidationError("duplicate image_id in split input")
    missing = sorted(id_set - set(collision_labels))
    if missing:
        raise ValidationError(f"images without a collision label: {missing[:5]}")

    categories = sorted({a.category_id for a in annotations})
    cat_pos = {c: i for i, c in enumerate(categories)}
    n_cat = len(categories)
    counts = {im_id: np.zeros(n_cat) for im_id in image_ids}
    for a in annotations:
        if a.image_id not in id_set:
            raise ValidationError(
                f"annotation {a.annotation_id!r} references unknown image {a.image_id!r}"
            )
        counts[a.image_id][cat_pos[a.category_id]] += 1

    n = len(images)
    boxes_per_image = np.array([counts[i].sum() for i in image_ids])
    collisions = np.array([float(collision_labels[i]) for i in image_ids])

    coll_bucket = _quantile_bucket(collisions, 4)
    box_bucket = _quantile_bucket(boxes_per_image, 4)

    rng = np.random.default_rng(seed)
    strata: dict[tuple[int, int], list[int]] = {}
    for idx in range(n):
        strata.setdefault((int(coll_bucket[idx]), int(box_bucket[idx])), []).append(idx)

    # Feature totals used to score fold balance as proportional shares.
    total_per_class = np.maximum(np.array([sum(counts[i][c] for i in image_ids)
                                           for c in range(n_cat)]), 1.0)
    total_boxes = max(boxes_per_image.sum(), 1.0)
    total_coll = max(collisions.sum(), 1.0)

    fold_class = np.zeros((k, n_cat))
    fold_boxes = np.zeros(k)
    fold_coll = np.zeros(k)
    fold_size = np.zeros(k, dtype=int)
    assignment = np.full(n, -1, dtype=int)

    order: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        order.extend(members[i] for i in rng.permutation(len(members)))

    # Feature vector per image: per-class shares, box share, collision share.
    feats = np.zeros((n, n_cat + 2))
    for idx in range(n):
        feats[idx, :n_cat] = counts[image_ids[idx]] / total_per_class
        feats[idx, n_cat] = boxes_per_image[idx] / total_boxes
        feats[idx, n_cat + 1] = collisions[idx] / total_coll

    fold_share = np.zeros((k, n_cat + 2))
    fold_size = np.zeros(k, dtype=int)
    assignment = np.full(n, -1, dtype=int)

    def place(idx: int, fold: int) -> None:
        assignment[idx] = fold
        fold_share[fold] += feats[idx]
        fold_size[fold] += 1

    from itertools import permutations

    for g in range(0, n - n % k, k):
        group = order[g:g + k]
        best_perm = None
        best_cost = math.inf
        for perm in permutations(range(k)):
            trial = fold_share.copy()
            for f, slot in enumerate(perm):
                trial[f] += feats[group[slot]]
            cost = float(np.sum((trial - trial.mean(axis=0)) ** 2))
            if cost < best_cost:
                best_cost = cost
                best_perm = perm
        for f, slot in enumerate(best_perm):
            place(group[slot], f)

    # Remainder (< k images): deal to the smallest folds, best balance first.
    for idx in order[n - n % k:]:
        eligible = np.flatnonzero(fold_size == fold_size.min())
        best_fold = -1
        best_cost = math.inf
        for f in eligible:
            trial = fold_share.copy()
            trial[f] += feats[idx]
            cost = float(np.sum((trial - trial.mean(axis=0)) ** 2))
            if cost < best_cost:
                best_cost = cost
                best_fold = int(f)
        place(idx, best_fold)

    _refine_by_swaps(assignment, feats, fold_share, k)

    return SplitAssignment(
        assignments={image_ids[i]: f"fold{assignment[i]}" for i in range(n)}
    )


def _refine_by_swaps(
    assignment: np.ndarray,
    feats: np.ndarray,
    fold_share: np.ndarray,
    k: int,
    max_rounds: int = 400,
    shortlist: int = 24,
) -> None:
    """Deterministic local search: swap images between fold pairs while it
    strictly lowers the share imbalance. Fold sizes are preserved."""
    for _ in range(max_rounds):
        improved = False
        for fa in range(k):
            for fb in range(fa + 1, k):
                diff = fold_share[fa] - fold_share[fb]
                members_a = np.flatnonzero(assignment == fa)
                members_b = np.flatnonzero(assignment == fb)
                if len(members_a) == 0 or len(members_b) == 0:
                    continue
                # Projection onto the imbalance direction shortlists the
                # candidates most likely to cancel it.
                proj_a = feats[members_a] @ diff
                proj_b = feats[members_b] @ diff
                cand_a = members_a[np.argsort(-proj_a, kind="stable")[:shortlist]]
                cand_b = members_b[np.argsort(proj_b, kind="stable")[:shortlist]]
                best_gain = 1e-15
                best_pair = None
                for i in cand_a:
                    for j in cand_b:
                        delta = feats[i] - feats[j]
                        gain = 4.0 * float(diff @ delta) - 4.0 * float(delta @ delta)
                        if gain > best_gain:
                            best_gain = gain
                            best_pair = (int(i), int(j))
                if best_pair is not None:
                    i, j = best_pair
                    assignment[i], assignment[j] = fb, fa
                    fold_share[fa] += feats[j] - feats[i]
                    fold_share[fb] += feats[i] - feats[j]
                    improved = True
        if not improved:
            break


def _fixed_histogram(values: np.ndarray, edges: np.ndarray) -> Histogram:
    """Histogram with fixed edges; out-of-range values fall into the end bins."""
    if len(values) == 0:
        return Histogram(bin_edges=list(map(float, edges)), counts=[0] * (len(edges) - 1))
    clipped = np.clip(values, edges[0], np.nextafter(edges[-1], -np.inf))
    counts, _ = np.histogram(clipped, bins=edges)
    return Histogram(bin_edges=list(map(float, edges)), counts=[int(c) for c in counts])


BOXES_HIST_EDGES = np.arange(0, 290, 10, dtype=float)          # width 10 over [0, 280]
REL_AREA_HIST_EDGES = np.logspace(-8, 0, 9)                    # decade bins over [1e-8, 1]
COLLISIONS_HIST_EDGES = np.arange(0, 201, 1, dtype=float)      # width 1 over [0, 200]


def dataset_stats(
    images: list[ImageRecord],
    annotations: list[BoxAnnotation],
    collision_labels: dict[str, int],
) -> StatsReport:
    """Compute the benchmark's dataset summary report."""
    image_by_id = {im.image_id: im for im in images}
    if len(image_by_id) != len(images):
        raise ValidationError("duplicate image_id in stats input")
    for a in annotations:
        if a.image_id not in image_by_id:
            raise ValidationError(
                f"annotation {a.annotation_id!r} references unknown image {a.image_id!r}"
            )
    missing = sorted(set(image_by_id) - set(collision_labels))
    if missing:
        raise ValidationError(f"images without a collision label: {missing[:5]}")

    n_images = len(images)
    boxes_count: dict[str, int] = {im.image_id: 0 for im in images}
    per_class: dict[int, int] = {}
    rel_areas = np.zeros(len(annotations))
    for i, a in enumerate(annotations):
        boxes_count[a.image_id] += 1
        per_class[a.category_id] = per_class.get(a.category_id, 0) + 1
        rel_areas[i] = relative_area(a, image_by_id[a.image_id])

    boxes_arr = np.array([boxes_count[im.image_id] for im in images], dtype=float)
    coll_arr = np.array([float(collision_labels[im.image_id]) for im in images])

    if n_images == 0:
        boxes_arr = np.zeros(0)
        coll_arr = np.zeros(0)

    def _stat(fn, arr, default=0.0):
        return float(fn(arr)) if len(arr) else float(default)

    return StatsReport(
        total_boxes=len(annotations),
        boxes_per_image_mean=_stat(np.mean, boxes_arr),
        boxes_per_image_min=int(_stat(np.min, boxes_arr)),
        boxes_per_image_max=int(_stat(np.max, boxes_arr)),
        boxes_per_image_hist=_fixed_histogram(boxes_arr, BOXES_HIST_EDGES),
        per_class_counts=dict(sorted(per_class.items())),
        relative_area_mean=_stat(np.mean, rel_areas),
        relative_area_hist=_fixed_histogram(rel_areas, REL_AREA_HIST_EDGES),
        collisions_mean=_stat(np.mean, coll_arr),
        collisions_std=_stat(np.std, coll_arr),
        collisions_min=int(_stat(np.min, coll_arr)),
        collisions_max=int(_stat(np.max, coll_arr)),
        collisions_hist=_fixed_histogram(coll_arr, COLLISIONS_HIST_EDGES),
    )
