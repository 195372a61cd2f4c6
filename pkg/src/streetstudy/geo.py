"""Geodesic matching of street images to registered collision crossing points.

Distances are haversine on a sphere of radius 6,371,000 m. At the <=100 m
scales this module cares about, the sphere-vs-ellipsoid error is negligible.
The grid index assumes data does not straddle the antimeridian (city-scale
inputs); queries anywhere else on the globe are still answered through the
exact expanding-ring search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

EARTH_RADIUS_M = 6_371_000.0
# Meters per degree of latitude on the haversine sphere (R * pi / 180).
M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0

DEFAULT_PREFER_RADIUS_M = 30.0
DEFAULT_MAX_RADIUS_M = 100.0


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 coordinate in decimal degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class CrossingPoint:
    """A registered street crossing with its historical collision count."""

    crossing_id: str
    location: GeoPoint
    collisions: int

    def __post_init__(self):
        if self.collisions < 0:
            raise ValidationError(
                f"crossing {self.crossing_id!r}: collisions must be >= 0, got {self.collisions}"
            )


@dataclass(frozen=True)
class ImageRecord:
    """A street image's id, capture location, and pixel dimensions."""

    image_id: str
    location: GeoPoint
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(
                f"image {self.image_id!r}: dimensions must be positive, got {self.width}x{self.height}"
            )


@dataclass(frozen=True)
class MatchResult:
    image_id: str
    crossing_id: str
    distance: float


@dataclass
class MatchOutcome:
    """Result of matching a set of images against crossing points.

    coverage is the fraction of accepted matches within the preferred
    radius, or None when there were no images to match.
    """

    matches: list[MatchResult]
    rejected: list[str]
    coverage: float | None


def geodesic_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance in meters between two points."""
    lat1, lon1 = math.radians(a.lat), math.radians(a.lon)
    lat2, lon2 = math.radians(b.lat), math.radians(b.lon)
    s_lat = math.sin((lat2 - lat1) / 2.0)
    s_lon = math.sin((lon2 - lon1) / 2.0)
    h = s_lat * s_lat + math.cos(lat1) * math.cos(lat2) * s_lon * s_lon
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def _haversine_to_many(lat_rad: float, lon_rad: float,
                       lats_rad: np.ndarray, lons_rad: np.ndarray,
                       cos_lats: np.ndarray) -> np.ndarray:
    """Vectorized haversine from one point to arrays of points (radians in)."""
    s_lat = np.sin((lats_rad - lat_rad) / 2.0)
    s_lon = np.sin((lons_rad - lon_rad) / 2.0)
    h = s_lat * s_lat + math.cos(lat_rad) * cos_lats * s_lon * s_lon
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def _pairwise_haversine(lat_a: np.ndarray, lon_a: np.ndarray, cos_a: np.ndarray,
                        lat_b: np.ndarray, lon_b: np.ndarray, cos_b: np.ndarray) -> np.ndarray:
    """Elementwise haversine between two equal-length coordinate arrays (radians)."""
    s_lat = np.sin((lat_b - lat_a) / 2.0)
    s_lon = np.sin((lon_b - lon_a) / 2.0)
    h = s_lat * s_lat + cos_a * cos_b * s_lon * s_lon
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


class SpatialIndex:
    """Uniform lat/lon grid over crossing points for nearest-neighbor queries.

    Cells are sized so that one cell spans at least ``cell_size`` meters in
    both axes everywhere in the data's latitude band. Queries run an
    expanding-ring search with exact haversine lower bounds per ring, so
    results are identical to exhaustive search (ties broken by smallest
    crossing_id).
    """

    def __init__(self, points: list[CrossingPoint], cell_size: float):
        if cell_size <= 0:
            raise ValidationError(f"cell_size must be > 0, got {cell_size}")
        self.cell_size = float(cell_size)
        self.points = list(points)
        self.n = len(self.points)
        if self.n == 0:
            # Explicit empty-index value: every query reports no candidate.
            self.ids: list[str] = []
            return

        ids = [p.crossing_id for p in self.points]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[0]
            raise ValidationError(f"duplicate crossing_id {dup!r}")

        lat_deg = np.array([p.location.lat for p in self.points])
        lon_deg = np.array([p.location.lon for p in self.points])
        self.phi_ref = float(np.max(np.abs(lat_deg)))

        # 1% pad so a pair separated by <= cell_size meters always lands in
        # adjacent cells, even right at a cell edge (holds for |lat| <= 89.5).
        self.cell_h_deg = 1.01 * self.cell_size / M_PER_DEG
        # Longitude degrees shrink by cos(lat); size cells at the band's worst
        # case so one cell is >= cell_size meters wide for all stored points.
        cos_ref = max(math.cos(math.radians(min(self.phi_ref, 89.5))), 1e-6)
        self.cell_w_deg = 1.01 * self.cell_size / (M_PER_DEG * cos_ref)

        ci = np.floor(lat_deg / self.cell_h_deg).astype(np.int64)
        cj = np.floor(lon_deg / self.cell_w_deg).astype(np.int64)
        keys = self._encode(ci, cj)

        order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[order]
        self.cell_bounds = np.flatnonzero(
            np.r_[True, self.sorted_keys[1:] != self.sorted_keys[:-1]]
        )
        self.unique_keys = self.sorted_keys[self.cell_bounds]
        self.cell_starts = self.cell_bounds
        self.cell_ends = np.r_[self.cell_bounds[1:], len(keys)]

        self.lat_rad = np.radians(lat_deg[order])
        self.lon_rad = np.radians(lon_deg[order])
        self.cos_lat = np.cos(self.lat_rad)
        self.ids = [ids[i] for i in order]
        self.collisions = np.array([self.points[i].collisions for i in order])

        self.ci_min, self.ci_max = int(ci.min()), int(ci.max())
        self.cj_min, self.cj_max = int(cj.min()), int(cj.max())

    @staticmethod
    def _encode(ci, cj):
        return (np.asarray(ci, dtype=np.int64) << np.int64(32)) + (
            np.asarray(cj, dtype=np.int64) + np.int64(1 << 31)
        )

    def _cell_range(self, ci: int, cj: int):
        key = int(self._encode(np.int64(ci), np.int64(cj)))
        pos = np.searchsorted(self.unique_keys, key)
        if pos < len(self.unique_keys) and self.unique_keys[pos] == key:
            return int(self.cell_starts[pos]), int(self.cell_ends[pos])
        return None

    def _ring_cells(self, qci: int, qcj: int, k: int):
        """Cells at Chebyshev distance exactly k, clipped to occupied bounds."""
        if k == 0:
            yield (qci, qcj)
            return
        lo_i, hi_i = max(qci - k, self.ci_min), min(qci + k, self.ci_max)
        lo_j, hi_j = max(qcj - k, self.cj_min), min(qcj + k, self.cj_max)
        for ci in (qci - k, qci + k):
            if self.ci_min <= ci <= self.ci_max:
                for cj in range(lo_j, hi_j + 1):
                    yield (ci, cj)
        for cj in (qcj - k, qcj + k):
            if self.cj_min <= cj <= self.cj_max:
                for ci in range(max(lo_i, qci - k + 1), min(hi_i, qci + k - 1) + 1):
                    yield (ci, cj)

    def _ring_lower_bound(self, k: int, phi_max_rad: float) -> float:
        """A haversine distance every point in ring >= k must exceed."""
        if k <= 1:
            return 0.0
        dlat = math.radians((k - 1) * self.cell_h_deg)
        bound_lat = EARTH_RADIUS_M * min(dlat, math.pi)
        dlon = math.radians((k - 1) * self.cell_w_deg)
        if dlon >= math.pi:
            bound_lon = bound_lat  # wrap-safe fallback: rely on latitude only
        else:
            bound_lon = 2.0 * EARTH_RADIUS_M * math.asin(
                min(1.0, math.cos(phi_max_rad) * math.sin(dlon / 2.0))
            )
        return min(bound_lat, bound_lon)

    def query(self, point: GeoPoint) -> tuple[CrossingPoint, float] | None:
        """Nearest stored point and its distance; None when the index is empty."""
        if self.n == 0:
            return None
        qlat, qlon = math.radians(point.lat), math.radians(point.lon)
        qci = math.floor(point.lat / self.cell_h_deg)
        qcj = math.floor(point.lon / self.cell_w_deg)
        phi_max = math.radians(min(max(abs(point.lat), self.phi_ref), 89.999999))

        max_span = max(
            abs(qci - self.ci_min), abs(qci - self.ci_max),
            abs(qcj - self.cj_min), abs(qcj - self.cj_max),
        )

        best_dist = math.inf
        best_pos = -1
        k = 0
        while k <= max_span:
            if best_pos >= 0 and self._ring_lower_bound(k, phi_max) >= best_dist:
                break
            for ci, cj in self._ring_cells(qci, qcj, k):
                rng = self._cell_range(ci, cj)
                if rng is None:
                    continue
                s, e = rng
                dists = _haversine_to_many(
                    qlat, qlon, self.lat_rad[s:e], self.lon_rad[s:e], self.cos_lat[s:e]
                )
                for off in range(e - s):
                    d = float(dists[off])
                    pos = s + off
                    if d < best_dist or (d == best_dist and self.ids[pos] < self.ids[best_pos]):
                        best_dist = d
                        best_pos = pos
            k += 1

        matched = CrossingPoint(
            crossing_id=self.ids[best_pos],
            location=GeoPoint(math.degrees(self.lat_rad[best_pos]),
                              math.degrees(self.lon_rad[best_pos])),
            collisions=int(self.collisions[best_pos]),
        )
        return matched, best_dist


def build_index(points: list[CrossingPoint], cell_size: float) -> SpatialIndex:
    """Build a grid index over crossing points with cells ~cell_size meters."""
    return SpatialIndex(points, cell_size)


def _validate_unique_image_ids(images: list[ImageRecord]) -> None:
    seen = set()
    for im in images:
        if im.image_id in seen:
            raise ValidationError(f"duplicate image_id {im.image_id!r}")
        seen.add(im.image_id)


def match_images(
    images: list[ImageRecord],
    points: list[CrossingPoint],
    prefer_radius: float = DEFAULT_PREFER_RADIUS_M,
    max_radius: float = DEFAULT_MAX_RADIUS_M,
) -> MatchOutcome:
    """Match each image to its globally nearest crossing point.

    Images whose nearest point lies beyond ``max_radius`` are rejected.
    Output lists are ordered by image_id. Nearest-neighbor ties are broken
    by the smallest crossing_id.

    Uses the grid index with cells sized to ``max_radius``: any accepted
    match (distance <= max_radius) is guaranteed to be found inside the
    3x3 cell neighborhood, and anything only found further away would be
    rejected regardless of its exact distance.
    """
    if not points:
        raise ValidationError("match_images requires a non-empty crossing point list")
    if not images:
        return MatchOutcome(matches=[], rejected=[], coverage=None)
    _validate_unique_image_ids(images)

    index = build_index(points, cell_size=max_radius)

    img_lat = np.array([im.location.lat for im in images])
    img_lon = np.array([im.location.lon for im in images])
    ici = np.floor(img_lat / index.cell_h_deg).astype(np.int64)
    icj = np.floor(img_lon / index.cell_w_deg).astype(np.int64)
    img_lat_rad = np.radians(img_lat)
    img_lon_rad = np.radians(img_lon)
    img_cos = np.cos(img_lat_rad)

    # Candidate (image, point) pairs from each image's 3x3 cell neighborhood.
    pair_img: list[np.ndarray] = []
    pair_pt: list[np.ndarray] = []
    n_img = len(images)
    img_arange = np.arange(n_img)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            keys = SpatialIndex._encode(ici + di, icj + dj)
            pos = np.searchsorted(index.unique_keys, keys)
            pos_clipped = np.minimum(pos, len(index.unique_keys) - 1)
            hit = index.unique_keys[pos_clipped] == keys
            if not np.any(hit):
                continue
            starts = index.cell_starts[pos_clipped[hit]]
            ends = index.cell_ends[pos_clipped[hit]]
            lengths = ends - starts
            img_rep = np.repeat(img_arange[hit], lengths)
            # Concatenate [starts[i], ends[i]) ranges without a Python loop.
            total = int(lengths.sum())
            if total == 0:
                continue
            offsets = np.repeat(np.cumsum(lengths) - lengths, lengths)
            pt_idx = np.arange(total) - offsets + np.repeat(starts, lengths)
            pair_img.append(img_rep)
            pair_pt.append(pt_idx)

    matches: list[MatchResult] = []
    rejected_mask = np.ones(n_img, dtype=bool)

    if pair_img:
        pimg = np.concatenate(pair_img)
        ppt = np.concatenate(pair_pt)
        dists = _pairwise_haversine(
            img_lat_rad[pimg], img_lon_rad[pimg], img_cos[pimg],
            index.lat_rad[ppt], index.lon_rad[ppt], index.cos_lat[ppt],
        )
        # Lexicographic id rank for deterministic tie-breaking at equal distance.
        id_rank = np.empty(index.n, dtype=np.int64)
        id_rank[np.argsort(np.array(index.ids, dtype=object), kind="stable")] = np.arange(index.n)
        order = np.lexsort((id_rank[ppt], dists, pimg))
        first = np.flatnonzero(np.r_[True, pimg[order][1:] != pimg[order][:-1]])
        win_img = pimg[order][first]
        win_pt = ppt[order][first]
        win_dist = dists[order][first]

        within = win_dist <= max_radius
        for ii, pp, dd in zip(win_img[within], win_pt[within], win_dist[within]):
            matches.append(MatchResult(
                image_id=images[ii].image_id,
                crossing_id=index.ids[pp],
                distance=float(dd),
            ))
            rejected_mask[ii] = False

    matches.sort(key=lambda m: m.image_id)
    rejected = sorted(images[i].image_id for i in np.flatnonzero(rejected_mask))
    coverage = None
    if matches:
        coverage = sum(1 for m in matches if m.distance <= prefer_radius) / len(matches)
    return MatchOutcome(matches=matches, rejected=rejected, coverage=coverage)


def match_images_brute(
    images: list[ImageRecord],
    points: list[CrossingPoint],
    prefer_radius: float = DEFAULT_PREFER_RADIUS_M,
    max_radius: float = DEFAULT_MAX_RADIUS_M,
) -> MatchOutcome:
    """Quadratic baseline: scan every (image, point) pair, no index.

    Same contract and tie-breaking as match_images; kept as the reference
    the indexed matcher is verified against.
    """
    if not points:
        raise ValidationError("match_images requires a non-empty crossing point list")
    if not images:
        return MatchOutcome(matches=[], rejected=[], coverage=None)
    _validate_unique_image_ids(images)

    ids = [p.crossing_id for p in points]
    id_rank = np.empty(len(points), dtype=np.int64)
    id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(points))
    lat_rad = np.radians(np.array([p.location.lat for p in points]))
    lon_rad = np.radians(np.array([p.location.lon for p in points]))
    cos_lat = np.cos(lat_rad)

    matches: list[MatchResult] = []
    rejected: list[str] = []
    for im in images:
        d = _haversine_to_many(
            math.radians(im.location.lat), math.radians(im.location.lon),
            lat_rad, lon_rad, cos_lat,
        )
        dmin = d.min()
        tied = np.flatnonzero(d == dmin)
        best = tied[np.argmin(id_rank[tied])]
        if dmin <= max_radius:
            matches.append(MatchResult(im.image_id, ids[best], float(dmin)))
        else:
            rejected.append(im.image_id)

    matches.sort(key=lambda m: m.image_id)
    rejected.sort()
    coverage = None
    if matches:
        coverage = sum(1 for m in matches if m.distance <= prefer_radius) / len(matches)
    return MatchOutcome(matches=matches, rejected=rejected, coverage=coverage)
