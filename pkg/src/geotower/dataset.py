"""Interaction/impression logs, vocabularies and the synthetic data generator."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .numeric import make_rng
from .spatial_index import (
    FEATURE_RESOLUTIONS,
    LocationFeatures,
    SpatialIndexError,
    check_point,
    derive_features,
    format_cell,
    latlng_to_cell,
    parse_cell,
)

logger = logging.getLogger(__name__)

INTERACTION_FIELDS = ["user_id", "house_id", "city", "lat", "lng", "event", "timestamp"]
IMPRESSION_FIELDS = [
    "anchor_id", "anchor_lat", "anchor_lng", "anchor_city",
    "candidate_id", "candidate_lat", "candidate_lng", "candidate_city",
    "rank", "rent_flow", "shown_at",
]


def _utc(*args) -> int:
    return int(datetime(*args, tzinfo=timezone.utc).timestamp())


TRAIN_WINDOW = (_utc(2022, 1, 1), _utc(2024, 12, 31, 23, 59, 59))
REPLAY_WINDOW = (_utc(2025, 3, 1), _utc(2025, 3, 31, 23, 59, 59))
UNKNOWN = 0
NAMESPACES = ("users", "cities") + tuple(f"cell{r}" for r in FEATURE_RESOLUTIONS)


class DataError(ValueError):
    """Malformed input files, empty datasets, infeasible generator configs."""


class EventKind(str, Enum):
    VISIT_BOOKING = "visit_booking"
    OFFER = "offer"
    CLICK = "click"
    OTHER = "other"


HIGH_INTENT = frozenset({EventKind.VISIT_BOOKING, EventKind.OFFER})


@dataclass(frozen=True)
class House:
    house_id: str
    lat: float
    lng: float
    city: str


@dataclass(frozen=True)
class Interaction:
    user_id: str
    house_id: str
    city: str
    lat: float
    lng: float
    event: EventKind
    timestamp: int

    @property
    def house(self) -> House:
        return House(self.house_id, self.lat, self.lng, self.city)


@dataclass(frozen=True)
class Impression:
    anchor: House
    candidate: House
    rank: int
    rent_flow: bool
    shown_at: int


@lru_cache(maxsize=1 << 18)
def house_features(lat: float, lng: float, city: str) -> LocationFeatures:
    return derive_features(lat, lng, city)


# ---------------------------------------------------------------- CSV codecs


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_interactions(path, interactions) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERACTION_FIELDS)
        for it in interactions:
            w.writerow([
                it.user_id, it.house_id, it.city, _fmt_float(it.lat), _fmt_float(it.lng),
                EventKind(it.event).value, int(it.timestamp),
            ])


def _read_rows(path, expected_header):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise DataError(f"{path}: expected header {expected_header}, got {header}")
        for row in reader:
            yield reader.line_num, row


def _parse_point(lat_s: str, lng_s: str) -> tuple[float, float]:
    lat, lng = float(lat_s), float(lng_s)
    check_point(lat, lng)
    return lat, lng


def load_interactions(path, window=TRAIN_WINDOW) -> tuple[list[Interaction], int]:
    """Load an interaction CSV keeping high-intent events inside ``window``.

    Returns:
        The kept interactions and the number of dropped rows.
    """
    start, end = window
    kept, dropped = [], 0
    for line, row in _read_rows(path, INTERACTION_FIELDS):
        try:
            if len(row) != len(INTERACTION_FIELDS):
                raise ValueError(f"expected {len(INTERACTION_FIELDS)} fields, got {len(row)}")
            user_id, house_id, city, lat_s, lng_s, event_s, ts_s = row
            lat, lng = _parse_point(lat_s, lng_s)
            event = EventKind(event_s)
            ts = int(ts_s)
        except (ValueError, SpatialIndexError) as exc:
            raise DataError(f"{path}:{line}: {exc}") from None
        if event not in HIGH_INTENT or not start <= ts <= end:
            dropped += 1
            continue
        kept.append(Interaction(user_id, house_id, city, lat, lng, event, ts))
    if not kept:
        raise DataError(f"{path}: no high-intent interactions inside the window")
    logger.info("loaded %d interactions from %s, dropped %d", len(kept), path, dropped)
    return kept, dropped


def write_impressions(path, impressions) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMPRESSION_FIELDS)
        for imp in impressions:
            a, c = imp.anchor, imp.candidate
            w.writerow([
                a.house_id, _fmt_float(a.lat), _fmt_float(a.lng), a.city,
                c.house_id, _fmt_float(c.lat), _fmt_float(c.lng), c.city,
                int(imp.rank), int(bool(imp.rent_flow)), int(imp.shown_at),
            ])


def load_impressions(path) -> list[Impression]:
    out = []
    seen_ranks = set()
    for line, row in _read_rows(path, IMPRESSION_FIELDS):
        try:
            if len(row) != len(IMPRESSION_FIELDS):
                raise ValueError(f"expected {len(IMPRESSION_FIELDS)} fields, got {len(row)}")
            anchor = House(row[0], *_parse_point(row[1], row[2]), row[3])
            cand = House(row[4], *_parse_point(row[5], row[6]), row[7])
            rank = int(row[8])
            if rank < 1:
                raise ValueError(f"rank must be >= 1, got {rank}")
            if row[9] not in ("0", "1"):
                raise ValueError(f"rent_flow must be 0 or 1, got {row[9]!r}")
            shown_at = int(row[10])
        except (ValueError, SpatialIndexError) as exc:
            raise DataError(f"{path}:{line}: {exc}") from None
        key = (anchor.house_id, shown_at, rank)
        if key in seen_ranks:
            raise DataError(f"{path}:{line}: duplicate rank {rank} for anchor {anchor.house_id}")
        seen_ranks.add(key)
        out.append(Impression(anchor, cand, rank, row[9] == "1", shown_at))
    if not out:
        raise DataError(f"{path}: no impressions")
    return out


# -------------------------------------------------------------- vocabulary


class Vocab:
    """Per-namespace key -> index maps; index 0 is UNKNOWN everywhere.

    Keys are user ids, city names, or integer cell ids for ``cell6``..``cell9``.
    """

    def __init__(self, keys: dict[str, list]):
        missing = set(NAMESPACES) - set(keys)
        if missing:
            raise DataError(f"vocab missing namespaces {sorted(missing)}")
        self.keys = {ns: list(keys[ns]) for ns in NAMESPACES}
        self._index = {
            ns: {k: i for i, k in enumerate(ks, start=1)} for ns, ks in self.keys.items()
        }

    def size(self, ns: str) -> int:
        """Table size including the UNKNOWN slot."""
        return len(self.keys[ns]) + 1

    def index(self, ns: str, key) -> int:
        return self._index[ns].get(key, UNKNOWN)

    def key(self, ns: str, idx: int):
        if idx == UNKNOWN:
            return None
        return self.keys[ns][idx - 1]

    def encode_location(self, feats: LocationFeatures) -> tuple[int, int, int, int, int]:
        return (
            self.index("cities", feats.city),
            *(self.index(f"cell{r}", feats.cell(r)) for r in FEATURE_RESOLUTIONS),
        )

    def sizes(self) -> dict[str, int]:
        return {ns: self.size(ns) for ns in NAMESPACES}

    def to_json(self) -> dict:
        out = {}
        for ns, ks in self.keys.items():
            out[ns] = [format_cell(k) for k in ks] if ns.startswith("cell") else list(ks)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "Vocab":
        keys = {}
        for ns in NAMESPACES:
            ks = data[ns]
            keys[ns] = [parse_cell(k) for k in ks] if ns.startswith("cell") else list(ks)
        return cls(keys)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.keys == other.keys


def build_vocab(interactions) -> Vocab:
    users, cities = set(), set()
    cells = {r: set() for r in FEATURE_RESOLUTIONS}
    for it in interactions:
        users.add(it.user_id)
        cities.add(it.city)
        feats = house_features(it.lat, it.lng, it.city)
        for r in FEATURE_RESOLUTIONS:
            cells[r].add(feats.cell(r))
    keys = {"users": sorted(users), "cities": sorted(cities)}
    for r in FEATURE_RESOLUTIONS:
        keys[f"cell{r}"] = sorted(cells[r])
    return Vocab(keys)


# ------------------------------------------------------- synthetic generator


@dataclass
class SyntheticConfig:
    seed: int = 42
    n_cities: int = 8
    n_users: int = 4000
    n_houses: int = 8000
    n_interactions: int = 50000
    n_anchors: int = 5000
    top_n: int = 20
    hotspots_per_city: int = 4
    user_scale_km: float = 2.0
    cluster_count: int = 12
    base_rentflow_rate: float = 0.03
    matched_rentflow_rate: float = 0.12
    city_radius_km: float = 8.0
    cluster_affinity: float = 4.0
    candidate_scale_km: float = 3.0
    low_intent_fraction: float = 0.2
    popularity_sigma: float = 1.0

    def validate(self) -> None:
        counts = ["n_cities", "n_users", "n_houses", "n_interactions", "n_anchors",
                  "top_n", "hotspots_per_city", "cluster_count"]
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise DataError(f"synthetic.{name} must be >= 1")
        for name in ["base_rentflow_rate", "matched_rentflow_rate", "low_intent_fraction"]:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"synthetic.{name} must be in [0, 1], got {v}")
        if self.matched_rentflow_rate < self.base_rentflow_rate:
            raise DataError("synthetic.matched_rentflow_rate must be >= base_rentflow_rate")
        for name in ["user_scale_km", "city_radius_km", "candidate_scale_km"]:
            if not getattr(self, name) > 0:
                raise DataError(f"synthetic.{name} must be > 0")
        if self.popularity_sigma < 0:
            raise DataError("synthetic.popularity_sigma must be >= 0")
        if self.cluster_affinity < 0:
            raise DataError("synthetic.cluster_affinity must be >= 0")
        smallest_city = self.n_houses // self.n_cities
        if smallest_city < self.top_n + 1:
            raise DataError(
                f"infeasible config: {smallest_city} houses per city cannot fill "
                f"top_n={self.top_n} candidates plus the anchor"
            )

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class SyntheticPaths:
    interactions: Path
    impressions: Path
    ground_truth: Path


def _city_centers(n: int) -> np.ndarray:
    # one degree apart on a grid: disjoint for any city radius below ~50 km
    i = np.arange(n)
    return np.stack([-23.5 + (i // 4) * 1.0, -46.6 + (i % 4) * 1.0], axis=1)


def _offset_points(center, dist_km, bearing):
    lat0, lng0 = center
    dlat = dist_km * np.cos(bearing) / 111.195
    dlng = dist_km * np.sin(bearing) / (111.195 * math.cos(math.radians(lat0)))
    return np.round(lat0 + dlat, 6), np.round(lng0 + dlng, 6)


def _pairwise_km(lat1, lng1, lat2, lng2):
    """Haversine distances between two point sets, shape (len1, len2)."""
    p1, p2 = np.radians(lat1)[:, None], np.radians(lat2)[None, :]
    dl = np.radians(lng2)[None, :] - np.radians(lng1)[:, None]
    a = np.sin((p2 - p1) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * 6371.0 * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def generate_synthetic(cfg: SyntheticConfig, out_dir) -> SyntheticPaths:
    """Write interactions.csv, impressions.csv and ground_truth.json to ``out_dir``.

    Houses lie in city disks; each house inherits a latent amenity cluster
    from its res-7 cell, so clusters are patchworks of non-adjacent regions.
    Users sit in one city with a mixture over that city's hotspots and one
    preferred cluster; their events favour nearby houses and houses of the
    preferred cluster. Rent-flow on an impression is more likely when anchor
    and candidate share a cluster.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed

    centers = _city_centers(cfg.n_cities)
    city_names = [f"city_{c:02d}" for c in range(cfg.n_cities)]

    # houses
    rng = make_rng(seed, "houses")
    house_city = np.arange(cfg.n_houses) % cfg.n_cities
    radius = cfg.city_radius_km * np.sqrt(rng.uniform(size=cfg.n_houses))
    bearing = rng.uniform(0, 2 * np.pi, size=cfg.n_houses)
    h_lat = np.empty(cfg.n_houses)
    h_lng = np.empty(cfg.n_houses)
    for c in range(cfg.n_cities):
        sel = house_city == c
        h_lat[sel], h_lng[sel] = _offset_points(centers[c], radius[sel], bearing[sel])
    house_ids = [f"h{i:06d}" for i in range(cfg.n_houses)]
    popularity = make_rng(seed, "popularity").lognormal(0.0, cfg.popularity_sigma, cfg.n_houses)

    rng = make_rng(seed, "clusters")
    region = [latlng_to_cell(float(a), float(b), 7) for a, b in zip(h_lat, h_lng)]
    regions = sorted(set(region))
    region_cluster = dict(zip(regions, rng.integers(cfg.cluster_count, size=len(regions))))
    house_cluster = np.array([region_cluster[r] for r in region], dtype=np.int64)

    by_city = [np.flatnonzero(house_city == c) for c in range(cfg.n_cities)]

    # users and interactions
    rng = make_rng(seed, "users")
    user_city = rng.integers(cfg.n_cities, size=cfg.n_users)
    user_pref = rng.integers(cfg.cluster_count, size=cfg.n_users)
    user_mix = rng.dirichlet(np.full(cfg.hotspots_per_city, 0.5), size=cfg.n_users)
    activity = rng.lognormal(0.0, 0.75, size=cfg.n_users)
    n_low = int(round(cfg.n_interactions * cfg.low_intent_fraction))
    per_user = rng.multinomial(cfg.n_interactions + n_low, activity / activity.sum())

    rng_hot = make_rng(seed, "hotspots")
    hotspot_kernel = []
    for c in range(cfg.n_cities):
        r = cfg.city_radius_km * 0.7 * np.sqrt(rng_hot.uniform(size=cfg.hotspots_per_city))
        b = rng_hot.uniform(0, 2 * np.pi, size=cfg.hotspots_per_city)
        hl, hg = _offset_points(centers[c], r, b)
        d = _pairwise_km(hl, hg, h_lat[by_city[c]], h_lng[by_city[c]])
        hotspot_kernel.append(np.exp(-d / cfg.user_scale_km))

    rng = make_rng(seed, "interactions")
    rows = []
    for u in range(cfg.n_users):
        k = int(per_user[u])
        if k == 0:
            continue
        c = int(user_city[u])
        members = by_city[c]
        w = (user_mix[u] @ hotspot_kernel[c]) * popularity[members]
        w = w * (1.0 + cfg.cluster_affinity * (house_cluster[members] == user_pref[u]))
        picks = members[rng.choice(len(members), size=k, p=w / w.sum())]
        for h in picks:
            rows.append((u, int(h)))
    order = rng.permutation(len(rows))
    low = np.zeros(len(rows), dtype=bool)
    low[order[:n_low]] = True
    kinds = rng.uniform(size=len(rows))
    stamps = rng.integers(TRAIN_WINDOW[0], TRAIN_WINDOW[1] + 1, size=len(rows))
    interactions = []
    for i, (u, h) in enumerate(rows):
        if low[i]:
            event = EventKind.CLICK if kinds[i] < 0.8 else EventKind.OTHER
        else:
            event = EventKind.VISIT_BOOKING if kinds[i] < 0.7 else EventKind.OFFER
        interactions.append(Interaction(
            f"u{u:06d}", house_ids[h], city_names[house_city[h]],
            float(h_lat[h]), float(h_lng[h]), event, int(stamps[i]),
        ))
    interactions.sort(key=lambda it: (it.timestamp, it.user_id, it.house_id))

    # impressions from a distance-driven item-item recommender
    rng = make_rng(seed, "impressions")
    anchors = rng.choice(cfg.n_houses, size=cfg.n_anchors, replace=cfg.n_anchors > cfg.n_houses)
    impressions = []
    for a in anchors:
        a = int(a)
        members = by_city[house_city[a]]
        members = members[members != a]
        d = _pairwise_km(h_lat[[a]], h_lng[[a]], h_lat[members], h_lng[members])[0]
        w = np.exp(-d / cfg.candidate_scale_km)
        pick = rng.choice(len(members), size=cfg.top_n, replace=False, p=w / w.sum())
        pick = pick[np.argsort(d[pick], kind="stable")]
        shown_at = int(rng.integers(REPLAY_WINDOW[0], REPLAY_WINDOW[1] + 1))
        matched = house_cluster[members[pick]] == house_cluster[a]
        p = np.where(matched, cfg.matched_rentflow_rate, cfg.base_rentflow_rate)
        flows = rng.uniform(size=cfg.top_n) < p
        anchor = House(house_ids[a], float(h_lat[a]), float(h_lng[a]), city_names[house_city[a]])
        for rank, (j, flow) in enumerate(zip(pick, flows), start=1):
            h = int(members[j])
            cand = House(house_ids[h], float(h_lat[h]), float(h_lng[h]), city_names[house_city[h]])
            impressions.append(Impression(anchor, cand, rank, bool(flow), shown_at))

    paths = SyntheticPaths(
        out / "interactions.csv", out / "impressions.csv", out / "ground_truth.json"
    )
    write_interactions(paths.interactions, interactions)
    write_impressions(paths.impressions, impressions)
    truth = {house_ids[i]: int(house_cluster[i]) for i in range(cfg.n_houses)}
    paths.ground_truth.write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return paths
