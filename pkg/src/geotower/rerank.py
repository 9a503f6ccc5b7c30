"""Offline replay of similar-listing logs under similarity or distance pruning."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import House, house_features
from .models import FEATURE_COLUMNS, ModelArtifact
from .spatial_index import format_cell, haversine_km_array

DEFAULT_TAU_GRID = (-1.0, 0.0) + tuple(round(0.05 * k, 2) for k in range(1, 20))
DEFAULT_RADIUS_GRID_KM = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0)


class UndefinedUpliftError(ValueError):
    """The unfiltered log has no rent-flows, so relative uplift is undefined."""


@dataclass
class SimConfig:
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    radius_grid_km: tuple[float, ...] = DEFAULT_RADIUS_GRID_KM
    min_retained_fraction: float = 0.01

    def __post_init__(self):
        self.tau_grid = tuple(float(t) for t in self.tau_grid)
        self.radius_grid_km = tuple(float(r) for r in self.radius_grid_km)

    def validate(self):
        if list(self.tau_grid) != sorted(self.tau_grid) or not self.tau_grid:
            raise ValueError("sim.tau_grid must be non-empty and ascending")
        if any(not -1.0 <= t <= 1.0 for t in self.tau_grid):
            raise ValueError("sim.tau_grid entries must lie in [-1, 1]")
        if not self.radius_grid_km or any(r <= 0 for r in self.radius_grid_km):
            raise ValueError("sim.radius_grid_km entries must be > 0")
        if not 0.0 <= self.min_retained_fraction <= 1.0:
            raise ValueError("sim.min_retained_fraction must be in [0, 1]")


@dataclass
class UpliftPoint:
    threshold: float
    retained: int
    rent_flows: int
    retained_fraction: float
    rentflow_rate: float | None       # None when nothing is retained
    uplift_pct: float | None
    below_floor: bool


@dataclass
class SimReport:
    model: str
    points: list[UpliftPoint]
    baseline_rentflow_rate: float
    n_impressions: int
    n_anchors: int
    n_skipped: int
    avg_uplift_pct: float | None = None
    avg_rentflow_rate: float | None = None
    meta: dict = field(default_factory=dict)


def embed_houses(model: ModelArtifact, houses: list[House]):
    """Geo-embeddings for ``houses``.

    Returns:
        (embeddings, skipped) where ``skipped[i]`` marks houses an MF model
        has no factor for; their rows are zero.
    """
    n = len(houses)
    if model.kind == "mf":
        row_of = {k: i for i, k in enumerate(model.location_keys)}
        emb = np.zeros((n, model.dim))
        skipped = np.zeros(n, dtype=bool)
        for i, h in enumerate(houses):
            key = format_cell(house_features(h.lat, h.lng, h.city).cell9)
            r = row_of.get(key)
            if r is None:
                skipped[i] = True
            else:
                emb[i] = model.location_embeddings[r]
        return emb, skipped
    vocab = model.vocab
    enc = np.zeros((n, len(FEATURE_COLUMNS)), dtype=np.int64)
    for i, h in enumerate(houses):
        enc[i] = vocab.encode_location(house_features(h.lat, h.lng, h.city))
    return model.tower().embed_locations(enc), np.zeros(n, dtype=bool)


def embed_house(model: ModelArtifact, house: House):
    """One house's embedding, or None when an MF model cannot judge it."""
    emb, skipped = embed_houses(model, [house])
    return None if skipped[0] else emb[0]


def _unique_houses(impressions):
    index, houses = {}, []
    a_idx = np.empty(len(impressions), dtype=np.int64)
    c_idx = np.empty(len(impressions), dtype=np.int64)
    for k, imp in enumerate(impressions):
        for h, out in ((imp.anchor, a_idx), (imp.candidate, c_idx)):
            i = index.get(h)
            if i is None:
                i = index[h] = len(houses)
                houses.append(h)
            out[k] = i
    return houses, a_idx, c_idx


def pair_similarity(model: ModelArtifact, impressions):
    """Cosine similarity per impression and the mask of unjudgeable pairs."""
    houses, a_idx, c_idx = _unique_houses(impressions)
    emb, skipped = embed_houses(model, houses)
    norms = np.linalg.norm(emb, axis=1)
    unit = emb / np.where(norms > 0, norms, 1.0)[:, None]
    cos = np.einsum("ij,ij->i", unit[a_idx], unit[c_idx])
    return np.clip(cos, -1.0, 1.0), skipped[a_idx] | skipped[c_idx]


def _curve(name, flows, keep_masks, thresholds, cfg: SimConfig, n_anchors, n_skipped):
    n = flows.size
    base_flows = int(flows.sum())
    if base_flows == 0:
        raise UndefinedUpliftError("no rent-flows in the unfiltered log; uplift undefined")
    base = base_flows / n
    points = []
    for t, keep in zip(thresholds, keep_masks):
        kept = int(keep.sum())
        kept_flows = int(flows[keep].sum())
        frac = kept / n
        rate = kept_flows / kept if kept else None
        uplift = 100.0 * (rate - base) / base if rate is not None else None
        points.append(UpliftPoint(
            float(t), kept, kept_flows, frac, rate, uplift,
            below_floor=kept == 0 or frac < cfg.min_retained_fraction,
        ))
    valid = [p for p in points if not p.below_floor]
    rep = SimReport(name, points, base, n, n_anchors, n_skipped)
    if valid:
        rep.avg_uplift_pct = float(np.mean([p.uplift_pct for p in valid]))
        rep.avg_rentflow_rate = float(np.mean([p.rentflow_rate for p in valid]))
    return rep


def _n_anchors(impressions) -> int:
    return len({(imp.anchor.house_id, imp.shown_at) for imp in impressions})


def replay(impressions, model: ModelArtifact, cfg: SimConfig | None = None,
           name: str | None = None) -> SimReport:
    """Keep a candidate iff cos(anchor, candidate) >= tau, for every tau in the grid.

    Pairs an MF model cannot embed are always kept.
    """
    cfg = cfg or SimConfig()
    cfg.validate()
    if not impressions:
        raise ValueError("replay needs at least one impression")
    flows = np.fromiter((imp.rent_flow for imp in impressions), dtype=bool, count=len(impressions))
    cos, skipped = pair_similarity(model, impressions)
    masks = [skipped | (cos >= t) for t in cfg.tau_grid]
    return _curve(name or model.kind, flows, masks, cfg.tau_grid, cfg,
                  _n_anchors(impressions), int(skipped.sum()))


def radial_filter_replay(impressions, cfg: SimConfig | None = None,
                         name: str = "radial") -> SimReport:
    """Keep a candidate iff it lies within r km of its anchor."""
    cfg = cfg or SimConfig()
    cfg.validate()
    if not impressions:
        raise ValueError("replay needs at least one impression")
    flows = np.fromiter((imp.rent_flow for imp in impressions), dtype=bool, count=len(impressions))
    coords = np.array(
        [(i.anchor.lat, i.anchor.lng, i.candidate.lat, i.candidate.lng) for i in impressions]
    )
    dist = haversine_km_array(coords[:, 0], coords[:, 1], coords[:, 2], coords[:, 3])
    masks = [dist <= r for r in cfg.radius_grid_km]
    return _curve(name, flows, masks, cfg.radius_grid_km, cfg, _n_anchors(impressions), 0)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def export_curves(path, reports: list[SimReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "threshold", "retained_pct", "rentflow_rate", "uplift_pct", "below_floor"])
    for rep in reports:
        for p in rep.points:
            w.writerow([rep.model, _fmt(p.threshold), _fmt(100.0 * p.retained_fraction),
                        _fmt(p.rentflow_rate), _fmt(p.uplift_pct), int(p.below_floor)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def summary_table(reports: list[SimReport], ia: dict[str, float] | None = None) -> list[dict]:
    """One row per model: IA (when known) and the averaged rate and uplift."""
    ia = ia or {}
    rows = []
    for rep in reports:
        rows.append({
            "model": rep.model,
            "ia": ia.get(rep.model),
            "avg_rentflow_uplift_pct": rep.avg_uplift_pct,
            "avg_rentflow_rate": rep.avg_rentflow_rate,
            "baseline_rentflow_rate": rep.baseline_rentflow_rate,
            "n_impressions": rep.n_impressions,
            "n_anchors": rep.n_anchors,
            "n_skipped": rep.n_skipped,
        })
    return rows


def write_summary_json(path, reports: list[SimReport], ia: dict[str, float] | None = None):
    Path(path).write_text(json.dumps(summary_table(reports, ia), indent=2) + "\n")
