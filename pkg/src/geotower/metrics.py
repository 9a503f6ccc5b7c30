"""Embedding-collapse diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import l2_normalize_rows, singular_values

ZERO_SV = 1e-12


@dataclass
class IAReport:
    ia: float
    singular_values: np.ndarray
    n_vectors: int
    dim: int


@dataclass
class SpectrumReport:
    log_singular_values: np.ndarray   # descending; -inf where sigma <= ZERO_SV
    covariance_dim: int

    @property
    def decay(self) -> float:
        """ln(sigma_max) - ln(sigma_min) over the nonzero part of the spectrum."""
        finite = self.log_singular_values[np.isfinite(self.log_singular_values)]
        if finite.size == 0:
            return 0.0
        return float(finite[0] - finite[-1])


def information_abundance(E: np.ndarray) -> IAReport:
    """Sum of singular values over the largest one, on the raw matrix."""
    E = np.asarray(E, dtype=np.float64)
    s = singular_values(E)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("information abundance undefined for an all-zero matrix")
    return IAReport(float(s.sum() / s[0]), s, E.shape[0], E.shape[1])


def normalized_covariance(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.shape[0] < 2:
        raise ValueError("covariance spectrum needs at least 2 vectors")
    Z, _ = l2_normalize_rows(E)
    Z = Z - Z.mean(axis=0)
    return Z.T @ Z / Z.shape[0]


def covariance_spectrum(E: np.ndarray) -> SpectrumReport:
    C = normalized_covariance(E)
    s = singular_values(C)
    with np.errstate(divide="ignore"):
        logs = np.where(s > ZERO_SV, np.log(np.maximum(s, ZERO_SV)), -np.inf)
    return SpectrumReport(logs, C.shape[0])


def export_spectrum_csv(path, reports: dict[str, SpectrumReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "rank_index", "log_singular_value"])
    for model, rep in reports.items():
        for k, v in enumerate(rep.log_singular_values, start=1):
            w.writerow([model, k, repr(float(v)) if math.isfinite(v) else ""])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_summary_json(path, ia_reports: dict[str, IAReport]) -> None:
    summary = [
        {"model": m, "ia": r.ia, "n_vectors": r.n_vectors, "dim": r.dim}
        for m, r in ia_reports.items()
    ]
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
