"""Location-embedding models: implicit ALS and the two-tower encoders."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .dataset import DataError, Vocab, house_features
from .numeric import (
    Dense,
    Embedding,
    NumericError,
    Param,
    l2_normalize_backward,
    l2_normalize_rows,
    make_rng,
    sub_seed,
)
from .spatial_index import FEATURE_RESOLUTIONS, format_cell

logger = logging.getLogger(__name__)

ARTIFACT_FORMAT = 1
MODEL_KINDS = ("mf", "tower_r9", "tower_multi")
# column order of the encoded location feature array
FEATURE_COLUMNS = ("cities",) + tuple(f"cell{r}" for r in FEATURE_RESOLUTIONS)


@dataclass
class TowerConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    resolutions: tuple[int, ...] = (6, 7, 8, 9)
    use_city: bool = True
    seed: int = 42

    def __post_init__(self):
        self.resolutions = tuple(sorted(int(r) for r in self.resolutions))

    def validate(self):
        if not self.resolutions:
            raise ValueError("tower.resolutions must be non-empty")
        bad = set(self.resolutions) - set(FEATURE_RESOLUTIONS)
        if bad:
            raise ValueError(f"tower.resolutions outside {FEATURE_RESOLUTIONS}: {sorted(bad)}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("tower dims must be >= 1")

    @classmethod
    def for_kind(cls, kind: str, **kw) -> "TowerConfig":
        if kind == "tower_r9":
            return cls(resolutions=(9,), use_city=False, **kw)
        if kind == "tower_multi":
            return cls(resolutions=FEATURE_RESOLUTIONS, use_city=True, **kw)
        raise ValueError(f"no tower config for model kind {kind!r}")


@dataclass
class AlsConfig:
    factors: int = 32
    alpha: float = 40.0
    reg: float = 0.01
    iterations: int = 15
    seed: int = 42

    def validate(self):
        if self.factors < 1:
            raise ValueError("als.factors must be >= 1")
        if not self.reg > 0:
            raise ValueError("als.reg must be > 0")
        if self.iterations < 1:
            raise ValueError("als.iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("als.alpha must be >= 0")


# ------------------------------------------------------------------ towers


class _Tower:
    """Concatenated embeddings -> dense(ReLU) -> dense -> L2 normalize."""

    def __init__(self, name, tables: list[tuple[str, int]], cfg: TowerConfig):
        self.columns = [col for col, _ in tables]
        self.embeddings = [
            Embedding(f"{name}.{col}", num, cfg.embed_dim, sub_seed(cfg.seed, f"{name}.{col}"))
            for col, num in tables
        ]
        in_dim = cfg.embed_dim * len(tables)
        self.fc1 = Dense(f"{name}.fc1", in_dim, cfg.hidden_dim, sub_seed(cfg.seed, f"{name}.fc1"), relu=True)
        self.fc2 = Dense(f"{name}.fc2", cfg.hidden_dim, cfg.embed_dim, sub_seed(cfg.seed, f"{name}.fc2"), relu=False)

    @property
    def params(self) -> list[Param]:
        out = []
        for e in self.embeddings:
            out += e.params
        return out + self.fc1.params + self.fc2.params

    def forward(self, idx_columns: list[np.ndarray]):
        parts, idx_cache = [], []
        for emb, idx in zip(self.embeddings, idx_columns):
            x, c = emb.forward(idx)
            parts.append(x)
            idx_cache.append(c)
        X = np.concatenate(parts, axis=1)
        H, c1 = self.fc1.forward(X)
        Z, c2 = self.fc2.forward(H)
        Y, cn = l2_normalize_rows(Z)
        return Y, (idx_cache, c1, c2, cn)

    def backward(self, cache, dY: np.ndarray) -> None:
        idx_cache, c1, c2, cn = cache
        dZ = l2_normalize_backward(cn, dY)
        dH = self.fc2.backward(c2, dZ)
        dX = self.fc1.backward(c1, dH)
        dim = dX.shape[1] // len(self.embeddings)
        for k, (emb, idx) in enumerate(zip(self.embeddings, idx_cache)):
            emb.backward(idx, dX[:, k * dim:(k + 1) * dim])


class TwoTower:
    """User tower over user ids; location tower over city and cell features.

    Location inputs are int arrays of shape (B, 5) holding vocabulary indices
    in ``FEATURE_COLUMNS`` order; the tower reads only the columns its config
    enables, so the single-resolution model is this class with
    ``resolutions=(9,)`` and ``use_city=False``.
    """

    def __init__(self, vocab_sizes: dict[str, int], cfg: TowerConfig):
        cfg.validate()
        self.cfg = cfg
        self.user_tower = _Tower("user", [("users", vocab_sizes["users"])], cfg)
        loc_cols = (["cities"] if cfg.use_city else []) + [f"cell{r}" for r in cfg.resolutions]
        self.location_tower = _Tower(
            "location", [(c, vocab_sizes[c]) for c in loc_cols], cfg
        )
        self._loc_col_idx = [FEATURE_COLUMNS.index(c) for c in loc_cols]

    @property
    def params(self) -> list[Param]:
        return self.user_tower.params + self.location_tower.params

    def user_forward(self, user_idx):
        return self.user_tower.forward([np.asarray(user_idx, dtype=np.int64)])

    def user_backward(self, cache, dU):
        self.user_tower.backward(cache, dU)

    def location_forward(self, loc_feats):
        loc_feats = np.asarray(loc_feats, dtype=np.int64).reshape(-1, len(FEATURE_COLUMNS))
        return self.location_tower.forward([loc_feats[:, j] for j in self._loc_col_idx])

    def location_backward(self, cache, dV):
        self.location_tower.backward(cache, dV)

    def embed_users(self, user_idx) -> np.ndarray:
        return self.user_forward(user_idx)[0]

    def embed_locations(self, loc_feats) -> np.ndarray:
        return self.location_forward(loc_feats)[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise DataError(f"parameter {p.name!r} missing from state")
            if state[p.name].shape != p.value.shape:
                raise DataError(f"parameter {p.name!r} has shape {state[p.name].shape}, "
                                f"expected {p.value.shape}")
            p.value = np.array(state[p.name], dtype=np.float64)


# --------------------------------------------------------------------- ALS


@dataclass
class AlsResult:
    user_factors: np.ndarray   # rows aligned with vocab users, UNKNOWN excluded
    item_factors: np.ndarray   # rows aligned with vocab cell9 keys
    objective: list[float] = field(default_factory=list)  # after every step
    steps: list[str] = field(default_factory=list)        # "users" | "items" | "balance"


def interaction_counts(interactions, vocab: Vocab) -> sparse.csr_matrix:
    """Event counts per (user, res-9 cell), indices shifted past UNKNOWN."""
    rows, cols = [], []
    for it in interactions:
        feats = house_features(it.lat, it.lng, it.city)
        rows.append(vocab.index("users", it.user_id) - 1)
        cols.append(vocab.index("cell9", feats.cell9) - 1)
    rows, cols = np.asarray(rows), np.asarray(cols)
    if rows.size == 0:
        raise DataError("ALS needs at least one interaction")
    if rows.min() < 0 or cols.min() < 0:
        raise DataError("interaction outside the vocabulary")
    shape = (vocab.size("users") - 1, vocab.size("cell9") - 1)
    m = sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=shape).tocsr()
    m.sum_duplicates()
    return m


def als_objective(counts: sparse.csr_matrix, X, Y, alpha, reg) -> float:
    """Weighted implicit loss over the full user x item grid plus L2 penalty.

    Unobserved cells have weight 1 and target 0, so the full sum splits into
    ``sum_all s^2`` plus a correction over observed cells.
    """
    coo = counts.tocoo()
    s = np.einsum("ij,ij->i", X[coo.row], Y[coo.col])
    c = 1.0 + alpha * coo.data
    full = float(np.sum((X.T @ X) * (Y.T @ Y)))
    observed = float(np.sum(c * (1.0 - s) ** 2 - s**2))
    return full + observed + reg * (float(np.sum(X * X)) + float(np.sum(Y * Y)))


def _solve_side(counts: sparse.csr_matrix, other: np.ndarray, alpha, reg, workers=1):
    """Exact minimiser of the objective over one factor matrix.

    Row u solves ``(Y'Y + Y'(C_u - I)Y + reg I) x_u = Y' C_u p_u``.
    """
    n, k = counts.shape[0], other.shape[1]
    gram = other.T @ other + reg * np.eye(k)
    out = np.zeros((n, k))
    indptr, indices, data = counts.indptr, counts.indices, counts.data

    def block(lo, hi):
        nnz = slice(indptr[lo], indptr[hi])
        Yo = other[indices[nnz]]
        conf = alpha * data[nnz]
        outer = np.einsum("n,ni,nj->nij", conf, Yo, Yo)
        rhs_terms = (1.0 + conf)[:, None] * Yo
        starts = indptr[lo:hi] - indptr[lo]
        nonempty = indptr[lo + 1:hi + 1] > indptr[lo:hi]
        A = np.broadcast_to(gram, (hi - lo, k, k)).copy()
        b = np.zeros((hi - lo, k))
        if outer.shape[0]:
            ne_starts = starts[nonempty]
            A[nonempty] += np.add.reduceat(outer, ne_starts, axis=0)
            b[nonempty] = np.add.reduceat(rhs_terms, ne_starts, axis=0)
        out[lo:hi] = np.linalg.solve(A, b[:, :, None])[:, :, 0]

    # chunk rows so each block holds a bounded number of outer products
    bounds, lo, budget = [], 0, max(1, 200_000 // (k * k))
    while lo < n:
        hi = int(np.searchsorted(indptr, indptr[lo] + budget, side="right")) - 1
        hi = min(max(hi, lo + 1), n)
        bounds.append((lo, hi))
        lo = hi
    if workers > 1:
        # blocks write disjoint rows; result does not depend on scheduling
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda b: block(*b), bounds))
    else:
        for b in bounds:
            block(*b)
    return out


def balance_factors(X: np.ndarray, Y: np.ndarray):
    """Rescale ``X, Y -> X A, Y A^-T`` to minimise ``|X|^2 + |Y|^2`` at fixed ``X Y'``.

    The minimiser splits the singular values of ``X Y'`` evenly between the
    two sides, so the weighted loss is unchanged and the penalty can only drop.
    """
    Qx, Rx = np.linalg.qr(X)
    Qy, Ry = np.linalg.qr(Y)
    u, s, vt = np.linalg.svd(Rx @ Ry.T)
    root = np.sqrt(s)
    return (Qx @ u) * root, (Qy @ vt.T) * root


def als_fit(counts: sparse.csr_matrix, cfg: AlsConfig, workers: int = 1) -> AlsResult:
    """Implicit-feedback ALS with confidence ``1 + alpha * count``.

    Each iteration solves the user side, the item side, then rebalances the
    scale between them. With a small ``reg`` the ridge solves alone drift
    towards that balance only very slowly, leaving the item factors whitened
    by the user Gram matrix.
    """
    cfg.validate()
    counts = sparse.csr_matrix(counts, dtype=np.float64)
    if counts.nnz == 0:
        raise DataError("ALS needs at least one interaction")
    n_users, n_items = counts.shape
    rng = make_rng(cfg.seed, "als.init")
    X = rng.normal(0.0, 0.01, size=(n_users, cfg.factors))
    Y = rng.normal(0.0, 0.01, size=(n_items, cfg.factors))
    counts_t = counts.T.tocsr()
    res = AlsResult(X, Y)

    def record(step):
        value = als_objective(counts, X, Y, cfg.alpha, cfg.reg)
        if not np.isfinite(value):
            raise NumericError(f"ALS objective non-finite at iteration {it + 1} ({step})")
        res.objective.append(value)
        res.steps.append(step)

    for it in range(cfg.iterations):
        X = _solve_side(counts, Y, cfg.alpha, cfg.reg, workers)
        record("users")
        Y = _solve_side(counts_t, X, cfg.alpha, cfg.reg, workers)
        record("items")
        X, Y = balance_factors(X, Y)
        record("balance")
        logger.debug("als iteration %d objective %.6f", it + 1, res.objective[-1])
    res.user_factors, res.item_factors = X, Y
    return res


# --------------------------------------------------------------- artifacts


def vocab_hash(vocab: Vocab) -> str:
    blob = json.dumps(vocab.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def location_key(kind: str, loc: tuple) -> str:
    """CSV entity id for an encoded-location tuple ``(city, c6, c7, c8, c9)`` of keys."""
    city, *cells = loc
    if kind == "tower_multi":
        return "|".join([city] + [format_cell(c) for c in cells])
    return format_cell(cells[-1])


def observed_locations(kind: str, interactions, vocab: Vocab) -> list[tuple]:
    """Distinct location keys seen in training, in deterministic key order.

    A key is the res-9 cell for ``mf``/``tower_r9`` and the full
    ``(city, cell6, cell7, cell8, cell9)`` tuple for ``tower_multi``.
    """
    seen = set()
    for it in interactions:
        f = house_features(it.lat, it.lng, it.city)
        loc = (f.city, f.cell6, f.cell7, f.cell8, f.cell9)
        seen.add(loc if kind == "tower_multi" else (None, None, None, None, f.cell9))
    if kind == "tower_multi":
        return sorted(seen)
    return sorted(seen, key=lambda t: t[-1])


def encode_locations(locs: list[tuple], vocab: Vocab) -> np.ndarray:
    out = np.zeros((len(locs), len(FEATURE_COLUMNS)), dtype=np.int64)
    for i, loc in enumerate(locs):
        for j, (col, key) in enumerate(zip(FEATURE_COLUMNS, loc)):
            out[i, j] = vocab.index(col, key)
    return out


@dataclass
class ModelArtifact:
    kind: str
    vocab: Vocab
    location_keys: list[str]
    location_embeddings: np.ndarray
    user_keys: list[str]
    user_embeddings: np.ndarray
    config: dict
    params: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        for name in ("location_embeddings", "user_embeddings"):
            m = getattr(self, name)
            if not np.all(np.isfinite(m)):
                raise NumericError(f"{name} contains non-finite values")
        self._tower = None

    @property
    def dim(self) -> int:
        return int(self.location_embeddings.shape[1])

    def tower(self) -> TwoTower:
        if self.kind == "mf":
            raise ValueError("matrix factorization artifacts have no tower")
        if self._tower is None:
            cfg = TowerConfig(**self.config["tower"])
            self._tower = TwoTower(self.vocab.sizes(), cfg)
            self._tower.load_state_dict(self.params)
        return self._tower

    def manifest(self) -> dict:
        return {
            "format_version": ARTIFACT_FORMAT,
            "kind": self.kind,
            "dim": self.dim,
            "n_locations": len(self.location_keys),
            "n_users": len(self.user_keys),
            "vocab_sizes": self.vocab.sizes(),
            "vocab_sha256": vocab_hash(self.vocab),
            "config": self.config,
            "params": {k: list(v.shape) for k, v in sorted(self.params.items())},
            **self.extra,
        }

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "params").mkdir(parents=True, exist_ok=True)
        for stale in (out / "params").glob("*.npy"):
            stale.unlink()
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        self.vocab.save(out / "vocab.json")
        write_embedding_csv(out / "location_embeddings.csv", self.location_keys, self.location_embeddings)
        write_embedding_csv(out / "user_embeddings.csv", self.user_keys, self.user_embeddings)
        for name, value in sorted(self.params.items()):
            with open(out / "params" / f"{name}.npy", "wb") as fh:
                np.save(fh, value, allow_pickle=False)
        return out

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: unreadable artifact manifest: {exc}") from None
        if manifest.get("format_version") != ARTIFACT_FORMAT:
            raise DataError(f"{path}: unsupported artifact format {manifest.get('format_version')}")
        vocab = Vocab.load(path / "vocab.json")
        if vocab_hash(vocab) != manifest["vocab_sha256"]:
            raise DataError(f"{path}: vocab does not match manifest hash")
        loc_keys, loc = read_embedding_csv(path / "location_embeddings.csv")
        user_keys, users = read_embedding_csv(path / "user_embeddings.csv")
        params = {
            name: np.load(path / "params" / f"{name}.npy", allow_pickle=False)
            for name in manifest["params"]
        }
        reserved = {"format_version", "kind", "dim", "n_locations", "n_users",
                    "vocab_sizes", "vocab_sha256", "config", "params"}
        extra = {k: v for k, v in manifest.items() if k not in reserved}
        return cls(manifest["kind"], vocab, loc_keys, loc, user_keys, users,
                   manifest["config"], params, extra)


def write_embedding_csv(path, keys, matrix: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entity_id"] + [f"dim_{j}" for j in range(matrix.shape[1])])
    for key, row in zip(keys, matrix):
        w.writerow([key] + [repr(float(x)) for x in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_embedding_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 1
        keys, rows = [], []
        for row in reader:
            keys.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return keys, np.asarray(rows, dtype=np.float64).reshape(len(keys), dim)


def fit_mf(interactions, vocab: Vocab, cfg: AlsConfig, workers: int = 1) -> ModelArtifact:
    counts = interaction_counts(interactions, vocab)
    res = als_fit(counts, cfg, workers)
    cells = vocab.keys["cell9"]
    return ModelArtifact(
        kind="mf",
        vocab=vocab,
        location_keys=[format_cell(c) for c in cells],
        location_embeddings=res.item_factors,
        user_keys=list(vocab.keys["users"]),
        user_embeddings=res.user_factors,
        config={"als": asdict(cfg)},
        params={"item_factors": res.item_factors, "user_factors": res.user_factors},
        extra={"als_objective": res.objective},
    )


def tower_artifact(kind, model: TwoTower, interactions, vocab: Vocab, config: dict,
                   extra: dict | None = None) -> ModelArtifact:
    locs = observed_locations(kind, interactions, vocab)
    if kind == "tower_multi":
        enc = encode_locations(locs, vocab)
    else:
        enc = np.zeros((len(locs), len(FEATURE_COLUMNS)), dtype=np.int64)
        enc[:, -1] = [vocab.index("cell9", loc[-1]) for loc in locs]
    loc_emb = model.embed_locations(enc)
    user_idx = np.arange(1, vocab.size("users"))
    return ModelArtifact(
        kind=kind,
        vocab=vocab,
        location_keys=[location_key(kind, loc) for loc in locs],
        location_embeddings=loc_emb,
        user_keys=list(vocab.keys["users"]),
        user_embeddings=model.embed_users(user_idx),
        # the tower section always reflects the model actually built
        config={**config, "tower": asdict(model.cfg)},
        params={k: v.copy() for k, v in model.state_dict().items()},
        extra=extra or {},
    )
