"""Contrastive training for the two-tower models."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .dataset import Vocab, house_features
from .models import (
    FEATURE_COLUMNS,
    TowerConfig,
    TwoTower,
    observed_locations,
    tower_artifact,
)
from .numeric import TrainingError, adam_step, make_rng

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 15
    lr: float = 0.001
    temperature: float = 0.1
    seed: int = 42
    shuffle: bool = True

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("train.batch_size must be >= 2 for in-batch negatives")
        if not self.temperature > 0:
            raise ValueError("train.temperature must be > 0")
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("train.lr must be > 0")


@dataclass
class Batch:
    users: np.ndarray        # (B,) user vocab indices
    locations: np.ndarray    # (B, 5) encoded location features
    mask: np.ndarray         # (B, B) bool, True where (user_i, location_j) is a known positive


@dataclass
class LossReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_masked_pairs: list[int] = field(default_factory=list)
    first_batch_loss: float | None = None

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1]

    def to_dict(self) -> dict:
        return {**asdict(self), "final_loss": self.final_loss}


def infonce_masked_loss(U: np.ndarray, V: np.ndarray, mask: np.ndarray, temperature: float):
    """In-batch InfoNCE over user rows with known off-diagonal positives removed.

    Row i scores user i against every location in the batch; its own
    location is the target. Cells ``mask[i, j]`` with ``i != j`` are dropped
    from row i's softmax so other known positives are never used as
    negatives.

    Returns:
        (loss, dU, dV) where the gradients are of the mean loss.
    """
    B = U.shape[0]
    if V.shape[0] != B or mask.shape != (B, B):
        raise ValueError(f"shape mismatch: U {U.shape}, V {V.shape}, mask {mask.shape}")
    logits = (U @ V.T) / temperature
    if not np.all(np.isfinite(logits)):
        raise TrainingError("non-finite logits in InfoNCE loss")
    excluded = mask.copy()
    np.fill_diagonal(excluded, False)
    z = np.where(excluded, -np.inf, logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1)
    diag = np.diagonal(z)
    loss = float(np.mean(np.log(denom) - diag))
    probs = e / denom[:, None]
    dlogits = probs
    dlogits[np.diag_indices(B)] -= 1.0
    dlogits /= B
    dU = dlogits @ V / temperature
    dV = dlogits.T @ U / temperature
    return loss, dU, dV


class TrainingData:
    """Encoded training pairs plus the global positive-pair matrix for masking."""

    def __init__(self, kind: str, interactions, vocab: Vocab):
        self.kind = kind
        locs = observed_locations(kind, interactions, vocab)
        loc_id = {loc: i for i, loc in enumerate(locs)}
        n = len(interactions)
        self.users = np.empty(n, dtype=np.int64)
        self.locations = np.zeros((n, len(FEATURE_COLUMNS)), dtype=np.int64)
        self.location_ids = np.empty(n, dtype=np.int64)
        for i, it in enumerate(interactions):
            f = house_features(it.lat, it.lng, it.city)
            full = (f.city, f.cell6, f.cell7, f.cell8, f.cell9)
            self.users[i] = vocab.index("users", it.user_id)
            for j, (col, key) in enumerate(zip(FEATURE_COLUMNS, full)):
                self.locations[i, j] = vocab.index(col, key)
            key = full if kind == "tower_multi" else (None, None, None, None, f.cell9)
            self.location_ids[i] = loc_id[key]
        shape = (vocab.size("users"), len(locs))
        self.positives = sparse.csr_matrix(
            (np.ones(n, dtype=bool), (self.users, self.location_ids)), shape=shape
        )

    def __len__(self):
        return self.users.shape[0]

    def batch(self, rows: np.ndarray) -> Batch:
        u = self.users[rows]
        mask = self.positives[u][:, self.location_ids[rows]].toarray().astype(bool)
        return Batch(u, self.locations[rows], mask)


def build_batches(data: TrainingData, cfg: TrainConfig, epoch: int = 0) -> list[Batch]:
    n = len(data)
    if cfg.shuffle:
        order = make_rng(cfg.seed, f"train.epoch{epoch}").permutation(n)
    else:
        order = np.arange(n)
    batches = []
    for lo in range(0, n, cfg.batch_size):
        rows = order[lo:lo + cfg.batch_size]
        if rows.size < 2:
            continue
        batches.append(data.batch(rows))
    return batches


def train_step(model: TwoTower, batch: Batch, cfg: TrainConfig) -> float:
    U, ucache = model.user_forward(batch.users)
    V, vcache = model.location_forward(batch.locations)
    loss, dU, dV = infonce_masked_loss(U, V, batch.mask, cfg.temperature)
    model.user_backward(ucache, dU)
    model.location_backward(vcache, dV)
    for p in model.params:
        adam_step(p, lr=cfg.lr)
    return loss


def train(kind: str, interactions, vocab: Vocab, tower_cfg: TowerConfig | None = None,
          train_cfg: TrainConfig | None = None, log_path=None):
    """Fit a two-tower model and package it as an artifact.

    Returns:
        (ModelArtifact, LossReport)
    """
    tower_cfg = tower_cfg or TowerConfig.for_kind(kind)
    train_cfg = train_cfg or TrainConfig()
    train_cfg.validate()
    expected = TowerConfig.for_kind(kind)
    if (tower_cfg.resolutions, tower_cfg.use_city) != (expected.resolutions, expected.use_city):
        raise ValueError(f"tower config {tower_cfg} does not describe model kind {kind!r}")

    data = TrainingData(kind, interactions, vocab)
    model = TwoTower(vocab.sizes(), tower_cfg)
    report = LossReport()
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(train_cfg.epochs):
            losses, masked = [], 0
            for b, batch in enumerate(build_batches(data, train_cfg, epoch)):
                masked += int(batch.mask.sum() - batch.mask.shape[0])
                try:
                    loss = train_step(model, batch, train_cfg)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch + 1} batch {b + 1}: {exc}") from exc
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1} batch {b + 1}")
                if report.first_batch_loss is None:
                    report.first_batch_loss = loss
                losses.append(loss)
            if not losses:
                raise TrainingError("no usable batches: fewer than 2 training pairs")
            report.epoch_loss.append(float(np.mean(losses)))
            report.epoch_masked_pairs.append(masked)
            logger.info("%s epoch %d loss %.5f masked %d", kind, epoch + 1,
                        report.epoch_loss[-1], masked)
            if log:
                log.write(json.dumps({
                    "kind": kind, "epoch": epoch + 1, "mean_loss": report.epoch_loss[-1],
                    "masked_pairs": masked, "batches": len(losses), "wall_time": time.time(),
                }) + "\n")
    finally:
        if log:
            log.close()

    config = {"tower": asdict(tower_cfg), "train": asdict(train_cfg)}
    config["tower"]["resolutions"] = list(tower_cfg.resolutions)
    artifact = tower_artifact(kind, model, interactions, vocab, config,
                              extra={"loss_report": report.to_dict()})
    return artifact, report
