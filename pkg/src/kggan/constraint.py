"""The knowledge constraint: an embedding regressor ``E`` and the loss built on it.

``E`` maps an image to a predicted category embedding. It is fit on seen
categories only, frozen, and then scores generated images by how far their
predicted embedding lands from the target.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DimensionError
from .nn import MLP
from .tensor import Adam, Tensor

logger = logging.getLogger(__name__)


class Embedder(MLP):
    """Image -> (0, 1)^d regressor with a sigmoid head."""

    def __init__(self, image_shape: Sequence[int], dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (256, 128)):
        self.image_shape = tuple(int(s) for s in image_shape)
        super().__init__(int(np.prod(self.image_shape)), hidden, dim, rng,
                         activation="relu", out_activation="sigmoid")


def predict_embedding(E: Embedder, x) -> Tensor:
    x = T._as_tensor(x)
    if x.shape[1:] != E.image_shape:
        raise ContractError(f"predict_embedding: image shape {x.shape[1:]} != {E.image_shape}")
    return E.forward(x)


def embedding_mse(E: Embedder, images: np.ndarray, targets: np.ndarray) -> float:
    """Mean over samples of the squared L2 prediction error."""
    with T.no_grad():
        pred = predict_embedding(E, Tensor(images)).data
    return float(((pred - targets) ** 2).sum(axis=1).mean())


@dataclass
class EmbedderReport:
    train_mse: float
    heldout_mse: float
    baseline_mse: float
    epochs: int

    @property
    def r2(self) -> float:
        return 1.0 - self.heldout_mse / self.baseline_mse


def train_embedder(images: np.ndarray, targets: np.ndarray, epochs: int = 50, seed: int = 0,
                   batch_size: int = 64, lr: float = 1e-3, hidden: Sequence[int] = (256, 128),
                   log_path: str | Path | None = None) -> Embedder:
    """Fit ``E`` to minimize mean ``||E(x) - v||^2`` and return it frozen.

    ``images`` must come from seen categories only; the caller owns that
    selection. With ``epochs=0`` the random initialization is frozen as is.
    """
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(images) == 0:
        raise ContractError("train_embedder: empty training set")
    if len(images) != len(targets):
        raise DimensionError(f"train_embedder: {len(images)} images but {len(targets)} targets")
    rng = np.random.default_rng([seed, 0xE])
    E = Embedder(images.shape[1:], targets.shape[1], rng, hidden)
    opt = Adam(E.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    n = len(images)
    log = open(log_path, "a") if log_path else None
    try:
        for epoch in range(epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                pred = E.forward(Tensor(images[idx]))
                loss = T.mean(T.sq_l2(T.sub(pred, Tensor(targets[idx])), axis=1))
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
            if log:
                log.write(json.dumps({"stage": "embedder", "epoch": epoch, "mse": total / n}) + "\n")
    finally:
        if log:
            log.close()
    E.freeze()
    return E


def heldout_split(labels: np.ndarray, categories: Sequence[int], fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-category train/held-out index arrays; the last ``fraction`` of each category is held out."""
    train, held = [], []
    for c in categories:
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(len(idx) * fraction)))
        train.append(idx[:-k])
        held.append(idx[-k:])
    return np.concatenate(train), np.concatenate(held)


def fit_on_seen(dataset, embeddings: np.ndarray, epochs: int = 50, seed: int = 0,
                heldout_fraction: float = 0.2, **kwargs) -> tuple[Embedder, EmbedderReport]:
    """Train ``E`` on seen-category images and score it on held-out seen images.

    The baseline is the constant predictor that always outputs the mean
    training target.
    """
    seen = dataset.split.seen
    tr, ho = heldout_split(dataset.labels, seen, heldout_fraction)
    y_tr = embeddings[dataset.labels[tr]]
    y_ho = embeddings[dataset.labels[ho]]
    E = train_embedder(dataset.images[tr], y_tr, epochs=epochs, seed=seed, **kwargs)
    baseline = float(((y_ho - y_tr.mean(axis=0)) ** 2).sum(axis=1).mean())
    report = EmbedderReport(embedding_mse(E, dataset.images[tr], y_tr),
                            embedding_mse(E, dataset.images[ho], y_ho), baseline, epochs)
    logger.info("embedder: held-out mse %.5f vs mean-predictor %.5f", report.heldout_mse, baseline)
    return E, report


def knowledge_loss(E: Embedder, generator, z, v, targets=None) -> Tensor:
    """Mean over the batch of ``||E(G(z, v)) - target||^2``.

    ``targets`` defaults to ``v``; they differ when the generator is
    conditioned on one-hot codes but ``E`` regresses semantic embeddings.
    """
    if not E.frozen:
        raise ContractError("knowledge_loss: embedder must be frozen")
    z, v = T._as_tensor(z), T._as_tensor(v)
    if z.shape[0] == 0:
        raise ContractError("knowledge_loss: empty batch")
    images = generator.forward(z, v)
    return knowledge_loss_on_images(E, images, v if targets is None else targets)


def knowledge_loss_on_images(E: Embedder, images: Tensor, targets) -> Tensor:
    if not E.frozen:
        raise ContractError("knowledge_loss: embedder must be frozen")
    targets = T._as_tensor(targets)
    pred = predict_embedding(E, images)
    if pred.shape != targets.shape:
        raise DimensionError(f"knowledge_loss: predictions {pred.shape} vs targets {targets.shape}")
    return T.mean(T.sq_l2(T.sub(pred, targets), axis=1))


def save_embedder(E: Embedder, directory: str | Path, report: EmbedderReport | None = None,
                  run_id: str | None = None) -> Path:
    meta = {"image_shape": list(E.image_shape), "dim": E.out_dim, "hidden": list(E.hidden),
            "report": None if report is None else {**asdict(report), "r2": report.r2}}
    return save_checkpoint(directory, {"embedder": E.state_arrays()}, meta, run_id)


def load_embedder(directory: str | Path) -> tuple[Embedder, dict]:
    sets, meta, _ = load_checkpoint(directory)
    E = Embedder(meta["image_shape"], meta["dim"], np.random.default_rng(0), meta["hidden"])
    E.load_arrays(sets["embedder"])
    E.freeze()
    return E, meta
