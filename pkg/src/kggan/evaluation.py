"""Per-category Fréchet distances and attribute-oracle reports.

Features come from the penultimate layer of a small classifier trained on
real images of every category. It is trained once per dataset and shared by
every method being compared, so it never sees the knowledge loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DimensionError, NumericError
from .flora import FloraDataset, oracle_scores
from .nn import MLP
from .tensor import Adam, Tensor
from .training import generate_batch

logger = logging.getLogger(__name__)


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased, symmetrized covariance of ``(n, f)`` rows."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"gaussian_stats expects (n, f) features, got {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise ContractError("gaussian_stats needs at least 2 samples")
    mu = X.mean(axis=0)
    C = X - mu
    sigma = C.T @ C / (n - 1)
    return GaussianStats(mu, 0.5 * (sigma + sigma.T))


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_terms(a: GaussianStats, b: GaussianStats) -> float:
    """Unclamped ``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the square root is taken from the eigenvalues of
    ``S_a^{1/2} S_b S_a^{1/2}``, which share the spectrum of ``S_a S_b``
    and are symmetric; negative eigenvalues are clamped to zero.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"frechet_distance: feature dims differ ({a.mu.shape} vs {b.mu.shape})")
    try:
        ra = _psd_sqrt(a.sigma)
        M = ra @ b.sigma @ ra
        w = np.linalg.eigvalsh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        conds = [float(np.linalg.cond(s)) for s in (a.sigma, b.sigma)]
        raise NumericError(f"eigendecomposition failed; covariance condition numbers {conds}") from exc
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    return max(frechet_terms(a, b), 0.0)


# ------------------------------------------------------------- extractor


class FeatureExtractor:
    """Frozen classifier whose last hidden layer supplies FID features."""

    def __init__(self, net: MLP, identity: str):
        net.freeze()
        self.net = net
        self.identity = identity

    @property
    def dim(self) -> int:
        return self.net.hidden[-1]

    def __call__(self, images: np.ndarray, chunk: int = 1024) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = []
        with T.no_grad():
            for s in range(0, len(images), chunk):
                out.append(self.net.features(Tensor(images[s:s + chunk])).data)
        return np.concatenate(out) if out else np.zeros((0, self.dim))

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        with T.no_grad():
            logits = self.net.forward(Tensor(images)).data
        return float((logits.argmax(axis=1) == labels).mean())

    def save(self, directory: str | Path) -> None:
        meta = {"identity": self.identity, "in_dim": self.net.in_dim, "hidden": list(self.net.hidden),
                "out_dim": self.net.out_dim, "activation": self.net.activation}
        save_checkpoint(directory, {"classifier": self.net.state_arrays()}, meta)

    @classmethod
    def load(cls, directory: str | Path) -> FeatureExtractor:
        sets, meta, _ = load_checkpoint(directory)
        net = MLP(meta["in_dim"], meta["hidden"], meta["out_dim"], np.random.default_rng(0),
                  activation=meta["activation"])
        net.load_arrays(sets["classifier"])
        return cls(net, meta["identity"])


def _fingerprint(net: MLP) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(net.state_arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:12]


def train_extractor(dataset: FloraDataset, seed: int = 0, epochs: int = 30, hidden: Sequence[int] = (64, 16),
                    batch_size: int = 64, lr: float = 1e-3) -> FeatureExtractor:
    """Classifier over all categories (seen and unseen) of real data."""
    rng = np.random.default_rng([seed, 0xFE])
    X, y = dataset.images, dataset.labels
    net = MLP(int(np.prod(dataset.image_shape)), hidden, len(dataset.categories), rng, activation="tanh")
    opt = Adam(net.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch_size):
            idx = order[s:s + batch_size]
            loss = T.softmax_cross_entropy(net.forward(Tensor(X[idx])), y[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    ident = f"classifier-penultimate[{'x'.join(map(str, hidden))}]-seed{seed}-{_fingerprint(net)}"
    return FeatureExtractor(net, ident)


def extractor_for(dataset: FloraDataset, cache_dir: str | Path | None = None, seed: int = 0) -> FeatureExtractor:
    """Load the dataset's cached extractor, training and caching it if absent."""
    if cache_dir is not None:
        path = Path(cache_dir)
        if (path / "manifest.json").exists():
            return FeatureExtractor.load(path)
    ext = train_extractor(dataset, seed)
    if cache_dir is not None:
        ext.save(cache_dir)
    return ext


# ---------------------------------------------------------------- reports


@dataclass
class FidReport:
    method: str
    per_category: dict[int, float]
    seen_mean: float
    unseen_mean: float
    seen: list[int]
    unseen: list[int]
    n_real: dict[int, int]
    n_fake: int
    extractor: str
    noise_floor: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        d["n_real"] = {str(k): v for k, v in self.n_real.items()}
        d["noise_floor"] = {str(k): v for k, v in self.noise_floor.items()}
        return d


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def per_category_fid(dataset: FloraDataset, generator, conditions: np.ndarray, extractor: FeatureExtractor,
                     n_fake: int = 128, seed: int = 0, method: str = "", categories: Sequence[int] | None = None,
                     with_noise_floor: bool = True) -> FidReport:
    """FID between real and generated features, category by category."""
    split = dataset.split
    cats = sorted(split.seen + split.unseen) if categories is None else list(categories)
    fake = generate_batch(generator, conditions[cats], n_fake, seed)
    fake_feats = extractor(fake).reshape(len(cats), n_fake, -1)
    per, n_real, floor = {}, {}, {}
    for j, c in enumerate(cats):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 2:
            raise ContractError(f"per_category_fid: category {c} has {len(idx)} real samples")
        real = extractor(dataset.images[idx])
        per[c] = frechet_distance(gaussian_stats(real), gaussian_stats(fake_feats[j]))
        n_real[c] = len(idx)
        if with_noise_floor:
            floor[c] = real_split_fid(real, seed)
    seen = [c for c in split.seen if c in per]
    unseen = [c for c in split.unseen if c in per]
    return FidReport(method, per, _mean([per[c] for c in seen]), _mean([per[c] for c in unseen]),
                     seen, unseen, n_real, n_fake, extractor.identity, floor)


def real_split_fid(real_features: np.ndarray, seed: int = 0) -> float:
    """FID between two random halves of the real features (sampling-noise floor)."""
    rng = np.random.default_rng([seed, 0xF1])
    order = rng.permutation(len(real_features))
    h = len(order) // 2
    return frechet_distance(gaussian_stats(real_features[order[:h]]), gaussian_stats(real_features[order[h:]]))


def constraint_report(generator, conditions: np.ndarray, dataset: FloraDataset, categories: Sequence[int],
                      n_per_category: int = 64, seed: int = 0) -> dict[int, tuple[float, float]]:
    """Mean oracle ``(color_score, shape_score)`` of generated images per category."""
    cats = list(categories)
    images = generate_batch(generator, conditions[cats], n_per_category, seed)
    out = {}
    for j, c in enumerate(cats):
        block = images[j * n_per_category:(j + 1) * n_per_category]
        s = oracle_scores(block, dataset.categories[c], dataset.spec).mean(axis=0)
        out[c] = (float(s[0]), float(s[1]))
    return out


def random_image_baseline(dataset: FloraDataset, categories: Sequence[int], n: int = 64, seed: int = 0
                          ) -> dict[int, tuple[float, float]]:
    """Oracle scores of uniform-noise images, the floor for constraint reports."""
    rng = np.random.default_rng([seed, 0xBA5E])
    out = {}
    for c in categories:
        imgs = rng.uniform(-1.0, 1.0, size=(n, *dataset.image_shape))
        s = oracle_scores(imgs, dataset.categories[c], dataset.spec).mean(axis=0)
        out[int(c)] = (float(s[0]), float(s[1]))
    return out


def mean_scores(report: Mapping[int, tuple[float, float]]) -> tuple[float, float]:
    vals = np.array(list(report.values()))
    return float(vals[:, 0].mean()), float(vals[:, 1].mean())


# ------------------------------------------------------------------ tables

TABLE_COLUMNS = ("Method", "Training data", "Condition", "L_se", "Seen FID", "Unseen FID")


def format_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    """Aligned plain-text table; floats are printed with 4 decimals."""
    def cell(v):
        if isinstance(v, float):
            return "nan" if np.isnan(v) else f"{v:.4f}"
        return str(v)

    cells = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    line = lambda vals: " | ".join(v.ljust(w) for v, w in zip(vals, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(columns), sep, *(line(r) for r in cells)])


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
