"""Category embeddings from free-text descriptions.

Sentences are featurized by hashing character n-grams (with ``<`` ``>``
word boundary markers) into ``d`` signed buckets and averaging. Description
vectors are min-max scaled per dimension over the whole corpus so every
component lands in [0, 1]; a category's embedding is the mean of its
descriptions' scaled vectors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, MissingArtifactError, SpecError


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 32
    ngram_min: int = 3
    ngram_max: int = 5
    # chosen so same-color categories sit closer than fully disjoint ones on the default corpus
    hash_seed: int = 42
    # "ngram": every n-gram in the sentence weighs the same;
    # "token": each token's n-grams are averaged first, then tokens are averaged;
    # "unit": like "token" but each token vector is scaled to unit length first
    weighting: str = "token"

    def validate(self) -> None:
        if self.dim < 2:
            raise SpecError("embedding dim must be >= 2")
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise SpecError(f"empty n-gram range ({self.ngram_min}, {self.ngram_max})")
        if self.weighting not in ("ngram", "token", "unit"):
            raise SpecError(f"unknown weighting {self.weighting!r}")


@dataclass
class SemanticEmbedding:
    category: int
    vector: np.ndarray


def _ngrams(token: str, lo: int, hi: int) -> list[str]:
    w = f"<{token}>"
    grams = [w[i:i + n] for n in range(lo, hi + 1) for i in range(len(w) - n + 1)]
    # tokens shorter than the smallest n still get one feature
    return grams or [w]


@lru_cache(maxsize=65536)
def _token_vector(token: str, config: EmbedConfig) -> tuple[np.ndarray, int]:
    """Sum of signed bucket hits for one token, and its n-gram count."""
    vec = np.zeros(config.dim)
    salt = config.hash_seed.to_bytes(8, "little", signed=True)
    grams = _ngrams(token, config.ngram_min, config.ngram_max)
    for g in grams:
        h = int.from_bytes(hashlib.blake2b(g.encode(), digest_size=8, salt=salt).digest(), "little")
        vec[h % config.dim] += 1.0 if (h >> 63) & 1 else -1.0
    vec.setflags(write=False)
    return vec, len(grams)


def tokenize(text: str) -> list[str]:
    return [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split() if t]


def sentence_vector(text: str, config: EmbedConfig = EmbedConfig()) -> np.ndarray:
    tokens = tokenize(text)
    if not tokens:
        raise ContractError("sentence_vector: empty text")
    parts = [_token_vector(t, config) for t in tokens]
    if config.weighting == "ngram":
        return np.sum([v for v, _ in parts], axis=0) / sum(n for _, n in parts)
    if config.weighting == "token":
        return np.mean([v / n for v, n in parts], axis=0)
    return np.mean([v / max(np.linalg.norm(v), 1e-12) for v, _ in parts], axis=0)


def normalize_corpus(vectors: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Per-dimension min-max scaling; constant dimensions map to 0.5."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("normalize_corpus: empty corpus")
    if np.unique(X, axis=0).shape[0] < 2:
        raise ContractError("normalize_corpus: need at least 2 distinct vectors")
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    const = span == 0
    out = (X - lo) / np.where(const, 1.0, span)
    out[:, const] = 0.5
    return out


def category_embedding(category: int, labels: Sequence[int], vectors: np.ndarray) -> SemanticEmbedding:
    """Mean of the normalized description vectors tagged with ``category``."""
    labels = np.asarray(labels)
    rows = labels == category
    if not rows.any():
        raise KeyError(f"no descriptions for category {category}")
    return SemanticEmbedding(int(category), np.asarray(vectors)[rows].mean(axis=0))


def one_hot(k: int, K: int) -> np.ndarray:
    if not 0 <= k < K:
        raise ContractError(f"one_hot: index {k} out of range for {K} categories")
    v = np.zeros(K)
    v[k] = 1.0
    return v


def embedding_table(descriptions: Iterable[tuple[int, str]], config: EmbedConfig = EmbedConfig()) -> dict[int, np.ndarray]:
    """Run the full pipeline over ``(category, sentence)`` pairs."""
    config.validate()
    pairs = list(descriptions)
    if not pairs:
        raise ContractError("embedding_table: no descriptions")
    labels = np.array([c for c, _ in pairs])
    raw = np.stack([sentence_vector(text, config) for _, text in pairs])
    norm = normalize_corpus(raw)
    return {int(c): category_embedding(int(c), labels, norm).vector for c in np.unique(labels)}


def dataset_embeddings(dataset, config: EmbedConfig = EmbedConfig()) -> np.ndarray:
    """``(K, d)`` matrix of category embeddings for a :class:`FloraDataset`."""
    pairs = [(int(lbl), s) for lbl, ds in zip(dataset.labels, dataset.descriptions) for s in ds]
    table = embedding_table(pairs, config)
    K = len(dataset.categories)
    missing = [k for k in range(K) if k not in table]
    if missing:
        raise ContractError(f"categories without descriptions: {missing}")
    return np.stack([table[k] for k in range(K)])


def save_embedding_table(path: str | Path, table: Mapping[int, np.ndarray], config: EmbedConfig) -> None:
    doc = {"config": asdict(config), "embeddings": {str(k): [float(x) for x in v] for k, v in table.items()}}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_embedding_table(path: str | Path) -> tuple[dict[int, np.ndarray], EmbedConfig]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no embedding table at {path}")
    doc = json.loads(path.read_text())
    table = {int(k): np.asarray(v, dtype=np.float64) for k, v in doc["embeddings"].items()}
    return table, EmbedConfig(**doc["config"])
