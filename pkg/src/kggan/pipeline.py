"""Multi-stage runs: embed -> fit E -> train -> evaluate, and the four-way ablation."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .constraint import Embedder, EmbedderReport, fit_on_seen
from .errors import NumericError
from .evaluation import (FeatureExtractor, FidReport, constraint_report, mean_scores, per_category_fid,
                         random_image_baseline)
from .flora import FloraDataset
from .nn import Generator
from .training import TrainingConfig, TrainState, make_conditions, train

logger = logging.getLogger(__name__)

BASELINE = "SN-GAN (all data)"
ONE_HOT = "One-hot KG-GAN"
NO_LSE = "KG-GAN w/o L_se"
FULL = "KG-GAN"
VARIANTS = (BASELINE, ONE_HOT, NO_LSE, FULL)


def variant_config(base: TrainingConfig, name: str) -> TrainingConfig:
    """The ablation grid, expressed as overrides on ``base``."""
    overrides = {
        BASELINE: dict(condition_mode="embedding", use_knowledge_loss=False, lambda_se=0.0, training_data="all"),
        ONE_HOT: dict(condition_mode="one_hot", use_knowledge_loss=True, training_data="seen"),
        NO_LSE: dict(condition_mode="embedding", use_knowledge_loss=False, training_data="seen"),
        FULL: dict(condition_mode="embedding", use_knowledge_loss=True, training_data="seen"),
    }[name]
    return dataclasses.replace(base, label=name, **overrides)


def table_row(cfg: TrainingConfig, fid: FidReport | None) -> dict:
    return {
        "Method": cfg.label,
        "Training data": "Y1+Y2" if cfg.training_data == "all" else "Y1",
        "Condition": "Embedding" if cfg.condition_mode == "embedding" else "One-hot",
        "L_se": "yes" if cfg.use_knowledge_loss and cfg.lambda_se > 0 else "",
        "Seen FID": fid.seen_mean if fid else float("nan"),
        "Unseen FID": fid.unseen_mean if fid else float("nan"),
    }


@dataclass
class VariantResult:
    config: TrainingConfig
    fid: FidReport
    constraint: dict[int, tuple[float, float]]
    seconds: float
    state: TrainState | None = None

    @property
    def unseen_color(self) -> float:
        return mean_scores(self.constraint)[0]

    @property
    def unseen_shape(self) -> float:
        return mean_scores(self.constraint)[1]


def evaluate_generator(G: Generator, conditions: np.ndarray, dataset: FloraDataset, extractor: FeatureExtractor,
                       method: str, seed: int, n_fake: int = 128, n_oracle: int = 64
                       ) -> tuple[FidReport, dict[int, tuple[float, float]]]:
    fid = per_category_fid(dataset, G, conditions, extractor, n_fake, seed, method)
    cons = constraint_report(G, conditions, dataset, dataset.split.unseen, n_oracle, seed)
    return fid, cons


def run_variant(cfg: TrainingConfig, dataset: FloraDataset, embeddings: np.ndarray, embedder: Embedder,
                extractor: FeatureExtractor, out_dir: str | Path | None = None, run_id: str | None = None,
                eval_seed: int = 0, keep_state: bool = False) -> VariantResult:
    t0 = time.perf_counter()
    state = train(cfg, dataset, embeddings, embedder, out_dir=out_dir, run_id=run_id)
    fid, cons = evaluate_generator(state.generator, state.conditions, dataset, extractor, cfg.label, eval_seed)
    return VariantResult(cfg, fid, cons, time.perf_counter() - t0, state if keep_state else None)


@dataclass
class SeedResult:
    seed: int
    embedder_report: EmbedderReport
    variants: dict[str, VariantResult]
    untrained_color: float
    random_color: float
    noise_floor_mean: float
    isolation_hits: dict[str, int] = field(default_factory=dict)
    l_se_unseen_trend: tuple[float, float] | None = None
    failures: dict[str, str] = field(default_factory=dict)


def _trend(log: Sequence[dict]) -> tuple[float, float] | None:
    vals = [r["l_se_unseen"] for r in log if r.get("l_se_unseen") is not None]
    if len(vals) < 20:
        return None
    k = max(1, len(vals) // 10)
    return float(np.median(vals[:k])), float(np.median(vals[-k:]))


def ablate_seed(base: TrainingConfig, dataset: FloraDataset, embeddings: np.ndarray, extractor: FeatureExtractor,
                seed: int, out_dir: str | Path | None = None, variants: Sequence[str] = VARIANTS,
                run_id: str | None = None) -> SeedResult:
    """Train and evaluate every variant for one seed, sharing one embedder."""
    base = dataclasses.replace(base, seed=seed)
    E, ereport = fit_on_seen(dataset, embeddings, epochs=base.embedder_epochs, seed=seed, lr=base.embedder_lr)
    results = {}
    hits = {}
    failures = {}
    trend = None
    for name in variants:
        cfg = variant_config(base, name)
        vdir = None if out_dir is None else variant_dir(out_dir, seed, name)
        logger.info("seed %d: training %s", seed, name)
        try:
            res = run_variant(cfg, dataset, embeddings, E, extractor, vdir, run_id, eval_seed=seed,
                              keep_state=True)
        except NumericError as exc:
            logger.error("seed %d %s failed: %s", seed, name, exc)
            failures[name] = str(exc)
            continue
        hits[name] = res.state.discriminator.forbidden_hits
        if name == FULL:
            trend = _trend(res.state.log)
        res.state = None
        results[name] = res
        logger.info("seed %d %s: seen %.4f unseen %.4f color %.3f (%.0fs)", seed, name, res.fid.seen_mean,
                    res.fid.unseen_mean, res.unseen_color, res.seconds)
    ref = variant_config(base, FULL)
    untrained = Generator(ref.noise_dim, embeddings.shape[1], dataset.image_shape,
                          np.random.default_rng([seed, 1]), ref.g_hidden)
    cond0 = make_conditions(embeddings, "embedding", ref.condition_norm, dataset.split.seen)
    cons0 = constraint_report(untrained, cond0, dataset, dataset.split.unseen, 64, seed)
    rnd = random_image_baseline(dataset, dataset.split.unseen, 64, seed)
    floor = float(np.mean(list(next(iter(results.values())).fid.noise_floor.values()))) if results else float("nan")
    return SeedResult(seed, ereport, results, mean_scores(cons0)[0], mean_scores(rnd)[0], floor, hits, trend,
                      failures)


def variant_dir(out_dir: str | Path, seed: int, name: str) -> Path:
    slug = "".join(c if c.isalnum() else "_" for c in name).strip("_")
    return Path(out_dir) / f"seed{seed}" / slug


def seed_median(results: Sequence[SeedResult], name: str, what: str) -> float:
    vals = []
    for r in results:
        v = r.variants.get(name)
        if v is None:
            continue
        vals.append({"seen": v.fid.seen_mean, "unseen": v.fid.unseen_mean, "color": v.unseen_color,
                     "shape": v.unseen_shape}[what])
    return float(np.median(vals)) if vals else float("nan")


def median_summary(results: Sequence[SeedResult]) -> dict:
    """Seed medians per variant plus the untrained-generator color baseline."""
    out = {name: {w: seed_median(results, name, w) for w in ("seen", "unseen", "color", "shape")}
           for name in VARIANTS}
    out["untrained_color"] = float(np.median([r.untrained_color for r in results]))
    return out


def check_verdicts(summary: dict) -> dict[str, bool]:
    """Ordering, parity and color checks on seed medians."""
    m = lambda name, what: summary[name][what]
    return {
        "unseen FID: KG-GAN < One-hot KG-GAN": m(FULL, "unseen") < m(ONE_HOT, "unseen"),
        "unseen FID: KG-GAN <= 1.1 x KG-GAN w/o L_se": m(FULL, "unseen") <= 1.1 * m(NO_LSE, "unseen"),
        "seen FID: embedding variants < One-hot KG-GAN":
            max(m(FULL, "seen"), m(NO_LSE, "seen")) < m(ONE_HOT, "seen"),
        "KG-GAN unseen FID <= 2 x seen FID": m(FULL, "unseen") <= 2.0 * m(FULL, "seen"),
        "KG-GAN unseen color >= untrained + 0.2": m(FULL, "color") >= summary["untrained_color"] + 0.2,
        "KG-GAN unseen color > One-hot KG-GAN": m(FULL, "color") > m(ONE_HOT, "color"),
    }


def verdicts(results: Sequence[SeedResult]) -> dict[str, bool]:
    return check_verdicts(median_summary(results))
