"""KG-GAN training: hinge-loss projection GAN on seen categories plus a
knowledge loss that reaches unseen categories through the shared generator.

A single :class:`~kggan.nn.Generator` is used for both seen and unseen
conditions. The discriminator only ever scores seen-category conditions;
it is instrumented to count violations.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .constraint import Embedder, knowledge_loss_on_images
from .errors import ContractError, NumericError, SpecError
from .nn import Discriminator, Generator
from .tensor import Adam, Tensor

logger = logging.getLogger(__name__)

CONDITION_MODES = ("embedding", "one_hot")
CONDITION_NORMS = ("isotropic", "standardize", "none")
TRAINING_DATA = ("seen", "all")


@dataclass
class TrainingConfig:
    lambda_se: float = 0.1
    condition_mode: str = "embedding"
    # how embedding conditions enter G and D, using training-category statistics:
    # "isotropic" centers and divides by one global scale (distances preserved),
    # "standardize" z-scores each dimension, "none" feeds the raw [0, 1] vectors
    condition_norm: str = "isotropic"
    use_knowledge_loss: bool = True
    # drop the L_se term on seen conditions, leaving it on unseen ones only
    include_seen_lse: bool = True
    # "all" trains on Y1 and Y2 images (the upper-bound baseline)
    training_data: str = "seen"
    batch_size: int = 64
    iterations: int = 5000
    d_steps: int = 1
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    noise_dim: int = 64
    g_hidden: tuple[int, ...] = (128, 256)
    d_hidden: tuple[int, ...] = (256,)
    feature_dim: int = 128
    embedder_epochs: int = 50
    embedder_lr: float = 1e-3
    checkpoint_every: int = 0
    seed: int = 0
    label: str = "KG-GAN"

    def validate(self, n_categories: int | None = None, cond_dim: int | None = None) -> None:
        if not self.lambda_se >= 0:
            raise SpecError(f"lambda_se must be >= 0, got {self.lambda_se}")
        if self.condition_mode not in CONDITION_MODES:
            raise SpecError(f"condition_mode must be one of {CONDITION_MODES}")
        if self.condition_norm not in CONDITION_NORMS:
            raise SpecError(f"condition_norm must be one of {CONDITION_NORMS}")
        if self.training_data not in TRAINING_DATA:
            raise SpecError(f"training_data must be one of {TRAINING_DATA}")
        if self.batch_size < 2:
            raise SpecError("batch_size must be >= 2")
        if self.iterations < 1:
            raise SpecError("iterations must be >= 1")
        if self.d_steps < 1:
            raise SpecError("d_steps must be >= 1")
        if self.condition_mode == "one_hot" and n_categories is not None and cond_dim is not None \
                and cond_dim != n_categories:
            raise SpecError("one_hot conditions need dimension equal to the number of categories")

    def to_json(self) -> dict:
        d = asdict(self)
        d["g_hidden"], d["d_hidden"] = list(self.g_hidden), list(self.d_hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainingConfig:
        d = dict(d)
        # accept the short ablation-table spellings too
        aliases = {"condition": "condition_mode", "use_Lse": "use_knowledge_loss", "λ_se": "lambda_se"}
        for k, v in aliases.items():
            if k in d:
                d[v] = d.pop(k)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown config fields: {sorted(extra)}")
        for k in ("g_hidden", "d_hidden"):
            if k in d:
                d[k] = tuple(int(x) for x in d[k])
        return cls(**d)


def load_config(path: str | Path) -> TrainingConfig:
    try:
        cfg = TrainingConfig.from_json(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, TypeError) as exc:
        raise SpecError(f"{path}: {exc}") from exc
    cfg.validate()
    return cfg


# -------------------------------------------------------------------- losses


def _scores(x) -> Tensor:
    x = T._as_tensor(x)
    if x.size == 0:
        raise ContractError("empty score batch")
    return x


def d_hinge_loss(real_scores, fake_scores) -> Tensor:
    real, fake = _scores(real_scores), _scores(fake_scores)
    return T.add(T.mean(T.relu(T.sub(1.0, real))), T.mean(T.relu(T.add(fake, 1.0))))


def g_adv_loss(fake_scores) -> Tensor:
    return T.scale(T.mean(_scores(fake_scores)), -1.0)


def combine_g_loss(g_adv: Tensor, l_se_seen: Tensor | None, l_se_unseen: Tensor | None,
                   lambda_se: float) -> Tensor:
    """``g_adv + lambda_se * (l_se_seen + l_se_unseen)``, skipping absent terms."""
    terms = [t for t in (l_se_seen, l_se_unseen) if t is not None]
    if not terms or lambda_se == 0:
        return g_adv
    knowledge = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return T.add(g_adv, T.scale(knowledge, lambda_se))


# --------------------------------------------------------------------- state


@dataclass
class TrainState:
    config: TrainingConfig
    generator: Generator
    discriminator: Discriminator
    embedder: Embedder | None
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    conditions: np.ndarray      # (K, c) condition vector per category
    targets: np.ndarray         # (K, d) semantic embedding per category
    train_categories: list[int]
    unseen_categories: list[int]
    iteration: int = 0
    log: list[dict] = field(default_factory=list)


def make_conditions(embeddings: np.ndarray, mode: str, norm: str = "none",
                    reference: Sequence[int] | None = None) -> np.ndarray:
    """``(K, c)`` condition rows fed to G and D.

    Raw embeddings share a large common component, so fed directly the
    category-specific part is a small fraction of the input. ``norm``
    removes it using statistics of the ``reference`` rows (the training
    categories): "isotropic" subtracts their mean and divides by the root
    mean per-dimension variance, which keeps every pairwise distance in
    proportion; "standardize" z-scores each dimension separately.
    """
    if mode == "one_hot":
        return np.eye(len(embeddings))
    if mode != "embedding":
        raise SpecError(f"unknown condition mode {mode!r}")
    C = np.array(embeddings, dtype=np.float64)
    if norm == "none":
        return C
    if norm not in CONDITION_NORMS:
        raise SpecError(f"unknown condition norm {norm!r}")
    ref = C if reference is None else C[list(reference)]
    if len(ref) < 2:
        raise ContractError("normalizing conditions needs at least 2 reference categories")
    sd = ref.std(axis=0)
    if norm == "isotropic":
        scale = float(np.sqrt(np.mean(sd ** 2)))
        return (C - ref.mean(axis=0)) / (scale if scale > 1e-12 else 1.0)
    return (C - ref.mean(axis=0)) / np.where(sd > 1e-12, sd, 1.0)


def init_state(config: TrainingConfig, dataset, embeddings: np.ndarray,
               embedder: Embedder | None) -> TrainState:
    config.validate()
    split = dataset.split
    if split is None:
        raise ContractError("dataset has no seen/unseen split")
    if config.training_data == "all":
        train_cats, unseen = sorted(split.seen + split.unseen), []
    else:
        train_cats, unseen = list(split.seen), list(split.unseen)
    conditions = make_conditions(embeddings, config.condition_mode, config.condition_norm, train_cats)
    config.validate(len(dataset.categories), conditions.shape[1])
    if config.use_knowledge_loss and config.lambda_se > 0:
        if embedder is None:
            raise ContractError("knowledge loss requested but no embedder given")
        if not embedder.frozen:
            raise ContractError("embedder must be frozen before GAN training")
    seed = config.seed
    G = Generator(config.noise_dim, conditions.shape[1], dataset.image_shape,
                  np.random.default_rng([seed, 1]), config.g_hidden)
    D = Discriminator(dataset.image_shape, conditions.shape[1], np.random.default_rng([seed, 2]),
                      config.d_hidden, config.feature_dim)
    D.watch_conditions(conditions[unseen] if unseen else None)
    opt_g = Adam(G.parameters(), config.lr_g, config.beta1, config.beta2)
    opt_d = Adam(D.parameters(), config.lr_d, config.beta1, config.beta2)
    return TrainState(config, G, D, embedder, opt_g, opt_d, np.random.default_rng([seed, 3]),
                      conditions, np.asarray(embeddings, dtype=np.float64), train_cats, unseen)


@contextlib.contextmanager
def _frozen_params(module):
    """Skip gradient bookkeeping for ``module`` inside the block."""
    saved = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), saved):
            p.requires_grad = flag


def _knowledge_active(cfg: TrainingConfig, state: TrainState) -> bool:
    return cfg.use_knowledge_loss and cfg.lambda_se > 0 and state.embedder is not None


def total_g_loss(state: TrainState, seen_cats: np.ndarray, z_seen: np.ndarray,
                 unseen_cats: np.ndarray | None = None, z_unseen: np.ndarray | None = None
                 ) -> tuple[Tensor, dict[str, float | None]]:
    """Generator objective for one step and its logged parts."""
    cfg, G, D = state.config, state.generator, state.discriminator
    fake = G.forward(Tensor(z_seen), Tensor(state.conditions[seen_cats]))
    g_adv = g_adv_loss(D.forward(fake, Tensor(state.conditions[seen_cats])))
    l_seen = l_unseen = None
    if _knowledge_active(cfg, state):
        if cfg.include_seen_lse:
            l_seen = knowledge_loss_on_images(state.embedder, fake, state.targets[seen_cats])
        if unseen_cats is not None and len(unseen_cats):
            fake2 = G.forward(Tensor(z_unseen), Tensor(state.conditions[unseen_cats]))
            l_unseen = knowledge_loss_on_images(state.embedder, fake2, state.targets[unseen_cats])
    elif cfg.use_knowledge_loss and cfg.lambda_se > 0:
        raise ContractError("knowledge loss requested but no embedder available")
    loss = combine_g_loss(g_adv, l_seen, l_unseen, cfg.lambda_se)
    parts = {
        "g_adv": g_adv.item(),
        "l_se_seen": None if l_seen is None else l_seen.item(),
        "l_se_unseen": None if l_unseen is None else l_unseen.item(),
    }
    return loss, parts


def _check(value: float, name: str, iteration: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name} ({value}) at iteration {iteration}")


def train_step(state: TrainState, dataset) -> TrainState:
    cfg, G, D, rng = state.config, state.generator, state.discriminator, state.rng
    B = cfg.batch_size
    it = state.iteration + 1
    train_idx = dataset.indices_for(state.train_categories)
    cats = np.asarray(state.train_categories)

    for _ in range(cfg.d_steps):
        real_idx = rng.choice(train_idx, size=B)
        fake_cats = rng.choice(cats, size=B)
        z = rng.standard_normal((B, cfg.noise_dim))
        with T.no_grad():
            x_fake = G.forward(Tensor(z), Tensor(state.conditions[fake_cats])).data
        x = np.concatenate([dataset.images[real_idx], x_fake])
        c = np.concatenate([state.conditions[dataset.labels[real_idx]], state.conditions[fake_cats]])
        scores = D.forward(Tensor(x), Tensor(c))
        loss_d = d_hinge_loss(T.take(scores, np.arange(B)), T.take(scores, np.arange(B, 2 * B)))
        state.opt_d.zero_grad()
        T.backward(loss_d)
        state.opt_d.step()
    d_loss = loss_d.item()
    _check(d_loss, "d_loss", it)

    seen_cats = rng.choice(cats, size=B)
    z_seen = rng.standard_normal((B, cfg.noise_dim))
    unseen_cats = z_unseen = None
    if _knowledge_active(cfg, state) and state.unseen_categories:
        unseen_cats = rng.choice(np.asarray(state.unseen_categories), size=B)
        z_unseen = rng.standard_normal((B, cfg.noise_dim))
    with _frozen_params(D):
        loss_g, parts = total_g_loss(state, seen_cats, z_seen, unseen_cats, z_unseen)
        state.opt_g.zero_grad()
        T.backward(loss_g)
    state.opt_g.step()
    for k, v in parts.items():
        if v is not None:
            _check(v, k, it)

    state.iteration = it
    state.log.append({"iteration": it, "d_loss": d_loss, **parts})
    return state


# --------------------------------------------------------------- checkpoint


def _adam_arrays(opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for i, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
        out[f"m{i}"] = m
        out[f"v{i}"] = v
    return out


def _load_adam(opt: Adam, arrays: dict[str, np.ndarray], meta: dict) -> None:
    st = opt.state
    for i in range(len(st.m)):
        st.m[i] = np.array(arrays[f"m{i}"])
        st.v[i] = np.array(arrays[f"v{i}"])
    st.step = int(meta["step"])
    st.lr, st.beta1, st.beta2, st.eps = meta["lr"], meta["beta1"], meta["beta2"], meta["eps"]


def save_state(state: TrainState, directory: str | Path, run_id: str | None = None) -> Path:
    directory = Path(directory)
    sets = {
        "generator": state.generator.state_arrays(),
        "discriminator": state.discriminator.state_arrays(),
        "adam_g": _adam_arrays(state.opt_g),
        "adam_d": _adam_arrays(state.opt_d),
        "conditions": {"conditions": state.conditions, "targets": state.targets},
    }
    if state.embedder is not None:
        sets["embedder"] = state.embedder.state_arrays()
    meta = {
        "iteration": state.iteration,
        "config": state.config.to_json(),
        "rng": state.rng.bit_generator.state,
        "adam_g": {"step": state.opt_g.state.step, **state.opt_g.state.hyper()},
        "adam_d": {"step": state.opt_d.state.step, **state.opt_d.state.hyper()},
        "train_categories": state.train_categories,
        "unseen_categories": state.unseen_categories,
        "image_shape": list(state.generator.image_shape),
        "embedder_hidden": list(state.embedder.hidden) if state.embedder is not None else None,
        "sn_power_iterations": next(iter(state.discriminator.sn.values())).n_power_iterations,
    }
    save_checkpoint(directory, sets, meta, run_id)
    with open(directory / "metrics.jsonl", "w") as f:
        for rec in state.log:
            f.write(json.dumps(rec) + "\n")
    return directory


def load_state(directory: str | Path) -> TrainState:
    directory = Path(directory)
    sets, meta, _ = load_checkpoint(directory)
    cfg = TrainingConfig.from_json(meta["config"])
    conditions = sets["conditions"]["conditions"]
    targets = sets["conditions"]["targets"]
    image_shape = tuple(meta["image_shape"])
    G = Generator(cfg.noise_dim, conditions.shape[1], image_shape, np.random.default_rng(0), cfg.g_hidden)
    G.load_arrays(sets["generator"])
    D = Discriminator(image_shape, conditions.shape[1], np.random.default_rng(0), cfg.d_hidden,
                      cfg.feature_dim, n_power_iterations=meta.get("sn_power_iterations", 1))
    D.load_arrays(sets["discriminator"])
    E = None
    if "embedder" in sets:
        E = Embedder(image_shape, targets.shape[1], np.random.default_rng(0), meta["embedder_hidden"])
        E.load_arrays(sets["embedder"])
        E.freeze()
    unseen = list(meta["unseen_categories"])
    D.watch_conditions(conditions[unseen] if unseen else None)
    opt_g = Adam(G.parameters())
    opt_d = Adam(D.parameters())
    _load_adam(opt_g, sets["adam_g"], meta["adam_g"])
    _load_adam(opt_d, sets["adam_d"], meta["adam_d"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    log = []
    mpath = directory / "metrics.jsonl"
    if mpath.exists():
        log = [json.loads(line) for line in mpath.read_text().splitlines() if line.strip()]
    return TrainState(cfg, G, D, E, opt_g, opt_d, rng, conditions, targets,
                      list(meta["train_categories"]), unseen, int(meta["iteration"]), log)


# ------------------------------------------------------------------- driver


def train(config: TrainingConfig, dataset, embeddings: np.ndarray, embedder: Embedder | None,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          run_id: str | None = None, progress_every: int = 0) -> TrainState:
    """Run ``config.iterations`` steps, checkpointing every ``checkpoint_every``.

    With ``resume`` the state is restored from that checkpoint and training
    continues up to the configured iteration count.
    """
    if resume is not None:
        state = load_state(resume)
        state.config.iterations = config.iterations
        state.config.checkpoint_every = config.checkpoint_every
    else:
        state = init_state(config, dataset, embeddings, embedder)
    out = Path(out_dir) if out_dir is not None else None
    every = state.config.checkpoint_every
    while state.iteration < state.config.iterations:
        train_step(state, dataset)
        if progress_every and state.iteration % progress_every == 0:
            rec = state.log[-1]
            logger.info("iter %d d=%.4f g_adv=%.4f lse=%s/%s", rec["iteration"], rec["d_loss"],
                        rec["g_adv"], rec["l_se_seen"], rec["l_se_unseen"])
        if out is not None and every and state.iteration % every == 0:
            try:
                save_state(state, out / f"ckpt_{state.iteration:07d}", run_id)
            except OSError as exc:
                raise OSError(f"writing checkpoint under {out}: {exc}") from exc
    if out is not None:
        try:
            save_state(state, out / "final", run_id)
        except OSError as exc:
            raise OSError(f"writing checkpoint under {out}: {exc}") from exc
    return state


def generate_batch(generator: Generator, conditions: np.ndarray, n_per_condition: int,
                   seed: int, chunk: int = 512) -> np.ndarray:
    """``n_per_condition`` images per condition row, grouped by condition.

    Returns ``(m * n, C, H, W)``; deterministic in ``seed``.
    """
    conditions = np.asarray(conditions, dtype=np.float64)
    if conditions.ndim != 2 or conditions.shape[1] != generator.cond_dim:
        raise ContractError(f"generate_batch: conditions must be (m, {generator.cond_dim}), got {conditions.shape}")
    rng = np.random.default_rng([seed, 0x6E])
    cond = np.repeat(conditions, n_per_condition, axis=0)
    z = rng.standard_normal((len(cond), generator.noise_dim))
    out = []
    with T.no_grad():
        for s in range(0, len(cond), chunk):
            out.append(generator.forward(Tensor(z[s:s + chunk]), Tensor(cond[s:s + chunk])).data)
    if not out:
        return np.zeros((0, *generator.image_shape))
    return np.concatenate(out)
