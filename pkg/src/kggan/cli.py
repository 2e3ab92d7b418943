"""Command-line entry point: ``kggan <verb> [flags]``.

Exit codes: 0 success, 2 invalid dataset spec or config, 3 numeric failure, 4 missing
artifact, 1 anything else (for example an unwritable output directory).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .constraint import fit_on_seen, load_embedder, save_embedder
from .embedding import EmbedConfig, dataset_embeddings, load_embedding_table, save_embedding_table
from .errors import ContractError, MissingArtifactError, NumericError, SpecError
from .evaluation import (constraint_report, extractor_for, format_table, mean_scores, per_category_fid,
                         write_json)
from .flora import FloraDataset, FloraSpec, generate_dataset, load_dataset, save_dataset, write_ppm
from .pipeline import (VARIANTS, SeedResult, ablate_seed, check_verdicts, median_summary, table_row, variant_config,
                       variant_dir)
from .training import TrainingConfig, generate_batch, load_config, load_state, train

logger = logging.getLogger("kggan")

EXIT_OK, EXIT_OTHER, EXIT_SPEC, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3, 4


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict
    dataset_seed: int | None = None
    dataset_checksum: str | None = None
    code_version: str = __version__
    artifacts: dict[str, str] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)

    def add(self, name: str, path: Path) -> None:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"artifact {name} was not written: {path}")
        self.artifacts[name] = str(path)
        target = path / "manifest.json" if path.is_dir() else path
        self.checksums[name] = sha256_file(target)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "run_manifest.json"
        write_json(path, asdict(self))
        return path


class Timer:
    def __init__(self, manifest: RunManifest, stage: str):
        self.manifest, self.stage = manifest, stage

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.timings[self.stage] = round(time.perf_counter() - self.t0, 3)
        return False


def _new_run_id(command: str) -> str:
    return f"{command}-{time.strftime('%Y%m%dT%H%M%S')}-{uuid.uuid4().hex[:6]}"


def _out_dir(path: str | None, default: str) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc


def _training_config(args) -> TrainingConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainingConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _require_dataset(args) -> tuple[Path, FloraDataset]:
    if not args.dataset:
        raise SpecError("--dataset is required")
    root = Path(args.dataset)
    return root, load_dataset(root)


def _embeddings(root: Path, dataset: FloraDataset) -> np.ndarray:
    """The dataset's embedding table, rebuilt from its descriptions if not on disk."""
    path = root / "embeddings.json"
    if path.exists():
        table, _ = load_embedding_table(path)
        return np.stack([table[k] for k in range(len(dataset.categories))])
    return dataset_embeddings(dataset)


def _embedder(root: Path, dataset: FloraDataset, emb: np.ndarray, cfg: TrainingConfig, run_id: str):
    """Cached E for this seed under the dataset directory, trained on first use."""
    cache = root / f"embedder_seed{cfg.seed}"
    if (cache / "manifest.json").exists():
        return load_embedder(cache)[0], cache
    E, report = fit_on_seen(dataset, emb, epochs=cfg.embedder_epochs, seed=cfg.seed, lr=cfg.embedder_lr,
                            log_path=None)
    save_embedder(E, cache, report, run_id)
    return E, cache


# ------------------------------------------------------------------ verbs


def cmd_synth(args) -> int:
    run_id = _new_run_id("synth")
    doc = _read_json(args.config) if args.config else {}
    emb_cfg = EmbedConfig(**doc.pop("embedding", {}))
    spec = FloraSpec.from_json(doc) if doc else FloraSpec()
    spec.validate()
    emb_cfg.validate()
    out = _out_dir(args.out, "runs/dataset")
    seed = 0 if args.seed is None else args.seed
    man = RunManifest(run_id, "synth", {"flora": spec.to_json(), "embedding": asdict(emb_cfg)}, seed)
    with Timer(man, "synth"):
        ds = generate_dataset(spec, seed)
        save_dataset(ds, out)
    with Timer(man, "embed"):
        emb = dataset_embeddings(ds, emb_cfg)
        save_embedding_table(out / "embeddings.json", dict(enumerate(emb)), emb_cfg)
    man.dataset_checksum = ds.checksum()
    man.add("dataset", out / "manifest.json")
    man.add("split", out / "split.json")
    man.add("embeddings", out / "embeddings.json")
    man.write(out)
    print(f"{len(ds)} samples, {len(ds.categories)} categories "
          f"({len(ds.split.seen)} seen / {len(ds.split.unseen)} unseen), checksum {ds.checksum()[:16]}")
    return EXIT_OK


def cmd_train_embedder(args) -> int:
    run_id = _new_run_id("train-embedder")
    cfg = _training_config(args)
    root, ds = _require_dataset(args)
    emb = _embeddings(root, ds)
    out = _out_dir(args.out, str(root / f"embedder_seed{cfg.seed}"))
    man = RunManifest(run_id, "train-embedder", cfg.to_json(), ds.seed, ds.checksum())
    with Timer(man, "train-embedder"):
        E, report = fit_on_seen(ds, emb, epochs=cfg.embedder_epochs, seed=cfg.seed, lr=cfg.embedder_lr,
                                log_path=out / "metrics.jsonl")
        save_embedder(E, out, report, run_id)
    man.add("embedder", out)
    man.write(out)
    print(f"held-out mse {report.heldout_mse:.5f}, mean predictor {report.baseline_mse:.5f}, r2 {report.r2:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_id = _new_run_id("train")
    cfg = _training_config(args)
    root, ds = _require_dataset(args)
    emb = _embeddings(root, ds)
    out = _out_dir(args.out, f"runs/train-{cfg.seed}")
    man = RunManifest(run_id, "train", cfg.to_json(), ds.seed, ds.checksum())
    write_json(out / "config.json", cfg.to_json())
    with Timer(man, "train-embedder"):
        E, edir = _embedder(root, ds, emb, cfg, run_id)
    man.artifacts["embedder"] = str(edir)
    with Timer(man, "train"):
        state = train(cfg, ds, emb, E, out_dir=out, resume=args.resume, run_id=run_id, progress_every=500)
    man.add("checkpoint", out / "final")
    man.add("config", out / "config.json")
    man.write(out)
    rec = state.log[-1] if state.log else {}
    print(f"{cfg.label}: {state.iteration} iterations, final d_loss {rec.get('d_loss', float('nan')):.4f}, "
          f"discriminator hits on unseen conditions: {state.discriminator.forbidden_hits}")
    return EXIT_OK


def _grid(real: np.ndarray, fake: np.ndarray, gap: int = 1) -> np.ndarray:
    """Two-row mosaic: real tiles on top, generated tiles below."""
    n = max(len(real), len(fake))
    c, h, w = real.shape[1:]
    canvas = np.ones((c, 2 * h + gap, n * w + (n - 1) * gap))
    for row, tiles in enumerate((real, fake)):
        for i, tile in enumerate(tiles):
            y, x = row * (h + gap), i * (w + gap)
            canvas[:, y:y + h, x:x + w] = tile
    return canvas


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise SpecError("--checkpoint is required")
    run_id = _new_run_id("eval")
    root, ds = _require_dataset(args)
    state = load_state(args.checkpoint)
    seed = state.config.seed if args.seed is None else args.seed
    out = _out_dir(args.out, str(Path(args.checkpoint) / "eval"))
    man = RunManifest(run_id, "eval", state.config.to_json(), ds.seed, ds.checksum())
    with Timer(man, "extractor"):
        ext = extractor_for(ds, root / "extractor")
    with Timer(man, "fid"):
        fid = per_category_fid(ds, state.generator, state.conditions, ext, args.n_fake, seed, state.config.label)
    with Timer(man, "constraint"):
        cons = constraint_report(state.generator, state.conditions, ds, ds.split.unseen, args.n_fake, seed)
    color, shape = mean_scores(cons)
    write_json(out / "fid.json", {"run_id": run_id, **fid.to_json()})
    write_json(out / "constraint.json", {"run_id": run_id, "per_category": {str(k): v for k, v in cons.items()},
                                         "color_score": color, "shape_score": shape, "n_per_category": args.n_fake})
    table = format_table([table_row(state.config, fid)])
    (out / "table.txt").write_text(table + "\n")
    for name in ("fid", "constraint"):
        man.add(name, out / f"{name}.json")
    man.add("table", out / "table.txt")
    grids = out / "grids"
    grids.mkdir(exist_ok=True)
    n = args.grid
    for c in sorted(ds.split.seen + ds.split.unseen):
        real = ds.images[ds.labels == c][:n]
        fake = generate_batch(state.generator, state.conditions[[c]], n, seed)
        tag = "unseen" if c in ds.split.unseen else "seen"
        path = grids / f"cat{c:02d}_{ds.categories[c].name}_{tag}.ppm"
        write_ppm(path, _grid(real, fake), comment=f"run {run_id}")
        man.add(f"grid_{c}", path)
    man.write(out)
    print(table)
    print(f"unseen color_score {color:.3f}, shape_score {shape:.3f}; extractor {fid.extractor}")
    return EXIT_OK


MEDIAN_COLUMNS = ("Method", "Training data", "Condition", "L_se", "Seen FID", "Unseen FID", "Unseen color",
                  "Unseen shape")


def _summary_text(summary: dict, n_seeds: int, base: TrainingConfig) -> str:
    rows = []
    for name in VARIANTS:
        row = table_row(variant_config(base, name), None)
        m = summary[name]
        row.update({"Seen FID": m["seen"], "Unseen FID": m["unseen"], "Unseen color": m["color"],
                    "Unseen shape": m["shape"]})
        rows.append(row)
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in check_verdicts(summary).items()]
    return "\n\n".join([
        f"seed median over {n_seeds} seeds\n{format_table(rows, MEDIAN_COLUMNS)}",
        f"untrained-generator unseen color_score (median) {summary['untrained_color']:.4f}",
        "verdicts\n" + "\n".join(lines),
        "note: the SN-GAN row uses embedding conditions, like KG-GAN, so the two differ only in "
        "data availability and the knowledge loss",
    ])


def _ablation_tables(results: Sequence[SeedResult], base: TrainingConfig) -> str:
    blocks = []
    for r in results:
        rows = []
        for name in VARIANTS:
            cfg = variant_config(base, name)
            if name in r.variants:
                rows.append(table_row(cfg, r.variants[name].fid))
            elif name in r.failures:
                rows.append({**table_row(cfg, None), "Seen FID": "FAILED", "Unseen FID": "FAILED"})
        blocks.append(f"seed {r.seed}\n{format_table(rows)}")
    blocks.append(_summary_text(median_summary(results), len(results), base))
    return "\n\n".join(blocks)


def _seed_json(r: SeedResult) -> dict:
    return {
        "seed": r.seed,
        "embedder": {**asdict(r.embedder_report), "r2": r.embedder_report.r2},
        "untrained_color": r.untrained_color,
        "random_color": r.random_color,
        "noise_floor_mean": r.noise_floor_mean,
        "isolation_hits": r.isolation_hits,
        "l_se_unseen_trend": r.l_se_unseen_trend,
        "failures": r.failures,
        "variants": {name: {"config": v.config.to_json(), "fid": v.fid.to_json(),
                            "constraint": {str(k): list(s) for k, s in v.constraint.items()},
                            "color_score": v.unseen_color, "shape_score": v.unseen_shape, "seconds": v.seconds}
                     for name, v in r.variants.items()},
    }


def cmd_ablate(args) -> int:
    run_id = _new_run_id("ablate")
    base = _training_config(args)
    root, ds = _require_dataset(args)
    emb = _embeddings(root, ds)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    out = _out_dir(args.out, "runs/ablate")
    man = RunManifest(run_id, "ablate", base.to_json(), ds.seed, ds.checksum())
    with Timer(man, "extractor"):
        ext = extractor_for(ds, root / "extractor")
    results = []
    for s in seeds:
        with Timer(man, f"seed{s}"):
            r = ablate_seed(base, ds, emb, ext, s, out_dir=out, run_id=run_id)
        results.append(r)
        for name, v in r.variants.items():
            ckpt = variant_dir(out, s, name) / "final"
            man.runs.append({"seed": s, "variant": name, "checkpoint": str(ckpt), "seconds": round(v.seconds, 3),
                             "checksum": sha256_file(ckpt / "manifest.json")})
        for name, err in r.failures.items():
            man.runs.append({"seed": s, "variant": name, "failed": err})
        write_json(out / "ablation.json", {"run_id": run_id, "base": base.to_json(),
                                           "seeds": [_seed_json(x) for x in results]})
    text = _ablation_tables(results, base)
    (out / "ablation.txt").write_text(text + "\n")
    man.add("ablation", out / "ablation.json")
    man.add("table", out / "ablation.txt")
    man.write(out)
    print(text)
    return EXIT_NUMERIC if any(r.failures for r in results) else EXIT_OK


def cmd_report(args) -> int:
    """Re-render per-seed tables, seed medians and verdicts from ``ablation.json``."""
    root = Path(args.out or "runs/ablate")
    doc = _read_json(root / "ablation.json")
    base = TrainingConfig.from_json(doc["base"])
    seeds = doc["seeds"]
    keys = {"seen": ("fid", "seen_mean"), "unseen": ("fid", "unseen_mean"), "color": ("color_score",),
            "shape": ("shape_score",)}

    def pick(v, path):
        for k in path:
            v = v[k]
        return v

    summary = {}
    for name in VARIANTS:
        runs = [s["variants"][name] for s in seeds if name in s["variants"]]
        summary[name] = {w: float(np.median([pick(v, p) for v in runs])) if runs else float("nan")
                         for w, p in keys.items()}
    summary["untrained_color"] = float(np.median([s["untrained_color"] for s in seeds]))
    for s in seeds:
        rows = [{**table_row(TrainingConfig.from_json(v["config"]), None), "Seen FID": v["fid"]["seen_mean"],
                 "Unseen FID": v["fid"]["unseen_mean"], "Unseen color": v["color_score"],
                 "Unseen shape": v["shape_score"]} for v in s["variants"].values()]
        rows += [{"Method": name, "Seen FID": "FAILED", "Unseen FID": "FAILED"} for name in s["failures"]]
        print(f"seed {s['seed']}\n{format_table(rows, MEDIAN_COLUMNS)}\n")
    print(_summary_text(summary, len(seeds), base))
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kggan", description="Desk-scale knowledge-guided GAN experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        return sp

    verb("synth", cmd_synth, "render the synthetic dataset and its embedding table")
    tr = verb("train-embedder", cmd_train_embedder, "fit the embedding regressor on seen categories")
    tr.add_argument("--dataset")
    t = verb("train", cmd_train, "train one GAN variant")
    t.add_argument("--dataset")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    e = verb("eval", cmd_eval, "per-category FID, attribute scores and sample grids")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--n-fake", type=int, default=128)
    e.add_argument("--grid", type=int, default=8, help="tiles per row in sample grids")
    a = verb("ablate", cmd_ablate, "four-way ablation over seeds")
    a.add_argument("--dataset")
    a.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    verb("report", cmd_report, "print tables from an ablation directory (--out)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (SpecError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
