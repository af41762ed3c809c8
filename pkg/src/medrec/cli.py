"""Command-line entry point for the multi-center medication pipeline.

Subcommands: gen-data, analyze, pretrain, tune, infer, evaluate, matrix.
Every command is driven by one JSON config file (``--config``) with optional
``--set section.key=value`` overrides; the resolved config is echoed into the
output directory so any run can be reproduced from its artifacts.

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import (OUTPUT_ROOT_ENV, ConfigError, RunConfig, apply_overrides,
                     config_hash, desk_scale_config, echo_config, load_config)
from .data import IngestError, MultiCenterDataset, load_dataset, make_record, save_dataset
from .generator import dataset_summary, generate
from .metrics import EvalResult, GROUP_NAMES, jsd_matrix, report, score_record, write_csv
from .pretrain import load_backbone, run_pretrain, save_backbone
from .tune import (MissingArtifactError, TuneConfig, infer_probabilities,
                   load_store, run_tune, save_store)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _output_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_scale_config()
    overrides = list(args.set or [])
    for flag, target in (("no_mask_task", "pretrain.mask_task=false"),
                         ("no_contrastive_task", "pretrain.contrastive_task=false"),
                         ("separate_encoders", "encoder.shared_towers=false"),
                         ("shared_pretrain_heads", "pretrain.shared_heads=true")):
        if getattr(args, flag, False):
            overrides.append(target)
    if getattr(args, "regime", None):
        overrides.append(f"tune.regime={args.regime}")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return apply_overrides(cfg, overrides)


def _load_dataset(path) -> MultiCenterDataset:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"dataset directory not found: {path}")
    return load_dataset(p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _output_dir(args, "dataset")
    dataset = generate(cfg.generator)
    save_dataset(dataset, out)
    report({}, None, dataset_summary(dataset), out, images=False)
    echo_config(cfg, out)
    print(f"wrote {dataset.n_records()} records across {len(dataset.centers)} "
          f"centers to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    dataset = _load_dataset(args.data)
    out = _output_dir(args, "analysis")
    matrix = jsd_matrix(dataset)
    report({}, matrix, dataset_summary(dataset), out, centers=dataset.centers,
           images=True)
    print(f"mean pairwise prescription JSD: "
          f"{matrix[np.triu_indices(len(dataset.centers), 1)].mean():.4f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_dataset(args.data)
    out = _output_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    result = run_pretrain(dataset, cfg.pretrain, cfg.encoder)
    save_backbone(out / "backbone.ckpt", result.backbone,
                  meta={"config_hash": config_hash(cfg), "seed": cfg.pretrain.seed})
    write_csv(out / "pretrain_metrics.csv",
              ["epoch", "train_loss", "mask_loss", "contrastive_loss", "val_score"],
              [[h["epoch"], f"{h['train_loss']:.8f}", f"{h['mask_loss']:.8f}",
                f"{h['contrastive_loss']:.8f}", f"{h['val_score']:.8f}"]
               for h in result.history])
    echo_config(cfg, out)
    print(f"pretrained backbone (best epoch {result.best_epoch}, "
          f"val score {result.best_score:.4f}) -> {out / 'backbone.ckpt'}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_dataset(args.data)
    out = _output_dir(args, f"tune-{cfg.tune.regime}")
    backbone = None
    backbone_path = None
    if cfg.tune.regime in ("prompt", "finetune", "finetune-freeze"):
        if not args.backbone:
            raise MissingArtifactError(
                f"regime {cfg.tune.regime!r} requires a pretrained backbone "
                "(--backbone)")
        backbone_path = Path(args.backbone)
        if not backbone_path.exists():
            raise MissingArtifactError(f"pretrained backbone required: "
                                       f"{backbone_path} does not exist")
        backbone = load_backbone(backbone_path)
    store, histories = run_tune(dataset, backbone, cfg.tune, cfg.encoder)
    save_store(store, out, backbone_checkpoint_path=backbone_path,
               extra_meta={"config_hash": config_hash(cfg)})
    audit = store.parameter_audit()
    write_csv(out / "parameter_audit.csv", ["center", "tuned_parameters"],
              [[c, audit[c]] for c in sorted(audit)])
    rows = []
    for center in sorted(histories):
        for h in histories[center]:
            rows.append([center, h["epoch"], f"{h['train_loss']:.8f}",
                         f"{h['val_score']:.8f}"])
    write_csv(out / "tune_metrics.csv",
              ["center", "epoch", "train_loss", "val_score"], rows)
    echo_config(cfg, out)
    print(f"tuned {len(store.centers)} centers under regime "
          f"{cfg.tune.regime!r} -> {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    store_dir = Path(args.store)
    if not store_dir.exists():
        raise MissingArtifactError(f"store directory not found: {args.store}")
    store = load_store(store_dir)
    dataset = _load_dataset(args.data)
    vocabs = dataset.vocabs
    diag = [vocabs.diag_id(c) for c in args.diag]
    proc = [vocabs.proc_id(c) for c in (args.proc or [])]
    record = make_record(args.center, diag, proc, [0], vocabs)
    probs = infer_probabilities(record, args.center, store, vocabs)
    chosen = [(float(probs[i]), vocabs.medications[i])
              for i in np.nonzero(probs > args.threshold)[0]]
    for prob, code in sorted(chosen, key=lambda pc: (-pc[0], pc[1])):
        print(f"{code}\t{prob:.4f}")
    if not chosen:
        print("(no medication above threshold)")
    return EXIT_OK


def evaluate_store(dataset: MultiCenterDataset, store, threshold: float,
                   groups, split: str = "test", batch_size: int = 64) -> EvalResult:
    """Score one tuned store over a dataset split."""
    from medrec.data import collate, iter_batches
    from medrec.tune import recommend_logits

    rows = []
    skipped = 0
    sizes = {c: dataset.center_size(c) for c in dataset.centers}
    for center in dataset.centers:
        adapter = store.adapter_for(center)
        backbone = store.backbone_for(center)
        records = dataset.split_records(center, split)
        for chunk in iter_batches(records, batch_size):
            batch = collate(chunk, dataset.vocabs, "tune",
                            backbone.config.max_len, n_prompt=adapter.prompt_count)
            _, probs = recommend_logits(batch, backbone, adapter)
            for row, record in enumerate(chunk):
                scored = score_record(record.medications, probs[row], threshold)
                if scored["prauc"] is None:
                    skipped += 1
                scored["center"] = center
                rows.append(scored)
    return EvalResult.from_records(rows, sizes, groups, skipped_prauc=skipped)


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_dataset(args.data)
    store_dir = Path(args.store)
    if not store_dir.exists():
        raise MissingArtifactError(f"store directory not found: {args.store}")
    store = load_store(store_dir)
    out = _output_dir(args, "evaluation")
    result = evaluate_store(dataset, store, cfg.tune.threshold, cfg.groups,
                            split=args.split)
    name = store.regime
    report({name: result}, None, None, out)
    echo_config(cfg, out)
    print(f"{name}: " + "  ".join(f"{m}={result.overall[m]:.4f}"
                                  for m in ("prauc", "jaccard", "f1")))
    return EXIT_OK


# ---------------------------------------------------------------------------
# the seeds x regimes experiment matrix
# ---------------------------------------------------------------------------

def run_matrix(cfg: RunConfig, dataset: MultiCenterDataset, out_dir: Path,
               jobs: int = 1) -> dict:
    """Run the full pipeline per seed per regime and aggregate the results.

    Completed (seed, regime) leaves are detected through their result file and
    skipped, so an interrupted run resumes where it stopped.
    """
    from . import __version__

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = {
        "run_id": config_hash(cfg),
        "config_hash": config_hash(cfg),
        "source_version": f"medrec-{__version__}",
        "seeds": list(cfg.seeds),
        "regimes": list(cfg.regimes),
        "status": "running",
        "timings": {},
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    needs_backbone = any(r in ("prompt", "finetune", "finetune-freeze")
                         for r in cfg.regimes)
    results: dict[str, dict[int, EvalResult]] = {r: {} for r in cfg.regimes}
    for seed in cfg.seeds:
        seed_cfg = cfg.with_seed(seed)
        seed_dir = out_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        backbone = None
        backbone_path = seed_dir / "backbone.ckpt"
        if needs_backbone:
            if backbone_path.exists():
                backbone = load_backbone(backbone_path)
            else:
                t0 = time.monotonic()
                result = run_pretrain(dataset, seed_cfg.pretrain, seed_cfg.encoder)
                backbone = result.backbone
                save_backbone(backbone_path, backbone,
                              meta={"config_hash": config_hash(seed_cfg),
                                    "seed": seed})
                manifest["timings"][f"pretrain-seed{seed}"] = time.monotonic() - t0

        for regime in cfg.regimes:
            leaf = seed_dir / f"result-{regime}.json"
            if leaf.exists():
                results[regime][seed] = _eval_from_json(leaf)
                continue
            t0 = time.monotonic()
            tune_cfg = TuneConfig(**{**vars(seed_cfg.tune), "regime": regime})
            store, _ = run_tune(dataset, backbone, tune_cfg, seed_cfg.encoder)
            store_dir = seed_dir / f"store-{regime}"
            save_store(store, store_dir,
                       backbone_checkpoint_path=backbone_path
                       if backbone_path.exists() else None,
                       extra_meta={"config_hash": config_hash(seed_cfg)})
            evaluation = evaluate_store(dataset, store, tune_cfg.threshold,
                                        seed_cfg.groups)
            leaf.write_text(json.dumps(_eval_to_json(evaluation), sort_keys=True,
                                       indent=2) + "\n")
            results[regime][seed] = evaluation
            manifest["timings"][f"{regime}-seed{seed}"] = time.monotonic() - t0
            manifest_path.write_text(json.dumps(manifest, sort_keys=True,
                                                indent=2) + "\n")

    aggregate = _aggregate_matrix(cfg, results)
    _write_matrix_tables(out_dir, aggregate)
    echo_config(cfg, out_dir)
    manifest["status"] = "complete"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return aggregate


def _eval_to_json(result: EvalResult) -> dict:
    return {"overall": result.overall, "per_center": result.per_center,
            "per_group": result.per_group, "skipped_prauc": result.skipped_prauc}


def _eval_from_json(path) -> EvalResult:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalResult(per_record=[], per_center=raw["per_center"],
                      per_group=raw["per_group"], overall=raw["overall"],
                      skipped_prauc=raw["skipped_prauc"])


def _aggregate_matrix(cfg: RunConfig, results: dict[str, dict[int, EvalResult]]) -> dict:
    """Mean and std over seeds, overall and per group, per regime."""
    aggregate: dict = {"regimes": {}}
    for regime, by_seed in results.items():
        if not by_seed:
            continue
        entry: dict = {"overall": {}, "groups": {}}
        for metric in ("prauc", "jaccard", "f1"):
            vals = [by_seed[s].overall[metric] for s in sorted(by_seed)]
            entry["overall"][metric] = {"mean": float(np.mean(vals)),
                                        "std": float(np.std(vals))}
        for group in GROUP_NAMES:
            present = [by_seed[s].per_group[group] for s in sorted(by_seed)
                       if group in by_seed[s].per_group]
            if present:
                entry["groups"][group] = {
                    metric: {"mean": float(np.mean([p[metric] for p in present])),
                             "std": float(np.std([p[metric] for p in present]))}
                    for metric in ("prauc", "jaccard", "f1")}
        aggregate["regimes"][regime] = entry
    baseline = aggregate["regimes"].get("single-train")
    if baseline:
        for regime, entry in aggregate["regimes"].items():
            if regime == "single-train":
                continue
            entry["improvement_vs_single_train"] = {}
            for group, stats in entry["groups"].items():
                base = baseline["groups"].get(group)
                if base and base["jaccard"]["mean"] > 0:
                    entry["improvement_vs_single_train"][group] = (
                        (stats["jaccard"]["mean"] - base["jaccard"]["mean"])
                        / base["jaccard"]["mean"])
    return aggregate


def _write_matrix_tables(out_dir: Path, aggregate: dict) -> None:
    rows = []
    for regime in sorted(aggregate["regimes"]):
        entry = aggregate["regimes"][regime]
        row = [regime]
        for metric in ("prauc", "jaccard", "f1"):
            stats = entry["overall"][metric]
            row.append(f"{stats['mean']:.6f}")
            row.append(f"{stats['std']:.6f}")
        rows.append(row)
    write_csv(out_dir / "matrix_overall.csv",
              ["regime", "prauc_mean", "prauc_std", "jaccard_mean", "jaccard_std",
               "f1_mean", "f1_std"], rows)

    rows = []
    for regime in sorted(aggregate["regimes"]):
        entry = aggregate["regimes"][regime]
        for group in GROUP_NAMES:
            if group not in entry["groups"]:
                continue
            stats = entry["groups"][group]
            improvement = entry.get("improvement_vs_single_train", {}).get(group)
            rows.append([regime, group,
                         f"{stats['prauc']['mean']:.6f}",
                         f"{stats['jaccard']['mean']:.6f}",
                         f"{stats['f1']['mean']:.6f}",
                         "" if improvement is None else f"{improvement:.6f}"])
    write_csv(out_dir / "matrix_groups.csv",
              ["model", "group", "prauc", "jaccard", "f1",
               "improvement-vs-baseline"], rows)
    (out_dir / "matrix_aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_matrix(args) -> int:
    cfg = _resolve_config(args)
    dataset = _load_dataset(args.data)
    out = _output_dir(args, "matrix")
    aggregate = run_matrix(cfg, dataset, out, jobs=args.jobs)
    for regime in sorted(aggregate["regimes"]):
        overall = aggregate["regimes"][regime]["overall"]
        print(f"{regime:16s} jaccard={overall['jaccard']['mean']:.4f}"
              f" +/- {overall['jaccard']['std']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, data: bool = True) -> None:
    parser.add_argument("--config", help="JSON config file (desk-scale defaults "
                                         "when omitted)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. pretrain.seed=43")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="override every stage seed")
    if data:
        parser.add_argument("--data", required=True, help="dataset directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medrec",
        description="Multi-center medication recommendation: pretraining, "
                    "prompt tuning, evaluation and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("analyze", help="dataset heterogeneity reports")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pretrain", help="stage-1 self-supervised training")
    _add_common(p)
    p.add_argument("--no-mask-task", action="store_true", dest="no_mask_task")
    p.add_argument("--no-contrastive-task", action="store_true",
                   dest="no_contrastive_task")
    p.add_argument("--separate-encoders", action="store_true",
                   dest="separate_encoders")
    p.add_argument("--shared-pretrain-heads", action="store_true",
                   dest="shared_pretrain_heads")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("tune", help="stage-2 per-center adaptation")
    _add_common(p)
    p.add_argument("--backbone", help="pretrained backbone checkpoint")
    p.add_argument("--regime", choices=("prompt", "finetune", "finetune-freeze",
                                        "full-train", "single-train"))
    p.add_argument("--separate-encoders", action="store_true",
                   dest="separate_encoders")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("infer", help="recommend medications for one record")
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--center", required=True)
    p.add_argument("--diag", nargs="+", required=True, help="diagnosis codes")
    p.add_argument("--proc", nargs="*", help="procedure codes")
    p.add_argument("--threshold", type=float, default=0.3)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score a tuned store on a split")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="seeds x regimes experiment grid")
    _add_common(p)
    p.add_argument("--no-mask-task", action="store_true", dest="no_mask_task")
    p.add_argument("--no-contrastive-task", action="store_true",
                   dest="no_contrastive_task")
    p.add_argument("--separate-encoders", action="store_true",
                   dest="separate_encoders")
    p.add_argument("--shared-pretrain-heads", action="store_true",
                   dest="shared_pretrain_heads")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallelism limit (sequential execution is always "
                        "deterministic)")
    p.set_defaults(func=cmd_matrix)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
