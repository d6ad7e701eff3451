"""Command-line surface: gen, train, eval, search.

Every command is a pure function of its flags, config file, and input
files. Progress lines (including wall time) go to stdout only; everything
written to disk is byte-deterministic for a fixed config and seed. Exit
codes: 0 success, 2 config/constraint error, 3 data error, 4 version error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .blobs import read_blob_file, write_blob_file
from .checkpoint import load_checkpoint_file, restore_model, save_checkpoint_file
from .config import (
    RunConfig,
    config_hash,
    default_run_config,
    load_run_config,
    save_run_config,
)
from .datagen import (
    DatasetBundle,
    generate_dataset,
    generate_gallery,
    read_manifest,
    validate_manifest,
    write_manifest,
)
from .errors import (
    ConfigError,
    ConstraintError,
    DataError,
    FormatError,
    GalleryMissError,
    SequenceTooLongError,
    UsageError,
    VersionError,
)
from .evaluation import (
    K_VALUES,
    embed_split_images,
    eval_threads,
    evaluate_entity_in_context,
    evaluate_entity_only,
    top_k_images,
)
from .model import build_model, build_vocab, check_caption_budget
from .query import ENTITY_MARKER, ExpansionStrategy, compose_slots, expand_entity, AnonymizedCaption, lookup_face, tokenize_words
from .trainer import PHASE_BACKBONE, PHASE_IDCLIP, pretrain_backbone, run_phase

STRATEGY_CHOICES = [s.value for s in ExpansionStrategy]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERSION = 4


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else default_run_config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=args.seed)
        cfg.idclip = dataclasses.replace(cfg.idclip, seed=args.seed)
    return cfg


def _tensor_sidecar(manifest_path: str) -> str:
    return manifest_path + ".tensors"


def _load_dataset(manifest_path: str, with_tensors: bool = True) -> DatasetBundle:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = read_manifest(fh)
    tensors = read_blob_file(_tensor_sidecar(manifest_path)) if with_tensors else {}
    return DatasetBundle.build(manifest, tensors)


def _build_gallery(cfg: RunConfig):
    return generate_gallery(
        cfg.data.num_identities, cfg.seed, d_face=cfg.data.d_face,
        jitter_sigma=cfg.data.jitter_sigma,
    )


def _rebuild_model(cfg: RunConfig, bundle: DatasetBundle):
    vocab = build_vocab(bundle.manifest)
    check_caption_budget(bundle.manifest, cfg.dims)
    return build_model(vocab, cfg.dims, cfg.seed, vpt_enabled=cfg.vpt_enabled)


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.paths.manifest or "data/manifest.jsonl"
    gallery, table = _build_gallery(cfg)
    manifest, tensors = generate_dataset(cfg.data, gallery, table, cfg.seed, cfg.dims)
    report = validate_manifest(manifest)
    Path(manifest_path).parent.mkdir(parents=True, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        write_manifest(manifest, fh)
    write_blob_file(_tensor_sidecar(manifest_path), tensors)
    print(f"wrote {manifest_path} ({len(manifest.images)} images, "
          f"{len(manifest.captions)} captions, {len(manifest.gallery_names)} identities)")
    if report:
        print(f"validation: {len(report)} violation(s)")
        for v in report:
            print(f"  {v}")
        return EXIT_DATA
    print("validation: clean")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.paths.manifest
    if not manifest_path:
        raise ConfigError("train needs --manifest (or paths.manifest in the config)")
    bundle = _load_dataset(manifest_path)
    gallery, table = _build_gallery(cfg)
    if bundle.manifest.gallery_names != gallery.names():
        raise DataError("manifest gallery names do not match the configured gallery")
    model = _rebuild_model(cfg, bundle)
    chash = config_hash(cfg)

    phase = args.phase
    out_dir = Path(args.out_dir or cfg.paths.checkpoint_dir or f"runs/{phase}")
    out_dir.mkdir(parents=True, exist_ok=True)

    if phase == PHASE_IDCLIP:
        backbone_path = args.backbone or cfg.paths.backbone_checkpoint
        if not backbone_path:
            raise DataError("idclip phase requires a backbone checkpoint "
                            "(--backbone or paths.backbone_checkpoint)")
        arrays, _, _ = load_checkpoint_file(backbone_path)
        restore_model(model, arrays)
        train_cfg = dataclasses.replace(cfg.idclip, phase=PHASE_IDCLIP)
        runner = run_phase
    else:
        train_cfg = dataclasses.replace(cfg.pretrain, phase=PHASE_BACKBONE)
        runner = pretrain_backbone

    t0 = time.perf_counter()
    result = runner(bundle, train_cfg, model, gallery, table, chash)
    wall = time.perf_counter() - t0

    log_entries = []
    for stat, ckpt in zip(result.stats, result.checkpoints):
        path = out_dir / f"epoch_{stat.epoch:03d}.ckpt"
        path.write_bytes(ckpt)
        log_entries.append({
            "epoch": stat.epoch,
            "mean_loss": stat.mean_loss,
            "n_batches": stat.n_batches,
            "val_rsum": stat.val_rsum,
        })
        print(f"epoch {stat.epoch:3d}  loss {stat.mean_loss:.4f}  "
              f"val_rsum {stat.val_rsum:.2f}  wall {wall:.1f}s")
    best = out_dir / "best.ckpt"
    best.write_bytes(result.checkpoints[result.best_epoch - 1])
    log = {
        "phase": phase,
        "config_hash": chash,
        "best_epoch": result.best_epoch,
        "epochs": log_entries,
    }
    (out_dir / "train_log.json").write_text(
        json.dumps(log, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"best epoch {result.best_epoch} -> {best}  (total wall {wall:.1f}s)")
    return EXIT_OK


def _report_csv_row(report) -> str:
    cells = [report.task, report.strategy, report.template_policy]
    cells += [f"{report.recall[k]:.2f}" for k in K_VALUES]
    cells.append(f"{report.rsum:.2f}")
    return ",".join(cells)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.paths.manifest
    if not manifest_path:
        raise ConfigError("eval needs --manifest (or paths.manifest in the config)")
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    bundle = _load_dataset(manifest_path)
    gallery, _ = _build_gallery(cfg)
    model = _rebuild_model(cfg, bundle)
    arrays, _, _ = load_checkpoint_file(args.checkpoint)
    restore_model(model, arrays)
    chash = config_hash(cfg)

    tasks = [args.task] if args.task else list(cfg.eval.tasks)
    strategies = [args.strategy] if args.strategy else list(cfg.eval.strategies)
    policies = [args.template_policy] if args.template_policy else list(cfg.eval.template_policies)
    split = args.split or cfg.eval.split
    out_dir = Path(args.out_dir or cfg.paths.reports_dir or "reports")
    out_dir.mkdir(parents=True, exist_ok=True)

    threads = eval_threads()
    embeddings = embed_split_images(model, bundle, split, threads)
    if args.save_embeddings:
        ids, embs = embeddings
        write_blob_file(args.save_embeddings,
                        {f"embedding/{i:06d}": embs[row] for row, i in enumerate(ids)})

    reports = []
    for task in tasks:
        for strategy in strategies:
            if task == "context":
                for policy in policies:
                    reports.append(evaluate_entity_in_context(
                        model, bundle, gallery, split, ExpansionStrategy(strategy), policy,
                        cfg.seed, chash, image_embeddings=embeddings, threads=threads,
                    ))
            else:
                reports.append(evaluate_entity_only(
                    model, bundle, gallery, split, ExpansionStrategy(strategy),
                    cfg.eval.entity_prompts, cfg.seed, chash,
                    image_embeddings=embeddings, threads=threads,
                ))

    csv_lines = ["task,strategy,template_policy,r1,r5,r10,r50,rsum"]
    for report in reports:
        name = f"report_{report.task}_{report.strategy}_{report.template_policy}.json"
        (out_dir / name).write_text(
            json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        csv_lines.append(_report_csv_row(report))
        print(f"{report.task:18s} {report.strategy:10s} {report.template_policy:18s} "
              f"rsum {report.rsum:7.2f}  -> {name}")
    (out_dir / "summary.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _load_config(args)
    manifest_path = args.manifest or cfg.paths.manifest
    if not manifest_path:
        raise ConfigError("search needs --manifest (or paths.manifest in the config)")
    if not args.checkpoint:
        raise ConfigError("search needs --checkpoint")
    strategy = ExpansionStrategy(args.strategy)
    if ENTITY_MARKER not in args.query and strategy is not ExpansionStrategy.NAME_ONLY:
        raise UsageError(
            f"query text must contain {ENTITY_MARKER} unless --strategy name is used"
        )
    bundle = _load_dataset(manifest_path)
    gallery, _ = _build_gallery(cfg)
    model = _rebuild_model(cfg, bundle)
    arrays, _, _ = load_checkpoint_file(args.checkpoint)
    restore_model(model, arrays)

    if ENTITY_MARKER in args.query:
        slots = expand_entity(AnonymizedCaption(args.query), strategy, args.name or "")
    else:
        slots = tokenize_words(args.query)
    face = lookup_face(args.name, gallery) if strategy.needs_face() else None
    query_emb = compose_slots(
        slots, face, model.projector, model.text, model.vocab, model.dims
    ).data

    split = args.split or cfg.eval.split
    ids, embs = embed_split_images(model, bundle, split, eval_threads())
    ranked = top_k_images(query_emb, embs, ids, args.k)
    names = bundle.manifest.gallery_names
    print(f"top {len(ranked.image_ids)} of {len(ids)} images in split {split!r}:")
    for rank, (image_id, sim) in enumerate(zip(ranked.image_ids, ranked.similarities), 1):
        rec = bundle.images_by_id[image_id]
        print(f"{rank:3d}. image {image_id:5d}  context {rec.context_id:3d}  "
              f"identity {names[rec.identity_id]}  sim {sim:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idclip",
        description="identity-aware cross-modal retrieval at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--manifest", help="dataset manifest path (sidecar: <path>.tensors)")

    p_gen = sub.add_parser("gen", help="generate the synthetic dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train one phase")
    common(p_train)
    p_train.add_argument("--phase", choices=[PHASE_BACKBONE, PHASE_IDCLIP],
                         default=PHASE_IDCLIP)
    p_train.add_argument("--backbone", help="backbone checkpoint (idclip phase)")
    p_train.add_argument("--out-dir", help="checkpoint output directory")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="emit metric reports")
    common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--task", choices=["context", "entity"])
    p_eval.add_argument("--strategy", choices=STRATEGY_CHOICES)
    p_eval.add_argument("--template-policy", choices=["t1", "all"])
    p_eval.add_argument("--split")
    p_eval.add_argument("--out-dir")
    p_eval.add_argument("--save-embeddings", help="write image embeddings blob here")
    p_eval.set_defaults(func=cmd_eval)

    p_search = sub.add_parser("search", help="rank images for one query")
    common(p_search)
    p_search.add_argument("--checkpoint")
    p_search.add_argument("--query", required=True, help=f"caption with {ENTITY_MARKER}")
    p_search.add_argument("--name", default="", help="person name for the gallery lookup")
    p_search.add_argument("--strategy", choices=STRATEGY_CHOICES, default="tok")
    p_search.add_argument("--k", type=int, default=10)
    p_search.add_argument("--split")
    p_search.set_defaults(func=cmd_search)

    p_cfg = sub.add_parser("init-config", help="write the default run config")
    p_cfg.add_argument("--out", default="config.json")
    p_cfg.add_argument("--seed", type=int, default=0)
    p_cfg.set_defaults(func=cmd_init_config)
    return parser


def cmd_init_config(args) -> int:
    save_run_config(args.out, default_run_config(seed=args.seed))
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConstraintError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (DataError, FormatError, GalleryMissError, SequenceTooLongError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
