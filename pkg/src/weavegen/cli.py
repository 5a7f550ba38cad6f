"""Unified command line: train, generate, engine, eval, inspect.

Config lives in one YAML file; flags override file values. Every run writes a
reproducibility header (config hash, seed, git revision, argv) into its
output directory. Exit codes: 0 ok, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import yaml

from . import evalsuite, trainer
from .bundle import build_bundle, load_checkpoint
from .core import (
    ImageStore,
    InputError,
    ParseError,
    RunConfig,
    config_from_dict,
    config_hash,
    read_shard,
    write_shard,
)
from .dataengine import (
    EngineConfig,
    LlmClientSpec,
    RecordStore,
    PromptTaxonomy,
    assemble_video_pairs,
    expand_prompts,
    export_conversations,
    load_corpus,
    load_manifest,
    make_client,
    run_engine,
)
from .pipeline import GenerationBudget, generate_interleaved


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        obj = yaml.safe_load(f) or {}
    return config_from_dict(obj)


def _git_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def write_run_header(out_dir: Path, cfg: RunConfig, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "git_revision": _git_revision(),
        "argv": argv,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "run_header.json", "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1)


def _parse_named(pairs: list[str], what: str) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise InputError(f"{what} must look like name=value, got {pair!r}")
        name, value = pair.split("=", 1)
        out[name] = value
    return out


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace, argv: list[str]) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    write_run_header(out_dir, cfg, argv)
    datasets = {
        name: trainer.load_training_samples(path)
        for name, path in _parse_named(args.data, "--data").items()
    }
    mix = {name: float(w) for name, w in _parse_named(args.mix or [], "--mix").items()}
    if args.stage == 1:
        bundle = build_bundle(cfg) if args.ckpt is None else load_checkpoint(args.ckpt)[0]
        result = trainer.run_stage1(
            bundle, trainer.stage1_plan(mix), datasets,
            steps=args.steps, lr=args.lr, out_dir=out_dir,
        )
    else:
        if args.ckpt is None:
            raise InputError("--stage 2 requires --ckpt pointing at the stage-1 checkpoint")
        bundle, _ = load_checkpoint(args.ckpt)
        result = trainer.run_stage2(
            bundle, trainer.stage2_plan(mix), datasets,
            steps=args.steps, lr=args.lr, batch_size=args.batch_size, out_dir=out_dir,
        )
    first = result.losses[0] if result.losses else float("nan")
    last = result.losses[-1] if result.losses else float("nan")
    print(f"stage {args.stage}: {len(result.losses)} steps, loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace, argv: list[str]) -> int:
    bundle, _ = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    write_run_header(out_dir, bundle.config, argv)
    try:
        h, w = (int(v) for v in args.image_size.lower().split("x"))
    except ValueError:
        raise InputError(f"--image-size must look like 32x32, got {args.image_size!r}")
    budget = GenerationBudget(
        max_text_tokens=args.max_text_tokens,
        max_images=args.max_images,
        image_shape=(h, w),
        cfg_scale=args.cfg_scale if args.cfg_scale is not None else bundle.config.cfg_scale,
        steps=args.steps if args.steps is not None else bundle.config.sampler_steps,
        seed=args.seed,
    )
    prompt_path = Path(args.prompt)
    records = read_shard(prompt_path)
    in_store = ImageStore(prompt_path.parent)
    out_store = ImageStore(out_dir)
    outputs = []
    for rec in records:
        images = {ref: in_store.get(ref) for ref in rec.sequence.image_refs()}
        result = generate_interleaved(bundle, rec.sequence, images, budget, temperature=args.temperature)
        for ref, px in result.images.items():
            out_store.put(px)
        outputs.append(
            type(rec)(sequence=result.sequence, meta={"truncated": result.truncated, **result.stats})
        )
        print(f"{rec.sequence.id}: +{result.stats['images_generated']} images, "
              f"{result.stats['text_tokens']} text tokens, truncated={result.truncated}")
    write_shard(out_dir / "generated.jsonl", outputs)
    print(f"wrote {out_dir / 'generated.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# engine


def cmd_engine_run(args: argparse.Namespace, argv: list[str]) -> int:
    store_dir = args.store
    if store_dir is None:
        if args.corpus is None:
            raise InputError("provide --store, or --corpus so a store can sit next to it")
        store_dir = str(Path(args.corpus).with_name(Path(args.corpus).name + "_store"))
    store = RecordStore(store_dir)
    write_run_header(Path(store_dir), RunConfig(), argv)
    if args.corpus:
        added = load_corpus(store, args.corpus)
        print(f"imported {added} new pages")
    client = make_client(LlmClientSpec(endpoint=args.endpoint))
    cfg = EngineConfig(min_image_side=args.min_image_side, max_aspect_ratio=args.max_aspect_ratio)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    stats = run_engine(store, client, stages, cfg, max_workers=args.workers, retry_failed=args.retry_failed)
    print(f"processed {stats.processed} records; done per stage: {stats.stage_done}; "
          f"failed per stage: {stats.stage_failed}; skipped (already settled): {stats.stages_skipped}")
    if args.out:
        records = export_conversations(store)
        write_shard(args.out, records)
        print(f"exported {len(records)} conversations to {args.out}")
    return 0


def cmd_engine_expand(args: argparse.Namespace, argv: list[str]) -> int:
    taxonomy = PromptTaxonomy.from_file(args.taxonomy)
    client = make_client(LlmClientSpec(endpoint=args.endpoint))
    pool = expand_prompts(
        taxonomy, client, args.count, holdout=args.holdout, seed=args.seed
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for split, prompts in (("train", pool.train), ("holdout", pool.holdout)):
            for p in prompts:
                f.write(json.dumps({
                    "prompt": p.text, "base_category": p.base_category,
                    "subcategory": p.subcategory, "split": split,
                }) + "\n")
    print(f"expanded to {len(pool.train)} train + {len(pool.holdout)} holdout prompts "
          f"({pool.duplicates_dropped} duplicates dropped, {pool.under_generated} short of target)")
    return 0


def cmd_engine_video(args: argparse.Namespace, argv: list[str]) -> int:
    rows = load_manifest(args.manifest)
    out = Path(args.out)
    store = ImageStore(out.parent)
    client = make_client(LlmClientSpec(endpoint=args.endpoint))
    result = assemble_video_pairs(rows, client, store)
    write_shard(out, result.records)
    print(f"wrote {len(result.records)} alignment records to {out} ({result.skipped} rows skipped)")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args: argparse.Namespace, argv: list[str]) -> int:
    bundle, _ = load_checkpoint(args.model_ckpt)
    out_dir = Path(args.out)
    write_run_header(out_dir, bundle.config, argv)
    prompts = evalsuite.load_benchmark(args.benchmark, args.benchmarks_dir)
    rubric = evalsuite.Rubric.from_file(args.rubric) if args.rubric else evalsuite.default_rubric()
    try:
        h, w = (int(v) for v in args.image_size.lower().split("x"))
    except ValueError:
        raise InputError(f"--image-size must look like 32x32, got {args.image_size!r}")
    budget = GenerationBudget(
        max_text_tokens=args.max_text_tokens,
        max_images=args.max_images,
        image_shape=(h, w),
        cfg_scale=bundle.config.cfg_scale,
        steps=bundle.config.sampler_steps,
        seed=args.seed,
    )
    judge = make_client(LlmClientSpec(endpoint=args.judge_endpoint))
    report = evalsuite.run_benchmark(bundle, prompts, budget, judge, rubric, out_dir=out_dir)
    print(report.table())
    return 0


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args: argparse.Namespace, argv: list[str]) -> int:
    path = Path(args.shard)
    store = ImageStore(path.parent)
    shown = 0
    for rec in read_shard(path):
        if args.id is not None and rec.sequence.id != args.id:
            continue
        shown += 1
        print(f"== {rec.sequence.id}")
        if rec.meta:
            print(f"   meta: {json.dumps(rec.meta, sort_keys=True)}")
        for i, c in enumerate(rec.sequence.chunks):
            if c.kind == "text":
                print(f"   [{i}] {c.role:<9} text : {c.text}")
            else:
                print(f"   [{i}] {c.role:<9} image: {store.path_for(c.image_ref)}")
    if args.id is not None and shown == 0:
        raise InputError(f"no record with id {args.id!r} in {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weavegen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--data", action="append", default=[], required=True, metavar="NAME=SHARD")
    p.add_argument("--mix", action="append", default=[], metavar="NAME=WEIGHT")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None, help="checkpoint to continue from (required for stage 2)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="interleaved generation from a prompt shard")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True, help="shard of prompt records (images beside it)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-text-tokens", type=int, default=256)
    p.add_argument("--max-images", type=int, default=4)
    p.add_argument("--image-size", default="32x32")
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("engine", help="data-engine pipelines")
    esub = p.add_subparsers(dest="engine_command", required=True)

    e = esub.add_parser("run", help="webpage corpus -> conversations")
    e.add_argument("--corpus", default=None, help="directory of page JSON files to import")
    e.add_argument("--store", default=None, help="record store directory (default: <corpus>_store)")
    e.add_argument("--endpoint", required=True, help='chat endpoint URL or "mock:"')
    e.add_argument("--stages", default="filter,rewrite,caption,dedup,dialogize")
    e.add_argument("--out", default=None, help="shard path for dialogized conversations")
    e.add_argument("--workers", type=int, default=4)
    e.add_argument("--retry-failed", action="store_true")
    e.add_argument("--min-image-side", type=int, default=32)
    e.add_argument("--max-aspect-ratio", type=float, default=4.0)
    e.set_defaults(func=cmd_engine_run)

    e = esub.add_parser("expand", help="expand taxonomy seeds into a prompt pool")
    e.add_argument("--taxonomy", required=True)
    e.add_argument("--count", type=int, default=15270)
    e.add_argument("--holdout", type=int, default=700)
    e.add_argument("--endpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_engine_expand)

    e = esub.add_parser("video-pairs", help="frame-pair manifest -> alignment shard")
    e.add_argument("--manifest", required=True)
    e.add_argument("--endpoint", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_engine_video)

    p = sub.add_parser("eval", help="judge-based benchmark run")
    p.add_argument("--benchmark", required=True)
    p.add_argument("--benchmarks-dir", required=True)
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--judge-endpoint", required=True)
    p.add_argument("--rubric", default=None, help="rubric JSON (default: built-in 1-5 rubric)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-text-tokens", type=int, default=256)
    p.add_argument("--max-images", type=int, default=2)
    p.add_argument("--image-size", default="32x32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="render shard records as transcripts")
    p.add_argument("shard")
    p.add_argument("--id", default=None)
    p.set_defaults(func=cmd_inspect)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, argv)
    except (InputError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
