#!/usr/bin/env python3
"""
GEM Glass Segmentation
Command-line entry point: train, eval, predict, generate-data, build-manifest, compare-distributions, benchmark
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch

from api_client import EmbeddingServiceClient
from api_models import DatasetPooling, EncoderConfig, Provenance, ScaleTag, Stage, TrainConfig
from config import config_hash, load_config, load_datagen_config
from datagen import (
    DatasetManifest, EncoderEmbedder, PromptBank, build_jobs, compare_distributions, load_image, load_mask_set,
    make_backend, manifest_from_directories, run_generation, save_mask,
)
from errors import (
    BackendError, ConfigError, DataError, GEMError, NumericError, ParameterError, WeightLoadError,
)
from harness import (
    benchmark_fps, evaluate, load_checkpoint, model_from_checkpoint, train, zero_shot_eval,
)
from model import MODEL_PRESETS, build_model, preset_config
from report_generator import GEMReportGenerator, metrics_row, save_csv_report, save_json_report
from visualizer import GEMVisualizer

logger = logging.getLogger("gem")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def train_config_from_args(args) -> TrainConfig:
    base = {"model": preset_config(args.preset)} if getattr(args, "preset", None) else None
    return load_config(args.config or [], args.set or [], base=base)


def add_config_arguments(parser: argparse.ArgumentParser, presets: bool = True) -> None:
    parser.add_argument("--config", action="append", help="JSON config layer (repeatable, merged left to right)")
    parser.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="Override one config value, e.g. model.decoder.num_layers=2")
    if presets:
        parser.add_argument("--preset", choices=sorted(MODEL_PRESETS), help="Model shape preset")


def cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    manifest = DatasetManifest.read(args.manifest)
    output_dir = Path(args.output_dir)

    print("\n" + "=" * 60)
    print(f"GEM TRAINING ({args.stage})")
    print("=" * 60)
    print(f"Manifest: {args.manifest} ({manifest.count} pairs)")
    print(f"Config: {config_hash(cfg)[:12]}")

    result = train(cfg, manifest, Stage(args.stage), output_dir, init_checkpoint=args.init_checkpoint)
    print(f"✓ {result.steps} steps, final loss {result.loss_log[-1]['loss']:.4f}" if result.loss_log
          else "✓ No steps run")
    print(f"✓ Checkpoint: {result.checkpoint_path}")
    if result.loss_log:
        GEMVisualizer().plot_loss_curve(result.loss_log, output_dir / "loss_curve.png")

    if args.eval_manifest:
        report = evaluate(result.model, DatasetManifest.read(args.eval_manifest), cfg)
        print(metrics_row(args.name, report))
        save_json_report(args.name, report, output_dir / "metrics.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = DatasetManifest.read(args.manifest)
    checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.train_config()
    if args.pooling:
        cfg = cfg.copy(update={"pooling": DatasetPooling(args.pooling)})

    if args.zero_shot:
        report = zero_shot_eval(checkpoint, manifest, cfg)
    else:
        model, cfg = model_from_checkpoint(checkpoint, cfg)
        report = evaluate(model, manifest, cfg)

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    text = GEMReportGenerator().generate_report(args.name, report, config_hash=checkpoint.config_hash,
                                                output_file=str(output_dir / "report.txt"))
    print(text)
    save_json_report(args.name, report, output_dir / "metrics.json",
                     extra={"stage": checkpoint.stage.value, "config_hash": checkpoint.config_hash})
    save_csv_report(report, output_dir / "per_image.csv", [e.image_path for e in manifest.entries])
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = model_from_checkpoint(args.checkpoint)
    image = load_image(args.image)
    height, width = image.shape[:2]
    param = next(model.parameters())
    tensor = torch.from_numpy(image.copy()).permute(2, 0, 1).unsqueeze(0).to(dtype=param.dtype) / 255.0
    tensor = torch.nn.functional.interpolate(tensor, size=(cfg.image_size, cfg.image_size), mode="bilinear",
                                             align_corners=False)
    prob = model.predict_probability(tensor.to(param.device))
    prob = torch.nn.functional.interpolate(prob.unsqueeze(1), size=(height, width), mode="bilinear",
                                           align_corners=False)[0, 0]
    mask = (prob >= cfg.threshold).cpu().numpy()

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    save_mask(mask, output_dir / f"{stem}_mask.png")
    GEMVisualizer().save_overlay(image, mask, output_dir / f"{stem}_overlay.png")
    print(f"✓ Glass covers {mask.mean() * 100:.1f}% of {args.image}")
    print(f"✓ Mask saved to: {output_dir / f'{stem}_mask.png'}")
    return EXIT_OK


def read_validation_ids(args) -> List[str]:
    ids: List[str] = []
    if args.validation_masks:
        ids.extend(m.mask_id for m in load_mask_set(args.validation_masks, split="val"))
    if args.validation_ids:
        path = Path(args.validation_ids)
        if not path.exists():
            raise DataError(f"Validation id list not found: {path}")
        ids.extend(line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
    return ids


def cmd_generate_data(args) -> int:
    overrides = list(args.set or [])
    if args.scale:
        overrides.append(f"scale_tag={args.scale}")
    if args.count:
        overrides.append(f"count={args.count}")
    if args.backend_url:
        overrides.extend(["backend=remote", f"backend_url={args.backend_url}"])
    cfg = load_datagen_config(args.config or [], overrides)
    if cfg.backend == "remote" and not cfg.backend_url:
        cfg = cfg.copy(update={"backend_url": os.environ.get("GEM_BACKEND_URL")})

    bank = PromptBank.from_file(cfg.prompts_path, cfg.object_string)
    masks = load_mask_set(args.masks)
    jobs = build_jobs(masks, bank, cfg.scale_tag, count=cfg.count, target_size=cfg.target_size,
                      single_prompt=cfg.single_prompt, validation_ids=read_validation_ids(args))

    print("\n" + "=" * 60)
    print(f"SYNTHETIC GLASS DATA ({ScaleTag(cfg.scale_tag).value}, {len(jobs)} jobs)")
    print("=" * 60)
    backend = make_backend(cfg)
    result = run_generation(jobs, backend, args.output_dir, scale_tag=cfg.scale_tag,
                            parallelism=cfg.parallelism, retries=cfg.retries, backoff=cfg.backoff)
    print(f"✓ {len(result.entries)} pairs written, {len(result.failures)} failed")
    print(f"✓ Manifest: {result.manifest_path}")
    return EXIT_OK if not result.failures else EXIT_DATA


def cmd_build_manifest(args) -> int:
    out = Path(args.out)
    manifest = manifest_from_directories(args.images, args.masks, provenance=Provenance(args.provenance),
                                         root=out.parent)
    problems = manifest.validate_files()
    for entry, violations in problems:
        print(f"  ✗ {entry.image_path}: {'; '.join(violations)}")
    if problems:
        print(f"{len(problems)} of {manifest.count} pairs are invalid; no manifest written")
        return EXIT_DATA
    manifest.write(out)
    print(f"✓ {manifest.count} pairs ({args.provenance}) -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.manifest) < 2:
        raise ParameterError("compare-distributions needs at least two --manifest arguments")
    manifests = [DatasetManifest.read(path) for path in args.manifest]
    labels = args.label or [Path(path).parent.name for path in args.manifest]

    embed_url = args.embed_url or os.environ.get("GEM_EMBED_URL")
    if embed_url:
        embedder = EmbeddingServiceClient(embed_url)
    else:
        encoder_cfg = EncoderConfig.parse_obj(preset_config(args.preset)["encoder"])
        embedder = EncoderEmbedder(encoder_cfg)
        print(f"No embedding service configured; using the {args.preset} image encoder")

    result = compare_distributions(manifests, embedder, labels=labels, perplexity=args.perplexity,
                                   seed=args.seed, output_dir=args.output_dir)
    print(f"✓ {len(result.labels)} points from {len(manifests)} datasets")
    print(f"✓ Plot: {result.plot_path}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.checkpoint:
        model, cfg = model_from_checkpoint(args.checkpoint)
    else:
        cfg = train_config_from_args(args)
        model = build_model(cfg.model, seed=cfg.seed)
    device = torch.device(args.device)
    model = model.to(device)
    image_size = args.image_size or cfg.image_size
    report = benchmark_fps(model, image_size, trials=args.trials, warmup=args.warmup)
    print(f"{args.name} | {report.fps_mean:.2f}")
    print(f"  ± {report.fps_std:.2f} FPS over {report.trials} trials on {report.hardware}")
    if args.output:
        Path(args.output).write_text(json.dumps(report.dict(), indent=2), encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="GEM glass surface segmentation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Manifest for a real split (images and same-named masks)
  python main.py build-manifest --images data/train/images --masks data/train/masks \\
      --out data/train/manifest.jsonl

  # Generate a 1x synthetic set from training masks with the procedural backend
  python main.py generate-data --masks data/train/masks --output-dir data/sgsd_1x

  # Pretrain on synthetic data, then finetune on real data
  python main.py train --preset tiny --config configs/base.json --manifest data/sgsd_1x/manifest.jsonl \\
      --stage pretrain --output-dir runs/pretrain
  python main.py train --preset tiny --config configs/base.json --manifest data/train/manifest.jsonl \\
      --stage finetune --init-checkpoint runs/pretrain/last.pt --output-dir runs/finetune

  # Zero-shot evaluation of the pretrain checkpoint
  python main.py eval --checkpoint runs/pretrain/last.pt --manifest data/val/manifest.jsonl --zero-shot
        """
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train one stage")
    add_config_arguments(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=[s.value for s in Stage], default=Stage.FINETUNE.value)
    p.add_argument("--init-checkpoint", help="Warm start (e.g. a pretrain checkpoint for finetuning)")
    p.add_argument("--output-dir", default="runs/latest")
    p.add_argument("--eval-manifest", help="Evaluate the final model on this manifest")
    p.add_argument("--name", default="GEM")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--zero-shot", action="store_true", help="Require a pretrain-stage checkpoint")
    p.add_argument("--pooling", choices=[m.value for m in DatasetPooling])
    p.add_argument("--name", default="GEM")
    p.add_argument("--output-dir", default="eval_output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="Predict the glass mask of one image")
    p.add_argument("--checkpoint", default=os.environ.get("GEM_CHECKPOINT"))
    p.add_argument("--image", required=True)
    p.add_argument("--output-dir", default="predictions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("generate-data", help="Build a synthetic dataset from training masks")
    add_config_arguments(p, presets=False)
    p.add_argument("--masks", required=True, help="Directory of training-split masks")
    p.add_argument("--validation-masks", help="Validation mask directory (leakage guard)")
    p.add_argument("--validation-ids", help="File with one validation mask id per line")
    p.add_argument("--scale", choices=[s.value for s in ScaleTag])
    p.add_argument("--count", type=int, help="Override the scale's job count")
    p.add_argument("--backend-url", help="Remote generation service (else GEM_BACKEND_URL / stub)")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("build-manifest", help="Pair an image folder with a mask folder into a manifest")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True, help="Masks named like their images")
    p.add_argument("--out", required=True, help="Manifest path, e.g. data/train/manifest.jsonl")
    p.add_argument("--provenance", choices=[v.value for v in Provenance], default=Provenance.REAL.value)
    p.set_defaults(func=cmd_build_manifest)

    p = sub.add_parser("compare-distributions", help="t-SNE of image features across datasets")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--label", action="append")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embed-url", help="Remote embedding service (else GEM_EMBED_URL / own encoder)")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="desk")
    p.add_argument("--output-dir", default="tsne_output")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("benchmark", help="Measure batch-1 inference FPS")
    add_config_arguments(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image-size", type=int)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--device", default="cpu")
    p.add_argument("--name", default="GEM")
    p.add_argument("--output", help="Write the FPS report as JSON")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "predict" and not args.checkpoint:
        print("Error: --checkpoint (or GEM_CHECKPOINT) is required")
        return EXIT_CONFIG

    try:
        return args.func(args)
    except (ConfigError, ParameterError, WeightLoadError) as e:
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (DataError, BackendError, FileNotFoundError) as e:
        print(f"Data error: {e}")
        return EXIT_DATA
    except NumericError as e:
        print(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except GEMError as e:
        print(f"Error: {e}")
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
