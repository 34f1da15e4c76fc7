"""Command-line entry points for the cross-domain few-shot segmentation runs."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import episodes, harness
from .encoder import load_checkpoint
from .episodes import SyntheticDomainSpec, generate_synthetic, load_directory, save_dataset
from .harness import load_config, parse_kv_file


def parse_synth_spec(path) -> SyntheticDomainSpec:
    """Build a synthetic-domain spec from a flat key = value file.

    ``palette`` is semicolon-separated RGB triples, e.g.
    ``palette = 0.9 0.2 0.5; 0.2 0.9 0.5``; ``background`` and
    ``scale_range`` are space/comma separated numbers.
    """
    raw = parse_kv_file(path)
    kwargs = {}
    for key, value in raw.items():
        if key == "palette":
            kwargs["palette"] = tuple(
                tuple(float(x) for x in triple.replace(",", " ").split())
                for triple in value.split(";") if triple.strip()
            )
        elif key in ("background", "scale_range"):
            kwargs[key] = tuple(float(x) for x in value.replace(",", " ").split())
        elif key in ("categories", "images_per_category", "image_size",
                     "category_id_start", "seed"):
            kwargs[key] = int(value)
        elif key == "noise_sigma":
            kwargs[key] = float(value)
        elif key in ("shape_family", "domain_id"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown synthetic spec key: {key}")
    return SyntheticDomainSpec(**kwargs)


def _cmd_gen_synth(args) -> int:
    spec = parse_synth_spec(args.spec)
    dataset = generate_synthetic(spec)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} image/mask pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg.out_dir)
    harness.train_source(cfg, out_dir=out)
    print(f"checkpoint: {out / 'source.ckpt'}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    params, enc_cfg, _ = load_checkpoint(args.checkpoint)
    out = Path(cfg.out_dir)
    harness.finetune_target(cfg, params, enc_cfg, out_dir=out)
    print(f"checkpoint: {out / 'target.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    params, enc_cfg, meta = load_checkpoint(args.checkpoint)
    report = harness.evaluate(cfg, params, enc_cfg,
                              stage=meta.get("stage", "eval"), out_dir=Path(cfg.out_dir))
    print(report.to_text())
    return 0


def _cmd_analyze_gestalt(args) -> int:
    dataset = load_directory(args.data)
    params = enc_cfg = None
    if args.feature_space:
        if not args.checkpoint:
            raise SystemExit("--feature-space requires --checkpoint")
        params, enc_cfg, _ = load_checkpoint(args.checkpoint)
    stats = harness.analyze_gestalt(dataset, params=params, enc_cfg=enc_cfg)
    print(json.dumps(stats, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewseg",
        description="Episodic few-shot segmentation: source training, "
                    "iterative target fine-tuning, and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset directory")
    p.add_argument("--spec", required=True, help="flat key = value spec file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="train on the source domain")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on the target supports")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on target episodes")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze-gestalt",
                       help="intra vs cross object pixel similarity statistics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--feature-space", action="store_true",
                   help="use encoder features instead of raw pixels")
    p.add_argument("--checkpoint", help="checkpoint for --feature-space")
    p.set_defaults(func=_cmd_analyze_gestalt)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, episodes.DatasetLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
