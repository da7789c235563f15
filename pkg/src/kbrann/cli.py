"""``kbrann`` command line. Exit codes: 0 ok, 1 usage error, 2 runtime error."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import VARIANTS, ConfigError, PipelineConfig, load_config
from .data import SceneConfig, generate_dataset
from .evaluation import EvalConfig

log = logging.getLogger("kbrann")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kbrann", description="Small-object detector with recurrent attention and learned priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic PPM dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--blur-prob", type=float, default=0.0)
    g.add_argument("--occlusion-prob", type=float, default=0.0)

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="compute per-class AP and mAP")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--conf", type=float, default=EvalConfig.conf_thresh)
    e.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="detect objects in one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--conf", type=float, default=0.6)
    i.add_argument("--out", required=True)

    h = sub.add_parser("export-heatmaps", help="write prior and attention maps as PGM")
    h.add_argument("--model", required=True)
    h.add_argument("--image", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--maps", choices=("all", "priors", "attention"), default="all")
    return p


def _run(args) -> None:
    if args.command == "generate-data":
        cfg = SceneConfig(image_size=args.image_size, blur_prob=args.blur_prob,
                          occlusion_prob=args.occlusion_prob)
        paths = generate_dataset(args.count, args.seed, args.out, cfg)
        log.info("wrote %d scenes to %s", len(paths), args.out)
    elif args.command == "train":
        from .train import train

        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg = cfg.with_overrides(variant=args.variant, epochs=args.epochs, seed=args.seed)
        report = train(cfg, args.data, args.out)
        log.info("final loss %.4f after %d epochs (%.0f s); checkpoint %s",
                 report.epoch_losses[-1], len(report.epoch_losses), report.seconds, args.out)
    elif args.command == "eval":
        from .pipeline import evaluate

        report = evaluate(args.model, args.data, EvalConfig(iou_threshold=args.iou, conf_thresh=args.conf),
                          args.out)
        print(json.dumps({"mAP": report.mAP, "per_class_ap": report.to_dict()["per_class_ap"]}))
    elif args.command == "infer":
        from .pipeline import infer

        dets = infer(args.model, args.image, args.conf, args.out)
        log.info("%d detections written to %s", len(dets), args.out)
    elif args.command == "export-heatmaps":
        from .pipeline import export_heatmaps

        paths = export_heatmaps(args.model, args.image, args.out, args.maps)
        log.info("wrote %d heatmaps to %s", len(paths), args.out)


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as e:
        print(f"kbrann: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"kbrann: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
