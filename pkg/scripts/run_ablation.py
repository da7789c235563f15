"""Train every detector variant over several seeds and tabulate eval mAP.

    python scripts/run_ablation.py --out runs/ablation --seeds 0 1 2
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from kbrann.config import VARIANTS, PipelineConfig
from kbrann.data import generate_dataset, load_dataset
from kbrann.model import build_detector
from kbrann.pipeline import evaluate_model
from kbrann.train import train_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    ap.add_argument("--epochs", type=int, default=PipelineConfig.epochs)
    ap.add_argument("--train-count", type=int, default=200)
    ap.add_argument("--eval-count", type=int, default=50)
    args = ap.parse_args()

    data = args.out / "data"
    if not (data / "train").exists():
        generate_dataset(args.train_count, 1000, data / "train")
        generate_dataset(args.eval_count, 2000, data / "eval")
    train_set, eval_set = load_dataset(data / "train"), load_dataset(data / "eval")

    rows = []
    for variant in args.variants:
        for seed in args.seeds:
            cfg = PipelineConfig(variant=variant, seed=seed, epochs=args.epochs)
            t0 = time.perf_counter()
            model = build_detector(cfg)
            report = train_model(model, train_set, cfg)
            result = evaluate_model(model, eval_set)
            model.save(args.out / f"{variant}-seed{seed}.kbrn")
            rows.append({"variant": variant, "seed": seed, "mAP": result.mAP,
                         "per_class_ap": result.per_class_ap, "final_loss": report.epoch_losses[-1],
                         "seconds": time.perf_counter() - t0})
            print(f"{variant:8s} seed {seed}  mAP {result.mAP:.3f}  {rows[-1]['seconds']:.0f}s", flush=True)

    print("\nvariant   mean mAP   std")
    for variant in args.variants:
        scores = [r["mAP"] for r in rows if r["variant"] == variant]
        print(f"{variant:8s}  {np.mean(scores):.3f}     {np.std(scores):.3f}")
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
