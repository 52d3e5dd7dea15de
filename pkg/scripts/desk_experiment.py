"""Desk-scale training run: 150 phantoms at 64 px, 120/10/20 split, quarter-width model.

Writes weights, history and the test report to --out and prints the headline
metrics. Loss and optimizer knobs are exposed so the variants recorded in
the decision notes can be rerun, e.g.

    python scripts/desk_experiment.py --out runs/base
    python scripts/desk_experiment.py --out runs/mean_bce --bce-reduction mean --beta 1.0
"""

import argparse
import json
import time
from pathlib import Path

from cect_forge.loss import LossConfig
from cect_forge.model import save_weights
from cect_forge.phantom import PhantomConfig, generate_pair, split_dataset
from cect_forge.trainer import TrainConfig, derive_seed, evaluate, train

HEADLINE = ("nmi", "psnr_db", "dice", "dv_percent", "pearson_rho")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--count", type=int, default=150)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--beta", type=float, default=0.01)
    ap.add_argument("--lam", type=float, default=0.001)
    ap.add_argument("--bce-reduction", default="sum", choices=("sum", "mean"))
    ap.add_argument("--no-recalibrate", action="store_true", help="keep the raw batch-norm running averages")
    ap.add_argument("--noise-sigma", type=float, default=None, help="override the phantom noise level (HU)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = PhantomConfig() if args.noise_sigma is None else PhantomConfig(noise_sigma=args.noise_sigma)
    pairs = [generate_pair(pcfg, derive_seed(args.seed, "phantom", i)) for i in range(args.count)]
    split = split_dataset(args.count, args.seed)
    loss = LossConfig(alpha=args.alpha, beta=args.beta, lam=args.lam, bce_reduction=args.bce_reduction)
    cfg = TrainConfig.desk(seed=args.seed, epochs=args.epochs, learning_rate=args.lr, loss=loss,
                           recalibrate_bn=not args.no_recalibrate)

    start = time.perf_counter()
    every = max(1, args.epochs // 10)

    def progress(rec):
        if rec["epoch"] % every == 0 or rec["epoch"] == 1:
            print(f"epoch {rec['epoch']:4d}  {time.perf_counter() - start:7.1f}s  train {rec['train_loss']:.5f}  "
                  f"val {rec['val_loss']:.5f}  val dice {rec['val_dice']:.3f}", flush=True)

    params, history = train([pairs[i] for i in split["train"]], [pairs[i] for i in split["val"]], cfg,
                            on_epoch=progress)
    report, _ = evaluate(params, {str(i): [pairs[i]] for i in split["test"]})
    elapsed = time.perf_counter() - start

    save_weights(params, out / "weights.cwt")
    (out / "history.csv").write_text(history.to_csv())
    (out / "report.json").write_text(report.to_json())
    d = report.to_dict()
    summary = {k: d[k] for k in HEADLINE}
    summary["seconds"] = round(elapsed, 1)
    summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for k in HEADLINE:
        v = d[k]
        print(f"{k:12s} {v['mean']:.4f} +- {v['sd']:.4f}" if isinstance(v, dict) else f"{k:12s} {v:.4f}")
    print(f"{elapsed:.0f}s")


if __name__ == "__main__":
    main()
