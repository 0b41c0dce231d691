"""Overfit 32 charts / 256 QA pairs and check the trained model three ways.

1. accuracy on its own training set (answer selection, ratio rule, tick curve)
2. accuracy on the questions about multi-series charts (the ablation comparison set)
3. integrated-gradients attribution on 50 argmax/argmin questions: is the most
   salient data element the one carrying the extremum?

    python3 scripts/overfit.py --out runs/overfit
    python3 scripts/overfit.py --out runs/overfit_nolegend --drop-legend-marker
    python3 scripts/overfit.py --out runs/overfit --reuse     # skip training
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

from crct.evaluate import write_report
from crct.experiment import (
    OVERFIT,
    attribution_hits,
    detected,
    evaluate_trainer,
    extremum_cases,
    keep_latest_checkpoint,
    make_split,
    multi_series_items,
)
from crct.featurize import AblationFlags
from crct.train import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=OVERFIT.epochs)
    ap.add_argument("--drop-legend-marker", action="store_true")
    ap.add_argument("--reuse", action="store_true", help="load the run's latest checkpoint instead of training")
    ap.add_argument("--cases", type=int, default=50, help="argmax/argmin questions for the attribution check")
    ap.add_argument("--case-seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=16, help="integrated-gradients steps")
    args = ap.parse_args()

    p = dataclasses.replace(OVERFIT, epochs=args.epochs,
                            ablation=AblationFlags(drop_legend_marker=args.drop_legend_marker))
    split = make_split(p)
    out = Path(args.out)
    run = out / "run"
    trainer = Trainer(split.train.specs, split.train.items, split.vocab, p.train_cfg(),
                      p.model_cfg(len(split.vocab)), run)
    t0 = time.perf_counter()
    if args.reuse:
        trainer.load(run / (run / "latest").read_text().strip())
    else:
        prune = keep_latest_checkpoint(run)

        def on_epoch(s):
            prune(s)
            print(f"epoch {s.epoch}: loss {s.mean_loss:.4f} acc {s.align_acc:.3f} ({s.seconds:.0f}s)", flush=True)

        trainer.fit(on_epoch=on_epoch)
    train_seconds = time.perf_counter() - t0

    report = evaluate_trainer(trainer, split.train)
    write_report(report, out / "report")
    multi = evaluate_trainer(trainer, split.train, multi_series_items(split.train))
    summary = {
        "train_seconds": round(train_seconds, 1),
        "final_loss": trainer_loss(run),
        "overall": report.overall,
        "selection_accuracy": report.selection_accuracy,
        "tick_accuracy_half": dict(zip(report.tick_fractions, report.tick_accuracy)).get(0.5),
        "multi_series_overall": multi.overall,
        "multi_series_items": multi.n_total,
    }
    if not args.drop_legend_marker and args.cases:
        charts = detected(trainer, split.train)
        cases = extremum_cases(charts, args.cases, args.case_seed)
        hits = attribution_hits(trainer.model, split.vocab, charts, cases, m=args.steps)
        summary["attribution_hit_rate"] = sum(hits) / len(hits)
    print(json.dumps(summary, indent=1))
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


def trainer_loss(run: Path):
    lines = (run / "metrics.csv").read_text().splitlines()
    return float(lines[-1].split(",")[1]) if len(lines) > 1 else None


if __name__ == "__main__":
    main()
