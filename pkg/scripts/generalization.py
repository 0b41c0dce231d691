"""Train on 2,000 synthetic QA pairs and test on 500 from unseen charts.

Prints per-category accuracy on the held-out split and writes the report
files. With --eval-every the test split is also scored during training
(only for inspection; the scores never feed back into training).

    python3 scripts/generalization.py --out runs/generalization
"""

import argparse
import dataclasses
import json
from pathlib import Path

from crct.evaluate import write_report
from crct.experiment import GENERALIZATION, evaluate_trainer, keep_latest_checkpoint, make_split
from crct.train import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/generalization")
    ap.add_argument("--epochs", type=int, default=GENERALIZATION.epochs)
    ap.add_argument("--lr", type=float, default=GENERALIZATION.lr)
    ap.add_argument("--negatives", type=int, default=GENERALIZATION.negatives)
    ap.add_argument("--d-model", type=int, default=GENERALIZATION.d_model)
    ap.add_argument("--eval-every", type=int, default=0, help="also score the test split every N epochs")
    args = ap.parse_args()

    p = dataclasses.replace(GENERALIZATION, epochs=args.epochs, lr=args.lr, d_model=args.d_model,
                            negatives=args.negatives)
    split = make_split(p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"train {len(split.train.items)} QA / {len(split.train.specs)} charts, "
          f"test {len(split.test.items)} QA / {len(split.test.specs)} charts, vocab {len(split.vocab)}", flush=True)

    trainer = Trainer(split.train.specs, split.train.items, split.vocab, p.train_cfg(), p.model_cfg(len(split.vocab)),
                      out / "run")

    prune = keep_latest_checkpoint(out / "run")

    def on_epoch(s):
        prune(s)
        print(f"epoch {s.epoch}: loss {s.mean_loss:.4f} acc {s.align_acc:.3f} ({s.seconds:.0f}s)", flush=True)
        if args.eval_every and s.epoch % args.eval_every == 0 and s.epoch < p.epochs:
            r = evaluate_trainer(trainer, split.test)
            print("  test", json.dumps({k: round(v, 3) for k, v in r.accuracy.items()}),
                  f"overall {r.overall:.3f}", flush=True)

    trainer.fit(on_epoch=on_epoch)
    report = evaluate_trainer(trainer, split.test)
    write_report(report, out / "report")
    print(json.dumps(report.summary(), indent=1))


if __name__ == "__main__":
    main()
