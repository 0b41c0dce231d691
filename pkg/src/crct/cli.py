"""Command-line entry point: gen, train, eval, predict, attribute, plot.

Every option may also come from a JSON config file (``--config``) whose keys
are the option names with dashes replaced by underscores. Flags override the
file, the file overrides built-in defaults. ``CRCT_SEED`` supplies the seed
when neither a flag nor the file sets it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import svg
from .chartgen import ConfigError, GeneratorConfig, annotate_elements, generate_corpus, read_charts, write_charts
from .evaluate import (
    DEFAULT_FRACTIONS,
    EvalError,
    Predictor,
    attribute,
    evaluate,
    model_predict_fn,
    predict,
    top_data_element,
    write_attribution,
    write_report,
)
from .featurize import REG, AblationFlags, SequenceTooLong, Vocab, build_vocab, corpus_texts
from .model import ModelConfig, ModelConfigError
from .qagen import FIXED_VOCAB_ANSWERS, QAGenConfig, generate_questions, load_catalog, read_qa, write_qa
from .train import NumericalError, ResumeError, TrainConfig, Trainer, detect_charts, load_trained, read_metrics, resolve_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHARTS_FILE = "charts.v1.jsonl"
QA_FILE = "qa.v1.jsonl"
VOCAB_FILE = "vocab.json"
CONFIG_ECHO = "effective_config.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# option name -> (default, type, help); booleans are store_true flags
GEN_OPTS = {
    "out": (None, str, "output directory for the dataset files"),
    "charts": (100, int, "number of charts"),
    "qa_per_chart": (8, int, "questions per chart"),
    "start_id": (0, int, "chart id of the first chart (keeps splits disjoint)"),
    "seed": (0, int, "random seed"),
    "force": (False, bool, "overwrite existing files"),
}
TRAIN_OPTS = {
    "data": (None, str, "dataset directory written by 'gen'"),
    "out": (None, str, "run directory for checkpoints and logs"),
    "epochs": (20, int, "training epochs"),
    "lr": (1e-3, float, "peak learning rate"),
    "warmup_fraction": (0.1, float, "share of steps spent warming up"),
    "batch_size": (64, int, "samples per batch"),
    "negatives": (3, int, "wrong answers per question and epoch"),
    "clip_norm": (1.0, float, "global gradient-norm clip"),
    "jitter_sigma": (0.002, float, "std of the detector's box jitter"),
    "d_model": (128, int, "model width"),
    "n_blocks": (2, int, "co-attention blocks"),
    "n_heads": (4, int, "attention heads"),
    "d_ff": (0, int, "feed-forward width (0 means 4*d_model)"),
    "lambda_cls": (1.0, float, "classification loss weight"),
    "lambda_reg": (1.0, float, "regression loss weight"),
    "drop_legend_marker": (False, bool, "remove legend-marker tokens"),
    "drop_text_class_emb": (False, bool, "remove the text class embedding"),
    "drop_visual_class_emb": (False, bool, "remove the visual class embedding"),
    "bbox_only": (False, bool, "visual features are the box only"),
    "two_pipelines": (False, bool, "separate classification and regression models"),
    "seed": (0, int, "random seed"),
    "resume": (None, str, "checkpoint path, or 'latest' in the run directory"),
    "force": (False, bool, "start over in a non-empty run directory"),
}
EVAL_OPTS = {
    "run": (None, str, "run directory written by 'train'"),
    "data": (None, str, "dataset directory to evaluate on"),
    "out": (None, str, "report directory"),
    "checkpoint": ("latest", str, "checkpoint path or 'latest'"),
    "fractions": (",".join(f"{f:g}" for f in DEFAULT_FRACTIONS), str, "comma-separated sub-tick fractions"),
    "seed": (0, int, "random seed (unused by scoring, recorded for provenance)"),
}
PREDICT_OPTS = {
    "run": (None, str, "run directory written by 'train'"),
    "data": (None, str, "dataset directory holding the chart"),
    "checkpoint": ("latest", str, "checkpoint path or 'latest'"),
    "chart_id": (None, int, "chart to ask about"),
    "question": (None, str, "question text"),
    "numeric": (False, bool, "oracle route for two-pipelines runs: the answer is a number"),
    "seed": (0, int, "random seed (unused, recorded for provenance)"),
}
ATTR_OPTS = {
    "run": (None, str, "run directory written by 'train'"),
    "data": (None, str, "dataset directory holding the chart"),
    "out": (None, str, "output directory for saliency.csv and saliency.svg"),
    "checkpoint": ("latest", str, "checkpoint path or 'latest'"),
    "chart_id": (None, int, "chart of the question"),
    "qa_id": (None, int, "question to explain"),
    "steps": (16, int, "integrated-gradient steps"),
    "seed": (0, int, "random seed (unused, recorded for provenance)"),
}
PLOT_OPTS = {
    "run": (None, str, "run directory with metrics.csv"),
    "out": (None, str, "output SVG directory (default: the run directory)"),
}
COMMANDS = {
    "gen": (GEN_OPTS, "generate charts and questions", ("out",)),
    "train": (TRAIN_OPTS, "train a model", ("data", "out")),
    "eval": (EVAL_OPTS, "evaluate a checkpoint", ("run", "data", "out")),
    "predict": (PREDICT_OPTS, "answer one question", ("run", "data", "chart_id", "question")),
    "attribute": (ATTR_OPTS, "saliency of chart elements for one QA item", ("run", "data", "out", "qa_id")),
    "plot": (PLOT_OPTS, "training curves from a run's metrics log", ("run",)),
}
# config-file sections that are passed through as nested dicts
NESTED = {"gen": ("generator", "qagen")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crct", description="Chart question answering workbench.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (opts, help_, _) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", default=None, help="JSON file of option values")
        for key, (default, typ, h) in opts.items():
            flag = "--" + key.replace("_", "-")
            # the default shown in --help is the built-in one; None marks "not given"
            if typ is bool:
                sp.add_argument(flag, action="store_true", default=None, help=f"{h} (default: {default})")
            else:
                sp.add_argument(flag, type=typ, default=None, help=f"{h} (default: {default})")
    return p


def resolve(command: str, ns: argparse.Namespace, env=os.environ) -> dict:
    """Merge defaults < config file < flags, with CRCT_SEED below the file."""
    opts, _, required = COMMANDS[command]
    cfg = {k: v[0] for k, v in opts.items()}
    if "seed" in opts and env.get("CRCT_SEED") is not None:
        try:
            cfg["seed"] = int(env["CRCT_SEED"])
        except ValueError:
            raise UsageError(f"CRCT_SEED must be an integer, got {env['CRCT_SEED']!r}")
    nested = {}
    if ns.config:
        path = Path(ns.config)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path}: {e}")
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        allowed = set(opts) | set(NESTED.get(command, ()))
        unknown = set(file_cfg) - allowed
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {sorted(unknown)}")
        for k, v in file_cfg.items():
            if k in opts:
                cfg[k] = v
            else:
                nested[k] = v
    for k in opts:
        v = getattr(ns, k)
        if v is not None:
            cfg[k] = v
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise UsageError(f"'{command}' needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
    cfg.update(nested)
    return cfg


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"required file {path} does not exist")
    return path


def load_dataset(data_dir: str | Path):
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    charts = list(read_charts(_require(d / CHARTS_FILE)))
    items = list(read_qa(_require(d / QA_FILE)))
    return charts, items


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: dict) -> int:
    if cfg["charts"] < 1 or cfg["qa_per_chart"] < 1:
        raise UsageError("--charts and --qa-per-chart must be >= 1")
    out = Path(cfg["out"])
    targets = [out / CHARTS_FILE, out / QA_FILE]
    existing = [str(t) for t in targets if t.exists()]
    if existing and not cfg["force"]:
        raise DataError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    gen_cfg = GeneratorConfig.from_dict(cfg.get("generator", {}))
    qa_cfg = QAGenConfig.from_dict(cfg.get("qagen", {}))
    specs = generate_corpus(cfg["charts"], cfg["seed"], gen_cfg, start_id=cfg["start_id"])
    catalog = load_catalog()
    items = []
    for s in specs:
        items += generate_questions(s, catalog, cfg["seed"], cfg["qa_per_chart"], qa_cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_charts(targets[0], [(s, annotate_elements(s)) for s in specs])
    write_qa(targets[1], items)
    _echo_config(out, "gen", cfg)
    print(f"wrote {len(specs)} charts to {targets[0]}")
    print(f"wrote {len(items)} questions to {targets[1]}")
    return EXIT_OK


def _configs_from(cfg: dict, vocab_size: int) -> tuple[TrainConfig, ModelConfig]:
    tc = TrainConfig(
        epochs=cfg["epochs"],
        base_lr=cfg["lr"],
        warmup_fraction=cfg["warmup_fraction"],
        batch_size=cfg["batch_size"],
        negatives_per_positive=cfg["negatives"],
        seed=cfg["seed"],
        clip_norm=cfg["clip_norm"],
        jitter_sigma=cfg["jitter_sigma"],
    )
    ab = AblationFlags(
        drop_legend_marker=bool(cfg["drop_legend_marker"]),
        drop_text_class_emb=bool(cfg["drop_text_class_emb"]),
        drop_visual_class_emb=bool(cfg["drop_visual_class_emb"]),
        visual_bbox_only=bool(cfg["bbox_only"]),
    )
    mc = ModelConfig(
        vocab_size=vocab_size,
        d_model=cfg["d_model"],
        n_blocks=cfg["n_blocks"],
        n_heads=cfg["n_heads"],
        d_ff=cfg["d_ff"],
        lambda_cls=cfg["lambda_cls"],
        lambda_reg=cfg["lambda_reg"],
        ablation=ab,
        two_pipelines=bool(cfg["two_pipelines"]),
    )
    return tc, mc


def cmd_train(cfg: dict) -> int:
    charts, items = load_dataset(cfg["data"])
    specs = [s for s, _ in charts]
    out = Path(cfg["out"])
    resume = cfg["resume"]
    if resume is None and (out / "latest").exists() and not cfg["force"]:
        raise DataError(f"{out} already holds a run; pass --resume latest or --force")
    vocab_path = out / VOCAB_FILE
    if resume is not None:
        vocab = Vocab.load(_require(vocab_path))
    else:
        vocab = build_vocab(corpus_texts(specs, [it.question_text for it in items], FIXED_VOCAB_ANSWERS))
    tc, mc = _configs_from(cfg, len(vocab))
    trainer = Trainer(specs, items, vocab, tc, mc, out)
    out.mkdir(parents=True, exist_ok=True)
    if resume is None:
        vocab.save(vocab_path)
        for stale in out.glob("epoch_*.ckpt"):
            stale.unlink()
    _echo_config(out, "train", cfg)
    print(f"training on {len(items)} questions over {len(specs)} charts; {trainer.steps_per_epoch} steps per epoch")
    trainer.fit(
        resume=resume,
        on_epoch=lambda s: print(f"epoch {s.epoch}: loss {s.mean_loss:.4f} acc {s.align_acc:.3f} lr {s.lr:.2e} ({s.seconds:.1f}s)", flush=True),
    )
    print(f"checkpoints in {out}")
    return EXIT_OK


def load_run(run_dir: str | Path, checkpoint: str = "latest") -> tuple[Predictor, dict]:
    run = Path(run_dir)
    if not run.is_dir():
        raise DataError(f"run directory {run} does not exist")
    vocab = Vocab.load(_require(run / VOCAB_FILE))
    path = resolve_checkpoint(checkpoint, run)
    models, meta = load_trained(path)
    if meta["vocab_size"] != len(vocab):
        raise ResumeError(f"{path}: vocab size {meta['vocab_size']} != {len(vocab)} in {run / VOCAB_FILE}")
    if "model" in models:
        return Predictor(models["model"], vocab), meta
    return Predictor(models["cls"], vocab, reg_model=models.get("reg")), meta


def _chart_contexts(charts, meta):
    tc = TrainConfig.from_dict(meta["train_config"])
    ctx = detect_charts([s for s, _ in charts], tc.jitter, tc.detector_seed)
    return {cid: (c.spec, c.dets) for cid, c in ctx.items()}


def cmd_eval(cfg: dict) -> int:
    pred, meta = load_run(cfg["run"], cfg["checkpoint"])
    charts, items = load_dataset(cfg["data"])
    try:
        fracs = [float(x) for x in str(cfg["fractions"]).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--fractions must be comma-separated numbers, got {cfg['fractions']!r}")
    report = evaluate(model_predict_fn(pred), _chart_contexts(charts, meta), items, fracs)
    out = Path(cfg["out"])
    write_report(report, out)
    _echo_config(out, "eval", cfg)
    for c, a in report.accuracy.items():
        print(f"{c:15s} {a:.4f} ({report.correct[c]}/{report.counts[c]})")
    print(f"{'overall':15s} {report.overall:.4f}")
    print(f"{'selection':15s} {report.selection_accuracy:.4f}")
    print(f"numeric ratio  {report.ratio_accuracy:.4f} over {report.n_numeric} items")
    return EXIT_OK


def _find_chart(ctx: dict, chart_id: int):
    if chart_id not in ctx:
        ids = sorted(ctx)
        raise DataError(f"unknown chart id {chart_id}; available ids {ids[0]}..{ids[-1]} ({len(ids)} charts)")
    return ctx[chart_id]


def cmd_predict(cfg: dict) -> int:
    pred, meta = load_run(cfg["run"], cfg["checkpoint"])
    charts, _ = load_dataset(cfg["data"])
    spec, dets = _find_chart(_chart_contexts(charts, meta), cfg["chart_id"])
    numeric = bool(cfg["numeric"]) if pred.reg_model is not None else None
    p = predict(pred, spec, dets, cfg["question"], numeric=numeric)
    print(f"answer: {p.chosen.surface}")
    print(f"score: {p.align_score:.6f}")
    if p.chosen.surface == REG:
        print(f"value: {p.numeric_value!r}")
    return EXIT_OK


def cmd_attribute(cfg: dict) -> int:
    pred, meta = load_run(cfg["run"], cfg["checkpoint"])
    charts, items = load_dataset(cfg["data"])
    by_qa = {it.qa_id: it for it in items}
    if cfg["qa_id"] not in by_qa:
        ids = sorted(by_qa)
        raise DataError(f"unknown qa id {cfg['qa_id']}; available ids {ids[0]}..{ids[-1]} ({len(ids)} items)")
    item = by_qa[cfg["qa_id"]]
    if cfg["chart_id"] is not None and cfg["chart_id"] != item.chart_id:
        raise DataError(f"qa id {item.qa_id} belongs to chart {item.chart_id}, not {cfg['chart_id']}")
    ctx = _chart_contexts(charts, meta)
    spec, dets = _find_chart(ctx, item.chart_id)
    gt = dict((s.chart_id, e) for s, e in charts)[item.chart_id]
    answer = REG if item.answer_kind == "numeric" else item.answer_text
    model = pred.reg_model if (pred.reg_model is not None and answer == REG) else pred.model
    attrs = attribute(model, pred.vocab, spec, dets, item.question_text, answer, m=cfg["steps"])
    out = Path(cfg["out"])
    write_attribution(attrs, gt, out, title=item.question_text)
    _echo_config(out, "attribute", cfg)
    top = top_data_element(attrs)
    print(f"{len(attrs)} elements scored; saliency written to {out}")
    if top is not None:
        print(f"most salient data element: #{top.source_index} ({top.element_class})")
    return EXIT_OK


def cmd_plot(cfg: dict) -> int:
    run = Path(cfg["run"])
    rows = read_metrics(_require(run / "metrics.csv"))
    out = Path(cfg["out"]) if cfg["out"] else run
    out.mkdir(parents=True, exist_ok=True)
    ep = [r["epoch"] for r in rows]
    (out / "loss_curve.svg").write_text(svg.line_plot(ep, [r["mean_loss"] for r in rows], "Training loss", "epoch", "mean loss"))
    (out / "accuracy_curve.svg").write_text(
        svg.line_plot(ep, [r["align_acc"] for r in rows], "Alignment accuracy", "epoch", "accuracy", y_max=1.0)
    )
    print(f"wrote loss_curve.svg and accuracy_curve.svg to {out}")
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "attribute": cmd_attribute,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ResumeError, ModelConfigError, EvalError, SequenceTooLong, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, TypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
