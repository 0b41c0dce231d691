"""Candidate scoring, regression metrics, reports and attribution."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import svg
from . import tensor as T
from .chartgen import DATA_CLASSES, ChartSpec, ElementSet, denormalize_value
from .featurize import REG, AblationFlags, Detection, EncodedSample, Vocab, collate, encode_sample
from .model import CRCT
from .qagen import CATEGORIES, FIXED_VOCAB_ANSWERS, QAItem

ORIGINS = ("fixed_vocab", "chart_oov", "regression_flag")
DEFAULT_FRACTIONS = (0.0, 0.125, 0.25, 0.5, 1.0, 2.0)
# upper edges of the error-ratio buckets, in percent; the last bucket is open
DEFAULT_BUCKETS = (5.0, 10.0, 25.0, 50.0, 100.0)


class EvalError(ValueError):
    pass


class AnswerCandidate(NamedTuple):
    surface: str
    origin: str


def candidate_set(spec: ChartSpec | None, dets: Sequence[Detection], fixed_vocab_answers=FIXED_VOCAB_ANSWERS) -> list[AnswerCandidate]:
    """Fixed answers, then surviving chart texts in detection order, then <R>. First occurrence wins."""
    seen: set[str] = set()
    out = []

    def add(s, origin):
        if s not in seen:
            seen.add(s)
            out.append(AnswerCandidate(s, origin))

    for s in fixed_vocab_answers:
        add(s, "fixed_vocab")
    for d in dets:
        if d.is_text:
            add(d.text, "chart_oov")
    add(REG, "regression_flag")
    return out


def normalize_answer(s: str) -> str:
    return " ".join(s.split()).casefold()


def answers_match(a: str, b: str) -> bool:
    return normalize_answer(a) == normalize_answer(b)


# ---------------------------------------------------------------- metrics


def ratio_correct(pred: float, gt: float, tol: float = 0.05) -> bool:
    if not math.isfinite(gt):
        raise EvalError(f"ground truth must be finite, got {gt}")
    return abs(pred - gt) <= tol * abs(gt)


def tick_correct(pred: float, gt: float, f: float, sub_tick: float) -> bool:
    if not sub_tick > 0:
        raise EvalError(f"sub-tick spacing must be positive, got {sub_tick}")
    if f < 0:
        raise EvalError(f"tolerance fraction must be >= 0, got {f}")
    return abs(pred - gt) <= f * sub_tick


def error_ratio(pred: float, gt: float) -> float:
    """Relative error in percent; infinite when gt is zero and the prediction is not."""
    err = abs(pred - gt)
    if gt == 0:
        return 0.0 if err == 0 else math.inf
    return 100.0 * err / abs(gt)


def bucket_labels(edges: Sequence[float] = DEFAULT_BUCKETS) -> list[str]:
    labels = [f"<={edges[0]:g}%"]
    labels += [f"{lo:g}-{hi:g}%" for lo, hi in zip(edges, edges[1:])]
    labels.append(f">{edges[-1]:g}%")
    return labels


def bucket_index(ratio: float, edges: Sequence[float] = DEFAULT_BUCKETS) -> int:
    for i, e in enumerate(edges):
        if ratio <= e:
            return i
    return len(edges)


# ---------------------------------------------------------------- prediction


@dataclass
class Prediction:
    chosen: AnswerCandidate
    align_score: float
    numeric_value: float | None
    all_scores: list[tuple[AnswerCandidate, float]]

    @property
    def answer(self) -> str:
        if self.chosen.surface == REG:
            return repr(self.numeric_value)
        return self.chosen.surface


@dataclass
class Predictor:
    """Bundles what scoring needs besides the chart: the model(s), vocab and feature flags.

    ``reg_model`` is set for the two-pipelines variant. Routing is then done by
    an oracle on the question's answer kind, passed to ``predict`` as ``numeric``.
    """

    model: CRCT
    vocab: Vocab
    reg_model: CRCT | None = None
    batch_size: int = 128

    @property
    def ablation(self) -> AblationFlags:
        return self.model.cfg.ablation

    def encode(self, spec, dets, question, answer) -> EncodedSample:
        return encode_sample(spec, dets, question, answer, self.vocab, self.ablation, class_target=0)

    def scores(self, model: CRCT, samples: list[EncodedSample]) -> tuple[np.ndarray, np.ndarray]:
        logits, regs = [], []
        with T.no_grad():
            for i in range(0, len(samples), self.batch_size):
                out = model.forward(collate(samples[i : i + self.batch_size]))
                logits.append(out.align_logit.data)
                regs.append(out.reg_value.data)
        return np.concatenate(logits), np.concatenate(regs)


def predict(
    predictor: Predictor,
    spec: ChartSpec,
    dets: Sequence[Detection],
    question: str,
    numeric: bool | None = None,
) -> Prediction:
    """Score every candidate and keep the best; a winning <R> is regressed and denormalized."""
    cands = candidate_set(spec, dets)
    if predictor.reg_model is not None:
        if numeric is None:
            raise EvalError("two-pipelines prediction needs the oracle route (numeric=True/False)")
        if numeric:
            s = predictor.encode(spec, dets, question, REG)
            _, reg = predictor.scores(predictor.reg_model, [s])
            chosen = AnswerCandidate(REG, "regression_flag")
            return Prediction(chosen, 1.0, denormalize_value(float(reg[0]), spec.y_axis), [(chosen, 1.0)])
        cands = [c for c in cands if c.surface != REG]
    if not cands:
        raise EvalError("empty candidate set")
    samples = [predictor.encode(spec, dets, question, c.surface) for c in cands]
    logits, regs = predictor.scores(predictor.model, samples)
    scores = T._sigmoid(logits)
    # argmax over logits: first index wins ties, and saturated sigmoids cannot tie spuriously
    best = int(np.argmax(logits))
    chosen = cands[best]
    value = denormalize_value(float(regs[best]), spec.y_axis) if chosen.surface == REG else None
    return Prediction(chosen, float(scores[best]), value, list(zip(cands, map(float, scores))))


# ---------------------------------------------------------------- reports


@dataclass
class Report:
    counts: dict[str, int]
    correct: dict[str, int]
    accuracy: dict[str, float]
    overall: float
    # share of items whose chosen candidate is the gold one (<R> for numeric items)
    selection_accuracy: float
    n_total: int
    n_numeric: int
    ratio_accuracy: float
    tick_fractions: list[float]
    tick_accuracy: list[float]
    bucket_labels: list[str]
    bucket_counts: list[int]
    rows: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


def _is_selected(item: QAItem, pred: Prediction) -> bool:
    if item.answer_kind == "numeric":
        return pred.chosen.surface == REG
    return answers_match(pred.chosen.surface, item.answer_text)


def _is_correct(item: QAItem, pred: Prediction) -> tuple[bool, float | None]:
    if item.answer_kind == "numeric":
        if pred.numeric_value is not None:
            return ratio_correct(pred.numeric_value, item.answer_value), pred.numeric_value
        try:
            v = float(pred.chosen.surface)
        except ValueError:
            return False, None
        return (ratio_correct(v, item.answer_value) if math.isfinite(v) else False), v
    return answers_match(pred.chosen.surface, item.answer_text), None


def evaluate(
    predict_fn: Callable[[ChartSpec, list[Detection], QAItem], Prediction],
    charts: dict[int, tuple[ChartSpec, list[Detection]]],
    qa_items: Sequence[QAItem],
    tolerance_fractions: Iterable[float] = DEFAULT_FRACTIONS,
    buckets: Sequence[float] = DEFAULT_BUCKETS,
) -> Report:
    """Score every item. String answers by normalized exact match, numeric ones by the ratio rule.

    A numeric item answered with a plain candidate string (an integer label,
    say) counts by its numeric value. The tick curve and error histogram cover
    numeric items only.
    """
    if not qa_items:
        raise EvalError("empty test set")
    fracs = sorted(float(f) for f in tolerance_fractions)
    counts = {c: 0 for c in CATEGORIES}
    correct = {c: 0 for c in CATEGORIES}
    tick_hits = [0] * len(fracs)
    hist = [0] * (len(buckets) + 1)
    n_numeric = n_ratio = n_selected = 0
    rows = []
    for item in qa_items:
        if item.chart_id not in charts:
            raise EvalError(f"QA item {item.qa_id} refers to unknown chart {item.chart_id}")
        spec, dets = charts[item.chart_id]
        pred = predict_fn(spec, dets, item)
        ok, value = _is_correct(item, pred)
        selected = _is_selected(item, pred)
        n_selected += selected
        counts[item.category] += 1
        correct[item.category] += ok
        row = {
            "qa_id": item.qa_id,
            "chart_id": item.chart_id,
            "category": item.category,
            "template_id": item.template_id,
            "gold": item.answer_text if item.answer_text is not None else repr(item.answer_value),
            "predicted": pred.answer,
            "chosen": pred.chosen.surface,
            "score": pred.align_score,
            "selected": int(selected),
            "correct": int(ok),
        }
        if item.answer_kind == "numeric":
            n_numeric += 1
            n_ratio += ok
            v = value if value is not None and math.isfinite(value) else math.inf
            sub = spec.y_axis.sub_tick_spacing
            for j, f in enumerate(fracs):
                tick_hits[j] += tick_correct(v, item.answer_value, f, sub) if math.isfinite(v) else 0
            hist[bucket_index(error_ratio(v, item.answer_value), buckets)] += 1
        rows.append(row)
    total = len(qa_items)
    acc = {c: (correct[c] / counts[c] if counts[c] else 0.0) for c in CATEGORIES}
    return Report(
        counts=counts,
        correct=correct,
        accuracy=acc,
        overall=sum(correct.values()) / total,
        selection_accuracy=n_selected / total,
        n_total=total,
        n_numeric=n_numeric,
        ratio_accuracy=n_ratio / n_numeric if n_numeric else 0.0,
        tick_fractions=fracs,
        tick_accuracy=[h / n_numeric if n_numeric else 0.0 for h in tick_hits],
        bucket_labels=bucket_labels(buckets),
        bucket_counts=hist,
        rows=rows,
    )


def model_predict_fn(predictor: Predictor) -> Callable[[ChartSpec, list[Detection], QAItem], Prediction]:
    def fn(spec, dets, item):
        return predict(predictor, spec, dets, item.question_text, numeric=item.answer_kind == "numeric")

    return fn


def write_report(report: Report, out_dir: str | Path) -> None:
    """``report.csv`` (per-category rows), ``report.json``, ``predictions.csv`` and two SVG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["category", "count", "correct", "accuracy"])
        for c in CATEGORIES:
            w.writerow([c, report.counts[c], report.correct[c], repr(report.accuracy[c])])
        w.writerow(["overall", report.n_total, sum(report.correct.values()), repr(report.overall)])
        w.writerow(["selection", report.n_total, round(report.selection_accuracy * report.n_total), repr(report.selection_accuracy)])
        w.writerow(["numeric_ratio", report.n_numeric, round(report.ratio_accuracy * report.n_numeric), repr(report.ratio_accuracy)])
        for f_, a in zip(report.tick_fractions, report.tick_accuracy):
            w.writerow([f"tick@{f_:g}", report.n_numeric, round(a * report.n_numeric), repr(a)])
    (out / "report.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    if report.rows:
        with open(out / "predictions.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(report.rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(report.rows)
    (out / "tick_curve.svg").write_text(
        svg.line_plot(
            report.tick_fractions,
            report.tick_accuracy,
            title="Numeric accuracy vs. tolerance",
            x_label="tolerance (fraction of one sub-tick)",
            y_label="accuracy",
        )
    )
    (out / "error_histogram.svg").write_text(
        svg.bar_plot(report.bucket_labels, report.bucket_counts, title="Error ratio of numeric answers", y_label="count")
    )


# ---------------------------------------------------------------- attribution


class Attribution(NamedTuple):
    source_index: int
    element_class: str
    bbox: tuple
    saliency: float


def integrated_gradients(model: CRCT, sample: EncodedSample, m: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Attribution of the alignment logit to every visual and text embedding row.

    Straight path from zero embeddings; right Riemann sum over ``m`` steps. All
    steps share one batch so the gradient is taken in a single backward pass.
    """
    if m < 1:
        raise EvalError(f"integrated gradients needs m >= 1, got {m}")
    batch = collate([sample])
    with T.no_grad():
        e_v = model.embed_visual(batch).data[0]
        e_t = model.embed_text(batch).data[0]
    alphas = np.arange(1, m + 1, dtype=float) / m
    xv = T.Tensor(alphas[:, None, None] * e_v[None], requires_grad=True)
    xt = T.Tensor(alphas[:, None, None] * e_t[None], requires_grad=True)
    vm = np.repeat(batch.vis_mask, m, axis=0)
    tm = np.repeat(batch.txt_mask, m, axis=0)
    # only the inputs need gradients here; parameters are treated as constants
    flags = {k: p.requires_grad for k, p in model.params.items()}
    try:
        for p in model.params.values():
            p.requires_grad = False
        out = model.heads(model.encode_embeddings(xv, xt, vm, tm))
        T.tsum(out.align_logit).backward()
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
    att_v = e_v * xv.grad.mean(axis=0)
    att_t = e_t * xt.grad.mean(axis=0)
    return att_v, att_t


def attribute(
    model: CRCT,
    vocab: Vocab,
    spec: ChartSpec,
    dets: Sequence[Detection],
    question: str,
    answer: str,
    m: int = 16,
) -> list[Attribution]:
    """Per-element saliency: L2 norm of the element's token attributions, scaled to max 1."""
    if answer not in {c.surface for c in candidate_set(spec, dets)}:
        raise EvalError(f"answer {answer!r} is not a candidate for chart {spec.chart_id}")
    sample = encode_sample(spec, dets, question, answer, vocab, model.cfg.ablation)
    att_v, att_t = integrated_gradients(model, sample, m)
    sq: dict[int, float] = {}
    for src, row in zip(sample.vis_src, att_v):
        if src >= 0:
            sq[int(src)] = sq.get(int(src), 0.0) + float(row @ row)
    for src, row in zip(sample.txt_src, att_t):
        if src >= 0:
            sq[int(src)] = sq.get(int(src), 0.0) + float(row @ row)
    by_src = {d.source_index: d for d in dets}
    norms = {k: math.sqrt(v) for k, v in sq.items()}
    top = max(norms.values(), default=0.0)
    out = []
    for k in sorted(norms):
        d = by_src[k]
        out.append(Attribution(k, d.element_class, tuple(d.bbox), norms[k] / top if top > 0 else 0.0))
    return out


def top_data_element(attrs: Sequence[Attribution]) -> Attribution | None:
    """Most salient data-carrying element (bar, line segment, dot); first wins ties."""
    best = None
    for a in attrs:
        if a.element_class in DATA_CLASSES and (best is None or a.saliency > best.saliency):
            best = a
    return best


def write_attribution(attrs: Sequence[Attribution], gt: ElementSet, out_dir: str | Path, title: str = "") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "saliency.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source_index", "element_class", "text", "x0", "y0", "x1", "y1", "saliency"])
        for a in attrs:
            el = gt.elements[a.source_index]
            w.writerow([a.source_index, a.element_class, el.text or "", *(repr(v) for v in a.bbox), repr(a.saliency)])
    (out / "saliency.svg").write_text(svg.saliency_overlay(attrs, gt, title=title))
