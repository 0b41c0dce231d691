"""Shared setup for the scripted experiments: datasets, vocab, train, evaluate."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .chartgen import DATA_CLASSES, ChartSpec, GeneratorConfig, annotate_elements, generate_corpus
from .evaluate import Predictor, Report, attribute, evaluate, model_predict_fn, top_data_element
from .featurize import REG, AblationFlags, Vocab, build_vocab, corpus_texts
from .model import ModelConfig
from .qagen import FIXED_VOCAB_ANSWERS, QAGenConfig, QAItem, TemplateError, generate_questions, instantiate, load_catalog
from .train import EpochStats, TrainConfig, Trainer, detect_charts


@dataclass
class Dataset:
    specs: list[ChartSpec]
    items: list[QAItem]

    @property
    def by_id(self) -> dict[int, ChartSpec]:
        return {s.chart_id: s for s in self.specs}


def make_dataset(
    n_charts: int,
    per_chart: int,
    seed: int,
    start_id: int = 0,
    gen_cfg: GeneratorConfig | None = None,
    qa_cfg: QAGenConfig | None = None,
) -> Dataset:
    specs = generate_corpus(n_charts, seed, gen_cfg or GeneratorConfig(), start_id=start_id)
    catalog = load_catalog()
    items = []
    for s in specs:
        items += generate_questions(s, catalog, seed, per_chart, qa_cfg)
    return Dataset(specs, items)


def make_vocab(*datasets: Dataset) -> Vocab:
    """Vocabulary over chart texts, questions and fixed answers of every given dataset."""
    specs = [s for d in datasets for s in d.specs]
    questions = [it.question_text for d in datasets for it in d.items]
    return build_vocab(corpus_texts(specs, questions, FIXED_VOCAB_ANSWERS))


def run_training(
    data: Dataset,
    vocab: Vocab,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir=None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> Trainer:
    trainer = Trainer(data.specs, data.items, vocab, cfg, model_cfg, out_dir)
    trainer.fit(on_epoch=on_epoch)
    return trainer


def detected(trainer: Trainer, data: Dataset) -> dict:
    """Chart id -> (spec, detections), detected exactly as during training."""
    charts = detect_charts(data.specs, trainer.cfg.jitter, trainer.cfg.detector_seed)
    return {cid: (c.spec, c.dets) for cid, c in charts.items()}


def multi_series_items(data: Dataset) -> list[QAItem]:
    """Questions on charts with two or more series (where legend markers carry information)."""
    multi = {s.chart_id for s in data.specs if s.n_series >= 2}
    return [it for it in data.items if it.chart_id in multi]


def keep_latest_checkpoint(out_dir) -> Callable[[EpochStats], None]:
    """Epoch hook that deletes the previous epoch's checkpoint once the new one is written."""
    def hook(s: EpochStats) -> None:
        old = Path(out_dir) / f"epoch_{s.epoch - 1}.ckpt"
        if old.exists():
            old.unlink()

    return hook


def evaluate_trainer(trainer: Trainer, data: Dataset, items: Sequence[QAItem] | None = None) -> Report:
    """Evaluate the trainer's model(s) on ``items`` (default: all of ``data``), detecting charts as in training."""
    ctx = detected(trainer, data)
    models = trainer.models()
    if "model" in models:
        pred = Predictor(models["model"], trainer.vocab)
    else:
        pred = Predictor(models["cls"], trainer.vocab, reg_model=models.get("reg"))
    return evaluate(model_predict_fn(pred), ctx, list(items if items is not None else data.items))


# ---------------------------------------------------------------- protocols


@dataclass(frozen=True)
class Protocol:
    """One scripted experiment: data sizes and seeds, model size, schedule."""

    n_charts: int
    per_chart: int
    data_seed: int = 0
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    negatives: int = 3
    seed: int = 0
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    # held-out split; charts get ids from test_start_id on so the splits are disjoint
    test_charts: int = 0
    test_items: int = 0
    test_seed: int = 1
    test_start_id: int = 100_000
    series_count: tuple[int, int] | None = None
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def gen_cfg(self) -> GeneratorConfig:
        g = GeneratorConfig()
        return g if self.series_count is None else replace(g, series_count=self.series_count)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, base_lr=self.lr, batch_size=self.batch_size,
                           negatives_per_positive=self.negatives, seed=self.seed)

    def model_cfg(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_blocks=self.n_blocks,
                           n_heads=self.n_heads, ablation=self.ablation)


# 32 charts / 256 QA, small model, trained until it reproduces its training set
OVERFIT = Protocol(n_charts=32, per_chart=8, epochs=100)
# 2,000 training QA on 250 charts, 500 test QA on 63 unseen charts; 7 negatives per question make
# answer selection among the ~30 candidates learnable, 45 epochs keep the run under 3 hours
GENERALIZATION = Protocol(n_charts=250, per_chart=8, data_seed=10, epochs=45, negatives=7, test_charts=63,
                          test_items=500, test_seed=11)


@dataclass
class Split:
    train: Dataset
    test: Dataset | None
    vocab: Vocab


def make_split(p: Protocol) -> Split:
    train = make_dataset(p.n_charts, p.per_chart, p.data_seed, gen_cfg=p.gen_cfg())
    test = None
    if p.test_charts:
        test = make_dataset(p.test_charts, p.per_chart, p.test_seed, start_id=p.test_start_id, gen_cfg=p.gen_cfg())
        if p.test_items:
            test = Dataset(test.specs, test.items[: p.test_items])
    # the vocabulary covers the test texts too; unseen words would otherwise all map to [UNK]
    vocab = make_vocab(train, test) if test is not None else make_vocab(train)
    return Split(train, test, vocab)


@dataclass
class RunResult:
    trainer: Trainer
    history: list[EpochStats]
    seconds: float


def run_protocol(p: Protocol, split: Split | None = None, out_dir=None,
                 on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[Split, RunResult]:
    split = split or make_split(p)
    history: list[EpochStats] = []

    def hook(s):
        history.append(s)
        if on_epoch is not None:
            on_epoch(s)

    t0 = time.perf_counter()
    trainer = run_training(split.train, split.vocab, p.train_cfg(), p.model_cfg(len(split.vocab)), out_dir, hook)
    return split, RunResult(trainer, history, time.perf_counter() - t0)


# ---------------------------------------------------------------- attribution check


@dataclass(frozen=True)
class ExtremumCase:
    """An argmax/argmin question and the element indices that carry the extremum."""

    item: QAItem
    targets: frozenset[int]


def extremum_cases(charts: dict, n: int, seed: int) -> list[ExtremumCase]:
    """``n`` argmax/argmin questions drawn without replacement from every (chart, series, extremum).

    ``charts`` maps chart id to (spec, detections); questions whose answer text
    did not survive detection are left out of the pool.
    """
    t = load_catalog()["R_argext"]
    pool = []
    for cid in sorted(charts):
        spec, dets = charts[cid]
        texts = {d.text for d in dets if d.is_text}
        gt = annotate_elements(spec)
        for s in range(spec.n_series):
            for ext in ("max", "min"):
                slots = {"series": s, "extremum": ext}
                try:
                    item = instantiate(spec, t, slots, t.forms[0], qa_id=len(pool))
                except TemplateError:
                    continue
                if item.answer_text not in texts:
                    continue
                c = spec.x_categories.index(item.answer_text)
                targets = frozenset(
                    i for i, el in enumerate(gt.elements)
                    if el.element_class in DATA_CLASSES and el.series_index == s
                    # a line segment carries the value at both of its end categories
                    and (el.category_index == c or (el.element_class == "line_segment" and el.category_index == c - 1))
                )
                pool.append(ExtremumCase(item, targets))
    if len(pool) < n:
        raise ValueError(f"only {len(pool)} argmax/argmin questions available, need {n}")
    rng = np.random.default_rng(seed)
    return [pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False))]


def attribution_hits(model, vocab: Vocab, charts: dict, cases: Sequence[ExtremumCase], m: int = 16) -> list[bool]:
    """Per case: is the most salient data element one that carries the gold extremum?"""
    hits = []
    for case in cases:
        spec, dets = charts[case.item.chart_id]
        attrs = attribute(model, vocab, spec, dets, case.item.question_text, case.item.answer_text, m=m)
        top = top_data_element(attrs)
        hits.append(top is not None and top.source_index in case.targets)
    return hits


__all__ = ["Dataset", "make_dataset", "make_vocab", "run_training", "evaluate_trainer", "detected",
           "multi_series_items", "keep_latest_checkpoint", "Protocol", "OVERFIT",
           "GENERALIZATION", "Split", "make_split", "RunResult", "run_protocol", "ExtremumCase", "extremum_cases", "attribution_hits", "REG"]
