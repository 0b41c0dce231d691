"""Training on (question, candidate answer) alignment pairs with random wrong answers."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .chartgen import ChartSpec, ConfigError, annotate_elements, normalize_value
from .evaluate import candidate_set
from .featurize import REG, Detection, EncodedSample, JitterConfig, Vocab, collate, encode_sample, oracle_detect
from .model import CRCT, ModelConfig, ModelConfigError
from .qagen import QAItem

CKPT_KIND = "crct-train"
METRICS_HEADER = ("epoch", "mean_loss", "align_acc", "lr")
# batches are formed inside windows of this many batches after sorting by length
BUCKET_WINDOW = 8


class NumericalError(ArithmeticError):
    pass


class ResumeError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 1e-3
    warmup_fraction: float = 0.1
    batch_size: int = 64
    negatives_per_positive: int = 3
    seed: int = 0
    clip_norm: float = 1.0
    detector_seed: int = 0
    jitter_sigma: float = 0.002

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.negatives_per_positive < 1:
            raise ConfigError(f"negatives_per_positive must be >= 1, got {self.negatives_per_positive}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_fraction <= 1:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.base_lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("base_lr and clip_norm must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def jitter(self) -> JitterConfig:
        return JitterConfig(sigma=self.jitter_sigma)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.base_lr * step / warm
    if total_steps == warm:
        return cfg.base_lr
    return cfg.base_lr * (total_steps - step) / (total_steps - warm)


def sample_negatives(item: QAItem, pool: Sequence[str], k: int, seed) -> list[str]:
    """``k`` distinct wrong answers drawn from ``pool`` (numeric items never get <R>)."""
    correct = REG if item.answer_kind == "numeric" else item.answer_text
    eligible = list(dict.fromkeys(a for a in pool if a != correct))
    if len(eligible) < k:
        raise ValueError(f"QA item {item.qa_id}: only {len(eligible)} wrong answers available, need {k}")
    rng = np.random.default_rng(seed)
    return [eligible[i] for i in rng.choice(len(eligible), size=k, replace=False)]


# ---------------------------------------------------------------- data preparation


@dataclass
class ChartContext:
    spec: ChartSpec
    dets: list[Detection]
    pool: list[str]


def detect_charts(specs: Sequence[ChartSpec], jitter: JitterConfig, seed: int) -> dict[int, ChartContext]:
    out = {}
    for spec in specs:
        dets = oracle_detect(annotate_elements(spec), jitter, seed)
        out[spec.chart_id] = ChartContext(spec, dets, [c.surface for c in candidate_set(spec, dets)])
    return out


def positive_answer(item: QAItem, spec: ChartSpec) -> tuple[str, float | None]:
    if item.answer_kind == "numeric":
        return REG, normalize_value(item.answer_value, spec.y_axis)
    return item.answer_text, None


class SampleStream:
    """Every epoch: one positive and ``k`` freshly drawn negatives per QA item, encoded.

    Encodings are cached by (qa_id, answer) since they do not change between epochs.
    The two-pipelines mode turns off negatives or drops <R> from the negative pool.
    """

    def __init__(
        self,
        items: Sequence[QAItem],
        charts: dict[int, ChartContext],
        vocab: Vocab,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        with_negatives: bool = True,
        exclude_reg_negatives: bool = False,
    ):
        self.items = list(items)
        self.charts = charts
        self.vocab = vocab
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.with_negatives = with_negatives
        self.exclude_reg = exclude_reg_negatives
        self._cache: dict[tuple[int, str], EncodedSample] = {}
        for it in self.items:
            if it.chart_id not in charts:
                raise ValueError(f"QA item {it.qa_id} refers to unknown chart {it.chart_id}")

    def encode(self, item: QAItem, answer: str, positive: bool) -> EncodedSample:
        key = (item.qa_id, answer)
        s = self._cache.get(key)
        if s is None:
            ctx = self.charts[item.chart_id]
            reg = positive_answer(item, ctx.spec)[1] if positive else None
            s = encode_sample(
                ctx.spec,
                ctx.dets,
                item.question_text,
                answer,
                self.vocab,
                self.model_cfg.ablation,
                class_target=int(positive),
                reg_target=reg,
                sample_id=item.qa_id,
            )
            self._cache[key] = s
        return s

    def epoch_samples(self, epoch: int) -> list[EncodedSample]:
        out = []
        k = self.cfg.negatives_per_positive
        for it in self.items:
            ctx = self.charts[it.chart_id]
            ans, _ = positive_answer(it, ctx.spec)
            out.append(self.encode(it, ans, True))
            if not self.with_negatives:
                continue
            pool = [a for a in ctx.pool if not (self.exclude_reg and a == REG)]
            for neg in sample_negatives(it, pool, k, [self.cfg.seed, epoch, it.qa_id]):
                out.append(self.encode(it, neg, False))
        return out


def make_batches(samples: Sequence[EncodedSample], batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle, then length-sorted windows cut into batches, then a shuffled batch order."""
    rng = np.random.default_rng([seed, epoch, 1])
    order = rng.permutation(len(samples))
    window = batch_size * BUCKET_WINDOW
    batches = []
    for w in range(0, len(order), window):
        chunk = sorted(order[w : w + window], key=lambda i: (samples[i].n_text, samples[i].n_visual))
        batches += [chunk[j : j + batch_size] for j in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------- trainer


@dataclass
class Pipeline:
    """One model with its optimizer and the sample stream it learns from."""

    name: str
    model: CRCT
    stream: SampleStream
    optim: T.Adam = field(init=False)

    def __post_init__(self):
        self.optim = T.Adam(self.model.active_params(), lr=self.stream.cfg.base_lr)

    @property
    def prefix(self) -> str:
        return f"{self.name}."


def vocab_digest(vocab: Vocab) -> str:
    return hashlib.sha256("\n".join(vocab.itos).encode("utf-8")).hexdigest()[:16]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    align_acc: float
    lr: float
    seconds: float = 0.0


class Trainer:
    """Owns the models, the optimizers and the output directory of one training run."""

    def __init__(
        self,
        specs: Sequence[ChartSpec],
        items: Sequence[QAItem],
        vocab: Vocab,
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        out_dir: str | Path | None = None,
    ):
        if not specs or not items:
            raise ValueError("training needs at least one chart and one QA item")
        if model_cfg.vocab_size != len(vocab):
            raise ModelConfigError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}")
        self.cfg, self.model_cfg, self.vocab = cfg, model_cfg, vocab
        self.out_dir = Path(out_dir) if out_dir is not None else None
        charts = detect_charts(specs, cfg.jitter, cfg.detector_seed)
        self.charts = charts
        if model_cfg.two_pipelines:
            cls_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "lambda_reg": 0.0, "two_pipelines": False})
            reg_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "lambda_cls": 0.0, "two_pipelines": False})
            cls_items = [it for it in items if it.answer_kind != "numeric"]
            reg_items = [it for it in items if it.answer_kind == "numeric"]
            self.pipelines = [
                Pipeline("cls", CRCT(cls_cfg, seed=cfg.seed), SampleStream(cls_items, charts, vocab, cls_cfg, cfg, exclude_reg_negatives=True)),
                Pipeline("reg", CRCT(reg_cfg, seed=cfg.seed + 1), SampleStream(reg_items, charts, vocab, reg_cfg, cfg, with_negatives=False)),
            ]
            self.pipelines = [p for p in self.pipelines if p.stream.items]
        else:
            self.pipelines = [Pipeline("model", CRCT(model_cfg, seed=cfg.seed), SampleStream(items, charts, vocab, model_cfg, cfg))]
        self.epoch = 0
        self.step = 0
        sizes = [len(p.stream.items) * (1 + (cfg.negatives_per_positive if p.stream.with_negatives else 0)) for p in self.pipelines]
        self.samples_per_epoch = sum(sizes)
        self.steps_per_epoch = sum(math.ceil(n / cfg.batch_size) for n in sizes)
        self.total_steps = self.steps_per_epoch * cfg.epochs

    @property
    def model(self) -> CRCT:
        return self.pipelines[0].model

    def models(self) -> dict[str, CRCT]:
        return {p.name: p.model for p in self.pipelines}

    # ------------------------------------------------------------ one epoch

    def run_epoch(self) -> EpochStats:
        t0 = time.perf_counter()
        epoch = self.epoch + 1
        loss_sum = 0.0
        hits = 0
        count = 0
        cls_count = 0
        lr = 0.0
        for pi, pipe in enumerate(self.pipelines):
            samples = pipe.stream.epoch_samples(epoch)
            for idx in make_batches(samples, self.cfg.batch_size, self.cfg.seed + pi, epoch):
                batch = collate([samples[i] for i in idx])
                lr = lr_at(self.step, self.total_steps, self.cfg)
                out = pipe.model.forward(batch)
                loss = pipe.model.loss(out, batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss {value} at step {self.step} (epoch {epoch}); sample ids {batch.sample_ids.tolist()}"
                    )
                loss.backward()
                T.clip_grad_norm(pipe.optim.params.values(), self.cfg.clip_norm)
                pipe.optim.step(lr)
                self.step += 1
                loss_sum += value * len(batch)
                count += len(batch)
                if pipe.model.cfg.lambda_cls > 0:
                    pred = out.align_logit.data > 0
                    hits += int(np.sum(pred == (batch.class_target > 0.5)))
                    cls_count += len(batch)
        self.epoch = epoch
        return EpochStats(epoch, loss_sum / max(count, 1), hits / max(cls_count, 1), lr, time.perf_counter() - t0)

    # ------------------------------------------------------------ checkpoints

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {}
        adam_meta = {}
        for p in self.pipelines:
            arrays.update(p.model.state_arrays(prefix=p.prefix + "model."))
            a, m = p.optim.state_dict()
            arrays.update({p.prefix + k: v for k, v in a.items()})
            adam_meta[p.name] = m
        meta = {
            "kind": CKPT_KIND,
            "epoch": self.epoch,
            "step": self.step,
            "total_steps": self.total_steps,
            "pipelines": [p.name for p in self.pipelines],
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.cfg.to_dict(),
            "vocab_size": len(self.vocab),
            "vocab_digest": vocab_digest(self.vocab),
            "adam": adam_meta,
        }
        return arrays, meta

    def save(self, path: str | Path) -> None:
        arrays, meta = self.state()
        T.save_checkpoint(path, arrays, meta)

    def load(self, path: str | Path) -> None:
        arrays, meta = T.load_checkpoint(path)
        if meta.get("kind") != CKPT_KIND:
            raise ResumeError(f"{path} is not a training checkpoint")
        if meta["model_config"] != self.model_cfg.to_dict():
            raise ResumeError(f"{path}: model config differs from the current run")
        if meta["vocab_digest"] != vocab_digest(self.vocab):
            raise ResumeError(f"{path}: vocabulary differs from the current run")
        if meta["train_config"] != self.cfg.to_dict():
            raise ResumeError(f"{path}: train config differs from the current run")
        for p in self.pipelines:
            p.model.load_arrays(arrays, prefix=p.prefix + "model.")
            p.optim.load_state_dict({k[len(p.prefix):]: v for k, v in arrays.items() if k.startswith(p.prefix + "adam.")}, meta["adam"][p.name])
        self.epoch = int(meta["epoch"])
        self.step = int(meta["step"])

    # ------------------------------------------------------------ full run

    def fit(self, resume: str | Path | None = None, on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
        """Train to ``cfg.epochs``, checkpointing and logging every epoch when an output dir is set."""
        metrics_path = self.out_dir / "metrics.csv" if self.out_dir else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            self.load(resolve_checkpoint(resume, self.out_dir))
            if metrics_path is not None:
                _truncate_metrics(metrics_path, self.epoch)
        elif metrics_path is not None:
            with open(metrics_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)
        history = []
        while self.epoch < self.cfg.epochs:
            stats = self.run_epoch()
            history.append(stats)
            if self.out_dir is not None:
                with open(metrics_path, "a", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(
                        [stats.epoch, repr(stats.mean_loss), repr(stats.align_acc), repr(stats.lr)]
                    )
                name = f"epoch_{stats.epoch}.ckpt"
                self.save(self.out_dir / name)
                tmp = self.out_dir / "latest.tmp"
                tmp.write_text(name + "\n")
                tmp.replace(self.out_dir / "latest")
            if on_epoch is not None:
                on_epoch(stats)
        return history


def resolve_checkpoint(ref: str | Path, out_dir: Path | None) -> Path:
    """``latest`` follows the pointer file in ``out_dir``; anything else is a path."""
    if str(ref) == "latest":
        if out_dir is None:
            raise ResumeError("resuming from 'latest' needs an output directory")
        pointer = out_dir / "latest"
        if not pointer.exists():
            raise ResumeError(f"no 'latest' pointer in {out_dir}")
        return out_dir / pointer.read_text().strip()
    p = Path(ref)
    if not p.exists():
        raise ResumeError(f"checkpoint {p} does not exist")
    return p


def _truncate_metrics(path: Path, epoch: int) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f)][1:]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(r for r in rows if int(r[0]) <= epoch)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"epoch": int(r["epoch"]), "mean_loss": float(r["mean_loss"]), "align_acc": float(r["align_acc"]), "lr": float(r["lr"])}
            for r in csv.DictReader(f)
        ]


def load_trained(path: str | Path) -> tuple[dict[str, CRCT], dict]:
    """Models from a training checkpoint, keyed by pipeline name ('model', or 'cls' and 'reg')."""
    arrays, meta = T.load_checkpoint(path)
    if meta.get("kind") != CKPT_KIND:
        raise ResumeError(f"{path} is not a training checkpoint")
    base = meta["model_config"]
    models = {}
    for name in meta["pipelines"]:
        d = dict(base)
        if name == "cls":
            d.update(lambda_reg=0.0, two_pipelines=False)
        elif name == "reg":
            d.update(lambda_cls=0.0, two_pipelines=False)
        m = CRCT(ModelConfig.from_dict(d), seed=0)
        m.load_arrays(arrays, prefix=f"{name}.model.")
        models[name] = m
    return models, meta


def train(
    specs: Sequence[ChartSpec],
    items: Sequence[QAItem],
    vocab: Vocab,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[Trainer, list[EpochStats]]:
    trainer = Trainer(specs, items, vocab, cfg, model_cfg, out_dir)
    history = trainer.fit(resume=resume, on_epoch=on_epoch)
    return trainer, history
