"""Oracle detector, vocabulary, and the two input sequences fed to the model."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .chartgen import ELEMENT_CLASSES, TEXT_CLASSES, VISUAL_CLASSES, BBox, ChartSpec, ConfigError, ElementSet

VOCAB_FORMAT_VERSION = 1

PAD, CLS, SEP, UNK, REG = "[PAD]", "[CLS]", "[SEP]", "[UNK]", "<R>"
SPECIALS = (PAD, CLS, SEP, UNK, REG)

VISUAL_TOKEN_CLASSES = ("global",) + VISUAL_CLASSES
TEXT_TOKEN_CLASSES = ("special",) + TEXT_CLASSES + ("question", "answer")
N_VISUAL_CLASSES = len(VISUAL_TOKEN_CLASSES)
N_TEXT_CLASSES = len(TEXT_TOKEN_CLASSES)

MAX_VISUAL = 64
MAX_TEXT = 128

# rgb(3) + w, h, aspect, cx, cy, orientation, direction + smoothed one-hot class
D_DET = 10 + len(ELEMENT_CLASSES)
LABEL_SMOOTHING = 0.1


class SequenceTooLong(ValueError):
    pass


# ---------------------------------------------------------------- detector


@dataclass(frozen=True)
class JitterConfig:
    sigma: float = 0.002
    drop: float = 0.0
    iou_keep: float = 0.5

    def validate(self) -> None:
        if self.sigma < 0:
            raise ConfigError(f"jitter sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.drop <= 1:
            raise ConfigError(f"drop probability must lie in [0, 1], got {self.drop}")


@dataclass
class Detection:
    element_class: str
    bbox: BBox
    text: str | None
    feature_vector: np.ndarray
    iou_with_gt: float
    source_index: int
    color: tuple | None = None
    series_index: int | None = None
    category_index: int | None = None

    @property
    def is_text(self) -> bool:
        return self.element_class in TEXT_CLASSES


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _jitter_box(box: BBox, noise: np.ndarray) -> BBox:
    x0, y0, x1, y1 = (float(np.clip(v + n, 0.0, 1.0)) for v, n in zip(box, noise))
    x0, x1 = min(x0, x1), max(x0, x1)
    y0, y1 = min(y0, y1), max(y0, y1)
    # keep a minimal extent so every detection has positive area
    eps = 1e-4
    if x1 - x0 < eps:
        x0, x1 = max(x0 - eps, 0.0), min(x1 + eps, 1.0)
    if y1 - y0 < eps:
        y0, y1 = max(y0 - eps, 0.0), min(y1 + eps, 1.0)
    return (x0, y0, x1, y1)


def handcrafted_feature(bbox: BBox, color, element_class: str, direction: int | None = None) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    rgb = np.asarray(color if color is not None else (0, 0, 0), dtype=float) / 255.0
    onehot = np.full(len(ELEMENT_CLASSES), LABEL_SMOOTHING / len(ELEMENT_CLASSES))
    onehot[ELEMENT_CLASSES.index(element_class)] += 1.0 - LABEL_SMOOTHING
    geo = [w, h, w / h, (x0 + x1) / 2, (y0 + y1) / 2, h / (h + w), float(direction or 0)]
    return np.concatenate([rgb, geo, onehot])


def oracle_detect(gt: ElementSet, noise: JitterConfig | None = None, seed: int = 0) -> list[Detection]:
    """Ground-truth elements with jittered boxes; weak textual detections are dropped."""
    noise = noise or JitterConfig()
    noise.validate()
    rng = np.random.default_rng([seed, gt.chart_id])
    dets = []
    for i, el in enumerate(gt.elements):
        # draw for every element so the stream does not depend on what is kept
        dropped = rng.random() < noise.drop
        jit = rng.normal(0.0, noise.sigma, size=4) if noise.sigma > 0 else np.zeros(4)
        if dropped:
            continue
        box = _jitter_box(el.bbox, jit) if noise.sigma > 0 else el.bbox
        score = iou(box, el.bbox)
        if el.is_text and not score > noise.iou_keep:
            continue
        dets.append(
            Detection(
                element_class=el.element_class,
                bbox=box,
                text=el.text,
                feature_vector=handcrafted_feature(box, el.color, el.element_class, el.direction),
                iou_with_gt=score,
                source_index=i,
                color=el.color,
                series_index=el.series_index,
                category_index=el.category_index,
            )
        )
    return dets


# ---------------------------------------------------------------- vocabulary

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    pad_id = property(lambda self: self.stoi[PAD])
    cls_id = property(lambda self: self.stoi[CLS])
    sep_id = property(lambda self: self.stoi[SEP])
    unk_id = property(lambda self: self.stoi[UNK])
    reg_id = property(lambda self: self.stoi[REG])

    def encode(self, text: str) -> list[int]:
        if text == REG:
            return [self.reg_id]
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"format_version": VOCAB_FORMAT_VERSION, "tokens": self.itos}, indent=0) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("format_version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported vocab format_version {d.get('format_version')}")
        return cls(d["tokens"])


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Specials first, then tokens by descending frequency, ties lexicographic."""
    counts: Counter[str] = Counter()
    n = 0
    for text in corpus:
        n += 1
        counts.update(tokenize(text))
    if n == 0:
        raise ValueError("cannot build a vocab from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class AblationFlags:
    drop_legend_marker: bool = False
    drop_text_class_emb: bool = False
    drop_visual_class_emb: bool = False
    visual_bbox_only: bool = False

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> AblationFlags:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        return cls(**d)


class VisualToken(NamedTuple):
    bbox4: tuple[float, ...]
    class_id: int
    det_feature: np.ndarray


class TextToken(NamedTuple):
    token_id: int
    position_index: int
    bbox4: tuple[float, ...]
    text_class_id: int


@dataclass
class EncodedSample:
    vis_bbox: np.ndarray  # (n_v, 4)
    vis_class: np.ndarray  # (n_v,)
    vis_feat: np.ndarray  # (n_v, D_DET)
    txt_ids: np.ndarray  # (n_t,)
    txt_pos: np.ndarray
    txt_bbox: np.ndarray  # (n_t, 4)
    txt_class: np.ndarray
    # ElementSet index behind each token, -1 for global/special/question/answer tokens
    vis_src: np.ndarray
    txt_src: np.ndarray
    is_reg_target: bool = False
    class_target: int = 0
    reg_target: float = 0.0
    sample_id: int = -1

    @property
    def n_visual(self) -> int:
        return len(self.vis_class)

    @property
    def n_text(self) -> int:
        return len(self.txt_ids)

    @property
    def visual_seq(self) -> list[VisualToken]:
        return [
            VisualToken(tuple(self.vis_bbox[i]), int(self.vis_class[i]), self.vis_feat[i]) for i in range(self.n_visual)
        ]

    @property
    def text_seq(self) -> list[TextToken]:
        return [
            TextToken(int(self.txt_ids[i]), int(self.txt_pos[i]), tuple(self.txt_bbox[i]), int(self.txt_class[i]))
            for i in range(self.n_text)
        ]


def encode_sample(
    spec: ChartSpec | None,
    dets: Sequence[Detection],
    question: str,
    answer: str,
    vocab: Vocab,
    ablation: AblationFlags | None = None,
    class_target: int = 0,
    reg_target: float | None = None,
    max_visual: int = MAX_VISUAL,
    max_text: int = MAX_TEXT,
    sample_id: int = -1,
) -> EncodedSample:
    """Build both sequences for one (chart, question, candidate answer) triple.

    ``answer`` is a candidate string or ``REG``. A positive ``REG`` sample must
    come with ``reg_target`` (normalized to [-1, 1]).
    """
    ab = ablation or AblationFlags()
    vis_bbox = [(0.0, 0.0, 1.0, 1.0)]
    vis_class = [VISUAL_TOKEN_CLASSES.index("global")]
    vis_feat = [np.zeros(D_DET)]
    vis_src = [-1]
    for d in dets:
        if d.is_text:
            continue
        if ab.drop_legend_marker and d.element_class == "legend_marker":
            continue
        vis_bbox.append(d.bbox)
        vis_class.append(0 if ab.drop_visual_class_emb else VISUAL_TOKEN_CLASSES.index(d.element_class))
        vis_feat.append(np.zeros(D_DET) if ab.visual_bbox_only else d.feature_vector)
        vis_src.append(d.source_index)
    if len(vis_class) > max_visual:
        raise SequenceTooLong(f"visual sequence of {len(vis_class)} tokens exceeds {max_visual}")

    zero = (0.0, 0.0, 0.0, 0.0)
    special = TEXT_TOKEN_CLASSES.index("special")
    ids, boxes, classes, srcs = [vocab.cls_id], [zero], [special], [-1]
    for d in dets:
        if not d.is_text:
            continue
        cls_id = 0 if ab.drop_text_class_emb else TEXT_TOKEN_CLASSES.index(d.element_class)
        toks = vocab.encode(d.text)
        ids += toks + [vocab.sep_id]
        boxes += [d.bbox] * len(toks) + [zero]
        classes += [cls_id] * len(toks) + [special]
        srcs += [d.source_index] * len(toks) + [-1]
    q = vocab.encode(question)
    a = vocab.encode(answer)
    q_cls = 0 if ab.drop_text_class_emb else TEXT_TOKEN_CLASSES.index("question")
    a_cls = 0 if ab.drop_text_class_emb else TEXT_TOKEN_CLASSES.index("answer")
    ids += q + [vocab.sep_id] + a
    boxes += [zero] * (len(q) + 1 + len(a))
    classes += [q_cls] * len(q) + [special] + [a_cls] * len(a)
    srcs += [-1] * (len(q) + 1 + len(a))
    if len(ids) > max_text:
        raise SequenceTooLong(f"text sequence of {len(ids)} tokens exceeds {max_text}")

    is_reg = answer == REG and class_target == 1
    if is_reg and reg_target is None:
        raise ValueError("positive <R> sample needs a regression target")
    return EncodedSample(
        vis_bbox=np.asarray(vis_bbox, dtype=float),
        vis_class=np.asarray(vis_class, dtype=np.int64),
        vis_feat=np.asarray(vis_feat, dtype=float),
        txt_ids=np.asarray(ids, dtype=np.int64),
        txt_pos=np.arange(len(ids), dtype=np.int64),
        txt_bbox=np.asarray(boxes, dtype=float),
        txt_class=np.asarray(classes, dtype=np.int64),
        vis_src=np.asarray(vis_src, dtype=np.int64),
        txt_src=np.asarray(srcs, dtype=np.int64),
        is_reg_target=is_reg,
        class_target=int(class_target),
        reg_target=float(reg_target) if is_reg else 0.0,
        sample_id=sample_id,
    )


@dataclass
class Batch:
    vis_bbox: np.ndarray  # (B, n_v, 4)
    vis_class: np.ndarray
    vis_feat: np.ndarray
    vis_mask: np.ndarray  # (B, n_v) bool, True on real tokens
    txt_ids: np.ndarray
    txt_pos: np.ndarray
    txt_bbox: np.ndarray
    txt_class: np.ndarray
    txt_mask: np.ndarray
    class_target: np.ndarray  # (B,)
    reg_target: np.ndarray
    is_reg: np.ndarray
    sample_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.vis_class.shape[0]


def collate(samples: Sequence[EncodedSample], pad_visual: int | None = None, pad_text: int | None = None) -> Batch:
    """Pad samples to the batch maxima (or the given lengths)."""
    if not samples:
        raise ValueError("cannot collate an empty batch")
    B = len(samples)
    nv = max(s.n_visual for s in samples) if pad_visual is None else pad_visual
    nt = max(s.n_text for s in samples) if pad_text is None else pad_text
    d_det = samples[0].vis_feat.shape[1]
    b = Batch(
        vis_bbox=np.zeros((B, nv, 4)),
        vis_class=np.zeros((B, nv), dtype=np.int64),
        vis_feat=np.zeros((B, nv, d_det)),
        vis_mask=np.zeros((B, nv), dtype=bool),
        txt_ids=np.zeros((B, nt), dtype=np.int64),
        txt_pos=np.zeros((B, nt), dtype=np.int64),
        txt_bbox=np.zeros((B, nt, 4)),
        txt_class=np.zeros((B, nt), dtype=np.int64),
        txt_mask=np.zeros((B, nt), dtype=bool),
        class_target=np.array([s.class_target for s in samples], dtype=float),
        reg_target=np.array([s.reg_target for s in samples], dtype=float),
        is_reg=np.array([s.is_reg_target for s in samples], dtype=bool),
        sample_ids=np.array([s.sample_id for s in samples], dtype=np.int64),
    )
    for i, s in enumerate(samples):
        v, t = s.n_visual, s.n_text
        if v > nv or t > nt:
            raise SequenceTooLong(f"sample {i} ({v}, {t}) does not fit padding ({nv}, {nt})")
        b.vis_bbox[i, :v] = s.vis_bbox
        b.vis_class[i, :v] = s.vis_class
        b.vis_feat[i, :v] = s.vis_feat
        b.vis_mask[i, :v] = True
        b.txt_ids[i, :t] = s.txt_ids
        b.txt_pos[i, :t] = s.txt_pos
        b.txt_bbox[i, :t] = s.txt_bbox
        b.txt_class[i, :t] = s.txt_class
        b.txt_mask[i, :t] = True
    return b


def corpus_texts(specs: Iterable[ChartSpec], questions: Iterable[str] = (), answers: Iterable[str] = ()) -> Iterator:
    for s in specs:
        yield s.title
        yield s.x_label
        yield s.y_label
        yield from s.x_categories
        yield from s.y_axis.tick_labels
        yield from (ser.legend_label for ser in s.series)
    yield from questions
    yield from answers
