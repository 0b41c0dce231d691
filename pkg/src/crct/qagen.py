"""Templated questions over a ChartSpec, with a brute-force answer oracle."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .chartgen import ChartSpec, ConfigError

FORMAT_VERSION = 1
CATEGORIES = ("structural", "data_retrieval", "reasoning")
ANSWER_KINDS = ("fixed_vocab", "chart_text", "numeric")
SLOT_NAMES = ("axis", "series", "category", "category2", "end", "extremum")

# integer answers up to this are classified, larger or non-integral ones regressed
MAX_CLASS_INT = 20
FIXED_VOCAB_ANSWERS = ("Yes", "No") + tuple(str(i) for i in range(MAX_CLASS_INT + 1))


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    template_id: str
    category: str
    answer_kind: str
    slots: tuple[str, ...]
    forms: tuple[str, ...]
    chart_types: tuple[str, ...] | None = None

    def applies_to(self, spec: ChartSpec) -> bool:
        if self.chart_types is not None and spec.chart_type not in self.chart_types:
            return False
        if "category2" in self.slots and spec.n_categories < 2:
            return False
        return True


@dataclass(frozen=True)
class TemplateCatalog:
    templates: tuple[Template, ...]

    def __post_init__(self):
        ids = [t.template_id for t in self.templates]
        if len(set(ids)) != len(ids):
            raise TemplateError("duplicate template ids in catalog")
        for t in self.templates:
            if not t.forms:
                raise TemplateError(f"template {t.template_id} has no surface forms")
            if t.category not in CATEGORIES:
                raise TemplateError(f"template {t.template_id}: unknown category {t.category}")
            if t.answer_kind not in ANSWER_KINDS:
                raise TemplateError(f"template {t.template_id}: unknown answer kind {t.answer_kind}")
            bad = set(t.slots) - set(SLOT_NAMES)
            if bad:
                raise TemplateError(f"template {t.template_id}: unknown slots {sorted(bad)}")

    def __getitem__(self, template_id: str) -> Template:
        for t in self.templates:
            if t.template_id == template_id:
                return t
        raise KeyError(f"unknown template {template_id!r}")

    def by_category(self, category: str) -> list[Template]:
        return [t for t in self.templates if t.category == category]

    @classmethod
    def from_dict(cls, d: dict) -> TemplateCatalog:
        if d.get("format_version") != FORMAT_VERSION:
            raise TemplateError(f"unsupported catalog format_version {d.get('format_version')}")
        return cls(
            tuple(
                Template(
                    template_id=t["id"],
                    category=t["category"],
                    answer_kind=t["answer_kind"],
                    slots=tuple(t.get("slots", ())),
                    forms=tuple(t["forms"]),
                    chart_types=tuple(t["chart_types"]) if t.get("chart_types") else None,
                )
                for t in d["templates"]
            )
        )


def load_catalog(path: str | Path | None = None) -> TemplateCatalog:
    """Load a template catalog; defaults to the one shipped with the package."""
    if path is None:
        text = resources.files("crct").joinpath("data/templates.v1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return TemplateCatalog.from_dict(json.loads(text))


@dataclass(frozen=True)
class QAItem:
    qa_id: int
    chart_id: int
    category: str
    template_id: str
    question_text: str
    answer_kind: str
    answer_text: str | None = None
    answer_value: float | None = None
    slots: dict = field(default_factory=dict, hash=False, compare=True)
    fills: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category}")
        if self.answer_kind == "numeric":
            if self.answer_value is None or self.answer_text is not None:
                raise ValueError("numeric items carry answer_value and no answer_text")
        elif self.answer_kind in ("fixed_vocab", "chart_text"):
            if self.answer_text is None or self.answer_value is not None:
                raise ValueError(f"{self.answer_kind} items carry answer_text only")
        else:
            raise ValueError(f"unknown answer kind {self.answer_kind}")

    def to_dict(self) -> dict:
        d = {
            "qa_id": self.qa_id,
            "chart_id": self.chart_id,
            "category": self.category,
            "template_id": self.template_id,
            "question_text": self.question_text,
            "answer_kind": self.answer_kind,
            "slots": dict(self.slots),
            "fills": dict(self.fills),
        }
        if self.answer_text is not None:
            d["answer_text"] = self.answer_text
        if self.answer_value is not None:
            d["answer_value"] = self.answer_value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> QAItem:
        return cls(
            qa_id=int(d["qa_id"]),
            chart_id=int(d["chart_id"]),
            category=d["category"],
            template_id=d["template_id"],
            question_text=d["question_text"],
            answer_kind=d["answer_kind"],
            answer_text=d.get("answer_text"),
            answer_value=d.get("answer_value"),
            slots=d.get("slots", {}),
            fills=d.get("fills", {}),
        )


# ---------------------------------------------------------------- oracle


def route_number(x: float) -> tuple[str, str | None, float | None]:
    """Small non-negative integers are classified; everything else is regressed."""
    if float(x).is_integer() and 0 <= x <= MAX_CLASS_INT:
        return "fixed_vocab", str(int(x)), None
    return "numeric", None, float(x)


def _slot_index(slots: dict, name: str, n: int) -> int:
    if name not in slots:
        raise TemplateError(f"missing slot {name!r}")
    i = slots[name]
    if not isinstance(i, (int, np.integer)) or not 0 <= i < n:
        raise TemplateError(f"slot {name}={i!r} out of range [0, {n})")
    return int(i)


def oracle_answer(spec: ChartSpec, template_id: str, slots: dict) -> tuple[str, str | None, float | None]:
    """Ground-truth ``(answer_kind, answer_text, answer_value)`` for one instantiation."""
    if not spec.series or any(not s.values for s in spec.series):
        raise TemplateError("chart has an empty series")
    ns, nc = spec.n_series, spec.n_categories

    if template_id in ("S_bar_colors", "S_lines", "S_legend_count"):
        return route_number(ns)
    if template_id == "S_xtick_count":
        return route_number(nc)
    if template_id == "D_title":
        return "chart_text", spec.title, None
    if template_id == "D_axis_label":
        axis = slots.get("axis")
        if axis not in ("x", "y"):
            raise TemplateError(f"slot axis={axis!r} must be 'x' or 'y'")
        return "chart_text", spec.x_label if axis == "x" else spec.y_label, None
    if template_id == "D_tick_end":
        end = slots.get("end")
        if end not in ("first", "last"):
            raise TemplateError(f"slot end={end!r} must be 'first' or 'last'")
        return "chart_text", spec.x_categories[0 if end == "first" else -1], None

    vals = spec.series[_slot_index(slots, "series", ns)].values
    if template_id == "D_value":
        return route_number(vals[_slot_index(slots, "category", nc)])
    if template_id == "R_average":
        return route_number(statistics.fmean(vals))
    if template_id == "R_range_diff":
        return route_number(max(vals) - min(vals))
    if template_id == "R_argext":
        ext = slots.get("extremum")
        if ext not in ("max", "min"):
            raise TemplateError(f"slot extremum={ext!r} must be 'max' or 'min'")
        target = max(vals) if ext == "max" else min(vals)
        hits = [i for i, v in enumerate(vals) if v == target]
        if len(hits) != 1:
            raise TemplateError("extremum is not unique")
        return "chart_text", spec.x_categories[hits[0]], None
    if template_id == "R_compare":
        a = vals[_slot_index(slots, "category", nc)]
        b = vals[_slot_index(slots, "category2", nc)]
        if a == b:
            raise TemplateError("compared values are equal")
        return "fixed_vocab", "Yes" if a > b else "No", None
    raise TemplateError(f"no oracle for template {template_id!r}")


# ---------------------------------------------------------------- generation


@dataclass
class QAGenConfig:
    mixture: dict = field(
        default_factory=lambda: {"structural": 0.3, "data_retrieval": 0.35, "reasoning": 0.35}
    )
    # trailing surface forms of each template reserved for paraphrase tests
    held_out_forms: int = 2
    # "primary": always the first form; "train": any non-held-out form
    form_policy: str = "primary"
    max_tries: int = 50

    def validate(self) -> None:
        if set(self.mixture) - set(CATEGORIES):
            raise ConfigError(f"unknown categories in mixture: {sorted(set(self.mixture) - set(CATEGORIES))}")
        if any(w < 0 for w in self.mixture.values()) or sum(self.mixture.values()) <= 0:
            raise ConfigError("mixture weights must be non-negative with positive sum")
        if self.form_policy not in ("primary", "train"):
            raise ConfigError(f"unknown form_policy {self.form_policy!r}")
        if self.held_out_forms < 0:
            raise ConfigError("held_out_forms must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> QAGenConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown QA generator config keys {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _train_forms(t: Template, cfg: QAGenConfig) -> tuple[str, ...]:
    keep = len(t.forms) - cfg.held_out_forms
    return t.forms[: max(keep, 1)]


def _held_out_forms(t: Template, cfg: QAGenConfig) -> tuple[str, ...]:
    keep = max(len(t.forms) - cfg.held_out_forms, 1)
    return t.forms[keep:]


def _draw_slots(t: Template, spec: ChartSpec, rng: np.random.Generator) -> dict:
    slots: dict = {}
    for name in t.slots:
        if name == "axis":
            slots[name] = ("x", "y")[rng.integers(2)]
        elif name == "series":
            slots[name] = int(rng.integers(spec.n_series))
        elif name == "category":
            slots[name] = int(rng.integers(spec.n_categories))
        elif name == "category2":
            others = [c for c in range(spec.n_categories) if c != slots.get("category")]
            slots[name] = int(others[rng.integers(len(others))])
        elif name == "end":
            slots[name] = ("first", "last")[rng.integers(2)]
        elif name == "extremum":
            slots[name] = ("max", "min")[rng.integers(2)]
    return slots


def slot_fills(spec: ChartSpec, slots: dict) -> dict:
    """Strings substituted into surface forms."""
    f = {"x_label": spec.x_label, "y_label": spec.y_label, "title": spec.title}
    if "axis" in slots:
        f["axis"] = slots["axis"].upper()
        f["axis_lower"] = slots["axis"]
        f["axis_dir"] = "horizontal" if slots["axis"] == "x" else "vertical"
    if "series" in slots:
        f["legend"] = spec.series[slots["series"]].legend_label
    if "category" in slots:
        f["category"] = spec.x_categories[slots["category"]]
    if "category2" in slots:
        f["category2"] = spec.x_categories[slots["category2"]]
    if "end" in slots:
        f["end"] = slots["end"]
    if "extremum" in slots:
        f["extremum"] = "maximum" if slots["extremum"] == "max" else "minimum"
        f["extremum_adj"] = "highest" if slots["extremum"] == "max" else "lowest"
    return f


def instantiate(spec: ChartSpec, t: Template, slots: dict, form: str, qa_id: int) -> QAItem:
    kind, text, value = oracle_answer(spec, t.template_id, slots)
    fills = slot_fills(spec, slots)
    return QAItem(
        qa_id=qa_id,
        chart_id=spec.chart_id,
        category=t.category,
        template_id=t.template_id,
        question_text=form.format(**fills),
        answer_kind=kind,
        answer_text=text,
        answer_value=value,
        slots=slots,
        fills=fills,
    )


def generate_questions(
    spec: ChartSpec,
    catalog: TemplateCatalog,
    seed: int,
    per_chart: int,
    cfg: QAGenConfig | None = None,
    first_qa_id: int | None = None,
) -> list[QAItem]:
    """Sample ``per_chart`` questions for one chart; deterministic in ``seed``.

    Categories follow ``cfg.mixture``. Instantiations the oracle rejects (ties,
    inapplicable templates) are skipped and redrawn within the same category.
    """
    cfg = cfg or QAGenConfig()
    cfg.validate()
    if per_chart < 1:
        raise ValueError("per_chart must be >= 1")
    if not catalog.templates:
        raise TemplateError("empty template catalog")
    rng = np.random.default_rng([seed, spec.chart_id])
    cats = [c for c in CATEGORIES if cfg.mixture.get(c, 0) > 0]
    weights = np.array([cfg.mixture[c] for c in cats], dtype=float)
    weights /= weights.sum()
    base = spec.chart_id * per_chart if first_qa_id is None else first_qa_id

    items: list[QAItem] = []
    seen: set[tuple] = set()
    for i in range(per_chart):
        cat = cats[rng.choice(len(cats), p=weights)]
        pool = [t for t in catalog.by_category(cat) if t.applies_to(spec)]
        if not pool:
            raise TemplateError(f"no template of category {cat} applies to a {spec.chart_type} chart")
        fallback = None
        for _ in range(cfg.max_tries):
            t = pool[rng.integers(len(pool))]
            slots = _draw_slots(t, spec, rng)
            forms = t.forms[:1] if cfg.form_policy == "primary" else _train_forms(t, cfg)
            form = forms[rng.integers(len(forms))]
            try:
                item = instantiate(spec, t, slots, form, base + i)
            except TemplateError:
                continue
            key = (t.template_id, tuple(sorted(slots.items())))
            if key not in seen:
                seen.add(key)
                break
            fallback = fallback or item
        else:
            if fallback is None:
                raise TemplateError(f"could not instantiate any {cat} question for chart {spec.chart_id}")
            item = fallback
        items.append(item)
    return items


def paraphrase(item: QAItem, catalog: TemplateCatalog, seed: int, held_out: bool = True,
               cfg: QAGenConfig | None = None) -> QAItem:
    """Same question and answer, different surface form.

    With ``held_out`` the form is drawn from the forms reserved for testing.
    """
    cfg = cfg or QAGenConfig()
    t = catalog[item.template_id]
    if len(t.forms) < 2:
        raise TemplateError(f"template {t.template_id} has a single surface form")
    pool = _held_out_forms(t, cfg) if held_out else t.forms
    options = [f for f in pool if f.format(**item.fills) != item.question_text]
    if not options:
        options = [f for f in t.forms if f.format(**item.fills) != item.question_text]
    rng = np.random.default_rng([seed, item.qa_id])
    form = options[rng.integers(len(options))]
    return QAItem(
        qa_id=item.qa_id,
        chart_id=item.chart_id,
        category=item.category,
        template_id=item.template_id,
        question_text=form.format(**item.fills),
        answer_kind=item.answer_kind,
        answer_text=item.answer_text,
        answer_value=item.answer_value,
        slots=item.slots,
        fills=item.fills,
    )


# ---------------------------------------------------------------- QA file


def write_qa(path, items: Sequence[QAItem]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            rec = {"format_version": FORMAT_VERSION, **it.to_dict()}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_qa(path) -> Iterator[QAItem]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.pop("format_version", None) != FORMAT_VERSION:
                raise ValueError(f"{path}:{lineno}: unsupported format_version")
            yield QAItem.from_dict(rec)
