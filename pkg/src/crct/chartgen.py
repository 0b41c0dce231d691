"""Symbolic chart synthesis and element annotation.

Charts are never rasterized. A :class:`ChartSpec` holds the data and all text
strings; :func:`annotate_elements` lays it out on the unit square (origin top
left, y pointing down) and returns one :class:`Element` per annotated object.

Element classes are semantic: ``x_*`` always refers to the category axis and
``y_*`` to the value axis, also for horizontal bar charts where the value
axis is drawn horizontally.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1

CHART_TYPES = ("vbar", "hbar", "line", "dotline")

TEXT_CLASSES = ("title", "x_label", "y_label", "x_ticklabel", "y_ticklabel", "legend_label")
VISUAL_CLASSES = ("legend_marker", "bar", "line_segment", "dot", "sub_tick")
ELEMENT_CLASSES = TEXT_CLASSES + VISUAL_CLASSES
DATA_CLASSES = ("bar", "line_segment", "dot")

RGB = tuple[int, int, int]
BBox = tuple[float, float, float, float]


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------- domain types


@dataclass(frozen=True)
class AxisSpec:
    min_value: float
    max_value: float
    major_tick_spacing: float
    sub_tick_spacing: float
    tick_labels: tuple[str, ...]

    def __post_init__(self):
        if not self.max_value > self.min_value:
            raise ValueError(f"axis max {self.max_value} must exceed min {self.min_value}")
        if not 0 < self.sub_tick_spacing <= self.major_tick_spacing:
            raise ValueError(
                f"need 0 < sub_tick_spacing ({self.sub_tick_spacing}) <= major ({self.major_tick_spacing})"
            )
        n = major_tick_count(self.min_value, self.max_value, self.major_tick_spacing)
        if len(self.tick_labels) != n:
            raise ValueError(f"axis has {len(self.tick_labels)} tick labels, expected {n}")

    @property
    def span(self) -> float:
        return self.max_value - self.min_value

    def major_ticks(self) -> list[float]:
        return [self.min_value + i * self.major_tick_spacing for i in range(len(self.tick_labels))]

    def sub_ticks(self) -> list[float]:
        n = math.floor(self.span / self.sub_tick_spacing + 1e-9)
        return [self.min_value + i * self.sub_tick_spacing for i in range(n + 1)]


def major_tick_count(lo: float, hi: float, spacing: float) -> int:
    # small slack so exact multiples are not lost to rounding
    return math.floor((hi - lo) / spacing + 1e-9) + 1


@dataclass(frozen=True)
class Series:
    legend_label: str
    color: RGB
    values: tuple[float, ...]


@dataclass(frozen=True)
class ChartSpec:
    chart_id: int
    chart_type: str
    title: str
    x_label: str
    y_label: str
    x_categories: tuple[str, ...]
    series: tuple[Series, ...]
    y_axis: AxisSpec

    def __post_init__(self):
        if self.chart_type not in CHART_TYPES:
            raise ValueError(f"unknown chart type {self.chart_type!r}")
        if not self.series:
            raise ValueError("chart needs at least one series")
        ncat = len(self.x_categories)
        lo, hi = self.y_axis.min_value, self.y_axis.max_value
        for s in self.series:
            if len(s.values) != ncat:
                raise ValueError(f"series {s.legend_label!r} has {len(s.values)} values for {ncat} categories")
            for v in s.values:
                if not lo <= v <= hi:
                    raise ValueError(f"value {v} outside axis range [{lo}, {hi}]")
        labels = [s.legend_label for s in self.series]
        colors = [s.color for s in self.series]
        if len(set(labels)) != len(labels) or len(set(colors)) != len(colors):
            raise ValueError("legend labels and colors must be pairwise distinct")

    @property
    def n_series(self) -> int:
        return len(self.series)

    @property
    def n_categories(self) -> int:
        return len(self.x_categories)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_categories"] = list(self.x_categories)
        d["y_axis"]["tick_labels"] = list(self.y_axis.tick_labels)
        d["series"] = [
            {"legend_label": s.legend_label, "color": list(s.color), "values": list(s.values)} for s in self.series
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ChartSpec:
        ax = d["y_axis"]
        return cls(
            chart_id=int(d["chart_id"]),
            chart_type=d["chart_type"],
            title=d["title"],
            x_label=d["x_label"],
            y_label=d["y_label"],
            x_categories=tuple(d["x_categories"]),
            series=tuple(
                Series(s["legend_label"], tuple(int(c) for c in s["color"]), tuple(float(v) for v in s["values"]))
                for s in d["series"]
            ),
            y_axis=AxisSpec(
                float(ax["min_value"]),
                float(ax["max_value"]),
                float(ax["major_tick_spacing"]),
                float(ax["sub_tick_spacing"]),
                tuple(ax["tick_labels"]),
            ),
        )


@dataclass(frozen=True)
class Element:
    element_class: str
    bbox: BBox
    text: str | None = None
    color: RGB | None = None
    series_index: int | None = None
    category_index: int | None = None
    # line segments only: +1 rising, -1 falling, 0 flat (left to right)
    direction: int | None = None

    def __post_init__(self):
        if self.element_class not in ELEMENT_CLASSES:
            raise ValueError(f"unknown element class {self.element_class!r}")
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox} for {self.element_class}")
        if (self.text is not None) != (self.element_class in TEXT_CLASSES):
            raise ValueError(f"text must be present iff class is textual ({self.element_class})")
        if self.element_class == "legend_marker" and (self.color is None or self.series_index is None):
            raise ValueError("legend_marker needs color and series_index")

    @property
    def is_text(self) -> bool:
        return self.element_class in TEXT_CLASSES

    def to_dict(self) -> dict:
        d = {"element_class": self.element_class, "bbox": list(self.bbox)}
        for k in ("text", "color", "series_index", "category_index", "direction"):
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v) if k == "color" else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Element:
        return cls(
            element_class=d["element_class"],
            bbox=tuple(float(v) for v in d["bbox"]),
            text=d.get("text"),
            color=tuple(d["color"]) if d.get("color") is not None else None,
            series_index=d.get("series_index"),
            category_index=d.get("category_index"),
            direction=d.get("direction"),
        )


@dataclass(frozen=True)
class ElementSet:
    chart_id: int
    elements: tuple[Element, ...]

    def of_class(self, cls: str) -> list[Element]:
        return [e for e in self.elements if e.element_class == cls]

    def to_dict(self) -> dict:
        return {"chart_id": self.chart_id, "elements": [e.to_dict() for e in self.elements]}

    @classmethod
    def from_dict(cls, d: dict) -> ElementSet:
        return cls(int(d["chart_id"]), tuple(Element.from_dict(e) for e in d["elements"]))


# ---------------------------------------------------------------- generation config

MEASURES = ("Rate", "Share", "Amount", "Number", "Percentage", "Value", "Cost", "Volume", "Index", "Level")
ADJECTIVES = (
    "primary", "secondary", "urban", "rural", "net", "total", "annual", "public",
    "private", "female", "male", "domestic", "foreign", "agricultural", "industrial",
)
NOUNS = (
    "completion", "enrollment", "exports", "imports", "population", "emissions", "expenditure",
    "revenue", "credit", "employment", "production", "consumption", "investment", "savings", "debt",
)
PLACES = (
    "Bolivia", "Kenya", "Norway", "Chile", "Vietnam", "Ghana", "Peru", "Nepal", "Canada",
    "Egypt", "Finland", "Morocco", "Uruguay", "Latvia", "Malawi", "Jordan",
)
LEGEND_WORDS = (
    "Male", "Female", "Rural", "Urban", "Primary", "Secondary", "Tertiary", "Public", "Private",
    "Imports", "Exports", "Services", "Industry", "Agriculture", "Domestic", "Foreign",
)
X_AXES = {
    "Year": None,
    "Country": PLACES,
    "Sector": ("Energy", "Health", "Transport", "Mining", "Tourism", "Housing", "Water", "Education"),
}
PALETTE: tuple[RGB, ...] = (
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75),
    (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207), (0, 0, 128), (128, 128, 0),
)


@dataclass
class GeneratorConfig:
    chart_types: tuple[str, ...] = CHART_TYPES
    series_count: tuple[int, int] = (1, 3)
    category_count: tuple[int, int] = (3, 6)
    magnitude: tuple[float, float] = (10.0, 1e6)
    major_intervals: tuple[int, int] = (4, 8)
    sub_ticks_per_major: int = 2
    # lowest value drawn, as a fraction of the axis span above its minimum
    value_floor: float = 0.05
    value_decimals: int = 2
    year_start: tuple[int, int] = (1960, 2010)
    measures: tuple[str, ...] = MEASURES
    adjectives: tuple[str, ...] = ADJECTIVES
    nouns: tuple[str, ...] = NOUNS
    places: tuple[str, ...] = PLACES
    legend_words: tuple[str, ...] = LEGEND_WORDS
    palette: tuple[RGB, ...] = PALETTE

    def validate(self) -> None:
        for name in ("measures", "adjectives", "nouns", "places", "legend_words", "palette", "chart_types"):
            if not getattr(self, name):
                raise ConfigError(f"generator config: {name} is empty")
        for name in ("series_count", "category_count", "magnitude", "major_intervals", "year_start"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"generator config: {name} range {lo}>{hi}")
        if self.series_count[0] < 1 or self.category_count[0] < 2:
            raise ConfigError("need at least 1 series and 2 categories")
        if self.magnitude[0] <= 0:
            raise ConfigError("magnitude range must be positive")
        if self.series_count[1] > min(len(self.palette), len(self.legend_words)):
            raise ConfigError("not enough colors/legend words for the series-count range")
        if self.sub_ticks_per_major < 1:
            raise ConfigError("sub_ticks_per_major must be >= 1")
        if not 0 <= self.value_floor < 1:
            raise ConfigError("value_floor must lie in [0, 1)")
        bad = set(self.chart_types) - set(CHART_TYPES)
        if bad:
            raise ConfigError(f"unknown chart types {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator config keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k == "palette":
                v = tuple(tuple(c) for c in v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[k] = v
        return cls(**kw)


NICE_STEPS = (1.0, 2.0, 5.0)


def format_number(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return f"{v:.10g}"


def _nice_axis(data_max: float, intervals: tuple[int, int], subs: int) -> AxisSpec:
    lo_n, hi_n = intervals
    k = math.floor(math.log10(data_max / hi_n))
    while True:
        for base in NICE_STEPS:
            step = base * 10.0**k
            n = math.ceil(data_max / step - 1e-12)
            if lo_n <= n <= hi_n:
                step = float(round(step, 12))
                top = n * step
                labels = tuple(format_number(i * step) for i in range(n + 1))
                return AxisSpec(0.0, top, step, step / subs, labels)
        k += 1
        if k > 20:
            raise ConfigError(f"no nice axis for data max {data_max} with {intervals} intervals")


def synthesize_chart(seed: int, cfg: GeneratorConfig, chart_id: int | None = None) -> ChartSpec:
    """Draw one chart. Deterministic in ``(seed, cfg)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    chart_type = cfg.chart_types[rng.integers(len(cfg.chart_types))]
    n_series = int(rng.integers(cfg.series_count[0], cfg.series_count[1] + 1))
    n_cat = int(rng.integers(cfg.category_count[0], cfg.category_count[1] + 1))

    # axis scale: log-uniform magnitude across decades
    lo_m, hi_m = np.log10(cfg.magnitude[0]), np.log10(cfg.magnitude[1])
    data_max = float(10.0 ** rng.uniform(lo_m, hi_m))
    axis = _nice_axis(data_max, cfg.major_intervals, cfg.sub_ticks_per_major)

    x_label = list(X_AXES)[rng.integers(len(X_AXES))]
    if x_label == "Year":
        start = int(rng.integers(cfg.year_start[0], cfg.year_start[1] + 1))
        cats = tuple(str(start + i) for i in range(n_cat))
    else:
        pool = cfg.places if x_label == "Country" else X_AXES[x_label]
        if len(pool) < n_cat:
            raise ConfigError(f"pool for {x_label} has {len(pool)} entries, need {n_cat}")
        idx = rng.choice(len(pool), size=n_cat, replace=False)
        cats = tuple(pool[i] for i in sorted(idx))

    measure = cfg.measures[rng.integers(len(cfg.measures))]
    adj = cfg.adjectives[rng.integers(len(cfg.adjectives))]
    noun = cfg.nouns[rng.integers(len(cfg.nouns))]
    place = cfg.places[rng.integers(len(cfg.places))]
    y_label = f"{measure} of {adj} {noun}"
    title = f"{measure} of {adj} {noun} in {place}"

    legend_idx = rng.choice(len(cfg.legend_words), size=n_series, replace=False)
    color_idx = rng.choice(len(cfg.palette), size=n_series, replace=False)
    lo = axis.min_value + cfg.value_floor * axis.span
    hi = min(data_max, axis.max_value)
    series = []
    for s in range(n_series):
        raw = rng.uniform(lo, hi, size=n_cat)
        vals = tuple(round(float(v), cfg.value_decimals) for v in raw)
        series.append(Series(cfg.legend_words[legend_idx[s]], tuple(cfg.palette[color_idx[s]]), vals))

    return ChartSpec(
        chart_id=seed if chart_id is None else chart_id,
        chart_type=chart_type,
        title=title,
        x_label=x_label,
        y_label=y_label,
        x_categories=cats,
        series=tuple(series),
        y_axis=axis,
    )


def chart_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_corpus(n: int, seed: int, cfg: GeneratorConfig, start_id: int = 0) -> list[ChartSpec]:
    return [synthesize_chart(chart_seed(seed, i), cfg, chart_id=start_id + i) for i in range(n)]


# ---------------------------------------------------------------- normalization


def _check_axis(axis: AxisSpec) -> None:
    if not axis.max_value > axis.min_value:
        raise ValueError(f"degenerate axis [{axis.min_value}, {axis.max_value}]")


def normalize_value(v: float, axis: AxisSpec) -> float:
    """Affine map of the axis range onto [-1, 1]."""
    _check_axis(axis)
    return (v - axis.min_value) / (axis.max_value - axis.min_value) * 2.0 - 1.0


def denormalize_value(r: float, axis: AxisSpec) -> float:
    _check_axis(axis)
    return (r + 1.0) / 2.0 * (axis.max_value - axis.min_value) + axis.min_value


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class LayoutConfig:
    plot_rect: BBox = (0.16, 0.20, 0.95, 0.84)
    char_width: float = 0.011
    text_height: float = 0.028
    max_text_width: float = 0.6
    group_fill: float = 0.8
    legend_top: float = 0.09
    legend_slot: float = 0.26
    marker_size: float = 0.02
    dot_radius: float = 0.006
    line_pad: float = 0.003
    sub_tick_length: float = 0.01
    sub_tick_pad: float = 0.002

    def rect(self) -> BBox:
        x0, y0, x1, y1 = self.plot_rect
        if not (x1 > x0 and y1 > y0):
            raise LayoutError(f"plotting rectangle {self.plot_rect} has zero area")
        return self.plot_rect


def _text_box(text: str, cx: float, cy: float, layout: LayoutConfig, vertical: bool = False) -> BBox:
    w = min(layout.char_width * max(len(text), 1), layout.max_text_width)
    h = layout.text_height
    if vertical:
        w, h = h, w
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
    return (x0, y0, x1, y1)


def _value_frac(v: float, axis: AxisSpec) -> float:
    return (v - axis.min_value) / (axis.max_value - axis.min_value)


def value_position(v: float, axis: AxisSpec, layout: LayoutConfig, horizontal: bool) -> float:
    """Canvas coordinate of data value ``v`` along the value axis."""
    x0, y0, x1, y1 = layout.rect()
    f = _value_frac(v, axis)
    return x0 + f * (x1 - x0) if horizontal else y1 - f * (y1 - y0)


def position_value(p: float, axis: AxisSpec, layout: LayoutConfig, horizontal: bool) -> float:
    x0, y0, x1, y1 = layout.rect()
    f = (p - x0) / (x1 - x0) if horizontal else (y1 - p) / (y1 - y0)
    return axis.min_value + f * (axis.max_value - axis.min_value)


def annotate_elements(spec: ChartSpec, layout: LayoutConfig | None = None) -> ElementSet:
    """Lay out ``spec`` and return every annotated element in a fixed order."""
    layout = layout or LayoutConfig()
    rx0, ry0, rx1, ry1 = layout.rect()
    horizontal = spec.chart_type == "hbar"
    ax = spec.y_axis
    els: list[Element] = []

    els.append(Element("title", _text_box(spec.title, 0.5, 0.04, layout), text=spec.title))
    if horizontal:
        xl_box = _text_box(spec.x_label, 0.02, (ry0 + ry1) / 2, layout, vertical=True)
        yl_box = _text_box(spec.y_label, (rx0 + rx1) / 2, 0.96, layout)
    else:
        xl_box = _text_box(spec.x_label, (rx0 + rx1) / 2, 0.96, layout)
        yl_box = _text_box(spec.y_label, 0.02, (ry0 + ry1) / 2, layout, vertical=True)
    els.append(Element("x_label", xl_box, text=spec.x_label))
    els.append(Element("y_label", yl_box, text=spec.y_label))

    ncat = spec.n_categories
    cat_len = ((ry1 - ry0) if horizontal else (rx1 - rx0)) / ncat

    def cat_center(c: int) -> float:
        return (ry0 if horizontal else rx0) + (c + 0.5) * cat_len

    for c, name in enumerate(spec.x_categories):
        if horizontal:
            box = _text_box(name, rx0 - 0.07, cat_center(c), layout)
        else:
            box = _text_box(name, cat_center(c), ry1 + 0.03, layout)
        els.append(Element("x_ticklabel", box, text=name, category_index=c))
    for v, lab in zip(ax.major_ticks(), ax.tick_labels):
        p = value_position(v, ax, layout, horizontal)
        box = _text_box(lab, p, ry1 + 0.03, layout) if horizontal else _text_box(lab, rx0 - 0.05, p, layout)
        els.append(Element("y_ticklabel", box, text=lab))

    for s, ser in enumerate(spec.series):
        mx = 0.12 + s * layout.legend_slot
        m = layout.marker_size
        ly = layout.legend_top
        els.append(Element("legend_marker", (mx, ly - m / 2, mx + m, ly + m / 2), color=ser.color, series_index=s))
        w = min(layout.char_width * len(ser.legend_label), layout.legend_slot - m - 0.02)
        lx = mx + m + 0.01
        els.append(
            Element("legend_label", (lx, ly - layout.text_height / 2, lx + w, ly + layout.text_height / 2),
                    text=ser.legend_label, series_index=s)
        )

    for v in ax.sub_ticks():
        p = value_position(v, ax, layout, horizontal)
        L, d = layout.sub_tick_length, layout.sub_tick_pad
        box = (p - d, ry1, p + d, ry1 + L) if horizontal else (rx0 - L, p - d, rx0, p + d)
        els.append(Element("sub_tick", box))

    if spec.chart_type in ("vbar", "hbar"):
        ns = spec.n_series
        bw = cat_len * layout.group_fill / ns
        for s, ser in enumerate(spec.series):
            for c, v in enumerate(ser.values):
                start = (ry0 if horizontal else rx0) + c * cat_len + cat_len * (1 - layout.group_fill) / 2 + s * bw
                p = value_position(v, ax, layout, horizontal)
                box = (rx0, start, p, start + bw) if horizontal else (start, p, start + bw, ry1)
                els.append(Element("bar", box, color=ser.color, series_index=s, category_index=c))
    elif spec.chart_type == "line":
        pad = layout.line_pad
        for s, ser in enumerate(spec.series):
            for c in range(ncat - 1):
                a, b = ser.values[c], ser.values[c + 1]
                pa, pb = value_position(a, ax, layout, False), value_position(b, ax, layout, False)
                box = (cat_center(c), min(pa, pb) - pad, cat_center(c + 1), max(pa, pb) + pad)
                direction = (b > a) - (b < a)
                els.append(Element("line_segment", box, color=ser.color, series_index=s, category_index=c,
                                   direction=direction))
    else:
        r = layout.dot_radius
        for s, ser in enumerate(spec.series):
            for c, v in enumerate(ser.values):
                p = value_position(v, ax, layout, False)
                cx = cat_center(c)
                els.append(Element("dot", (cx - r, p - r, cx + r, p + r), color=ser.color, series_index=s,
                                   category_index=c))
    return ElementSet(spec.chart_id, tuple(els))


def values_from_element(el: Element, axis: AxisSpec, layout: LayoutConfig | None = None,
                        chart_type: str = "vbar") -> tuple[float, ...]:
    """Invert the layout: data value(s) encoded by a bar, dot, or line segment.

    Line segments give ``(left, right)`` endpoint values; bars and dots give one value.
    """
    layout = layout or LayoutConfig()
    x0, y0, x1, y1 = el.bbox
    if el.element_class == "bar":
        if chart_type == "hbar":
            return (position_value(x1, axis, layout, True),)
        return (position_value(y0, axis, layout, False),)
    if el.element_class == "dot":
        return (position_value((y0 + y1) / 2, axis, layout, False),)
    if el.element_class == "line_segment":
        top = position_value(y0 + layout.line_pad, axis, layout, False)
        bottom = position_value(y1 - layout.line_pad, axis, layout, False)
        if el.direction is not None and el.direction < 0:
            return (top, bottom)
        return (bottom, top)
    raise ValueError(f"{el.element_class} elements carry no data value")


# ---------------------------------------------------------------- dataset file


def chart_record(spec: ChartSpec, elements: ElementSet) -> str:
    rec = {"format_version": FORMAT_VERSION, "chart": spec.to_dict(), "elements": elements.to_dict()}
    return json.dumps(rec, sort_keys=True)


def write_charts(path, items: Sequence[tuple[ChartSpec, ElementSet]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for spec, els in items:
            f.write(chart_record(spec, els) + "\n")


def read_charts(path) -> Iterator[tuple[ChartSpec, ElementSet]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"{path}:{lineno}: unsupported format_version {rec.get('format_version')}")
            yield ChartSpec.from_dict(rec["chart"]), ElementSet.from_dict(rec["elements"])
