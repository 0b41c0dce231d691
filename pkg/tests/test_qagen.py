import dataclasses
import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crct.chartgen import GeneratorConfig, annotate_elements, generate_corpus, synthesize_chart
from crct.qagen import (
    CATEGORIES,
    FIXED_VOCAB_ANSWERS,
    QAGenConfig,
    QAItem,
    TemplateError,
    generate_questions,
    load_catalog,
    oracle_answer,
    paraphrase,
    read_qa,
    route_number,
    write_qa,
)
from qa_oracle import brute_force_answer

CAT = load_catalog()
CFG = GeneratorConfig()


def _spec(chart_type="vbar", values=((3.0, 7.0),), categories=("2000", "2001")):
    s = synthesize_chart(1, dataclasses.replace(CFG, chart_types=(chart_type,), series_count=(len(values),) * 2,
                                                category_count=(len(categories),) * 2))
    series = tuple(dataclasses.replace(ser, values=tuple(v)) for ser, v in zip(s.series, values))
    return dataclasses.replace(s, series=series, x_categories=tuple(categories))


def test_catalog_shape():
    assert len(CAT.templates) == 12
    for cat in CATEGORIES:
        assert len(CAT.by_category(cat)) == 4
    assert all(len(t.forms) >= 3 for t in CAT.templates)
    assert len({t.template_id for t in CAT.templates}) == 12


def test_single_series_bar_color_count():
    spec = _spec()
    form = CAT["S_bar_colors"].forms[0]
    assert form == "How many different coloured bars are there?"
    assert oracle_answer(spec, "S_bar_colors", {}) == ("fixed_vocab", "1", None)


def test_argmax_over_years():
    assert oracle_answer(_spec(), "R_argext", {"series": 0, "extremum": "max"}) == ("chart_text", "2001", None)


def test_average_of_two_values():
    spec = _spec(values=((2.0, 4.0),))
    assert oracle_answer(spec, "R_average", {"series": 0}) == ("fixed_vocab", "3", None)
    spec = _spec(values=((2.5, 4.0),))
    assert oracle_answer(spec, "R_average", {"series": 0}) == ("numeric", None, 3.25)


def test_x_axis_label_retrieval():
    spec = _spec()
    assert oracle_answer(spec, "D_axis_label", {"axis": "x"}) == ("chart_text", spec.x_label, None)


@pytest.mark.parametrize(
    "tid, slots",
    [("D_value", {"series": 5, "category": 0}), ("D_value", {"series": 0, "category": 9}),
     ("D_axis_label", {"axis": "z"}), ("R_compare", {"series": 0, "category": 0, "category2": 0}),
     ("nope", {})],
)
def test_oracle_rejects_bad_slots(tid, slots):
    with pytest.raises(TemplateError):
        oracle_answer(_spec(values=((3.0, 3.0),)), tid, slots)


def test_tied_extremum_is_rejected():
    with pytest.raises(TemplateError):
        oracle_answer(_spec(values=((3.0, 3.0),)), "R_argext", {"series": 0, "extremum": "max"})


@pytest.mark.parametrize("x, want", [(0, ("fixed_vocab", "0", None)), (20.0, ("fixed_vocab", "20", None)),
                                     (21, ("numeric", None, 21.0)), (3.5, ("numeric", None, 3.5))])
def test_route_number(x, want):
    assert route_number(x) == want


def test_generation_is_deterministic():
    spec = synthesize_chart(4, CFG)
    assert generate_questions(spec, CAT, 9, 8) == generate_questions(spec, CAT, 9, 8)


def test_inapplicable_templates_are_never_emitted():
    for spec in generate_corpus(100, 2, CFG):
        for it in generate_questions(spec, CAT, 2, 8):
            assert CAT[it.template_id].applies_to(spec)
            if spec.chart_type in ("vbar", "hbar"):
                assert it.template_id != "S_lines"
            else:
                assert it.template_id != "S_bar_colors"


def _corpus_items(n_charts, seed):
    out = []
    for spec in generate_corpus(n_charts, seed, CFG):
        out += [(spec, it) for it in generate_questions(spec, CAT, seed, 8)]
    return out


def test_ten_thousand_items_match_oracle_and_brute_force():
    pairs = _corpus_items(1250, 11)
    assert len(pairs) == 10_000
    for spec, it in pairs:
        assert oracle_answer(spec, it.template_id, it.slots) == (it.answer_kind, it.answer_text, it.answer_value)
        kind, text, value = brute_force_answer(annotate_elements(spec), spec.y_axis, spec.chart_type,
                                               it.template_id, it.fills)
        assert (kind, text) == (it.answer_kind, it.answer_text)
        if value is None:
            assert it.answer_value is None
        else:
            assert math.isclose(value, it.answer_value, rel_tol=1e-9)


def test_category_mixture_within_two_points():
    pairs = _corpus_items(1250, 12)
    freq = Counter(it.category for _, it in pairs)
    want = QAGenConfig().mixture
    for cat in CATEGORIES:
        assert abs(freq[cat] / len(pairs) - want[cat]) <= 0.02


def test_all_answer_kinds_occur_and_fixed_answers_are_in_vocab():
    pairs = _corpus_items(200, 3)
    assert {it.answer_kind for _, it in pairs} == {"fixed_vocab", "chart_text", "numeric"}
    for spec, it in pairs:
        if it.answer_kind == "fixed_vocab":
            assert it.answer_text in FIXED_VOCAB_ANSWERS
        if it.answer_kind == "numeric":
            assert spec.y_axis.min_value <= it.answer_value <= spec.y_axis.max_value


def test_numeric_answers_are_exact_data_values():
    for spec, it in _corpus_items(100, 5):
        if it.template_id == "D_value" and it.answer_kind == "numeric":
            assert it.answer_value == spec.series[it.slots["series"]].values[it.slots["category"]]


def test_paraphrase_offers_the_x_axis_name_variant():
    spec = _spec()
    item = generate_questions(spec, CAT, 0, 1, QAGenConfig(mixture={"data_retrieval": 1.0}))[0]
    item = dataclasses.replace(item, template_id="D_axis_label", slots={"axis": "x"},
                               fills={**item.fills, "axis": "X", "axis_lower": "x", "axis_dir": "horizontal"},
                               question_text="What is the label or title of the X-axis?",
                               answer_kind="chart_text", answer_text=spec.x_label, answer_value=None)
    texts = {paraphrase(item, CAT, s, held_out=False).question_text for s in range(30)}
    assert "What's the name of the X-axis?" in texts


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_paraphrase_preserves_answer(chart_seed, seed):
    spec = synthesize_chart(chart_seed, CFG)
    for it in generate_questions(spec, CAT, seed, 4):
        p = paraphrase(it, CAT, seed)
        assert p.question_text != it.question_text
        assert (p.answer_kind, p.answer_text, p.answer_value, p.template_id) == (
            it.answer_kind, it.answer_text, it.answer_value, it.template_id)
        assert p == paraphrase(it, CAT, seed)
        held = CAT[it.template_id].forms[-2:]
        assert any(p.question_text == f.format(**it.fills) for f in held)


def test_paraphrase_needs_two_forms():
    spec = synthesize_chart(0, CFG)
    it = generate_questions(spec, CAT, 0, 1)[0]
    t = CAT[it.template_id]
    object.__setattr__(t, "forms", t.forms[:1])
    try:
        with pytest.raises(TemplateError):
            paraphrase(it, CAT, 0)
    finally:
        object.__setattr__(t, "forms", load_catalog()[it.template_id].forms)


def test_item_invariants():
    with pytest.raises(ValueError):
        QAItem(0, 0, "structural", "S_lines", "q", "numeric", answer_text="1")
    with pytest.raises(ValueError):
        QAItem(0, 0, "structural", "S_lines", "q", "fixed_vocab", answer_value=1.0)
    with pytest.raises(ValueError):
        QAItem(0, 0, "visual", "S_lines", "q", "fixed_vocab", answer_text="1")


def test_per_chart_must_be_positive():
    with pytest.raises(ValueError):
        generate_questions(synthesize_chart(0, CFG), CAT, 0, 0)


def test_qa_file_round_trip(tmp_path):
    items = [it for _, it in _corpus_items(10, 1)]
    write_qa(tmp_path / "qa.v1.jsonl", items)
    assert list(read_qa(tmp_path / "qa.v1.jsonl")) == items
