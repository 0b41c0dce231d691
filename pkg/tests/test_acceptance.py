"""The ten acceptance criteria, one test each, at their stated tolerances.

Each test records a single pass/fail line through the ``verdict`` fixture; the
lines are repeated in the terminal summary. Criteria 6 to 8 and 10 train real
models (about 20 minutes each for the overfit runs, up to 3 hours for the
generalization run); deselect them with ``-m "not acceptance"``.
"""

import dataclasses
import hashlib
import math
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from crct import tensor as T
from crct.chartgen import GeneratorConfig, annotate_elements, generate_corpus
from crct.cli import main
from crct.evaluate import ratio_correct, tick_correct
from crct.experiment import (
    GENERALIZATION,
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
from crct.model import CRCT
from crct.qagen import generate_questions, load_catalog
from crct.train import Trainer
from gradcheck import numeric_grad
from micro import micro_config, random_batch, take
from qa_oracle import brute_force_answer

pytestmark = pytest.mark.acceptance


def _loss(model, batch):
    return model.loss(model.forward(batch), batch)


# ---------------------------------------------------------------- 1-5: properties


def test_c1_gradient_oracle(verdict):
    t0 = time.perf_counter()
    model = CRCT(micro_config(), seed=0)
    batch = random_batch(np.random.default_rng(0), B=3, nv=4, nt=9, is_reg=[True, False, True])
    batch.class_target[:] = [1.0, 0.0, 1.0]
    _loss(model, batch).backward()

    def f():
        with T.no_grad():
            return _loss(model, batch).item()

    n_params, worst, bad = 0, 0.0, []
    for k, p in model.params.items():
        (num,) = numeric_grad(f, [p.data], h=1e-4)
        ana = np.zeros_like(p.data) if p.grad is None else p.grad
        excess = np.abs(ana - num) - (1e-5 + 1e-3 * np.abs(num))
        worst = max(worst, float(excess.max()))
        if (excess > 0).any():
            bad.append(k)
        n_params += p.data.size
    secs = time.perf_counter() - t0
    ok = not bad and secs < 120
    verdict(1, ok, f"{n_params} scalars in {len(model.params)} tensors, "
                   f"{len(bad)} tensors outside 1e-3 rel / 1e-5 abs {bad[:3]}, {secs:.1f}s (< 120s)")


def test_c2_regression_loss_masking(verdict):
    failures = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = CRCT(micro_config(), seed=seed)
        batch = random_batch(rng, B=1, is_reg=[False])
        loss = _loss(model, batch)
        loss.backward()
        grads_zero = all(p.grad is None or not p.grad.any() for p in model.group("head_reg.").values())
        batch.reg_target = batch.reg_target + rng.normal(size=1) * 1e3
        with T.no_grad():
            same = _loss(model, batch).item() == loss.item()
        failures += not (grads_zero and same)
    verdict(2, failures == 0, f"{100 - failures}/100 non-regression samples with zero regression-head "
                              f"gradient and bit-identical loss under a perturbed target")


def test_c3_attention_contracts(verdict):
    worst_row, worst_pad, n = 0.0, 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = CRCT(micro_config(n_blocks=2), seed=seed)
        model.record_attention = True
        v_len = np.concatenate([rng.integers(1, 5, 1), [4]])
        t_len = np.concatenate([rng.integers(1, 10, 1), [9]])
        batch = random_batch(rng, B=2, v_len=v_len, t_len=t_len)
        with T.no_grad():
            out = model.forward(batch)
            for _, probs in model.attention_maps:
                worst_row = max(worst_row, float(np.abs(probs.sum(-1) - 1).max()))
            model.record_attention = False
            alone = model.forward(take(batch, 0, v_len[0], t_len[0]))
        worst_pad = max(worst_pad,
                        abs(alone.align_logit.data[0] - out.align_logit.data[0]),
                        abs(alone.reg_value.data[0] - out.reg_value.data[0]))
        n += 1
    ok = worst_row < 1e-6 and worst_pad < 1e-9
    verdict(3, ok, f"{n} randomized padded samples: max |row sum - 1| = {worst_row:.1e} (< 1e-6), "
                   f"max padded vs unpadded output gap = {worst_pad:.1e} (< 1e-9)")


def test_c4_qa_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    catalog, seed = load_catalog(), 11
    n = strings = numbers = 0
    mismatches = []
    for spec in generate_corpus(1250, seed, GeneratorConfig()):
        gt = annotate_elements(spec)
        for it in generate_questions(spec, catalog, seed, 8):
            kind, text, value = brute_force_answer(gt, spec.y_axis, spec.chart_type, it.template_id, it.fills)
            n += 1
            if it.answer_kind == "numeric":
                numbers += 1
                ok = kind == "numeric" and math.isclose(value, it.answer_value, rel_tol=1e-9, abs_tol=0.0)
            else:
                strings += 1
                ok = (kind, text) == (it.answer_kind, it.answer_text)
            if not ok:
                mismatches.append(it.qa_id)
    secs = time.perf_counter() - t0
    ok = n == 10_000 and not mismatches and secs < 60
    verdict(4, ok, f"{n - len(mismatches)}/{n} items agree ({strings} string, {numbers} numeric at 1e-9 rel), "
                   f"{secs:.1f}s (< 60s)")


def _sweep():
    """1,000 deterministic cases on a dyadic grid, so sums and differences are exact in float64."""
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        p, c = (float(Fraction(int(x), 8)) for x in rng.integers(-80_000, 80_000, 2))
        sub = float(2.0 ** int(rng.integers(-3, 6)))
        # truth within a few sub-ticks of the prediction, so the tick rule flips inside the f grid
        g = p + int(rng.integers(-40, 41)) * sub / 8
        yield p, g, c, sub


def test_c5_metric_properties(verdict):
    fracs = [k / 8 for k in range(0, 33)]
    zero_fail = mono_fail = shift_fail = flips = 0
    cases = list(_sweep())
    for p, g, c, sub in cases:
        # a nonzero prediction against a zero truth: scaled copies reach down to subnormals
        for q in (p or 1.0, p * 1e-300 or 5e-324, -5e-324):
            zero_fail += ratio_correct(q, 0.0)
        hits = [tick_correct(p, g, f, sub) for f in fracs]
        mono_fail += any(a > b for a, b in zip(hits, hits[1:]))
        shift_fail += any(tick_correct(p + c, g + c, f, sub) != h for f, h in zip(fracs, hits))
        flips += 0 < sum(hits) < len(hits)
    ok = len(cases) == 1000 and zero_fail == mono_fail == shift_fail == 0
    verdict(5, ok, f"{len(cases)} cases: ratio rule accepted a nonzero prediction at truth 0 {zero_fail}x, "
                   f"tick curve non-monotone {mono_fail}x, shift-variant {shift_fail}x "
                   f"({flips} cases change verdict within f in [0, 4])")


# ---------------------------------------------------------------- 6, 8, 10: overfit protocol


def _train(p, root):
    split = make_split(p)
    trainer = Trainer(split.train.specs, split.train.items, split.vocab, p.train_cfg(),
                      p.model_cfg(len(split.vocab)), root)
    t0 = time.perf_counter()
    history = trainer.fit(on_epoch=keep_latest_checkpoint(root))
    return split, trainer, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    return _train(OVERFIT, tmp_path_factory.mktemp("overfit"))


def test_c6_overfit_learning(overfit, verdict):
    split, trainer, history, train_secs = overfit
    t0 = time.perf_counter()
    rep = evaluate_trainer(trainer, split.train)
    secs = train_secs + time.perf_counter() - t0
    tick_half = dict(zip(rep.tick_fractions, rep.tick_accuracy))[0.5]
    ok = (len(split.train.items) == 256 and len(split.train.specs) == 32 and trainer.cfg.epochs <= 300
          and rep.selection_accuracy >= 0.95 and tick_half >= 0.90 and secs < 1800)
    verdict(6, ok, f"{trainer.cfg.epochs} epochs, final loss {history[-1].mean_loss:.4f}: "
                   f"selection {rep.selection_accuracy:.3f} (>= 0.95), overall with ratio rule {rep.overall:.3f}, "
                   f"numeric within 1/2 sub-tick {tick_half:.3f} (>= 0.90), {secs / 60:.1f} min (< 30)")


def test_c10_attribution_sanity(overfit, verdict):
    split, trainer, _, _ = overfit
    charts = detected(trainer, split.train)
    cases = extremum_cases(charts, 50, seed=0)
    hits = attribution_hits(trainer.model, split.vocab, charts, cases, m=16)
    rate = sum(hits) / len(hits)
    verdict(10, len(hits) == 50 and rate >= 0.70,
            f"top data element is the extremum in {sum(hits)}/{len(hits)} argmax/argmin cases "
            f"({rate:.0%}, >= 70%)")


def test_c8_ablation_direction(overfit, tmp_path_factory, verdict):
    split, full, _, _ = overfit
    p = dataclasses.replace(OVERFIT, ablation=AblationFlags(drop_legend_marker=True))
    split_b, ablated, _, _ = _train(p, tmp_path_factory.mktemp("no_legend_marker"))
    items = multi_series_items(split.train)
    a = evaluate_trainer(full, split.train, items).overall
    b = evaluate_trainer(ablated, split_b.train, items).overall
    verdict(8, b < a, f"multi-series overall ({len(items)} items): full {a:.3f}, "
                      f"without legend marker {b:.3f} (must be strictly lower)")


# ---------------------------------------------------------------- 7: generalization


def test_c7_generalization(tmp_path, verdict):
    split, trainer, history, train_secs = _train(GENERALIZATION, tmp_path / "run")
    t0 = time.perf_counter()
    rep = evaluate_trainer(trainer, split.test)
    secs = train_secs + time.perf_counter() - t0
    train_charts = {s.chart_id for s in split.train.specs}
    disjoint = not train_charts & {s.chart_id for s in split.test.specs}
    s, d, r = (rep.accuracy[c] for c in ("structural", "data_retrieval", "reasoning"))
    ok = (len(split.train.items) == 2000 and len(split.test.items) == 500 and disjoint
          and rep.overall >= 0.70 and s >= 0.85 and s > d > r and secs < 3 * 3600)
    mix = Counter(it.category for it in split.test.items)
    verdict(7, ok, f"test overall {rep.overall:.3f} (>= 0.70), structural {s:.3f} (>= 0.85), "
                   f"data retrieval {d:.3f}, reasoning {r:.3f} (need S > D > R; test mix {dict(mix)}), "
                   f"{secs / 60:.0f} min (< 180)")


# ---------------------------------------------------------------- 9: determinism and resume


SMALL = ["--d-model", "16", "--n-blocks", "1", "--n-heads", "2", "--batch-size", "16", "--epochs", "3"]
ARTIFACTS = ["data/charts.v1.jsonl", "data/qa.v1.jsonl", "run/metrics.csv", "run/epoch_3.ckpt",
             "report/report.csv", "report/report.json", "report/predictions.csv"]


def _pipeline(root):
    assert main(["gen", "--out", str(root / "data"), "--charts", "8", "--qa-per-chart", "6", "--seed", "5"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *SMALL]) == 0
    assert main(["eval", "--run", str(root / "run"), "--data", str(root / "data"), "--out", str(root / "report")]) == 0


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_c9_determinism_and_resume(tmp_path, monkeypatch, verdict):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    differ = [f for f in ARTIFACTS if _sha(tmp_path / "a" / f) != _sha(tmp_path / "b" / f)]

    # interrupt a third run just before epoch 3, then resume it from its latest checkpoint
    run = tmp_path / "c"
    original = Trainer.run_epoch

    def interrupted(self):
        if self.epoch == 2:
            raise KeyboardInterrupt
        return original(self)

    monkeypatch.setattr(Trainer, "run_epoch", interrupted)
    with pytest.raises(KeyboardInterrupt):
        main(["train", "--data", str(tmp_path / "a/data"), "--out", str(run), *SMALL])
    assert not (run / "epoch_3.ckpt").exists()
    monkeypatch.setattr(Trainer, "run_epoch", original)
    assert main(["train", "--data", str(tmp_path / "a/data"), "--out", str(run), *SMALL, "--resume", "latest"]) == 0
    resume_differ = [f for f in ("metrics.csv", "epoch_3.ckpt") if _sha(run / f) != _sha(tmp_path / "a/run" / f)]
    ok = not differ and not resume_differ
    verdict(9, ok, f"{len(ARTIFACTS) - len(differ)}/{len(ARTIFACTS)} artifacts checksum-identical across two runs "
                   f"{differ}; resumed run matches uninterrupted metrics and checkpoint: {not resume_differ}")
