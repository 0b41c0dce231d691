import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crct import tensor as T
from crct.featurize import AblationFlags
from crct.model import CRCT, HeadOutputs, ModelConfig, ModelConfigError, combined_loss
from crct.tensor import Tensor
from gradcheck import assert_close, numeric_grad
from micro import micro_config, random_batch, take


def _loss(model, batch):
    return model.loss(model.forward(batch), batch)


def test_hand_evaluated_loss():
    out = HeadOutputs(Tensor([0.0]), Tensor([0.5]))
    loss = combined_loss(out, [1.0], [0.25], [True])
    assert loss.item() == pytest.approx(math.log(2) + 0.25, abs=1e-12)
    assert loss.item() == pytest.approx(0.9431, abs=1e-4)


def test_l1_term_needs_a_positive_reg_sample():
    out = HeadOutputs(Tensor([0.0, 0.0]), Tensor([0.9, -0.9]))
    base = combined_loss(out, [0.0, 1.0], [0.0, 0.0], [False, False]).item()
    # a negative <R> pairing carries no regression target
    assert combined_loss(out, [0.0, 1.0], [0.5, 0.1], [True, False]).item() == base
    assert combined_loss(out, [0.0, 1.0], [0.0, 0.1], [False, True]).item() == pytest.approx(base + 1.0 / 2)


def test_missing_regression_target_is_an_error():
    out = HeadOutputs(Tensor([0.0]), Tensor([0.0]))
    with pytest.raises(ValueError):
        combined_loss(out, [1.0], None, [True])


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    model = CRCT(micro_config(), seed=1)
    batch = random_batch(rng, is_reg=[True, False, True])
    batch.class_target[:] = 1.0
    _loss(model, batch).backward()
    names = [k for k in model.params if k.startswith(("head_", "blk0.self_t.ln2", "txt.cls"))]

    def f():
        with T.no_grad():
            return _loss(model, batch).item()

    for k in names:
        (num,) = numeric_grad(f, [model.params[k].data])
        assert_close(model.params[k].grad, num, 1e-3, 1e-5, name=k)


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_non_reg_samples_give_zero_regression_gradient(seed):
    rng = np.random.default_rng(seed)
    model = CRCT(micro_config(), seed=seed % 7)
    batch = random_batch(rng, is_reg=[False, False, False])
    loss = _loss(model, batch)
    loss.backward()
    for k, p in model.group("head_reg.").items():
        assert p.grad is None or not p.grad.any(), k
    batch2 = random_batch(np.random.default_rng(seed), is_reg=[False, False, False])
    batch2.reg_target = batch2.reg_target + rng.normal(size=3) * 100
    with T.no_grad():
        assert _loss(model, batch2).item() == loss.item()


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    model = CRCT(micro_config(n_blocks=2), seed=0)
    model.record_attention = True
    batch = random_batch(rng, B=4, v_len=[4, 2, 3, 1], t_len=[9, 3, 5, 1])
    with T.no_grad():
        model.forward(batch)
    assert len(model.attention_maps) == 8
    for name, probs in model.attention_maps:
        assert np.all(np.abs(probs.sum(-1) - 1) < 1e-6), name
        # padded keys receive exactly zero weight
        kmask = batch.txt_mask if name.endswith("co_v") or name.endswith("self_t") else batch.vis_mask
        assert not probs[~np.broadcast_to(kmask[:, None, None, :], probs.shape)].any(), name


@pytest.mark.parametrize("seed", range(10))
def test_padding_invariance(seed):
    rng = np.random.default_rng(seed)
    model = CRCT(micro_config(), seed=seed)
    v_len = rng.integers(1, 5, 3)
    t_len = rng.integers(1, 10, 3)
    batch = random_batch(rng, v_len=v_len, t_len=t_len)
    with T.no_grad():
        out = model.forward(batch)
        for i in range(3):
            alone = model.forward(take(batch, i, v_len[i], t_len[i]))
            assert abs(alone.align_logit.data[0] - out.align_logit.data[i]) < 1e-9
            assert abs(alone.reg_value.data[0] - out.reg_value.data[i]) < 1e-9


def test_garbage_in_padded_text_rows_is_ignored():
    rng = np.random.default_rng(5)
    model = CRCT(micro_config(), seed=2)
    batch = random_batch(rng, t_len=[5, 9, 2])
    with T.no_grad():
        before = model.encode(batch)
        pad = ~batch.txt_mask
        batch.txt_ids[pad] = rng.permutation(batch.txt_ids[pad])
        batch.txt_bbox[pad] = rng.random((pad.sum(), 4))
        after = model.encode(batch)
    assert np.max(np.abs(before.h_v0.data - after.h_v0.data)) < 1e-9
    assert np.max(np.abs(before.h_w0.data - after.h_w0.data)) < 1e-9


def test_ablated_parameters_are_inactive():
    cfg = micro_config(ablation=AblationFlags(drop_visual_class_emb=True, visual_bbox_only=True,
                                              drop_text_class_emb=True))
    model = CRCT(cfg, seed=0)
    _loss(model, random_batch(np.random.default_rng(0))).backward()
    for k in ("vis.cls", "vis.det.w", "vis.det.b", "txt.cls"):
        assert k not in model.active_params()
        assert model.params[k].grad is None
    assert set(model.params) - set(model.active_params()) == {"vis.cls", "vis.det.w", "vis.det.b", "txt.cls"}


def test_zero_classification_weight_removes_its_head_gradient():
    model = CRCT(micro_config(lambda_cls=0.0), seed=0)
    _loss(model, random_batch(np.random.default_rng(1), is_reg=[True, True, True])).backward()
    assert all(p.grad is None or not p.grad.any() for p in model.group("head_cls.").values())


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ModelConfigError):
        ModelConfig(vocab_size=10, lambda_reg=-1)
    with pytest.raises(ModelConfigError):
        ModelConfig.from_dict({"vocab_size": 3, "depth": 2})
    cfg = micro_config(ablation=AblationFlags(drop_legend_marker=True))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_state_round_trip_and_mismatch():
    a, b = CRCT(micro_config(), seed=0), CRCT(micro_config(), seed=1)
    b.load_arrays(a.state_arrays())
    batch = random_batch(np.random.default_rng(0))
    with T.no_grad():
        assert np.array_equal(a.forward(batch).align_logit.data, b.forward(batch).align_logit.data)
    with pytest.raises(ModelConfigError):
        CRCT(micro_config(d_model=4), seed=0).load_arrays(a.state_arrays())


def test_class_id_out_of_range_is_rejected():
    model = CRCT(micro_config(), seed=0)
    batch = random_batch(np.random.default_rng(0))
    batch.vis_class[0, 0] = 99
    with pytest.raises(IndexError):
        model.forward(batch)


def test_init_is_seeded():
    a, b = CRCT(micro_config(), seed=4), CRCT(micro_config(), seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
