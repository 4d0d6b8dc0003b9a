import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mucrasp import model as mc
from oracles import fd_gradient, fd_relative_error, scalar_nll

TINY = mc.ModelConfig(n_layers=2, d_model=8, n_q_heads=2, n_kv_groups=2, head_dim=4, d_mlp=4,
                      vocab_size=11, max_seq=10, n_vision_tokens=2)


def tiny_inputs(seed=0, n_text=5, config=TINY):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, config.vocab_size, n_text)
    vis = rng.normal(size=(config.n_vision_tokens, config.d_model))
    T = config.n_vision_tokens + n_text
    targets = rng.integers(0, config.vocab_size, T)
    mask = np.zeros(T, bool)
    mask[config.n_vision_tokens - 1:] = True
    return tokens, vis, targets, mask


# forward


def test_single_token_logits_shape(weights, cfg):
    vis = np.random.default_rng(0).normal(size=(cfg.n_vision_tokens, cfg.d_model))
    trace = mc.forward(weights, [65], vis)
    assert trace.logits.shape == (cfg.n_vision_tokens + 1, cfg.vocab_size)
    assert np.all(np.isfinite(trace.logits[-1]))
    assert trace.modality_tags == ["vision"] * cfg.n_vision_tokens + ["text"]


def test_forward_is_deterministic(weights, sample):
    tokens, vis, _, _ = sample.model_inputs()
    a, b = mc.forward(weights, tokens, vis), mc.forward(weights, tokens, vis)
    assert np.array_equal(a.logits, b.logits)
    for x, y in zip(a.attn_outputs + a.mlp_outputs, b.attn_outputs + b.mlp_outputs):
        assert np.array_equal(x, y)


def test_zero_weights_give_uniform_logits(cfg, sample):
    zero = mc.zeros_like(mc.init_weights(cfg))
    tokens, vis, _, _ = sample.model_inputs()
    logits = mc.forward(zero, tokens, vis).logits
    assert np.all(logits == logits[0, 0])


def test_rejects_wrong_vision_count(weights, cfg):
    with pytest.raises(mc.ModelError):
        mc.forward(weights, [1, 2], np.zeros((cfg.n_vision_tokens + 1, cfg.d_model)))


def test_rejects_overlong_sequence(weights, cfg):
    with pytest.raises(mc.ModelError, match="max_seq"):
        mc.forward(weights, [1] * cfg.max_seq, np.zeros((cfg.n_vision_tokens, cfg.d_model)))


# loss


def test_confident_logits_give_zero_loss():
    logits = np.full((3, 7), -1e4)
    targets = np.array([2, 5, 0])
    logits[np.arange(3), targets] = 1e4
    trace = mc.ForwardTrace([], [], np.zeros(3, bool), logits)
    assert mc.loss(trace, targets, np.ones(3, bool)) == 0.0


def test_uniform_logits_loss_is_log_vocab():
    cfg = mc.ModelConfig(n_layers=1, d_model=8, n_q_heads=2, n_kv_groups=1, head_dim=4, d_mlp=4,
                         vocab_size=256, max_seq=8, n_vision_tokens=1)
    zero = mc.zeros_like(mc.init_weights(cfg))
    trace = mc.forward(zero, [3, 4, 5], np.zeros((1, 8)))
    value = mc.loss(trace, [3, 4, 5, 6], np.ones(4, bool))
    assert value == pytest.approx(math.log(256), rel=1e-14)
    assert value == pytest.approx(5.545, abs=5e-4)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_loss_matches_scalar_oracle(seed):
    w = mc.init_weights(TINY, seed=seed)
    tokens, vis, targets, mask = tiny_inputs(seed)
    mask[np.random.default_rng(seed).random(mask.size) < 0.3] = False
    mask[-1] = True
    trace = mc.forward(w, tokens, vis)
    expected = scalar_nll(trace.logits, targets, mask)
    assert mc.loss(trace, targets, mask) == pytest.approx(np.mean(expected), rel=1e-12)
    assert mc.loss(trace, targets, mask, "sum") == pytest.approx(np.sum(expected), rel=1e-12)


def test_empty_mask_is_an_error(weights, sample):
    tokens, vis, targets, mask = sample.model_inputs()
    trace = mc.forward(weights, tokens, vis)
    with pytest.raises(mc.ModelError, match="empty"):
        mc.loss(trace, targets, np.zeros_like(mask))


# backward


def test_zero_loss_configuration_has_zero_gradients():
    w = mc.zeros_like(mc.init_weights(TINY))
    w.final_norm[:] = 1.0
    w.token_embedding[3, 0] = 1.0
    w.output_head[7, 0] = 1e4
    vis = np.zeros((TINY.n_vision_tokens, TINY.d_model))
    targets = np.array([-1, -1, 7])
    mask = np.array([False, False, True])
    value, grads = mc.loss_and_grad(w, [3], vis, targets, mask)
    assert value == 0.0
    for name, g in grads.named_tensors():
        assert not np.any(g), name


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_every_gradient_entry_matches_finite_differences(reduction):
    w = mc.init_weights(TINY, seed=11)
    tokens, vis, targets, mask = tiny_inputs(11)

    def f(x):
        return mc.loss(mc.forward(x, tokens, vis), targets, mask, reduction)

    _, grads = mc.loss_and_grad(w, tokens, vis, targets, mask, reduction)
    worst = 0.0
    for name, g in grads.named_tensors():
        for idx in np.ndindex(g.shape):
            worst = max(worst, fd_relative_error(g[idx], fd_gradient(w, name, idx, f)))
    assert worst <= 1e-5


def test_gradients_respect_keep_mask():
    w = mc.init_weights(TINY, seed=2)
    tokens, vis, targets, mask = tiny_inputs(2)
    units = mc.enumerate_units(TINY)
    keep = mc.KeepMask.from_units(TINY, units[1:-1])

    def f(x):
        return mc.loss(mc.forward(x, tokens, vis, keep=keep), targets, mask)

    _, grads = mc.loss_and_grad(w, tokens, vis, targets, mask, keep=keep)
    rng = np.random.default_rng(0)
    for name, g in grads.named_tensors():
        for _ in range(4):
            idx = tuple(int(rng.integers(s)) for s in g.shape)
            assert fd_relative_error(g[idx], fd_gradient(w, name, idx, f)) <= 1e-5, name


def test_single_token_mask_gradients():
    w = mc.init_weights(TINY, seed=4)
    tokens, vis, targets, mask = tiny_inputs(4)
    rows = np.flatnonzero(mask)
    per_row = []
    for r in rows:
        single = np.zeros_like(mask)
        single[r] = True
        value, g = mc.loss_and_grad(w, tokens, vis, targets, single, "sum")
        trace = mc.forward(w, tokens, vis)
        assert value == pytest.approx(scalar_nll(trace.logits, targets, single)[0], rel=1e-12)
        per_row.append(g)
    # the full sum-form gradient is the sum of the single-token gradients
    _, full = mc.loss_and_grad(w, tokens, vis, targets, mask, "sum")
    for name, g in full.named_tensors():
        acc = sum(p.get(name) for p in per_row)
        np.testing.assert_allclose(acc, g, rtol=1e-9, atol=1e-12)

    # and one single-token gradient agrees with finite differences of that token's loss
    single = np.zeros_like(mask)
    single[rows[1]] = True

    def f(x):
        return mc.loss(mc.forward(x, tokens, vis), targets, single)

    for name in ("output_head", "layers.0.w_k", "layers.1.w_down", "token_embedding"):
        g = per_row[1].get(name)
        for idx in [(0, 0), tuple(s - 1 for s in g.shape)]:
            assert fd_relative_error(g[idx], fd_gradient(w, name, idx, f)) <= 1e-5


# structural units


def test_default_unit_counts_and_costs():
    cfg = mc.ModelConfig()
    units = mc.enumerate_units(cfg)
    mlp = [u for u in units if u.kind is mc.UnitKind.MlpNeuron]
    gqa = [u for u in units if u.kind is mc.UnitKind.GqaGroup]
    assert (len(mlp), len(gqa)) == (512, 8)
    assert {u.cost for u in mlp} == {192}
    assert {u.cost for u in gqa} == {2 * 16 * 64 + 2 * 2 * 16 * 64} == {6144}


def test_unit_costs_cover_layer_parameters():
    cfg = mc.ModelConfig()
    units = mc.enumerate_units(cfg)
    prunable = sum(u.cost for u in units)
    assert prunable + mc.non_prunable_count(cfg) == mc.total_parameter_count(cfg)
    w = mc.init_weights(cfg)
    assert w.parameter_count() == mc.total_parameter_count(cfg)


def test_unit_order_is_layer_kind_index():
    units = mc.enumerate_units(mc.ModelConfig())
    keys = [u.key for u in units]
    assert keys == sorted(keys)
    assert units[0].kind is mc.UnitKind.GqaGroup


# pruning


def test_keep_all_is_identity(weights, cfg):
    _, pruned = mc.apply_prune(weights, mc.enumerate_units(cfg))
    for (name, a), (_, b) in zip(weights.named_tensors(), pruned.named_tensors()):
        assert np.array_equal(a, b), name


def test_dropping_one_neuron_removes_three_d_model(weights, cfg):
    units = mc.enumerate_units(cfg)
    drop = next(u for u in units if u.layer == 0 and u.kind is mc.UnitKind.MlpNeuron)
    new_cfg, pruned = mc.apply_prune(weights, [u for u in units if u != drop])
    assert weights.parameter_count() - pruned.parameter_count() == 3 * cfg.d_model
    assert new_cfg.layer_mlp_width(0) == cfg.d_mlp - 1


def test_emptying_a_layer_is_an_error(weights, cfg):
    units = [u for u in mc.enumerate_units(cfg)
             if not (u.layer == 1 and u.kind is mc.UnitKind.GqaGroup)]
    with pytest.raises(mc.ModelError, match="empty"):
        mc.apply_prune(weights, units)


def random_keep(config, rng):
    keep = []
    units = mc.enumerate_units(config)
    for layer in range(config.n_layers):
        for kind in mc.UnitKind:
            group = [u for u in units if u.layer == layer and u.kind is kind]
            n = int(rng.integers(1, len(group) + 1))
            keep += [group[i] for i in sorted(rng.choice(len(group), n, replace=False))]
    return keep


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_pruned_forward_matches_masked_forward(seed):
    cfg = TINY
    rng = np.random.default_rng(seed)
    w = mc.init_weights(cfg, seed=seed % 1000)
    tokens, vis, _, _ = tiny_inputs(seed % 1000)
    keep = random_keep(cfg, rng)
    _, pruned = mc.apply_prune(w, keep)
    a = mc.forward(pruned, tokens, vis).logits
    b = mc.masked_forward(w, keep, tokens, vis).logits
    assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(b))


def test_masked_forward_keep_all_equals_forward(weights, cfg, sample):
    tokens, vis, _, _ = sample.model_inputs()
    a = mc.masked_forward(weights, mc.enumerate_units(cfg), tokens, vis).logits
    assert np.array_equal(a, mc.forward(weights, tokens, vis).logits)


def test_masked_forward_drop_one_differs(weights, cfg, sample):
    tokens, vis, _, _ = sample.model_inputs()
    units = mc.enumerate_units(cfg)
    a = mc.masked_forward(weights, units[1:], tokens, vis).logits
    assert not np.array_equal(a, mc.forward(weights, tokens, vis).logits)


def test_pruned_model_can_be_pruned_again(weights, cfg, sample):
    units = mc.enumerate_units(cfg)
    new_cfg, pruned = mc.apply_prune(weights, [u for u in units if u.index_in_layer != 0
                                               or u.kind is mc.UnitKind.GqaGroup])
    again_units = mc.enumerate_units(new_cfg)
    assert len(again_units) == len(units) - cfg.n_layers
    _, twice = mc.apply_prune(pruned, again_units)
    tokens, vis, _, _ = sample.model_inputs()
    assert np.array_equal(mc.forward(twice, tokens, vis).logits,
                          mc.forward(pruned, tokens, vis).logits)
