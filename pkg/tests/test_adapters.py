import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advfusion import autodiff as ad
from advfusion.adapters import (Adapter, AdapterStack, BottleneckAdapter, FusionBlock, LoraDelta, adapter_forward,
                                attach, detach, fusion_forward, lora_forward)
from advfusion.autodiff import Tensor
from advfusion.errors import ConfigError, DimensionError, UsageError
from advfusion.model import TransformerModel

from conftest import language_stack, randomize, tiny_config


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def hand_adapter(down, up, db=None, ub=None):
    down, up = np.asarray(down, float), np.asarray(up, float)
    h, d = down.shape
    return BottleneckAdapter(T(down), T(np.zeros(d) if db is None else db), T(up), T(np.zeros(h) if ub is None else ub))


# -- bottleneck --------------------------------------------------------------


def test_zero_up_is_identity():
    ad_ = BottleneckAdapter.init(8, 2, np.random.default_rng(0), "float64")
    h = T(np.random.default_rng(1).normal(size=(3, 8)))
    r = T(np.random.default_rng(2).normal(size=(3, 8)))
    assert np.array_equal(adapter_forward(ad_, h, r).data, r.data)


def test_zero_down_with_up_bias():
    c = np.arange(4.0)
    a = hand_adapter(np.zeros((4, 2)), np.ones((2, 4)), ub=c)
    r = T(np.ones((3, 4)))
    assert np.array_equal(adapter_forward(a, T(np.ones((3, 4))), r).data, 1 + np.broadcast_to(c, (3, 4)))


def test_hand_matrices():
    h = np.array([[1.0, -1.0, 2.0, 0.5], [0.0, 3.0, -2.0, 1.0]])
    down = np.array([[1, 0], [0, 1], [1, 1], [-1, 2]], dtype=float)
    up = np.array([[1, 0, 0, 1], [0, 2, 1, 0]], dtype=float)
    # row 0: h@down = [1+2-0.5, -1+2+1] = [2.5, 2]; relu same; @up = [2.5, 4, 2, 2.5]
    # row 1: h@down = [0-2-1, 3-2+2] = [-3, 3]; relu -> [0, 3]; @up = [0, 6, 3, 0]
    expected = np.array([[2.5, 4, 2, 2.5], [0, 6, 3, 0]]) + h
    out = adapter_forward(hand_adapter(down, up), T(h), T(h))
    assert np.allclose(out.data, expected, atol=1e-15)


def test_adapter_shape_errors():
    a = hand_adapter(np.zeros((4, 2)), np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        adapter_forward(a, T(np.zeros((2, 4))), T(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        adapter_forward(a, T(np.zeros((2, 5))), T(np.zeros((2, 5))))
    with pytest.raises(ConfigError):
        hand_adapter(np.zeros((2, 2)), np.zeros((2, 2)))


# -- LoRA --------------------------------------------------------------------


def test_lora_zero_b_equals_base():
    rng = np.random.default_rng(0)
    W, x = T(rng.normal(size=(6, 6))), T(rng.normal(size=(3, 6)))
    d = LoraDelta.init(6, 2, 4, rng, "float64")
    assert np.array_equal(lora_forward(W, d, x).data, ad.matmul(x, W).data)


def test_lora_zero_scaling():
    rng = np.random.default_rng(1)
    W, x = T(rng.normal(size=(4, 4))), T(rng.normal(size=(2, 4)))
    d = LoraDelta(T(rng.normal(size=(4, 1))), T(rng.normal(size=(1, 4))), 1, 0.0)
    assert np.array_equal(lora_forward(W, d, x).data, ad.matmul(x, W).data)


def test_lora_rank_one_hand():
    W = np.eye(3)
    a, b = np.array([[1.0], [0.0], [2.0]]), np.array([[0.0, 1.0, 1.0]])
    x = np.array([[1.0, 1.0, 1.0]])
    # x a = 3; (x a) b = [0, 3, 3]; scaling 2 -> [0, 6, 6]; plus x W = [1, 1, 1]
    out = lora_forward(T(W), LoraDelta(T(a), T(b), 1, 2.0), T(x))
    assert out.data.tolist() == [[1, 7, 7]]


def test_lora_rank_too_large():
    with pytest.raises(ConfigError):
        LoraDelta.init(4, 4, 8, np.random.default_rng(0))


# -- fusion ------------------------------------------------------------------


def fusion_block(h, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return FusionBlock(T(rng.uniform(-scale, scale, (h, h))), T(rng.uniform(-scale, scale, (h, h))),
                       T(rng.uniform(-scale, scale, (h, h))))


def test_fusion_single_candidate():
    fb = fusion_block(4)
    h, z = T(np.random.default_rng(1).normal(size=(3, 4))), T(np.random.default_rng(2).normal(size=(3, 4)))
    out, S = fusion_forward(fb, h, [z])
    assert np.array_equal(S, np.ones((3, 1)))
    assert np.allclose(out.data, z.data @ fb.value.data, atol=1e-14)


def test_fusion_identical_keys_split_evenly():
    fb = fusion_block(4)
    z = T(np.random.default_rng(3).normal(size=(2, 4)))
    _, S = fusion_forward(fb, T(np.ones((2, 4))), [z, T(z.data.copy())])
    assert np.array_equal(S, np.full((2, 2), 0.5))


def test_fusion_errors():
    fb = fusion_block(4)
    h = T(np.zeros((2, 4)))
    with pytest.raises(UsageError):
        fusion_forward(fb, h, [])
    with pytest.raises(UsageError):
        fusion_forward(fb, h, [h], excluded=0)
    with pytest.raises(UsageError):
        fusion_forward(fb, h, [h, h], excluded=5)
    with pytest.raises(DimensionError):
        fusion_forward(fb, h, [h, T(np.zeros((2, 3)))])


def test_fusion_hand_weights():
    h = T([[1.0, 0.0]])
    z1, z2 = T([[1.0, 0.0]]), T([[0.0, 1.0]])
    fb = FusionBlock(T(np.eye(2)), T([[np.log(3), 0.0], [0.0, 0.0]]), T(np.eye(2)))
    # scores: hQ=[1,0]; z1K=[ln3,0] -> ln3; z2K=[0,0] -> 0; softmax -> [0.75, 0.25]
    out, S = fusion_forward(fb, h, [z1, z2])
    assert np.allclose(S, [[0.75, 0.25]], atol=1e-15)
    assert np.allclose(out.data, [[0.75, 0.25]], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 5), st.data())
def test_exclusion_invariance(seed, N, data):
    rng = np.random.default_rng(seed)
    fb = fusion_block(5, seed)
    h = T(rng.normal(size=(3, 5)) * 3)
    zs = [T(rng.normal(size=(3, 5)) * 3) for _ in range(N)]
    m = data.draw(st.integers(0, N - 1))
    out, S = fusion_forward(fb, h, zs, excluded=m)
    ref, Sref = fusion_forward(fb, h, [z for i, z in enumerate(zs) if i != m])
    assert np.all(S[:, m] == 0)
    assert np.allclose(S.sum(-1), 1, atol=1e-6) and np.all(S >= 0)
    assert np.allclose(out.data, ref.data, atol=1e-7, rtol=0)
    assert np.allclose(np.delete(S, m, axis=1), Sref, atol=1e-7, rtol=0)


def test_excluded_candidate_gets_no_gradient():
    rng = np.random.default_rng(0)
    fb = fusion_block(4)
    h = T(rng.normal(size=(2, 4)))
    adapters = [hand_adapter(rng.normal(size=(4, 2)), rng.normal(size=(2, 4)), rng.normal(size=2), rng.normal(size=4))
                for _ in range(3)]
    params = [t for k in adapters[1].named().values() for t in [k]]

    def f():
        cands = [a(h, h) for a in adapters]
        out, _ = fusion_forward(fb, h, cands, excluded=1)
        return ad.sum(ad.mul(out, out))

    rep = ad.finite_diff_report(f, params, n_samples=20)
    assert rep.max_rel_error == 0.0 and rep.n_checked == 20
    for p in params:
        p.requires_grad = True
    ad.backward(f())
    assert all(p.grad is None or not p.grad.any() for p in params)


# -- attach ------------------------------------------------------------------


def test_attach_detach_restores(model32, tokens):
    before = model32.encode(tokens).states.data.copy()
    n_params = len(model32.params)
    attach(model32, "lora", seed=3)
    detach(model32)
    assert len(model32.params) == n_params
    assert np.array_equal(model32.encode(tokens).states.data, before)


def test_double_attach(model32):
    attach(model32, "task-adapter")
    with pytest.raises(UsageError):
        attach(model32, "lora")


@pytest.mark.parametrize("mechanism", ["task-adapter", "lora", "fusion", "advfusion"])
def test_identity_at_init(mechanism, tokens):
    # float64 isolates the mechanism from float32 rounding in the fusion weighted sum
    cfg = tiny_config("float64")
    m = TransformerModel(cfg, seed=4)
    base = m.encode(tokens).states.data.copy()
    stack = None
    if mechanism in ("fusion", "advfusion"):
        stack = AdapterStack([Adapter.create(cfg, t, "language", reduction=4, seed=i) for i, t in enumerate("abc")])
    attach(m, mechanism, stack=stack, seed=9)
    assert np.max(np.abs(m.encode(tokens).states.data - base)) <= 1e-7


def test_fusion_over_six_adapters_has_six_columns(cfg32, tokens):
    m = TransformerModel(cfg32)
    stack = language_stack(cfg32, tags=("go", "java", "js", "php", "py", "ruby"))
    att = attach(m, "fusion", stack=stack)
    m.encode(tokens)
    assert all(att.last_attention[l].shape == (2, 6, 6) for l in range(cfg32.n_layers))


def test_advfusion_without_exclusion_equals_fusion(cfg32, tokens):
    outs = []
    for mode in ("fusion", "advfusion"):
        m = TransformerModel(cfg32, seed=1)
        attach(m, mode, stack=language_stack(cfg32), seed=2)
        outs.append(m.encode(tokens).states.data)
    assert np.array_equal(*outs)


def test_attach_layout_mismatch(model32):
    other = tiny_config(hidden=32, n_heads=2)
    with pytest.raises(DimensionError):
        attach(model32, "fusion", stack=AdapterStack([Adapter.create(other, "go", "language")]))


def test_zero_weights_mode_keeps_candidate(cfg32, tokens):
    m = TransformerModel(cfg32)
    att = attach(m, "advfusion", stack=language_stack(cfg32), exclusion_mode="zero-weights")
    m.encode(tokens, exclude="java")
    S = att.last_attention[0]
    assert np.all(S[..., 1] > 0)
    m2 = TransformerModel(cfg32)
    att2 = attach(m2, "advfusion", stack=language_stack(cfg32))
    m2.encode(tokens, exclude="java")
    assert np.all(att2.last_attention[0][..., 1] == 0)


def test_exclude_unknown_language(cfg32, tokens):
    m = TransformerModel(cfg32)
    attach(m, "advfusion", stack=language_stack(cfg32))
    with pytest.raises(UsageError):
        m.encode(tokens, exclude="cobol")


def test_gradient_isolation_only_fusion_trains(tokens):
    cfg = tiny_config("float64")
    m = TransformerModel(cfg, seed=0)
    attach(m, "fusion", stack=language_stack(cfg))
    randomize(m, m.names_in("fusion"), 0.3, seed=1)
    frozen = [m.params[n] for n in m.params if m.groups[n] != "fusion"][::7]

    def f():
        enc = m.encode(tokens)
        return ad.sum(ad.mul(enc.states, enc.states))

    for n, t in m.params.items():
        t.requires_grad = m.groups[n] == "fusion"
    loss = f()
    ad.backward(loss)
    assert all(t.grad is None for t in frozen)
    assert all(m.params[n].grad is not None for n in m.names_in("fusion"))
