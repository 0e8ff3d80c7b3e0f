import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elasticrec import tensor as T
from elasticrec.attention import (
    AttentionParams,
    LdaLayerParams,
    LdaStack,
    lda_aggregate,
    lda_dispatch,
    lda_layer,
    lda_stack_forward,
    self_attention,
)
from elasticrec.errors import ContractError, DimensionError

from _oracles import gradcheck, loop_attention


def rand(rng, *shape, scale=1.0):
    return T.tensor(rng.normal(scale=scale, size=shape))


def params(rng, d, scale=0.5):
    return AttentionParams(*(T.parameter(rng.normal(scale=scale, size=(d, d))) for _ in range(3)))


def test_self_attention_single_token_is_value_projection():
    rng = np.random.default_rng(0)
    x, p = rand(rng, 1, 3), params(rng, 3)
    np.testing.assert_allclose(self_attention(x, p).data, x.data @ p.w_v.data, atol=1e-15)


def test_self_attention_uniform_when_query_key_zero():
    rng = np.random.default_rng(1)
    x = rand(rng, 5, 3)
    p = AttentionParams(T.tensor(np.zeros((3, 3))), T.tensor(np.zeros((3, 3))), T.tensor(np.eye(3)))
    out = self_attention(x, p).data
    np.testing.assert_allclose(out, np.tile(x.data.mean(axis=0), (5, 1)), atol=1e-15)


def test_self_attention_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x, p = rand(rng, 3, 2), params(rng, 2)
    xq, xk, xv = (x.data @ w.data for w in (p.w_q, p.w_k, p.w_v))
    np.testing.assert_allclose(self_attention(x, p).data, loop_attention(xq, xk, xv), atol=1e-12, rtol=0)


def test_self_attention_key_mask_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, p = rand(rng, 4, 2), params(rng, 2)
    mask = np.array([True, False, True, False])
    xq, xk, xv = (x.data @ w.data for w in (p.w_q, p.w_k, p.w_v))
    np.testing.assert_allclose(self_attention(x, p, key_mask=mask).data,
                               loop_attention(xq, xk, xv, masked_keys={0, 2}), atol=1e-12, rtol=0)


def test_aggregate_uniform_attention_gives_column_mean():
    rng = np.random.default_rng(4)
    x = rand(rng, 6, 4)
    w_v = rng.normal(size=(4, 4))
    p = AttentionParams(T.tensor(np.zeros((4, 4))), T.tensor(np.eye(4)), T.tensor(w_v))
    out = lda_aggregate(rand(rng, 1, 4), x, p).data
    np.testing.assert_allclose(out, (x.data @ w_v).mean(axis=0, keepdims=True), atol=1e-14)


def test_aggregate_matches_loop_oracle():
    rng = np.random.default_rng(5)
    pt, x, ap = rand(rng, 2, 2), rand(rng, 4, 2), params(rng, 2)
    expected = loop_attention(pt.data @ ap.w_q.data, x.data @ ap.w_k.data, x.data @ ap.w_v.data)
    np.testing.assert_allclose(lda_aggregate(pt, x, ap).data, expected, atol=1e-12, rtol=0)


def test_dispatch_matches_loop_oracle():
    rng = np.random.default_rng(6)
    x, pn, ap = rand(rng, 4, 2), rand(rng, 2, 2), params(rng, 2)
    expected = loop_attention(x.data @ ap.w_q.data, pn.data @ ap.w_k.data, pn.data @ ap.w_v.data)
    np.testing.assert_allclose(lda_dispatch(x, pn, ap).data, expected, atol=1e-12, rtol=0)


def test_dispatch_single_key_copies_value_row():
    rng = np.random.default_rng(7)
    x, pn, ap = rand(rng, 5, 3), rand(rng, 1, 3), params(rng, 3)
    out = lda_dispatch(x, pn, ap).data
    np.testing.assert_allclose(out, np.tile(pn.data @ ap.w_v.data, (5, 1)), atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_dispatch_invariant_to_interest_permutation(seed):
    rng = np.random.default_rng(seed)
    x, pn, ap = rand(rng, 6, 4), rand(rng, 3, 4), params(rng, 4)
    perm = rng.permutation(3)
    a = lda_dispatch(x, pn, ap).data
    b = lda_dispatch(x, T.tensor(pn.data[perm]), ap).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def _flops(fn):
    with T.no_grad(), T.count_flops() as c:
        fn()
    return c.flops


def test_aggregate_and_dispatch_flops_are_linear():
    rng = np.random.default_rng(8)
    d, k = 32, 8
    ap = params(rng, d)
    pt = rand(rng, k, d)
    agg = {n: _flops(lambda n=n: lda_aggregate(pt, rand(rng, n, d), ap)) for n in (256, 512)}
    disp = {n: _flops(lambda n=n: lda_dispatch(rand(rng, n, d), pt, ap)) for n in (256, 512)}
    assert 1.9 <= agg[512] / agg[256] <= 2.1
    assert 1.9 <= disp[512] / disp[256] <= 2.1


def test_self_attention_flops_quadratic():
    rng = np.random.default_rng(9)
    ap = params(rng, 32)
    f = {n: _flops(lambda n=n: self_attention(rand(rng, n, 32), ap)) for n in (256, 512, 1024)}
    assert 3.5 <= f[512] / f[256] <= 4.5
    assert 3.5 <= f[1024] / f[512] <= 4.5


def test_shape_errors():
    rng = np.random.default_rng(10)
    with pytest.raises(DimensionError):
        lda_aggregate(rand(rng, 2, 3), rand(rng, 4, 4), params(rng, 4))
    with pytest.raises(DimensionError):
        AttentionParams(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
    with pytest.raises(ContractError):
        LdaStack([])


def test_layer_shapes():
    layer = LdaLayerParams.init(8, 0)
    rng = np.random.default_rng(11)
    x_out, p_out = lda_layer(rand(rng, 16, 8), rand(rng, 4, 8), layer)
    assert x_out.shape == (16, 8) and p_out.shape == (4, 8)
    xb, pb = lda_layer(rand(rng, 3, 16, 8), rand(rng, 3, 4, 8), layer)
    assert xb.shape == (3, 16, 8) and pb.shape == (3, 4, 8)


def test_zero_ffn_output_layer_is_residual_identity():
    rng = np.random.default_rng(12)
    layer = LdaLayerParams.init(4, 0)
    for ffn in (layer.ffn_x, layer.ffn_p):
        ffn.w2.data[:] = 0.0
    x = rand(rng, 5, 4)
    np.testing.assert_array_equal((x + layer.ffn_x(x)).data, x.data)


def test_layer_gradients():
    rng = np.random.default_rng(13)
    layer = LdaLayerParams.init(4, 1)
    for _, p in layer.parameters():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    x = T.parameter(rng.normal(size=(8, 4)), name="x")
    pt = T.parameter(rng.normal(size=(2, 4)), name="p")
    w = rng.normal(size=(8, 4))
    v = rng.normal(size=(2, 4))
    named = [p for _, p in layer.parameters()] + [x, pt]

    def fn():
        xo, po = lda_layer(x, pt, layer)
        return T.sum(T.mul(xo, w)) + T.sum(T.mul(po, v))

    errs = gradcheck(fn, named)
    assert max(errs.values()) < 1e-4, errs


def test_stack_composition_and_flops():
    rng = np.random.default_rng(14)
    stack = LdaStack.init(8, 2, 3)
    x, pt = rand(rng, 16, 8), rand(rng, 4, 8)
    one = LdaStack(stack.layers[:1])
    np.testing.assert_array_equal(lda_stack_forward(x, pt, one).data, lda_layer(x, pt, stack.layers[0])[0].data)
    x1, p1 = lda_layer(x, pt, stack.layers[0])
    x2, _ = lda_layer(x1, p1, stack.layers[1])
    np.testing.assert_array_equal(lda_stack_forward(x, pt, stack).data, x2.data)

    single = _flops(lambda: lda_stack_forward(x, pt, one))
    double = _flops(lambda: lda_stack_forward(x, pt, stack))
    assert abs(double / single - 2.0) < 0.02


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 6))
def test_attention_rows_normalised(seed, n, k):
    rng = np.random.default_rng(seed)
    ap = params(rng, 4, scale=3.0)
    x, pt = rand(rng, n, 4, scale=3.0), rand(rng, k, 4, scale=3.0)
    for _, w in (lda_aggregate(pt, x, ap, return_weights=True),
                 lda_dispatch(x, pt, ap, return_weights=True),
                 self_attention(x, ap, return_weights=True)):
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)
