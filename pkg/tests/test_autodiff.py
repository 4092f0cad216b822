import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hexplain import autodiff as ad

TOL = 1e-4


def rnd(*shape, seed=0, low=-1.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, shape)


def param(*shape, seed=0, **kw):
    return ad.parameter(rnd(*shape, seed=seed, **kw))


def weighted(out, seed=99):
    """A random linear read-out so every output entry matters to the loss."""
    w = rnd(*out.shape, seed=seed)
    return ad.sum(ad.mul(out, w))


def check(f, **inputs):
    report = ad.grad_check(f, inputs, tolerance=TOL)
    assert report.passed, str(report)
    return report


# -- gradient checks, one per op -------------------------------------------------

class TestGradients:
    def test_linear(self):
        W, b, x = param(3, 4, seed=1), param(3, seed=2), param(5, 4, seed=3)
        check(lambda: weighted(ad.linear(W, b, x)), W=W, b=b, x=x)

    def test_linear_3d_input(self):
        W, x = param(3, 4, seed=1), param(2, 5, 4, seed=3)
        check(lambda: weighted(ad.linear(W, None, x)), W=W, x=x)

    def test_matmul(self):
        a, b = param(3, 4, seed=1), param(4, 2, seed=2)
        check(lambda: weighted(ad.matmul(a, b)), a=a, b=b)

    def test_add_broadcast(self):
        m, v = param(4, 3, seed=1), param(3, seed=2)
        check(lambda: weighted(ad.add_broadcast(m, v)), m=m, v=v)

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary(self, op):
        a, b = param(3, 4, seed=1), param(1, 4, seed=2)
        fn = getattr(ad, op)
        check(lambda: weighted(fn(a, b)), a=a, b=b)

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "exp", "square", "leaky_relu", "elu"])
    def test_unary(self, op):
        a = param(4, 3, seed=5)
        fn = getattr(ad, op)
        check(lambda: weighted(fn(a)), a=a)

    def test_log(self):
        a = param(4, 3, seed=5, low=0.5, high=2.0)
        check(lambda: weighted(ad.log(a)), a=a)

    def test_scale(self):
        a = param(3, seed=1)
        check(lambda: weighted(ad.scale(a, -2.5)), a=a)

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_softmax(self, axis):
        a = param(3, 4, seed=axis + 7)
        check(lambda: weighted(ad.softmax(a, axis=axis)), a=a)

    def test_log_softmax(self):
        a = param(3, 5, seed=2)
        check(lambda: weighted(ad.log_softmax(a)), a=a)

    def test_masked_log_softmax(self):
        a = param(3, 5, seed=2)
        mask = rnd(3, 5, seed=3) > -0.3
        mask[:, 0] = True
        allowed = np.flatnonzero(mask)
        check(lambda: weighted(ad.gather_rows(ad.reshape(ad.masked_log_softmax(a, mask), (-1,)), allowed)), a=a)

    def test_masked_entropy(self):
        a = param(3, 5, seed=2)
        mask = rnd(3, 5, seed=3) > -0.3
        check(lambda: weighted(ad.masked_entropy(a, mask)), a=a)

    @pytest.mark.parametrize("axis,keep", [(None, False), (0, False), (1, True)])
    def test_sum_and_mean(self, axis, keep):
        a = param(3, 4, seed=1)
        check(lambda: weighted(ad.sum(a, axis=axis, keepdims=keep)), a=a)
        check(lambda: weighted(ad.mean(a, axis=axis, keepdims=keep)), a=a)

    def test_reshape_transpose(self):
        a = param(2, 3, 4, seed=1)
        check(lambda: weighted(ad.transpose(ad.reshape(a, (6, 4)), (1, 0))), a=a)

    def test_concat(self):
        a, b = param(2, 3, seed=1), param(2, 2, seed=2)
        check(lambda: weighted(ad.concat([a, b], axis=1)), a=a, b=b)

    def test_embed_and_gather(self):
        table = param(6, 3, seed=1)
        check(lambda: weighted(ad.embed(table, [0, 2, 2, 5])), table=table)

    def test_pick(self):
        a = param(4, 5, seed=1)
        check(lambda: weighted(ad.pick(a, [0, 4, 4, 2])), a=a)

    def test_segment_ops(self):
        a = param(6, 2, seed=1)
        seg = [0, 0, 1, 2, 2, 2]
        check(lambda: weighted(ad.segment_sum(a, seg, 3)), a=a)
        check(lambda: weighted(ad.segment_softmax(a, seg, 3)), a=a)

    def test_gru_step(self):
        p = ad.gru_params(3, 4, np.random.default_rng(0))
        x, h = param(2, 3, seed=1), param(2, 4, seed=2)
        check(lambda: weighted(ad.gru_step(p, x, h)), x=x, h=h, **p)

    def test_gru_step_masked(self):
        p = ad.gru_params(3, 4, np.random.default_rng(0))
        x, h = param(3, 3, seed=1), param(3, 4, seed=2)
        check(lambda: weighted(ad.gru_step(p, x, h, np.array([1.0, 0.0, 1.0]))), x=x, h=h, **p)

    def test_dropout_fixed_mask(self):
        a = param(4, 4, seed=1)
        check(lambda: weighted(ad.dropout(a, 0.3, 11)), a=a)

    def test_gat(self):
        params = ad.GatLayerParams.init(3, 2, 2, np.random.default_rng(4))
        x = param(4, 3, seed=2)
        edges = [(0, 1), (1, 0), (1, 2), (3, 2)]
        check(lambda: weighted(ad.gat_forward(x, edges, params)[0]), x=x, **params.tensors())


# -- closed forms and properties -------------------------------------------------

def test_softmax_zero_vector_is_uniform():
    np.testing.assert_array_equal(ad.softmax(np.zeros(4)).data, np.full(4, 0.25))


def test_softmax_closed_form():
    y = ad.softmax(np.array([0.0, np.log(3.0)])).data
    np.testing.assert_allclose(y, [0.25, 0.75], atol=1e-12, rtol=0)


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.sampled_from([0, 1]))
def test_softmax_sums_to_one(x, axis):
    y = ad.softmax(x, axis=axis).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)


@given(arrays(np.float64, (7, 2), elements=st.floats(-30, 30)),
       st.lists(st.integers(0, 2), min_size=7, max_size=7))
def test_segment_softmax_sums_per_segment(x, seg):
    y = ad.segment_softmax(x, seg, 3).data
    for s in set(seg):
        np.testing.assert_allclose(y[np.array(seg) == s].sum(axis=0), 1.0, atol=1e-9)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeMismatch) as err:
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)
    with pytest.raises(ad.ShapeMismatch):
        ad.add_broadcast(np.zeros((2, 3)), np.zeros(2))


def test_dropout_replay_and_identity():
    x = rnd(5, 5)
    a = ad.dropout(x, 0.5, np.random.default_rng(3)).data
    b = ad.dropout(x, 0.5, np.random.default_rng(3)).data
    np.testing.assert_array_equal(a, b)
    assert ad.dropout(x, 0.0, None).data is not None
    np.testing.assert_array_equal(ad.dropout(x, 0.0, 3).data, x)


def test_backward_seeds_loss_gradient():
    a = param(3)
    with ad.Tape() as tape:
        loss = ad.sum(ad.square(a))
    tape.backward(loss)
    assert loss.grad == 1.0
    np.testing.assert_allclose(a.grad, 2 * a.data)
    assert a.grad.shape == a.data.shape


def test_corrupted_backward_is_caught():
    a = param(3, seed=1)

    def broken_square(x):
        return ad.function(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    report = ad.grad_check(lambda: ad.sum(broken_square(a)), {"a": a})
    assert not report.passed and report.failures == ["a"]


def test_non_finite_gradient_fails_check():
    a = param(2, seed=1)
    nan_grad = lambda x: ad.function(x.data.copy(), (x,), lambda g: (g * np.nan,))  # noqa: E731
    assert not ad.grad_check(lambda: ad.sum(nan_grad(a)), {"a": a}).passed


# -- graph attention ---------------------------------------------------------------

def test_gat_single_node():
    params = ad.GatLayerParams.init(3, 2, 2, np.random.default_rng(0))
    x = rnd(1, 3)
    emb, att = ad.gat_forward(x, [], params)
    np.testing.assert_allclose(att.data, 1.0)
    z = (x @ params.weight.data).reshape(1, 2, 2).mean(axis=1)
    np.testing.assert_allclose(emb.data, np.where(z > 0, z, np.expm1(z)), atol=1e-14)


def test_gat_locality():
    params = ad.GatLayerParams.init(3, 2, 2, np.random.default_rng(0))
    x = rnd(2, 3)
    before = ad.gat_forward(x, [], params)[0].data
    x[0] += 1.0
    after = ad.gat_forward(x, [], params)[0].data
    np.testing.assert_array_equal(before[1], after[1])
    assert not np.allclose(before[0], after[0])


def straight_line_gat(x, edges, W, a_src, a_dst, slope):
    """Loop-based reference: attention of target i over its in-neighbours j."""
    n, m, d = x.shape[0], a_src.shape[0], a_src.shape[1]
    z = (x @ W).reshape(n, m, d)
    nbrs = {i: [i] for i in range(n)}
    for s, t in edges:
        nbrs[t].insert(-1, s)
    out = np.zeros((n, m, d))
    received = np.zeros((n, m))
    for i in range(n):
        for h in range(m):
            scores = []
            for j in nbrs[i]:
                e = z[i, h] @ a_dst[h] + z[j, h] @ a_src[h]
                scores.append(e if e > 0 else slope * e)
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            for wj, j in zip(w, nbrs[i]):
                out[i, h] += wj * z[j, h]
                received[j, h] += wj
    counts = np.array([sum(j in nbrs[i] for i in range(n)) for j in range(n)])
    mean = out.mean(axis=1)
    return np.where(mean > 0, mean, np.expm1(mean)), received / counts[:, None]


def test_gat_matches_straight_line_reference():
    rng = np.random.default_rng(17)
    params = ad.GatLayerParams.init(5, 3, 2, rng)
    x = rng.normal(size=(4, 5))
    edges = [(0, 1), (1, 0), (1, 2), (2, 3), (3, 1)]
    emb, att = ad.gat_forward(x, edges, params)
    ref_emb, ref_att = straight_line_gat(x, edges, params.weight.data, params.att_src.data,
                                         params.att_dst.data, params.leaky_slope)
    np.testing.assert_allclose(emb.data, ref_emb, atol=1e-12)
    np.testing.assert_allclose(att.data, ref_att, atol=1e-12)


def test_gat_rejects_bad_adjacency():
    params = ad.GatLayerParams.init(3, 2, 1, np.random.default_rng(0))
    with pytest.raises(ad.ShapeMismatch):
        ad.gat_forward(rnd(2, 3), [(0, 5)], params)
    with pytest.raises(ValueError):
        ad.GatLayerParams(params.weight, params.att_src, params.att_dst, 0)


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = {"b": rnd(3), "a.w": rnd(2, 4, seed=2), "scalar": np.array(np.pi)}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, params, {"note": "hi"})
    loaded, meta = ad.load_checkpoint(path)
    assert meta == {"note": "hi"}
    for k, v in params.items():
        assert loaded[k].tobytes() == np.asarray(v).tobytes()
    assert ad.checkpoint_bytes(loaded, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        ad.load_checkpoint(io.BytesIO(b"not a checkpoint"))
    data = ad.checkpoint_bytes({"w": rnd(4)})
    with pytest.raises(ValueError):
        ad.load_checkpoint(io.BytesIO(data[:-8]))
