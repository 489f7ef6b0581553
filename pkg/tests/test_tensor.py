"""Autodiff engine: primitives against finite differences and hand oracles."""

import numpy as np
import pytest

from causaltraj import tensor as T
from causaltraj.errors import GradCheckError, ShapeError
from causaltraj.tensor import Tensor, grad_check


def randt(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=requires_grad)


class TestBasics:
    def test_dtype_default(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64

    def test_scalar_backward_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_backward_without_grad_flag(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ShapeError):
            x.sum().backward()

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x * 2.0   # dy/dx = 2x + 2 = 8
        y.sum().backward()
        assert np.allclose(x.grad, [8.0])

    def test_multiple_backward_calls_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        assert np.allclose(x.grad, [2.0, 2.0])

    def test_backward_visits_each_node_once(self):
        # diamond: z = (a + a) * (a + a); a.grad must be exact, not doubled
        a = Tensor(np.array([1.5]), requires_grad=True)
        b = a + a
        z = (b * b).sum()   # z = 4a^2, dz/da = 8a = 12
        z.backward()
        assert np.allclose(a.grad, [12.0])

    def test_untouched_leaf_has_none_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        x.sum().backward()
        assert y.grad is None


class TestBroadcasting:
    def test_suffix_broadcast_ok(self):
        a = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a + b).sum().backward()
        assert b.grad.shape == (4,)
        assert np.allclose(b.grad, 6.0)

    def test_non_suffix_rejected(self):
        a = Tensor(np.ones((3, 4)))
        b = Tensor(np.ones((3, 1)))
        with pytest.raises(ShapeError, match=r"\(3, 4\)"):
            _ = a + b

    def test_explicit_broadcast_to(self):
        rng = np.random.default_rng(0)
        b = randt(rng, (3, 1))
        err = grad_check(lambda: T.broadcast_to(b, (2, 3, 4)).sum(), [b])
        assert err < 1e-5

    def test_scalar_operand(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (2.0 * x + 1.0).sum().backward()
        assert np.allclose(x.grad, [2.0, 2.0])


PRIMITIVES = {}


def primitive(name):
    def wrap(f):
        PRIMITIVES[name] = f
        return f
    return wrap


@primitive("add")
def _case_add(rng):
    a, b = randt(rng, (3, 4)), randt(rng, (4,))
    return lambda: (a + b).sum(), [a, b]


@primitive("sub")
def _case_sub(rng):
    a, b = randt(rng, (3, 4)), randt(rng, (3, 4))
    return lambda: (a - b * 2.0).sum(), [a, b]


@primitive("mul")
def _case_mul(rng):
    a, b = randt(rng, (2, 5)), randt(rng, (5,))
    return lambda: (a * b).sum(), [a, b]


@primitive("div")
def _case_div(rng):
    a, b = randt(rng, (3, 3)), randt(rng, (3, 3))
    return lambda: (a / (b * b + 1.0)).sum(), [a, b]


@primitive("neg")
def _case_neg(rng):
    a = randt(rng, (4,))
    return lambda: (-a).sum(), [a]


@primitive("maximum")
def _case_maximum(rng):
    a, b = randt(rng, (4, 4)), randt(rng, (4, 4))
    return lambda: T.maximum(a, b).sum(), [a, b]


@primitive("exp")
def _case_exp(rng):
    a = randt(rng, (3, 3), scale=0.5)
    return lambda: T.exp(a).sum(), [a]


@primitive("log")
def _case_log(rng):
    a = randt(rng, (3, 3))
    return lambda: T.log(a * a + 0.5).sum(), [a]


@primitive("sqrt")
def _case_sqrt(rng):
    a = randt(rng, (3, 3))
    return lambda: T.sqrt(a * a + 1.0).sum(), [a]


@primitive("clamp")
def _case_clamp(rng):
    a = randt(rng, (5, 5))
    return lambda: T.clamp(a, -0.7, 0.7).sum(), [a]


@primitive("gelu")
def _case_gelu(rng):
    a = randt(rng, (4, 4))
    return lambda: T.gelu(a).sum(), [a]


@primitive("silu")
def _case_silu(rng):
    a = randt(rng, (4, 4))
    return lambda: T.silu(a).sum(), [a]


@primitive("softplus")
def _case_softplus(rng):
    a = randt(rng, (4, 4))
    return lambda: T.softplus(a).sum(), [a]


@primitive("matmul")
def _case_matmul(rng):
    a, b = randt(rng, (2, 3, 4)), randt(rng, (2, 4, 5))
    return lambda: T.matmul(a, b).sum(), [a, b]


@primitive("matmul_shared")
def _case_matmul_shared(rng):
    a, b = randt(rng, (2, 3, 4)), randt(rng, (4, 5))
    return lambda: T.matmul(a, b).sum(), [a, b]


@primitive("linear")
def _case_linear(rng):
    x, w, b = randt(rng, (6, 4)), randt(rng, (4, 3)), randt(rng, (3,))
    return lambda: T.linear(x, w, b).sum(), [x, w, b]


@primitive("embedding")
def _case_embedding(rng):
    w = randt(rng, (5, 3))
    idx = rng.integers(0, 5, size=(2, 4))
    return lambda: T.embedding_lookup(w, idx).sum(), [w]


@primitive("reshape")
def _case_reshape(rng):
    a = randt(rng, (2, 6))
    return lambda: a.reshape(3, 4).sum(), [a]


@primitive("transpose")
def _case_transpose(rng):
    a = randt(rng, (2, 3, 4))
    return lambda: (T.transpose(a, (2, 0, 1)) * 2.0).sum(), [a]


@primitive("concat")
def _case_concat(rng):
    a, b = randt(rng, (2, 3)), randt(rng, (2, 5))
    return lambda: T.concat([a, b], axis=-1).sum(), [a, b]


@primitive("narrow")
def _case_narrow(rng):
    a = randt(rng, (3, 8))
    return lambda: T.narrow(a, 1, 2, 4).sum(), [a]


@primitive("reduce_sum_axis")
def _case_reduce_sum(rng):
    a = randt(rng, (3, 4, 5))
    return lambda: (a.sum(axis=(0, 2)) * 3.0).sum(), [a]


@primitive("reduce_mean")
def _case_reduce_mean(rng):
    a = randt(rng, (3, 4))
    return lambda: a.mean(axis=-1).sum(), [a]


@primitive("logsumexp")
def _case_logsumexp(rng):
    a = randt(rng, (4, 6), scale=3.0)
    return lambda: T.logsumexp_lastdim(a).sum(), [a]


@primitive("softmax")
def _case_softmax(rng):
    a = randt(rng, (4, 6), scale=2.0)
    w = randt(rng, (6,))
    return lambda: (T.softmax_lastdim(a) * w).sum(), [a, w]


@primitive("layer_norm")
def _case_layer_norm(rng):
    x, g, b = randt(rng, (3, 8)), randt(rng, (8,)), randt(rng, (8,))
    w = randt(rng, (8,), requires_grad=False)
    return lambda: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]


@primitive("rms_norm")
def _case_rms_norm(rng):
    x, g = randt(rng, (3, 8)), randt(rng, (8,))
    w = randt(rng, (8,), requires_grad=False)
    return lambda: (T.rms_norm(x, g) * w).sum(), [x, g]


@primitive("max_pool_full")
def _case_max_pool_full(rng):
    x = randt(rng, (2, 7, 3))
    return lambda: T.max_pool_window(x, 7).sum(), [x]


@primitive("max_pool_window")
def _case_max_pool_window(rng):
    x = randt(rng, (2, 7, 3))
    return lambda: T.max_pool_window(x, 3).sum(), [x]


@primitive("depthwise_conv")
def _case_conv(rng):
    x, w = randt(rng, (2, 6, 4)), randt(rng, (3, 4))
    return lambda: T.causal_depthwise_conv(x, w).sum(), [x, w]


@primitive("ssm_scan")
def _case_ssm(rng):
    L, Tn, H, P, S = 2, 4, 2, 3, 3
    dec = Tensor(rng.uniform(0.2, 0.95, (L, Tn, H)), requires_grad=True)
    xdt = randt(rng, (L, Tn, H, P))
    b = randt(rng, (L, Tn, S))
    c = randt(rng, (L, Tn, S))
    return lambda: T.ssm_scan(dec, xdt, b, c).sum(), [dec, xdt, b, c]


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for trial in range(3):
        rng = np.random.default_rng(hash(name) % 2**32 + trial)
        f, params = PRIMITIVES[name](rng)
        assert grad_check(f, params) < 1e-5, f"{name} trial {trial}"


class TestMatmulOracle:
    def test_against_triple_loop(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        want = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, want, atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestMaxPoolOracle:
    def brute(self, x, window, pad=-1e30):
        Tlen = x.shape[-2]
        out = np.empty_like(x)
        for t in range(Tlen):
            vals = [x[..., s, :] if s >= 0 else np.full(x.shape[:-2] + x.shape[-1:], pad, x.dtype)
                    for s in range(t - window + 1, t + 1)]
            out[..., t, :] = np.max(np.stack(vals, axis=-2), axis=-2)
        return out

    @pytest.mark.parametrize("window", [1, 2, 3, 5, 8, 12])
    def test_matches_brute_force(self, window):
        rng = np.random.default_rng(window)
        for _ in range(5):
            x = rng.normal(size=(2, 8, 3)).astype(np.float32)
            got = T.max_pool_window(Tensor(x), window).data
            assert np.array_equal(got, self.brute(x, window))

    def test_tie_routes_to_lowest_index(self):
        x = np.zeros((1, 4, 1), dtype=np.float32)
        x[0, :, 0] = [1.0, 1.0, 0.5, 1.0]
        xt = Tensor(x, requires_grad=True)
        T.max_pool_window(xt, 4).sum().backward()
        # argmax of each prefix: t=0 -> 0; t=1 tie -> 0; t=2 -> 0; t=3 tie -> 0
        assert np.array_equal(xt.grad[0, :, 0], [4.0, 0.0, 0.0, 0.0])

    def test_window_tie_lowest_inside_window(self):
        x = np.zeros((1, 3, 1), dtype=np.float32)
        x[0, :, 0] = [2.0, 1.0, 1.0]
        xt = Tensor(x, requires_grad=True)
        T.max_pool_window(xt, 2).sum().backward()
        # windows: [x0], [x0,x1] -> x0, [x1,x2] tie -> x1
        assert np.array_equal(xt.grad[0, :, 0], [2.0, 1.0, 0.0])

    def test_invalid_window(self):
        with pytest.raises(ShapeError):
            T.max_pool_window(Tensor(np.ones((2, 3, 1))), 0)


class TestConvOracle:
    def test_against_explicit_sum(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 6, 3)).astype(np.float32)
        w = rng.normal(size=(4, 3)).astype(np.float32)
        got = T.causal_depthwise_conv(Tensor(x), Tensor(w)).data
        K = 4
        want = np.zeros_like(x)
        for t in range(6):
            for j in range(K):
                src = t - K + 1 + j
                if src >= 0:
                    want[:, t] += x[:, src] * w[j]
        assert np.allclose(got, want, atol=1e-6)

    def test_causal(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 8, 2)).astype(np.float32)
        w = rng.normal(size=(3, 2)).astype(np.float32)
        y1 = T.causal_depthwise_conv(Tensor(x), Tensor(w)).data
        x2 = x.copy()
        x2[:, 5:] += 100.0
        y2 = T.causal_depthwise_conv(Tensor(x2), Tensor(w)).data
        assert np.array_equal(y1[:, :5], y2[:, :5])


class TestSSMScan:
    def hand_recurrence(self, dec, xdt, b, c):
        L, Tn, H = dec.shape
        P, S = xdt.shape[-1], b.shape[-1]
        y = np.zeros((L, Tn, H, P))
        for l in range(L):
            h = np.zeros((H, P, S))
            for t in range(Tn):
                h = dec[l, t][:, None, None] * h + xdt[l, t][:, :, None] * b[l, t][None, None, :]
                for hh in range(H):
                    y[l, t, hh] = h[hh] @ c[l, t]
        return y

    def test_matches_hand_recurrence(self):
        rng = np.random.default_rng(11)
        dec = rng.uniform(0.1, 0.99, (2, 5, 3))
        xdt = rng.normal(size=(2, 5, 3, 2))
        b = rng.normal(size=(2, 5, 4))
        c = rng.normal(size=(2, 5, 4))
        got = T.ssm_scan(Tensor(dec), Tensor(xdt), Tensor(b), Tensor(c)).data
        assert np.allclose(got, self.hand_recurrence(dec, xdt, b, c), atol=1e-6)

    @pytest.mark.parametrize("Tn,chunk", [(7, 3), (33, 32), (64, 32), (40, 8)])
    def test_chunked_matches_sequential(self, Tn, chunk):
        rng = np.random.default_rng(Tn * 100 + chunk)
        dec = rng.uniform(0.05, 0.999, (2, Tn, 2)).astype(np.float32)
        xdt = rng.normal(size=(2, Tn, 2, 3)).astype(np.float32)
        b = rng.normal(size=(2, Tn, 4)).astype(np.float32)
        c = rng.normal(size=(2, Tn, 4)).astype(np.float32)
        with T.no_grad():
            seq = T.ssm_scan(Tensor(dec), Tensor(xdt), Tensor(b), Tensor(c)).data
        chq = T.ssm_scan_chunked(dec, xdt, b, c, chunk=chunk)
        assert np.abs(seq - chq).max() < 1e-4

    def test_step_matches_scan(self):
        rng = np.random.default_rng(13)
        L, Tn, H, P, S = 2, 6, 2, 3, 4
        dec = rng.uniform(0.2, 0.95, (L, Tn, H)).astype(np.float32)
        xdt = rng.normal(size=(L, Tn, H, P)).astype(np.float32)
        b = rng.normal(size=(L, Tn, S)).astype(np.float32)
        c = rng.normal(size=(L, Tn, S)).astype(np.float32)
        with T.no_grad():
            full = T.ssm_scan(Tensor(dec), Tensor(xdt), Tensor(b), Tensor(c)).data
        h = np.zeros((L, H, P, S), dtype=np.float32)
        for t in range(Tn):
            y, h = T.ssm_scan_step(h, dec[:, t], xdt[:, t], b[:, t], c[:, t])
            assert np.allclose(y, full[:, t], atol=1e-6)

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            T.ssm_scan(
                Tensor(np.ones((1, 2, 3))),
                Tensor(np.ones((1, 2, 3, 4))),
                Tensor(np.ones((1, 3, 5))),
                Tensor(np.ones((1, 2, 5))),
            )


class TestGradCheck:
    def test_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GradCheckError):
            grad_check(lambda: x * 2.0, [x])

    def test_flags_non_finite(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        with np.errstate(divide="ignore"), pytest.raises(GradCheckError):
            grad_check(lambda: T.log(x).sum(), [x])

    def test_restores_parameters(self):
        x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        before = x.data.copy()
        grad_check(lambda: (x * x).sum(), [x])
        assert x.data.dtype == np.float32
        assert np.array_equal(x.data, before)
        assert x.grad is None

    def test_subsampling_deterministic(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(10, 10)), requires_grad=True)
        e1 = grad_check(lambda: (x * x).sum(), [x], max_coords_per_param=5,
                        rng=np.random.default_rng(0))
        e2 = grad_check(lambda: (x * x).sum(), [x], max_coords_per_param=5,
                        rng=np.random.default_rng(0))
        assert e1 == e2

    def test_detects_wrong_gradient(self):
        # a deliberately broken op: forward x^2 but gradient of x
        x = Tensor(np.array([1.3]), requires_grad=True)

        def broken():
            out = Tensor._result(x.data * x.data, (x,), lambda g: (g,))
            return out.sum()

        assert grad_check(broken, [x]) > 1e-2


class TestDtypePromotion:
    def test_f32_f64_mix(self):
        a = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        b = T.cast(a, np.float64)
        out = (b * 2.0).sum()
        assert out.dtype == np.float64
        out.backward()
        assert a.grad.dtype == np.float32

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            T.narrow(Tensor(np.ones((2, 3))), 1, 2, 2)
