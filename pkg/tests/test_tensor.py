import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (
    batchnorm_relu_scalar,
    conv2d_loops,
    conv_transpose2d_scatter,
    softmax_list,
    upsample_points,
)
from splitseg.tensor import (
    BatchNormSpec,
    ConvSpec,
    ShapeError,
    batchnorm_relu,
    conv2d,
    conv_transpose2d,
    load_tensor,
    matmul,
    save_tensor,
    softmax_channels,
    softmax_rows,
    tensor_from_bytes,
    tensor_to_bytes,
    tokens,
    untokens,
    upsample,
)


def f32(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def bn(c, mean=0.0, var=1.0, gamma=1.0, beta=0.0):
    full = lambda v: np.full(c, v, np.float32)
    return BatchNormSpec(full(mean), full(var), full(gamma), full(beta))


# -- conv2d ---------------------------------------------------------------------

def test_identity_1x1_conv():
    x = np.arange(3 * 4 * 5, dtype=np.float32).reshape(3, 4, 5)
    spec = ConvSpec(np.eye(3, dtype=np.float32)[:, :, None, None], np.zeros(3, np.float32))
    np.testing.assert_array_equal(conv2d(x, spec), x)


def test_zero_depthwise_kernel_halves_grid():
    x = np.ones((4, 8, 8), np.float32)
    spec = ConvSpec(np.zeros((4, 1, 3, 3), np.float32), stride=2, padding=1, groups=4)
    out = conv2d(x, spec)
    assert out.shape == (4, 4, 4)
    assert not out.any()


def test_pointwise_conv_matches_loops(rng):
    x = f32(rng, 4, 8, 8)
    w, b = f32(rng, 6, 4, 1, 1), f32(rng, 6)
    got = conv2d(x, ConvSpec(w, b))
    np.testing.assert_allclose(got, conv2d_loops(x, w, b), atol=1e-5)


@pytest.mark.parametrize("stride,groups,k", [(1, 1, 3), (2, 1, 3), (2, 2, 3), (2, 6, 3), (1, 3, 5), (2, 1, 1)])
def test_conv_matches_loops(rng, stride, groups, k):
    x = f32(rng, 6, 7, 9)
    w, b = f32(rng, 6, 6 // groups, k, k), f32(rng, 6)
    got = conv2d(x, ConvSpec(w, b, stride=stride, padding=k // 2, groups=groups))
    want = conv2d_loops(x, w, b, stride, k // 2, groups)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_grouped_conv_is_concatenation_of_slices(rng):
    x = f32(rng, 8, 6, 6)
    w = f32(rng, 4, 2, 3, 3)
    got = conv2d(x, ConvSpec(w, stride=1, padding=1, groups=4))
    parts = [conv2d(x[2 * g:2 * g + 2], ConvSpec(w[g:g + 1], padding=1)) for g in range(4)]
    np.testing.assert_allclose(got, np.concatenate(parts), atol=1e-6)


def test_conv_shape_errors_name_axis(rng):
    spec = ConvSpec(f32(rng, 4, 3, 3, 3), padding=0)
    with pytest.raises(ShapeError) as e:
        conv2d(f32(rng, 2, 8, 8), spec)
    assert e.value.axis == "channels"
    with pytest.raises(ShapeError) as e:
        conv2d(f32(rng, 3, 2, 8), spec)
    assert e.value.axis == "height"
    with pytest.raises(ShapeError):
        ConvSpec(f32(rng, 5, 1, 3, 3), groups=2)


# -- transposed conv ---------------------------------------------------------------

def test_identity_transposed_1x1():
    x = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    spec = ConvSpec(np.eye(2, dtype=np.float32)[:, :, None, None], transposed=True)
    np.testing.assert_array_equal(conv_transpose2d(x, spec), x)


def test_transposed_stride2_doubles_grid(rng):
    f = 5
    spec = ConvSpec(f32(rng, f, 1, 3, 3), stride=2, padding=1, groups=f, transposed=True, output_padding=1)
    assert conv2d(f32(rng, f, 8, 8), spec).shape == (f, 16, 16)


def test_transposed_matches_scatter_add(rng):
    x = f32(rng, 2, 5, 5)
    w, b = f32(rng, 2, 3, 3, 3), f32(rng, 3)
    spec = ConvSpec(w, b, stride=2, padding=1, transposed=True, output_padding=1)
    want = conv_transpose2d_scatter(x, w, b, 2, 1, 1)
    np.testing.assert_allclose(conv_transpose2d(x, spec), want, atol=1e-5)


@pytest.mark.parametrize("k,groups,stride", [(3, 4, 2), (5, 4, 2), (1, 1, 1), (3, 2, 1), (5, 1, 2)])
def test_transposed_grouped_matches_scatter_add(rng, k, groups, stride):
    x = f32(rng, 4, 4, 3)
    w, b = f32(rng, 4, 4 // groups, k, k), f32(rng, 4)
    spec = ConvSpec(w, b, stride=stride, padding=k // 2, groups=groups, transposed=True, output_padding=stride - 1)
    want = conv_transpose2d_scatter(x, w, b, stride, k // 2, stride - 1, groups)
    got = conv_transpose2d(x, spec)
    assert got.shape == (4, 4 * stride, 3 * stride)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_transposed_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv^T(y)> for matching stride/padding
    x, y = f32(rng, 3, 8, 8), f32(rng, 4, 4, 4)
    w = f32(rng, 4, 3, 3, 3)
    fwd = conv2d(x, ConvSpec(w, stride=2, padding=1))
    # transposed layout (in, out, k, k) takes the forward weights as-is
    back = conv_transpose2d(y, ConvSpec(w, stride=2, padding=1, transposed=True, output_padding=1))
    lhs = float(np.sum(fwd.astype(np.float64) * y))
    rhs = float(np.sum(x.astype(np.float64) * back))
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-4)


# -- batchnorm / relu ---------------------------------------------------------------

def test_batchnorm_identity_on_nonnegative(rng):
    x = np.abs(f32(rng, 3, 4, 4))
    zeros, ones = np.zeros(3, np.float32), np.ones(3, np.float32)
    out = batchnorm_relu(x, BatchNormSpec(zeros, ones, ones, zeros, eps=1e-12))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_batchnorm_zero_gamma_negative_beta_gives_zeros(rng):
    out = batchnorm_relu(f32(rng, 3, 4, 4) * 100, bn(3, gamma=0.0, beta=-1.0))
    assert not out.any()


def test_batchnorm_matches_scalar(rng):
    x = f32(rng, 4, 5, 5)
    mean, gamma, beta = f32(rng, 4), f32(rng, 4), f32(rng, 4)
    var = np.abs(f32(rng, 4)) + 0.1
    got = batchnorm_relu(x, BatchNormSpec(mean, var, gamma, beta))
    np.testing.assert_allclose(got, batchnorm_relu_scalar(x, mean, var, gamma, beta), atol=1e-6)


def test_batchnorm_validation():
    with pytest.raises(ValueError):
        BatchNormSpec(np.zeros(2), -np.ones(2), np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        BatchNormSpec(np.zeros(2), np.ones(2), np.ones(2), np.zeros(2), eps=0.0)
    with pytest.raises(ShapeError):
        batchnorm_relu(np.zeros((3, 2, 2), np.float32), bn(2))


# -- matmul / softmax --------------------------------------------------------------

def test_matmul_identity_and_shape(rng):
    a = f32(rng, 5, 7)
    np.testing.assert_array_equal(matmul(np.eye(5, dtype=np.float32), a), a)
    assert matmul(f32(rng, 12, 4), f32(rng, 4, 12)).shape == (12, 12)
    with pytest.raises(ShapeError):
        matmul(f32(rng, 2, 3), f32(rng, 2, 3))


def test_matmul_hand_case():
    a = np.array([[1, 2, 0], [0, 1, -1], [3, 0, 2]], np.float32)
    b = np.array([[2, 0, 1], [1, 1, 0], [0, -1, 4]], np.float32)
    want = np.array([[4, 2, 1], [1, 2, -4], [6, -2, 11]], np.float32)
    np.testing.assert_array_equal(matmul(a, b), want)


def test_softmax_constant_row_is_uniform():
    np.testing.assert_allclose(softmax_rows(np.full((2, 5), 3.0, np.float32)), 0.2, atol=1e-7)


def test_softmax_large_logit_is_one_hot():
    out = softmax_rows(np.array([[1000.0, 0.0]], np.float32))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-7)
    assert np.all(np.isfinite(out))


def test_softmax_matches_direct(rng):
    a = f32(rng, 4, 4)
    want = np.array([softmax_list(row.tolist()) for row in a])
    np.testing.assert_allclose(softmax_rows(a), want, atol=1e-7)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(-50 * 256, 50 * 256).map(lambda v: v / 256),
       st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one_and_shift_invariant(n, m, shift, seed):
    # on a 2^-8 grid the shifted input is exact in float32
    a = (np.round(np.random.default_rng(seed).standard_normal((n, m)) * 10 * 256) / 256).astype(np.float32)
    p = softmax_rows(a)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax_rows(a + np.float32(shift)), p, atol=1e-6)


def test_softmax_channels_sums(rng):
    y = softmax_channels(f32(rng, 7, 3, 4) * 5)
    np.testing.assert_allclose(y.sum(axis=0), 1.0, atol=1e-6)


# -- upsampling / tokens ------------------------------------------------------------

def test_upsample_constant_and_shape():
    out = upsample(np.full((1, 2, 2), 2.5, np.float32), (4, 4))
    assert out.shape == (1, 8, 8)
    np.testing.assert_allclose(out, 2.5, atol=1e-7)


def test_upsample_preserves_ramp_interior():
    h, w, u = 5, 6, 4
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    x = (0.75 * ii + 1.5 * jj + 2.0).astype(np.float32)[None]
    out = upsample(x, (u, u))
    oi, oj = np.meshgrid(np.arange(h * u), np.arange(w * u), indexing="ij")
    si, sj = (oi + 0.5) / u - 0.5, (oj + 0.5) / u - 0.5
    inside = (si >= 0) & (si <= h - 1) & (sj >= 0) & (sj <= w - 1)
    ramp = 0.75 * si + 1.5 * sj + 2.0
    np.testing.assert_allclose(out[0][inside], ramp[inside], atol=1e-6)


def test_upsample_matches_point_sampler(rng):
    x = f32(rng, 2, 3, 4)
    np.testing.assert_allclose(upsample(x, (4, 2)), upsample_points(x, 4, 2), atol=1e-6)


def test_tokens_height_major_roundtrip(rng):
    x = f32(rng, 3, 2, 4)
    t = tokens(x)
    assert t.shape == (8, 3)
    np.testing.assert_array_equal(t[1 * 4 + 2], x[:, 1, 2])
    np.testing.assert_array_equal(untokens(t, 2, 4), x)


# -- purity and files ---------------------------------------------------------------

def test_ops_are_bit_deterministic(rng):
    x = f32(rng, 4, 9, 9)
    spec = ConvSpec(f32(rng, 4, 1, 3, 3), f32(rng, 4), stride=2, padding=1, groups=4)
    a, b = conv2d(x, spec), conv2d(x.copy(), spec)
    assert a.tobytes() == b.tobytes()


def test_tensor_file_roundtrip(tmp_path, rng):
    x = f32(rng, 2, 3, 5)
    path = tmp_path / "x.sstn"
    save_tensor(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"SSTN" and raw[4:6] == b"\x01\x00" and raw[6] == 3
    assert len(raw) == 7 + 12 + 4 * x.size
    np.testing.assert_array_equal(load_tensor(path), x)


def test_tensor_file_rejects_bad_input(rng):
    raw = tensor_to_bytes(f32(rng, 2, 2))
    with pytest.raises(ValueError):
        tensor_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        tensor_from_bytes(raw[:4] + b"\x02\x00" + raw[6:])
    with pytest.raises(ValueError):
        tensor_from_bytes(raw[:-1])
