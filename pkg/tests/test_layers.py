import numpy as np
import pytest

from spkadv import autodiff as ad
from spkadv import layers as L


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def scalar_gru(Wx, Wh, b, xs):
    """Unrolled, one unit at a time; no vectorization shared with the module."""
    H = Wh.shape[0]
    h = [0.0] * H
    out = []
    for x in xs:
        gx = [sum(x[i] * Wx[i, j] for i in range(len(x))) + b[j] for j in range(3 * H)]
        gh = [sum(h[i] * Wh[i, j] for i in range(H)) for j in range(3 * H)]
        new = []
        for k in range(H):
            r = sigmoid(gx[k] + gh[k])
            z = sigmoid(gx[H + k] + gh[H + k])
            n = np.tanh(gx[2 * H + k] + r * gh[2 * H + k])
            new.append((1 - z) * n + z * h[k])
        h = new
        out.append(list(h))
    return np.array(out)


def rand_params(seed, D=3, H=4, bidir=False):
    rng = np.random.default_rng(seed)
    init = L.init_bidirectional if bidir else L.init_recurrent
    p = init(rng, "l", D, H)
    for node in p.values():
        node.assign(rng.normal(scale=0.7, size=node.shape))
    return p


def test_matches_scalar_reference():
    p = rand_params(0)
    xs = np.random.default_rng(1).normal(size=(3, 3))
    out = L.recurrent_forward(p, "l", ad.constant(xs[None]), np.ones((1, 3), bool)).value[0]
    ref = scalar_gru(p["l.Wx"].value, p["l.Wh"].value, p["l.b"].value, xs)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_reverse_matches_reference_on_flipped_input():
    p = rand_params(2)
    xs = np.random.default_rng(3).normal(size=(4, 3))
    out = L.recurrent_forward(p, "l", ad.constant(xs[None]), np.ones((1, 4), bool),
                              reverse=True).value[0]
    ref = scalar_gru(p["l.Wx"].value, p["l.Wh"].value, p["l.b"].value, xs[::-1])[::-1]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-10)


def test_zero_parameters_closed_form():
    # all gates sigmoid(0) = 0.5, candidate tanh(0) = 0, so h stays 0
    p = L.init_bidirectional(np.random.default_rng(0), "l", 3, 4)
    for node in p.values():
        node.assign(np.zeros(node.shape))
    x = ad.constant(np.random.default_rng(1).normal(size=(1, 5, 3)))
    out = L.bidirectional_forward(p, "l", x, np.ones((1, 5), bool))
    assert out.shape == (1, 5, 8)
    assert np.all(out.value == 0.0)


def test_single_frame_bidirectional_is_two_independent_steps():
    p = rand_params(4, bidir=True)
    x = np.random.default_rng(5).normal(size=(1, 1, 3))
    out = L.bidirectional_forward(p, "l", ad.constant(x), np.ones((1, 1), bool)).value[0, 0]
    f = scalar_gru(p["l.fwd.Wx"].value, p["l.fwd.Wh"].value, p["l.fwd.b"].value, x[0])[0]
    bk = scalar_gru(p["l.bwd.Wx"].value, p["l.bwd.Wh"].value, p["l.bwd.b"].value, x[0])[0]
    np.testing.assert_allclose(out, np.concatenate([f, bk]), atol=1e-12)


def test_padding_is_bit_identical():
    p = rand_params(6, bidir=True)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 4, 3))
    alone = L.bidirectional_forward(p, "l", ad.constant(x), np.ones((1, 4), bool)).value
    padded = np.concatenate([x, rng.normal(size=(1, 3, 3))], axis=1)
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]], bool)
    out = L.bidirectional_forward(p, "l", ad.constant(padded), mask).value
    assert np.array_equal(out[0, :4], alone[0])
    assert np.all(out[0, 4:] == 0.0)


def test_padding_inside_a_batch():
    # batch-mates change BLAS blocking, so equality is to rounding only
    p = rand_params(6, bidir=True)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 4, 3))
    alone = L.bidirectional_forward(p, "l", ad.constant(x), np.ones((1, 4), bool)).value
    padded = np.concatenate([x, np.zeros((1, 3, 3))], axis=1)
    other = rng.normal(size=(1, 7, 3))
    mask = np.array([[1, 1, 1, 1, 0, 0, 0], [1] * 7], bool)
    out = L.bidirectional_forward(p, "l", ad.constant(np.concatenate([padded, other])),
                                  mask).value
    np.testing.assert_allclose(out[0, :4], alone[0], rtol=0, atol=1e-12)


def test_dim_mismatch():
    p = rand_params(0)
    with pytest.raises(ad.ShapeError):
        L.recurrent_forward(p, "l", ad.constant(np.ones((1, 2, 5))), np.ones((1, 2), bool))


@pytest.mark.parametrize("T", [1, 3, 5])
def test_recurrent_grad_check(T):
    p = rand_params(8, D=2, H=3, bidir=True)
    rng = np.random.default_rng(T)
    x = rng.normal(size=(2, T, 2))
    mask = np.ones((2, T), bool)
    mask[1, T // 2 + 1:] = False
    proj = rng.normal(size=(2, T, 6))
    f = lambda n: ad.sum_(L.bidirectional_forward(p, "l", n, mask) * ad.constant(proj))  # noqa: E731
    assert ad.grad_check(f, x) < 1e-4
    assert ad.grad_check_params(lambda: f(ad.constant(x)), list(p.values())) < 1e-4


class TestSubsample:
    def test_t8(self):
        x = np.arange(8.0).reshape(1, 8, 1)
        y, m = L.subsample(x, np.ones((1, 8), bool), 4)
        assert y[0, :, 0].tolist() == [0, 4] and m.shape == (1, 2)

    def test_t9_ceil(self):
        y, _ = L.subsample(np.arange(9.0).reshape(1, 9, 1), np.ones((1, 9), bool), 4)
        assert y[0, :, 0].tolist() == [0, 4, 8]
        assert L.subsampled_length(9, 4) == 3

    def test_identity(self):
        x = np.arange(5.0).reshape(1, 5, 1)
        y, _ = L.subsample(x, np.ones((1, 5), bool), 1)
        assert np.array_equal(y, x)

    def test_errors(self):
        with pytest.raises(ValueError):
            L.subsample(np.ones((1, 0, 2)), np.ones((1, 0), bool), 2)
        with pytest.raises(ValueError):
            L.LayerSpec("subsample", 2, 2, {"factor": 0})


class TestStatsPool:
    def test_hand_case(self):
        out = L.stats_pool(ad.constant([[[0.0], [2.0]]]), np.ones((1, 2), bool)).value
        np.testing.assert_allclose(out, [[1.0, np.sqrt(1.0 + 1e-8)]], rtol=0, atol=1e-15)

    def test_constant_sequence(self):
        c = np.array([1.5, -2.0])
        out = L.stats_pool(ad.constant(np.tile(c, (1, 6, 1))), np.ones((1, 6), bool)).value[0]
        np.testing.assert_allclose(out[:2], c, atol=1e-15)
        assert np.all(out[2:] < 1e-3)

    def test_two_pass_oracle_with_mask(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 7, 4))
        mask = np.ones((3, 7), bool)
        mask[1, 5:] = False
        mask[2, 2:] = False
        out = L.stats_pool(ad.constant(x), mask).value
        for b in range(3):
            frames = x[b, mask[b]]
            mu = frames.sum(axis=0) / len(frames)
            var = ((frames - mu) ** 2).sum(axis=0) / len(frames)
            np.testing.assert_allclose(out[b], np.concatenate([mu, np.sqrt(var + 1e-8)]),
                                       rtol=0, atol=1e-10)

    def test_permutation_invariant(self):
        x = np.random.default_rng(1).normal(size=(1, 6, 3))
        m = np.ones((1, 6), bool)
        a = L.stats_pool(ad.constant(x), m).value
        b = L.stats_pool(ad.constant(x[:, ::-1]), m).value
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_all_masked(self):
        with pytest.raises(ValueError):
            L.stats_pool(ad.constant(np.ones((1, 2, 1))), np.zeros((1, 2), bool))

    def test_grad_check(self):
        mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
        proj = np.random.default_rng(2).normal(size=(2, 6))
        x = np.random.default_rng(3).normal(size=(2, 4, 3))
        assert ad.grad_check(lambda n: ad.sum_(L.stats_pool(n, mask) * ad.constant(proj)), x) < 1e-4


def test_linear_grad_check():
    p = L.init_linear(np.random.default_rng(0), "lin", 3, 2)
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert ad.grad_check(lambda n: ad.sum_(ad.tanh(L.linear(p, "lin", n))), x) < 1e-4
    assert ad.grad_check_params(lambda: ad.sum_(ad.tanh(L.linear(p, "lin", ad.constant(x)))),
                                list(p.values())) < 1e-4


def test_glorot_bounds():
    w = L.glorot(np.random.default_rng(0), 10, 6)
    assert np.abs(w).max() <= np.sqrt(6 / 16)
