import numpy as np
import pytest

from waynav.distmetrics import (
    ALL_METRIC_KINDS,
    Form,
    GaussianDiag,
    Metric,
    MetricKind,
    classifier_input,
    combine,
    dissim,
    euclidean_sq,
    kl_divergence,
    pair_terms,
    pair_terms_backward,
    sym_kl,
    sym_mahalanobis,
    wasserstein2_sq,
)


def gauss(mean, var):
    return GaussianDiag(np.asarray(mean, float), np.asarray(var, float))


def random_pair(rng, dim=8):
    q = gauss(rng.normal(size=dim), rng.uniform(0.1, 3.0, size=dim))
    s = gauss(rng.normal(size=dim), rng.uniform(0.1, 3.0, size=dim))
    return q, s


def combine_oracle(members):
    # independent loop-based mean, kept deliberately naive
    n = len(members)
    dim = members[0].dim
    mean = [0.0] * dim
    var = [0.0] * dim
    for m in members:
        for i in range(dim):
            mean[i] += float(m.mean[i])
            var[i] += float(m.var[i])
    return [x / n for x in mean], [x / n for x in var]


class TestCombine:
    def test_mean_average(self):
        out = combine([gauss([1, 3], [1, 1]), gauss([3, 5], [1, 1])])
        assert np.allclose(out.mean, [2, 4])

    def test_var_average(self):
        out = combine([gauss([0, 0], [1, 1]), gauss([0, 0], [3, 3])])
        assert np.allclose(out.var, [2, 2])

    def test_single_member_identity(self):
        g = gauss([1.5, -2.0], [0.3, 0.7])
        out = combine([g])
        assert np.array_equal(out.mean, g.mean) and np.array_equal(out.var, g.var)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            combine([])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            combine([gauss([0], [1]), gauss([0, 0], [1, 1])])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            dim = int(rng.integers(1, 10))
            members = [
                gauss(rng.normal(size=dim), rng.uniform(0.05, 4.0, size=dim)) for _ in range(n)
            ]
            out = combine(members)
            om, ov = combine_oracle(members)
            assert np.max(np.abs(out.mean - om)) < 1e-12
            assert np.max(np.abs(out.var - ov)) < 1e-12


class TestSymMahalanobis:
    def test_identical_zero(self):
        q = gauss([1.0, -2.0], [0.5, 2.0])
        assert sym_mahalanobis(q, q) == 0.0

    def test_hand_value(self):
        # pooled variance [2,2], squared distance 4/2 + 0/2
        assert sym_mahalanobis(gauss([2, 0], [2, 2]), gauss([0, 0], [2, 2])) == pytest.approx(2.0, abs=1e-10)

    def test_scale_invariance(self):
        q, s = gauss([2, 0], [1.0, 3.0]), gauss([0, 1], [2.0, 0.5])
        scaled = sym_mahalanobis(gauss([4, 0], [4.0, 12.0]), gauss([0, 2], [8.0, 2.0]))
        assert scaled == pytest.approx(sym_mahalanobis(q, s), rel=1e-12)

    def test_pooled_symmetric_in_variances(self):
        rng = np.random.default_rng(3)
        q, s = random_pair(rng)
        swapped = sym_mahalanobis(gauss(q.mean, s.var), gauss(s.mean, q.var))
        assert swapped == pytest.approx(sym_mahalanobis(q, s), rel=1e-12)


class TestSymKL:
    def test_identical_zero(self):
        q = gauss([0.5, 1.0], [1.0, 2.0])
        assert sym_kl(q, q) == pytest.approx(0.0, abs=1e-14)

    def test_unit_gaussians_shifted_mean(self):
        # KL both directions is 0.5 each for N(0,1) vs N(1,1)
        assert sym_kl(gauss([0.0], [1.0]), gauss([1.0], [1.0])) == pytest.approx(1.0, abs=1e-10)

    def test_positive_when_means_differ(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            q, s = random_pair(rng)
            if np.allclose(q.mean, s.mean):
                continue
            assert sym_kl(q, s) > 0.0

    def test_matches_directed_sum(self):
        rng = np.random.default_rng(7)
        q, s = random_pair(rng)
        assert sym_kl(q, s) == pytest.approx(kl_divergence(q, s) + kl_divergence(s, q), rel=1e-12)


class TestWasserstein2:
    def test_identical_zero(self):
        q = gauss([1, 2], [0.5, 0.5])
        assert wasserstein2_sq(q, q) == 0.0

    def test_mean_shift(self):
        assert wasserstein2_sq(gauss([0.0], [1.0]), gauss([3.0], [1.0])) == pytest.approx(9.0, abs=1e-10)

    def test_variance_gap(self):
        assert wasserstein2_sq(gauss([0.0], [1.0]), gauss([0.0], [4.0])) == pytest.approx(1.0, abs=1e-10)


class TestEuclidean:
    def test_identical_means_zero(self):
        assert euclidean_sq(gauss([1, 1], [0.2, 9.0]), gauss([1, 1], [5.0, 0.1])) == 0.0

    def test_hand_value(self):
        assert euclidean_sq(gauss([0, 0], [1, 1]), gauss([3, 4], [1, 1])) == pytest.approx(25.0)

    def test_variance_invariant(self):
        rng = np.random.default_rng(9)
        q, s = random_pair(rng)
        q2 = gauss(q.mean, rng.uniform(0.1, 5.0, size=q.dim))
        s2 = gauss(s.mean, rng.uniform(0.1, 5.0, size=s.dim))
        assert euclidean_sq(q, s) == euclidean_sq(q2, s2)


class TestDissim:
    def test_aggregate_sums_to_multivariate(self):
        rng = np.random.default_rng(13)
        for kind in ALL_METRIC_KINDS:
            if kind.form is not Form.AGGREGATE_UNIVARIATE:
                continue
            for _ in range(25):
                q, s = random_pair(rng)
                agg = dissim(q, s, kind)
                multi = dissim(q, s, MetricKind(kind.metric, Form.MULTIVARIATE))
                assert agg.shape == (q.dim,)
                assert multi.shape == (1,)
                assert agg.sum() == pytest.approx(float(multi[0]), rel=1e-12, abs=1e-12)

    def test_output_lengths(self):
        rng = np.random.default_rng(15)
        q, s = random_pair(rng, dim=32)
        assert dissim(q, s, MetricKind.parse("euclidean", "multivariate")).shape == (1,)
        assert dissim(q, s, MetricKind.parse("sym_kl", "aggregate_univariate")).shape == (32,)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            dissim(gauss([0], [1]), gauss([0, 0], [1, 1]), ALL_METRIC_KINDS[0])


class TestClassifierInput:
    def test_multivariate_concat(self):
        # left camera distance 2, right camera distance 0
        left = (gauss([2, 0], [2, 2]), gauss([0, 0], [2, 2]))
        right = (gauss([0, 0], [1, 1]), gauss([0, 0], [1, 1]))
        kind = MetricKind.parse("sym_mahalanobis", "multivariate")
        out = classifier_input(left, right, kind)
        assert out.shape == (2,)
        assert out[0] == pytest.approx(2.0) and out[1] == pytest.approx(0.0)

    def test_identical_pairs_zero_vector(self):
        g = gauss(np.arange(4.0), np.ones(4))
        for kind in ALL_METRIC_KINDS:
            out = classifier_input((g, g), (g, g), kind)
            assert np.allclose(out, 0.0)

    def test_aggregate_length(self):
        rng = np.random.default_rng(21)
        q, s = random_pair(rng, dim=32)
        out = classifier_input((q, s), (q, s), MetricKind.parse("wasserstein2", "aggregate_univariate"))
        assert out.shape == (64,)


class TestProperties:
    def test_nonnegativity_bulk(self):
        rng = np.random.default_rng(23)
        n, d = 10_000, 6
        mq, ms = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        vq, vs = rng.uniform(0.05, 5.0, size=(n, d)), rng.uniform(0.05, 5.0, size=(n, d))
        for metric in Metric:
            terms = pair_terms(metric, mq, vq, ms, vs)
            assert terms.min() >= -1e-12

    def test_identity_of_indiscernibles(self):
        rng = np.random.default_rng(25)
        q, s = random_pair(rng)
        assert sym_kl(q, q) == pytest.approx(0.0, abs=1e-14)
        assert wasserstein2_sq(q, q) == 0.0
        # differing only in variance: KL and Wasserstein see it, the mean-based ones do not
        qv = gauss(q.mean, q.var * 1.7)
        assert sym_kl(q, qv) > 0 and wasserstein2_sq(q, qv) > 0
        assert sym_mahalanobis(q, qv) == 0.0 and euclidean_sq(q, qv) == 0.0

    def test_pair_terms_backward_finite_difference(self):
        rng = np.random.default_rng(27)
        d = 5
        eps = 1e-6
        for metric in Metric:
            mq, ms = rng.normal(size=d), rng.normal(size=d)
            vq, vs = rng.uniform(0.3, 2.0, size=d), rng.uniform(0.3, 2.0, size=d)
            g = rng.normal(size=d)
            grads = pair_terms_backward(metric, mq, vq, ms, vs, g)
            for ai, arr in enumerate((mq, vq, ms, vs)):
                for i in range(d):
                    args = [mq.copy(), vq.copy(), ms.copy(), vs.copy()]
                    args[ai][i] += eps
                    up = float((pair_terms(metric, *args) * g).sum())
                    args[ai][i] -= 2 * eps
                    dn = float((pair_terms(metric, *args) * g).sum())
                    fd = (up - dn) / (2 * eps)
                    assert grads[ai][i] == pytest.approx(fd, rel=2e-5, abs=1e-7), (metric, ai, i)
