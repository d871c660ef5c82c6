import numpy as np
import pytest

from coarse2fine.cluster import Membership, update_proxies
from coarse2fine.losses import (WI_READS, build_coarse_index, coarse_loss,
                                combined_objective, instance_loss_full,
                                instance_loss_within_coarse,
                                instance_proxy_loss, margin_diagnostic)
from coarse2fine.model import encode
from coarse2fine.numerics import cross_entropy, grad_check
from coarse2fine.trainer import (gradient_vector, param_vector,
                                 set_param_vector)
from conftest import identity_params, make_params


def _loss_fn_builder(params, call):
    """Scalar loss as a function of the flat parameter vector."""
    def fn(vec):
        return call(set_param_vector(params, vec)).value
    return fn


def _direct_ce_oracle(logit_rows, labels):
    return float(np.mean([cross_entropy(row, y)
                          for row, y in zip(logit_rows, labels)]))


class TestCoarseLoss:
    def test_single_class_is_zero(self, rng):
        params = make_params(rng, C=1)
        lv = coarse_loss(params, rng.standard_normal((3, 4)), np.zeros(3, int))
        assert lv.value == 0.0

    def test_zero_embeddings_give_log_C(self, rng):
        params = make_params(rng, C=5)
        params.encoder = [(np.zeros((4, 3)), np.zeros(3))]
        lv = coarse_loss(params, rng.standard_normal((2, 4)),
                         np.array([0, 4]))
        assert abs(lv.value - np.log(5)) < 1e-12

    def test_matches_direct_oracle(self, rng):
        params = make_params(rng, C=3)
        X = rng.standard_normal((5, 4))
        y = rng.integers(0, 3, 5)
        f, _ = encode(params, X)
        oracle = _direct_ce_oracle(f @ params.W_C, y)
        assert abs(coarse_loss(params, X, y).value - oracle) < 1e-12

    def test_label_out_of_range(self, rng):
        params = make_params(rng, C=2)
        with pytest.raises(ValueError):
            coarse_loss(params, rng.standard_normal((1, 4)), np.array([2]))


class TestInstanceLossFull:
    def test_single_instance_is_zero(self, rng):
        params = make_params(rng, n=1)
        lv = instance_loss_full(params, rng.standard_normal((1, 4)),
                                np.array([0]))
        assert lv.value == 0.0

    def test_zero_embeddings_give_log_n(self, rng):
        params = make_params(rng, n=7)
        params.encoder = [(np.zeros((4, 3)), np.zeros(3))]
        lv = instance_loss_full(params, rng.standard_normal((3, 4)),
                                np.array([0, 3, 6]))
        assert abs(lv.value - np.log(7)) < 1e-12

    def test_matches_direct_oracle(self, rng):
        params = make_params(rng, n=6)
        X = rng.standard_normal((4, 4))
        ids = np.array([0, 2, 3, 5])
        f, _ = encode(params, X)
        oracle = _direct_ce_oracle(f @ params.W_I, ids)
        assert abs(instance_loss_full(params, X, ids).value - oracle) < 1e-12


class TestWithinCoarse:
    def test_single_coarse_class_equals_full(self, rng):
        params = make_params(rng, n=5)
        X = rng.standard_normal((5, 4))
        ids = np.arange(5)
        coarse = np.zeros(5, int)
        index = build_coarse_index(coarse)
        full = instance_loss_full(params, X, ids)
        within = instance_loss_within_coarse(params, X, ids, coarse, index)
        assert abs(full.value - within.value) < 1e-12
        np.testing.assert_allclose(within.grad_embeddings,
                                   full.grad_embeddings, atol=1e-12)
        for c, g in full.grad_heads["instance"].items():
            np.testing.assert_allclose(within.grad_heads["instance"][c], g,
                                       atol=1e-12)

    def test_all_singleton_classes_is_zero(self, rng):
        params = make_params(rng, n=4)
        X = rng.standard_normal((4, 4))
        coarse = np.arange(4)
        lv = instance_loss_within_coarse(params, X, np.arange(4), coarse,
                                         build_coarse_index(coarse))
        assert lv.value == 0.0

    def test_matches_direct_oracle_three_classes(self, rng):
        params = make_params(rng, n=9)
        X = rng.standard_normal((9, 4))
        ids = np.arange(9)
        coarse = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
        index = build_coarse_index(coarse)
        f, _ = encode(params, X)
        total = 0.0
        for i in range(9):
            members = index[coarse[i]]
            row = f[i] @ params.W_I[:, members]
            total += cross_entropy(row, int(np.nonzero(members == i)[0][0]))
        lv = instance_loss_within_coarse(params, X, ids, coarse, index)
        assert abs(lv.value - total / 9) < 1e-12

    def test_membership_inconsistency_rejected(self, rng):
        params = make_params(rng, n=4)
        coarse = np.array([0, 0, 1, 1])
        bad_index = {0: np.array([0]), 1: np.array([2, 3])}  # 1 missing
        with pytest.raises(ValueError, match="not listed"):
            instance_loss_within_coarse(params, rng.standard_normal((4, 4)),
                                        np.arange(4), coarse, bad_index)

    def test_reads_only_member_columns(self, rng):
        params = make_params(rng, n=8)
        X = rng.standard_normal((8, 4))
        coarse = np.array([0, 0, 0, 0, 0, 1, 1, 1])
        index = build_coarse_index(coarse)
        WI_READS.reset()
        lv = instance_loss_within_coarse(params, X, np.arange(8), coarse,
                                         index)
        assert WI_READS.reads == 5 * 5 + 3 * 3
        # gradient keys stay inside the touched classes
        assert set(lv.grad_heads["instance"]) <= set(range(8))
        WI_READS.reset()
        instance_loss_full(params, X, np.arange(8))
        assert WI_READS.reads == 8 * 8


class TestInstanceProxy:
    def test_single_cluster_is_zero(self, rng):
        params = make_params(rng, n=4, with_proxy=1)
        m = Membership(assignment=np.zeros(4, int), P=1, within_coarse=False,
                       objective=0.0)
        params.W_P = update_proxies(params.W_I, m)
        lv = instance_proxy_loss(params, rng.standard_normal((2, 4)),
                                 np.array([0, 3]), m)
        assert lv.value == 0.0

    def test_singleton_clusters_equal_full_loss(self, rng):
        params = make_params(rng, n=5)
        m = Membership(assignment=np.arange(5), P=5, within_coarse=False,
                       objective=0.0)
        params.W_P = update_proxies(params.W_I, m)
        X = rng.standard_normal((3, 4))
        ids = np.array([0, 2, 4])
        full = instance_loss_full(params, X, ids)
        proxy = instance_proxy_loss(params, X, ids, m)
        assert abs(full.value - proxy.value) < 1e-12

    def test_requires_proxy_head(self, rng):
        params = make_params(rng, n=3)
        m = Membership(assignment=np.zeros(3, int), P=1, within_coarse=False,
                       objective=0.0)
        with pytest.raises(RuntimeError):
            instance_proxy_loss(params, rng.standard_normal((1, 4)),
                                np.array([0]), m)

    def test_matches_direct_oracle(self, rng):
        params = make_params(rng, n=6, with_proxy=3)
        m = Membership(assignment=np.array([0, 0, 1, 1, 2, 2]), P=3,
                       within_coarse=False, objective=0.0)
        X = rng.standard_normal((4, 4))
        ids = np.array([1, 2, 4, 5])
        f, _ = encode(params, X)
        oracle = _direct_ce_oracle(f @ params.W_P, m.assignment[ids])
        assert abs(instance_proxy_loss(params, X, ids, m).value
                   - oracle) < 1e-12


class TestCombined:
    def _setup(self, rng, **kw):
        params = make_params(rng, n=6, with_proxy=3, **kw)
        X = rng.standard_normal((4, 4))
        ids = np.array([0, 2, 3, 5])
        coarse = np.array([0, 0, 0, 1, 1, 1])
        m = Membership(assignment=np.array([0, 0, 1, 1, 2, 2]), P=3,
                       within_coarse=False, objective=0.0)
        return params, X, ids, coarse, build_coarse_index(coarse), m

    def test_zero_weights_equal_coarse_loss(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)
        combined = combined_objective(params, X, ids, coarse[ids], index,
                                      0.0, 0.0)
        assert combined.value == coarse_loss(params, X, coarse[ids]).value

    def test_affine_in_lambda_I(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)

        def at(lam):
            return combined_objective(params, X, ids, coarse[ids], index,
                                      lam, 0.0).value

        assert abs((at(0.8) - at(0.4)) - (at(0.4) - at(0.0))) < 1e-12

    def test_equals_weighted_sum_of_terms(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)
        lam_i, lam_p = 0.3, 1.7
        lv = combined_objective(params, X, ids, coarse[ids], index,
                                lam_i, lam_p, membership=m)
        c = coarse_loss(params, X, coarse[ids]).value
        i = instance_loss_within_coarse(params, X, ids, coarse[ids],
                                        index).value
        p = instance_proxy_loss(params, X, ids, m).value
        assert abs(lv.value - (c + lam_i * i + lam_p * p)) < 1e-12
        assert lv.components == {"coarse": c, "instance": i, "proxy": p}

    def test_full_instance_mode(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)
        lv = combined_objective(params, X, ids, coarse[ids], index, 0.5, 0.0,
                                within_coarse=False)
        c = coarse_loss(params, X, coarse[ids]).value
        i = instance_loss_full(params, X, ids).value
        assert abs(lv.value - (c + 0.5 * i)) < 1e-12

    def test_proxy_weight_requires_membership(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)
        with pytest.raises(RuntimeError):
            combined_objective(params, X, ids, coarse[ids], index, 0.0, 1.0)

    def test_negative_weights_rejected(self, rng):
        params, X, ids, coarse, index, m = self._setup(rng)
        with pytest.raises(ValueError):
            combined_objective(params, X, ids, coarse[ids], index, -1.0, 0.0)


class TestMarginDiagnostic:
    def test_point_at_own_proxy(self, rng):
        params = identity_params(3, n=2)
        params.W_P = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
        m = Membership(assignment=np.array([0, 1]), P=2, within_coarse=False,
                       objective=0.0)
        x = params.W_P[:, 0]  # exactly at proxy 0
        got = margin_diagnostic(params, x[None, :], np.array([0]), m)
        expected = -float(np.sum((x - params.W_P[:, 1]) ** 2))
        assert abs(got - expected) < 1e-12

    def test_equidistant_is_zero(self):
        params = identity_params(2, n=2)
        params.W_P = np.array([[1.0, -1.0], [0.0, 0.0]])
        m = Membership(assignment=np.array([0, 1]), P=2, within_coarse=False,
                       objective=0.0)
        got = margin_diagnostic(params, np.array([[0.0, 5.0]]),
                                np.array([0]), m)
        assert abs(got) < 1e-12

    def test_matches_direct_oracle(self, rng):
        params = identity_params(3, n=6)
        params.W_P = rng.standard_normal((3, 4))
        m = Membership(assignment=rng.integers(0, 4, 6), P=4,
                       within_coarse=False, objective=0.0)
        X = rng.standard_normal((5, 3))
        ids = np.array([0, 1, 3, 4, 5])
        total = 0.0
        for x, i in zip(X, ids):
            own = m.assignment[i]
            d2 = [float(np.sum((x - params.W_P[:, p]) ** 2)) for p in range(4)]
            others = [d2[p] for p in range(4) if p != own]
            total += d2[own] - sum(others) / 3
        got = margin_diagnostic(params, X, ids, m)
        assert abs(got - total) < 1e-10


class TestGradients:
    """Spot checks; the 100-configuration sweep lives in the acceptance suite."""

    def test_combined_with_all_variants(self, rng):
        params = make_params(rng, input_dim=3, hidden=(3,), d=2, C=2, n=5,
                             with_proxy=2, cosine=True, mlp_head=True)
        X = rng.standard_normal((3, 3)) + 0.4
        ids = np.array([0, 2, 4])
        coarse = np.array([0, 0, 0, 1, 1])
        index = build_coarse_index(coarse)
        m = Membership(assignment=np.array([0, 0, 0, 1, 1]), P=2,
                       within_coarse=False, objective=0.0)

        def call(p):
            return combined_objective(p, X, ids, coarse[ids], index,
                                      0.7, 1.3, membership=m)

        lv = call(params)
        err = grad_check(_loss_fn_builder(params, call), param_vector(params),
                         gradient_vector(params, lv))
        assert err < 1e-4

    def test_loss_values_nonnegative(self, rng):
        params = make_params(rng, n=5)
        X = rng.standard_normal((4, 4))
        coarse = np.array([0, 0, 1, 1, 1])
        assert coarse_loss(params, X, coarse[:4]).value >= 0
        assert instance_loss_full(params, X, np.arange(4)).value >= 0
