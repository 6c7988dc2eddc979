import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_ARCH
from locrank import autodiff as ad
from locrank.autodiff import Tensor, grad_check
from locrank.gradcheck import tiny_model_case
from locrank.loss import combined_loss, rank_loss, rank_probability, st_loss
from locrank.model import init_params, siamese_forward


def naive_rank_loss(v1, v2, label):
    p = math.exp(v1 - v2) / (1 + math.exp(v1 - v2))
    return -label * math.log(p) - (1 - label) * math.log(1 - p)


class TestRankLoss:
    def test_equal_scores_eq_label(self):
        assert rank_loss(0.3, 0.3, 0.5).item() == pytest.approx(math.log(2), abs=1e-12)
        assert rank_probability(0.3, 0.3) == 0.5

    def test_hand_value_d2(self):
        assert rank_loss(2.0, 0.0, 1.0).item() == pytest.approx(0.126928, abs=1e-6)

    def test_linear_asymptote(self):
        assert rank_loss(-10.0, 0.0, 1.0).item() == pytest.approx(10.0000454, abs=1e-7)

    @pytest.mark.parametrize("d", [-10.0, -2.0, 0.0, 2.0, 10.0])
    def test_matches_log1p_form(self, d):
        assert rank_loss(d, 0.0, 1.0).item() == pytest.approx(math.log1p(math.exp(-d)), abs=1e-9)

    @pytest.mark.parametrize("d", [-8.0, -1.0, 0.5, 3.0])
    @pytest.mark.parametrize("label", [1.0, 0.5])
    def test_matches_cross_entropy(self, d, label):
        assert rank_loss(d + 0.2, 0.2, label).item() == pytest.approx(naive_rank_loss(d + 0.2, 0.2, label), abs=1e-12)

    @pytest.mark.parametrize("v1,v2,label", [(0.7, -0.4, 1.0), (-1.5, 0.3, 1.0), (0.2, 0.9, 0.5), (4.0, 4.0, 0.5)])
    def test_gradient_is_p_minus_l(self, v1, v2, label):
        a, b = Tensor(v1, requires_grad=True), Tensor(v2, requires_grad=True)
        rank_loss(a, b, label).backward()
        p = rank_probability(v1, v2)
        assert a.grad == pytest.approx(p - label, abs=1e-15)
        assert b.grad == pytest.approx(label - p, abs=1e-15)
        h = 1e-6
        fd = (rank_loss(v1 + h, v2, label).item() - rank_loss(v1 - h, v2, label).item()) / (2 * h)
        assert abs(fd - (p - label)) <= 1e-8

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_mirror_property(self, v1, v2):
        # L=0 is the mirror of L=1 with the roles swapped
        assert rank_loss(v1, v2, 1.0).item() == pytest.approx(rank_loss(v2, v1, 0.0).item(), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-30, 30), st.floats(-30, 30))
    def test_eq_label_symmetric_and_minimized_at_equal(self, v1, v2):
        a = rank_loss(v1, v2, 0.5).item()
        assert a == pytest.approx(rank_loss(v2, v1, 0.5).item(), abs=1e-12)
        assert a >= math.log(2) - 1e-12

    @pytest.mark.parametrize("d", [1e4, -1e4, 1e3, -1e3])
    def test_stable_for_large_margins(self, d):
        for label in (1.0, 0.5):
            loss = rank_loss(d, 0.0, label)
            assert np.isfinite(loss.item())
        assert rank_loss(-1e4, 0.0, 1.0).item() == pytest.approx(1e4)

    def test_vectorized(self):
        out = rank_loss(np.array([2.0, 0.0]), np.array([0.0, 0.0]), np.array([1.0, 0.5])).data
        np.testing.assert_allclose(out, [math.log1p(math.exp(-2)), math.log(2)], atol=1e-12)


class TestStLoss:
    def test_center_is_zero(self):
        assert st_loss([0.6, 0.0, 0.0], (65, 65)).item() == 0.0

    def test_hand_value(self):
        assert st_loss([0.5, 1.0, 0.0], (65, 65)).item() == pytest.approx(256.0, abs=1e-12)

    def test_gradient_wrt_center(self):
        # d/dc_x of (c_x - 32)^2 at 48 is 32; chain through c_x = (s t + 1) * 32
        theta = Tensor([0.5, 1.0, 0.0], requires_grad=True)
        st_loss(theta, (65, 65)).backward()
        dcx_dt = 0.5 * 32.0
        assert theta.grad[1] / dcx_dt == pytest.approx(32.0, abs=1e-12)

    def test_gradient_finite_difference(self):
        theta = Tensor([0.7, 0.4, -0.9], requires_grad=True)
        assert grad_check(lambda: st_loss(theta, (40, 30)), theta) <= 1e-8

    def test_batched(self):
        thetas = np.array([[0.5, 1.0, 0.0], [0.5, 0.0, 1.0], [0.5, 0.0, 0.0]])
        np.testing.assert_allclose(st_loss(thetas, (65, 65)).data, [256.0, 256.0, 0.0], atol=1e-12)


def branch_outputs(push_1=0.0, push_2=0.0, seed=0, n=1):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL_ARCH, rng, s_init=0.6, t_init_range=0.0)
    for t in params.tensors.values():
        if t.data.ndim == 1 and t.shape != (3,):
            t.data[:] = rng.normal(0, 0.1, t.shape)
    x1, x2 = rng.random((n, 1, 20, 20)), rng.random((n, 1, 20, 20))

    def forward():
        bias = params["stn.theta.bias"].data.copy()
        params["stn.theta.bias"].data[1] = bias[1] + push_1
        o1, _ = siamese_forward(x1, x1, params)
        params["stn.theta.bias"].data[1] = bias[1] + push_2
        _, o2 = siamese_forward(x2, x2, params)
        params["stn.theta.bias"].data[:] = bias
        return o1, o2

    return params, forward


class TestCombinedLoss:
    def test_both_in_bounds_is_rank_only(self):
        _, fwd = branch_outputs()
        o1, o2 = fwd()
        res = combined_loss(o1, o2, [1.0])
        assert res.total.item() == pytest.approx(rank_loss(o1.v, o2.v, 1.0).item(), abs=1e-15)
        assert res.lambda_1[0] == 0 and res.lambda_2[0] == 0 and res.routing == ["full"]

    def test_first_out_is_st_only(self):
        _, fwd = branch_outputs(push_1=3.0)
        o1, o2 = fwd()
        res = combined_loss(o1, o2, [1.0])
        assert res.lambda_1[0] == 1 and res.lambda_2[0] == 0 and res.routing == ["stn-only"]
        assert res.total.item() == pytest.approx(st_loss(o1.theta, (20, 20)).item(), abs=1e-12)

    def test_both_out_sums_st(self):
        _, fwd = branch_outputs(push_1=3.0, push_2=-3.0)
        o1, o2 = fwd()
        res = combined_loss(o1, o2, [0.5])
        expect = st_loss(o1.theta, (20, 20)).item() + st_loss(o2.theta, (20, 20)).item()
        assert res.total.item() == pytest.approx(expect, abs=1e-12)

    def test_st_weight(self):
        _, fwd = branch_outputs(push_1=3.0)
        o1, o2 = fwd()
        full = combined_loss(o1, o2, [1.0]).total.item()
        assert combined_loss(o1, o2, [1.0], st_weight=0.25).total.item() == pytest.approx(0.25 * full, abs=1e-12)

    def test_out_of_bounds_pair_leaves_ranker_untouched(self):
        params, fwd = branch_outputs(push_1=3.0)
        o1, o2 = fwd()
        combined_loss(o1, o2, [1.0]).total.backward()
        rn = sum(np.abs(t.grad).sum() for k, t in params.tensors.items() if k.startswith("rn.") and t.grad is not None)
        assert rn == 0.0
        g = params["stn.theta.bias"].grad
        assert np.abs(g).sum() > 0
        # a small step against the gradient pulls the center toward the image middle
        before = st_loss(o1.theta, (20, 20)).item()
        params["stn.theta.bias"].data -= 1e-4 * g
        after = st_loss(fwd()[0].theta, (20, 20)).item()
        assert after < before

    def test_in_bounds_pair_reaches_ranker_and_localizer(self):
        params, fwd = branch_outputs()
        o1, o2 = fwd()
        combined_loss(o1, o2, [1.0]).total.backward()
        assert np.abs(params["rn.fc1.weights"].grad).sum() > 0
        assert np.abs(params["stn.theta.bias"].grad).sum() > 0

    def test_triples_match_batched(self):
        _, fwd = branch_outputs(seed=2, n=4)
        o1, o2 = fwd()
        labels = np.array([1.0, 0.5, 1.0, 1.0])
        batched = combined_loss(o1, o2, labels).total.item()
        triples = [(o1.select(slice(k, k + 1)), o2.select(slice(k, k + 1)), labels[k]) for k in range(4)]
        assert combined_loss(triples).total.item() == pytest.approx(batched, abs=1e-15)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            combined_loss([])

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_formula(self, seed):
        rng = np.random.default_rng(seed)
        params, _, _, _ = tiny_model_case(rng, push_out=bool(seed % 2))
        x1, x2 = rng.random((25, 1, 14, 14)), rng.random((25, 1, 14, 14))
        labels = rng.choice([1.0, 0.5], size=25)
        w = 0.3
        o1, o2 = siamese_forward(x1, x2, params)
        res = combined_loss(o1, o2, labels, st_weight=w)

        total = 0.0
        for k in range(25):
            v1, v2 = float(o1.v.data[k]), float(o2.v.data[k])
            c1, c2 = o1.center_px.data[k], o2.center_px.data[k]
            l1 = 0.0 if (0 <= c1[0] <= 13 and 0 <= c1[1] <= 13) else 1.0
            l2 = 0.0 if (0 <= c2[0] <= 13 and 0 <= c2[1] <= 13) else 1.0
            st1 = (c1[0] - 6.5) ** 2 + (c1[1] - 6.5) ** 2
            st2 = (c2[0] - 6.5) ** 2 + (c2[1] - 6.5) ** 2
            total += (1 - l1) * (1 - l2) * naive_rank_loss(v1, v2, labels[k]) + w * (l1 * st1 + l2 * st2)
        total /= 25
        assert abs(res.total.item() - total) <= 1e-12 * max(1.0, abs(total))
