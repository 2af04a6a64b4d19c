import numpy as np
import pytest
import torch

from oracles import naive_infill, naive_ssim_mean
from stereobridge.objectives import (
    LossWeights,
    MetricReport,
    compute_metrics,
    infill_nearest,
    loss_initial,
    loss_pixel,
    loss_structural,
    smooth_l1,
    ssim_mean,
    total_loss,
)


class TestSmoothL1:
    def test_quadratic_inside_linear_outside(self):
        x = torch.tensor([0.0, 0.5, -0.5, 1.0, 2.0, -3.0], dtype=torch.float64)
        want = torch.tensor([0.0, 0.125, 0.125, 0.5, 1.5, 2.5], dtype=torch.float64)
        torch.testing.assert_close(smooth_l1(x), want)

    def test_continuously_differentiable_at_knot(self):
        """Value and slope agree from both sides of |x| = 1."""
        eps = 1e-7
        lo = smooth_l1(torch.tensor(1 - eps, dtype=torch.float64))
        hi = smooth_l1(torch.tensor(1 + eps, dtype=torch.float64))
        assert abs(lo - hi) < 1e-6
        x = torch.tensor([1.0 - 1e-4, 1.0 + 1e-4], dtype=torch.float64, requires_grad=True)
        smooth_l1(x).sum().backward()
        np.testing.assert_allclose(x.grad.numpy(), [1.0 - 1e-4, 1.0], atol=2e-4)


class TestLossInitial:
    def test_masked_mean(self):
        pred = torch.tensor([[0.0, 2.0], [5.0, 1.0]])
        gt = torch.tensor([[0.0, 0.0], [0.0, 0.0]])
        mask = torch.tensor([[True, True], [False, True]])
        # entries 0, 2, 1 -> smooth l1 0, 1.5, 0.5 -> mean 2/3
        torch.testing.assert_close(loss_initial(pred, gt, mask), torch.tensor(2.0 / 3.0))

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            loss_initial(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2, 2, dtype=torch.bool))


class TestLossPixel:
    def test_single_prediction_equals_masked_l1(self):
        rng = np.random.default_rng(0)
        pred = torch.tensor(rng.standard_normal((6, 7)))
        gt = torch.tensor(rng.standard_normal((6, 7)))
        mask = torch.tensor(rng.random((6, 7)) > 0.3)
        got = loss_pixel([pred], gt, gamma=0.9, mask=mask)
        want = (pred - gt).abs()[mask].mean()
        torch.testing.assert_close(got, want)

    def test_exponential_weighting(self):
        """With constant per-step errors the loss is the weighted error sum."""
        gt = torch.zeros(3, 3)
        seq = [torch.full((3, 3), 1.0), torch.full((3, 3), 2.0), torch.full((3, 3), 4.0)]
        got = loss_pixel(seq, gt, gamma=0.5)
        # weights 0.25, 0.5, 1.0 over mean errors 1, 2, 4
        torch.testing.assert_close(got, torch.tensor(0.25 * 1 + 0.5 * 2 + 1.0 * 4.0))

    def test_later_steps_weighted_more(self):
        gt = torch.zeros(4, 4)
        bad_late = loss_pixel([torch.zeros(4, 4), torch.ones(4, 4)], gt, gamma=0.5)
        bad_early = loss_pixel([torch.ones(4, 4), torch.zeros(4, 4)], gt, gamma=0.5)
        assert bad_late > bad_early

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            loss_pixel([], torch.zeros(2, 2))


class TestStructuralLoss:
    def test_identical_inputs_give_zero(self):
        rng = np.random.default_rng(1)
        d = torch.tensor(rng.uniform(0, 20, (16, 16)))
        torch.testing.assert_close(
            loss_structural(d, d, window=7, data_range=20.0),
            torch.tensor(0.0, dtype=torch.float64),
        )

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 10, (12, 14))
        b = rng.uniform(0, 10, (12, 14))
        got = ssim_mean(
            torch.tensor(a), torch.tensor(b), window=7, data_range=10.0
        ).item()
        want = naive_ssim_mean(a, b, window=7, data_range=10.0)
        assert abs(got - want) < 1e-10

    def test_bounded_above_by_two(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = torch.tensor(rng.uniform(0, 5, (10, 10)))
            b = torch.tensor(rng.uniform(0, 5, (10, 10)))
            loss = loss_structural(a, b, window=7, data_range=5.0).item()
            assert 0.0 <= loss <= 2.0

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim_mean(torch.zeros(4, 4), torch.zeros(4, 4), window=7)


class TestTotalLoss:
    def test_weighted_sum(self):
        w = LossWeights()
        got = total_loss(
            torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), w
        )
        torch.testing.assert_close(got, torch.tensor(3.25))

    def test_rejects_non_finite(self):
        w = LossWeights()
        with pytest.raises(ValueError):
            total_loss(torch.tensor(float("nan")), torch.tensor(0.0), torch.tensor(0.0), w)
        with pytest.raises(ValueError):
            total_loss(torch.tensor(0.0), torch.tensor(float("inf")), torch.tensor(0.0), w)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(gamma=0.0)
        with pytest.raises(ValueError):
            LossWeights(ssim_window=4)


class TestMetrics:
    def test_hand_computed_values(self):
        pred = torch.tensor([[0.0, 4.0], [10.0, 50.0]])
        gt = torch.tensor([[0.0, 0.0], [6.0, 49.0]])
        rep = compute_metrics(pred, gt)
        # errors 0, 4, 4, 1 -> epe 2.25; bad3: 2 of 4 = 50%
        assert abs(rep.epe - 2.25) < 1e-6
        assert abs(rep.bad3 - 50.0) < 1e-6
        # d1 needs err > 3 and err > 5% gt: pixel (0,1) gt 0 -> yes; (1,0): 4 > 0.3 -> yes
        assert abs(rep.d1_all - 50.0) < 1e-6
        assert rep.pixels == 4

    def test_d1_relative_threshold(self):
        """Large-disparity pixels need > 5% relative error to count for d1."""
        pred = torch.tensor([[104.0]])
        gt = torch.tensor([[100.0]])
        rep = compute_metrics(pred, gt)
        assert rep.bad3 == 100.0  # absolute 4 px
        assert rep.d1_all == 0.0  # only 4% relative

    def test_masked(self):
        pred = torch.tensor([[0.0, 100.0]])
        gt = torch.zeros(1, 2)
        mask = torch.tensor([[True, False]])
        rep = compute_metrics(pred, gt, mask)
        assert rep.epe == 0.0 and rep.pixels == 1
        with pytest.raises(ValueError):
            compute_metrics(pred, gt, torch.zeros(1, 2, dtype=torch.bool))

    def test_report_serialization(self):
        rep = MetricReport(epe=1.5, bad3=10.0, d1_all=5.0, pixels=100)
        d = rep.to_dict()
        assert d["epe"] == 1.5
        flat = rep.to_flat()
        assert "epe=1.500000" in flat and "d1_all=5.000000" in flat


class TestInfill:
    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        for h, w in [(5, 5), (7, 4), (16, 16)]:
            values = rng.uniform(0, 30, (h, w))
            valid = rng.random((h, w)) > 0.4
            if not valid.any():
                valid[0, 0] = True
            got = infill_nearest(values, valid)
            want = naive_infill(values, valid)
            np.testing.assert_allclose(got, want)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        values = rng.uniform(0, 10, (9, 9))
        valid = rng.random((9, 9)) > 0.5
        valid[3, 3] = True
        once = infill_nearest(values, valid)
        twice = infill_nearest(once, np.ones_like(valid))
        np.testing.assert_allclose(once, twice)
        # filling again with the original mask also changes nothing
        np.testing.assert_allclose(infill_nearest(once, valid), once)

    def test_tie_breaks_to_lowest_row_major_source(self):
        """Equidistant sources resolve to the earlier row-major pixel."""
        values = np.zeros((3, 3))
        values[0, 1] = 7.0
        values[2, 1] = 9.0
        valid = np.zeros((3, 3), dtype=bool)
        valid[0, 1] = True
        valid[2, 1] = True
        out = infill_nearest(values, valid)
        assert out[1, 1] == 7.0  # (0,1) beats (2,1) at distance 1

    def test_valid_pixels_untouched(self):
        rng = np.random.default_rng(6)
        values = rng.uniform(0, 5, (6, 6))
        valid = rng.random((6, 6)) > 0.5
        valid[0, 0] = True
        out = infill_nearest(values, valid)
        np.testing.assert_allclose(out[valid], values[valid])

    def test_all_invalid_rejected(self):
        with pytest.raises(ValueError):
            infill_nearest(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool))

    def test_all_valid_is_copy(self):
        values = np.arange(9.0).reshape(3, 3)
        out = infill_nearest(values, np.ones((3, 3), dtype=bool))
        np.testing.assert_allclose(out, values)
        assert out is not values
