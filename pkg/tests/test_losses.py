import math

import numpy as np
import pytest

from stgaze import autodiff as ad
from stgaze.autodiff import Parameter, Tensor
from stgaze.errors import InvalidArgument
from stgaze.geometry import ScreenGeometry
from stgaze.losses import BatchMetrics, LossWeights, loss_angular, loss_pog, loss_total, sequence_loss

GEOM50 = ScreenGeometry(gaze_origin=(0.0, 0.0, 50.0))
ORIGIN50 = np.array([0.0, 0.0, 50.0])


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


class TestAngular:
    def test_perfect_prediction(self):
        with ad.precision(np.float64):
            out = loss_angular(t([[0.1, -0.2]]), [[0.1, -0.2]])
        assert out.data[0] == 0.0

    def test_hand_evaluated(self):
        with ad.precision(np.float64):
            out = loss_angular(t([[0.0, 0.0]]), [[0.0, 0.0996687]])
        assert out.data[0] == pytest.approx(5.71059, abs=1e-4)

    def test_perfect_prediction_32_bit(self):
        out = loss_angular(Tensor([[0.3, -0.1]]), [[0.3, -0.1]])
        assert out.data[0] < 1e-3

    def test_matches_geometry_error(self):
        from stgaze.geometry import angular_error_deg
        rng = np.random.default_rng(3)
        a, b = rng.uniform(-1, 1, (20, 2)), rng.uniform(-1, 1, (20, 2))
        with ad.precision(np.float64):
            out = loss_angular(t(a), b).data
        np.testing.assert_allclose(out, angular_error_deg(a, b), atol=1e-9)

    def test_gradient_bounded_at_agreement(self):
        with ad.precision(np.float64):
            p = Parameter(np.array([[0.1, 0.2]]))
            ad.backward(ad.tensor_sum(loss_angular(p, [[0.1, 0.2]])))
        assert np.all(np.isfinite(p.grad))

    def test_grad_check_away_from_agreement(self):
        with ad.precision(np.float64):
            p = Parameter(np.random.default_rng(0).uniform(-0.4, 0.4, size=(6, 2)))
            truth = np.random.default_rng(1).uniform(-0.4, 0.4, size=(6, 2))
            assert ad.grad_check(lambda: ad.tensor_sum(loss_angular(p, truth)), [p]) < 1e-4


class TestPog:
    def test_perfect(self):
        with ad.precision(np.float64):
            out = loss_pog(t([[0.1, 0.2]]), [[0.1, 0.2]], ORIGIN50, GEOM50)
        np.testing.assert_allclose(out.cm.data, 0, atol=1e-9)
        np.testing.assert_allclose(out.px.data, 0, atol=1e-9)

    def test_five_cm_right(self):
        with ad.precision(np.float64):
            out = loss_pog(t([[0.0, 0.0]]), [[0.0, math.atan(0.1)]], ORIGIN50, GEOM50)
        assert out.cm.data[0] == pytest.approx(5.0, abs=1e-9)
        assert out.px.data[0] == pytest.approx(5.0 * 32, abs=1e-7)

    def test_off_screen_prediction_is_masked(self):
        with ad.precision(np.float64):
            out = loss_pog(t([[0.0, math.pi], [0.0, 0.0]]), [[0.0, 0.1], [0.0, 0.1]], ORIGIN50, GEOM50)
        assert out.valid.tolist() == [False, True]
        assert out.masked == 1
        assert out.cm.data[0] == 0.0 and out.cm.data[1] > 0


class TestTotal:
    def test_worked_example(self):
        w = LossWeights()
        assert (w.ang, w.cm, w.px) == (1.0, 0.01, 0.0)
        with ad.precision(np.float64):
            out = loss_total(t([2.0]), t([3.0]), t([123.0]), w)
        assert float(out.data) == pytest.approx(2.03, abs=1e-12)

    def test_single_term(self):
        with ad.precision(np.float64):
            out = loss_total(t([5.0]), t([5.0]), t([7.0]), LossWeights(0, 0, 1))
        assert float(out.data) == 7.0

    def test_averaged_over_frames(self):
        with ad.precision(np.float64):
            out = loss_total(t([[1.0, 3.0]]), t([[0.0, 0.0]]), None, LossWeights())
        assert float(out.data) == 2.0

    def test_weights_validated(self):
        with pytest.raises(InvalidArgument):
            LossWeights(-1, 0, 0)
        with pytest.raises(InvalidArgument):
            LossWeights(0, 0, 0)

    def test_sequence_loss_perfect_is_near_zero(self):
        rng = np.random.default_rng(0)
        truth = rng.uniform(-0.3, 0.3, size=(2, 3, 2))
        from stgaze.geometry import angles_to_vector
        with ad.precision(np.float64):
            loss, info = sequence_loss(t(angles_to_vector(truth)), truth, np.tile([0, 12.0, 60], (2, 1)),
                                       ScreenGeometry(), LossWeights())
        assert float(loss.data) < 1e-6
        assert info["masked"] == 0


class TestMetrics:
    def test_combine_matches_concatenation(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(0, 10, 13), rng.uniform(0, 10, 7)
        ca, cb = rng.uniform(0, 5, 13), rng.uniform(0, 5, 7)
        merged = BatchMetrics.from_errors(a, ca, 32 * ca).combine(BatchMetrics.from_errors(b, cb, 32 * cb))
        whole = BatchMetrics.from_errors(np.concatenate([a, b]), np.concatenate([ca, cb]),
                                         32 * np.concatenate([ca, cb]))
        for k, v in whole.as_dict().items():
            assert merged.as_dict()[k] == pytest.approx(v, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            BatchMetrics.from_errors([])
