import numpy as np
import pytest

from medrec.autodiff import Tensor
from medrec.gradcheck import grad_check
from medrec.optim import Adam
import medrec.autodiff as ad


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], learning_rate=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        # bias correction makes the first update lr * g/|g|
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p], learning_rate=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], learning_rate=0.1)
        for _ in range(100):
            opt.zero_grad()
            loss = ad.tensor_sum((p - 3.0) * (p - 3.0))
            loss.backward()
            opt.step()
        assert abs(p.data[0] - 3.0) < 0.1

    def test_none_grad_skipped(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        b = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([a, b], learning_rate=0.5)
        a.grad = np.array([1.0])
        b.grad = None
        opt.step()
        assert a.data[0] != 1.0
        assert b.data[0] == 2.0

    def test_rejects_bad_hyperparameters(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(ValueError):
            Adam([p], learning_rate=-1.0)
        with pytest.raises(ValueError):
            Adam([p], beta1=1.0)


class TestGradCheckHarness:
    def test_sum_of_squares_is_exact(self, rng):
        p = Tensor(rng.standard_normal(6), requires_grad=True)
        err = grad_check(lambda: ad.tensor_sum(p * p), [p])
        assert err <= 1e-8

    def test_detects_corrupted_backward_rule(self, rng):
        # a deliberately wrong gradient: claims d(sum 2x)/dx = 1
        def corrupted(x):
            out = Tensor(x.data * 2.0)
            out.requires_grad = True
            out._parents = (x,)
            out._backward = lambda g: ad._accumulate(x, g * 1.0)
            return out

        p = Tensor(rng.standard_normal(4), requires_grad=True)
        err = grad_check(lambda: ad.tensor_sum(corrupted(p)), [p])
        assert err > 1e-2

    def test_nonscalar_rejected(self, rng):
        p = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: p * 2.0, [p])
