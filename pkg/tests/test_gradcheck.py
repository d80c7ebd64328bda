"""The checker itself must be trustworthy: it has to pass a known-good
gradient and fail a deliberately corrupted one."""

import numpy as np
import pytest

from coreason import tensor as T
from coreason.errors import InputError
from coreason.gradcheck import grad_check
from coreason.tensor import RngState, Tensor


@pytest.fixture(autouse=True)
def _float64():
    with T.precision("float64"):
        yield


def test_accepts_correct_gradient():
    rng = RngState(0)
    w = Tensor(rng.normal(1.0, (4, 3)), requires_grad=True)
    x = Tensor(rng.normal(1.0, (2, 4)))
    report = grad_check(lambda: T.sum_all(T.relu(T.matmul(x, w))), [("w", w)])
    assert report.ok(1e-6)
    assert report.checked == report.total_coords == 12


def test_rejects_corrupted_gradient():
    rng = RngState(1)
    w = Tensor(rng.normal(1.0, (3, 3)), requires_grad=True)
    x = Tensor(rng.normal(1.0, (2, 3)))

    def loss():
        # wrong by construction: doubles the forward value only when the
        # tape is recording, so numeric and analytic gradients disagree
        out = T.sum_all(T.matmul(x, w))
        return T.scale(out, 2.0) if T.grad_enabled() else out

    report = grad_check(loss, [("w", w)])
    assert not report.ok(1e-2)
    assert report.worst is not None and report.worst.rel_error > 0.3


def test_subsampling_reports_checked_count():
    rng = RngState(2)
    w = Tensor(rng.normal(1.0, (10, 10)), requires_grad=True)
    report = grad_check(lambda: T.sum_all(T.relu(w)),
                        [("w", w)], max_coords_per_tensor=7, rng=RngState(5))
    assert report.checked == 7
    assert report.total_coords == 100
    assert report.ok(1e-6)


def test_subsampled_coordinates_are_deterministic():
    def run():
        rng = RngState(3)
        w = Tensor(rng.normal(1.0, (8, 8)), requires_grad=True)
        rep = grad_check(lambda: T.sum_all(T.relu(w)), [("w", w)],
                         max_coords_per_tensor=5, rng=RngState(11))
        return [r.index for r in rep.results]

    assert run() == run()


def test_requires_grad_enforced():
    w = Tensor(np.zeros((2, 2)))
    with pytest.raises(InputError):
        grad_check(lambda: T.sum_all(w), [("w", w)])


def test_near_zero_coordinates_do_not_blow_up():
    # both analytic and numeric gradients are ~0 for dead relu units;
    # the relative error floor must treat those as agreement
    w = Tensor(np.full((3, 3), -5.0), requires_grad=True)
    report = grad_check(lambda: T.sum_all(T.relu(w)), [("w", w)])
    assert report.max_rel_error == 0.0
