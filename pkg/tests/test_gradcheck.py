import numpy as np
import pytest

from groundseg.autodiff import Tensor
from groundseg.gradcheck import (FIXTURE_NAMES, GradCheckReport, build_fixture, grad_check,
                                 run_fixture)


@pytest.mark.parametrize("name", ["weighted_bce", "weighted_dice",
                                  "consistency_loss", "text_loss"])
def test_loss_fixtures_within_tolerance(name):
    report = run_fixture(name)
    assert not report.nonfinite
    assert report.max_rel_error < 1e-3, str(report)


def test_pipeline_fixture_within_tolerance():
    report = run_fixture("pipeline")
    assert not report.nonfinite
    assert report.max_rel_error < 1e-2, str(report)


def test_pipeline_fixture_obeys_scalar_budget():
    _, params = build_fixture("pipeline")
    assert sum(p.data.size for p in params.values()) <= 2000


def test_grad_check_rejects_oversized_fixture():
    big = {"w": Tensor(np.zeros(2001), requires_grad=True)}
    with pytest.raises(ValueError):
        grad_check(lambda: (big["w"] * big["w"]).__getitem__(0), big)


def test_grad_check_reports_nonfinite_loss():
    w = Tensor(np.array([1.0]), requires_grad=True)

    def bad_loss():
        return Tensor(np.asarray(np.inf))

    report = grad_check(bad_loss, {"w": w})
    assert report.nonfinite
    assert not np.isfinite(report.max_rel_error)


def test_grad_check_mode_validation():
    w = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: (w * w)[0], {"w": w}, mode="forward")


def test_unknown_fixture_rejected():
    with pytest.raises(ValueError):
        build_fixture("nope")
    assert set(FIXTURE_NAMES) == {"weighted_bce", "weighted_dice", "consistency_loss",
                                  "text_loss", "pipeline"}


def test_report_str_readable():
    rep = GradCheckReport(1.2e-5, "w[3]", 10)
    assert "1.200e-05" in str(rep)
