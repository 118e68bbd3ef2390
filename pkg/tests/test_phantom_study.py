"""Secondary checks read from the cached phantom study (see demos/phantom_study.py)."""

import os
from pathlib import Path

import numpy as np
import pytest

from mri2pet.dataio import generate_phantom, phantom_roi_mask
from mri2pet.phantom_study import StudyConfig, load_or_run, load_report, roi_class_threshold

STUDY_DIR = Path(os.environ.get("MRI2PET_STUDY_DIR", Path(__file__).resolve().parents[1] / "artifacts" / "phantom_study"))


def test_config_digest_tracks_fields():
    assert StudyConfig().digest() == StudyConfig().digest()
    assert StudyConfig(iterations=10).digest() != StudyConfig().digest()


def test_load_report_ignores_stale(tmp_path):
    (tmp_path / "report.json").write_text('{"config_digest": "nope"}')
    assert load_report(tmp_path) is None
    assert load_report(tmp_path / "missing") is None


def test_threshold_separates_ground_truth():
    recs = generate_phantom(40, (24, 24, 24), seed=0)
    roi = phantom_roi_mask((24, 24, 24)).data.astype(bool)
    thr = roi_class_threshold(recs, roi)
    correct = [(r.pet.data[roi].mean() < thr) == r.diseased for r in recs]
    assert np.mean(correct) == 1.0


@pytest.fixture(scope="module")
def report():
    return load_or_run(STUDY_DIR, StudyConfig())


@pytest.mark.slow
def test_healthy_input_within_validation_slack(report):
    h = report["healthy_vs_validation"]
    assert h["healthy_test_mae"] < 1.2 * h["val_mae"], h


@pytest.mark.slow
def test_cognitive_score_outweighs_age(report):
    # keeping the class-correlated score should hurt ROI accuracy less than keeping age
    sens = report["sensitivity"]
    roi = {v: np.mean([row["mae_roi_A"] for row in sens[v].values()]) for v in ("adas13", "age")}
    assert roi["adas13"] < roi["age"], roi


@pytest.mark.slow
def test_report_bookkeeping(report):
    assert report["split"] == {"train": 120, "val": 40, "test": 40, "imbalance": pytest.approx(report["split"]["imbalance"])}
    assert len(report["per_subject"]) == 80
    assert report["training"]["full"]["loss_last50"] < report["training"]["full"]["loss_first50"]
    assert set(report["fairness"]) == {"gender", "age", "diagnosis", "total"}
