import math

import numpy as np
import pytest

from ditlab.evaluation import (
    PSNR_CAP,
    EvalReport,
    background_mask,
    centroid_errors,
    evaluate,
    extract_centroid,
    psnr,
)
from ditlab.flow import FlowSchedule
from ditlab.scenes import SceneSpec, generate, make_dataset, sample_from_seed


@pytest.fixture(scope="module")
def val():
    return make_dataset(20, 1, frames=4, height=16, width=16).val


def copy_generator(samples, seed):
    return np.stack([s.frames for s in samples])


def test_oracle_copy_scores_perfectly(val):
    report = evaluate(None, val, FlowSchedule(), seeds=[0, 1], generator=copy_generator)
    assert report.val_mse == 0.0 and report.psnr == PSNR_CAP
    assert report.pose_error_px < 0.75
    assert report.pose_hit_rate == 1.0
    assert report.background_mse == 0.0
    # identical outputs for every seed: no diversity
    assert report.diversity == 0.0


def test_noisy_generator_has_positive_diversity(val):
    def noisy(samples, seed):
        rng = np.random.default_rng(seed)
        return np.clip(copy_generator(samples, seed) + 0.01 * rng.standard_normal((len(samples), 3, 4, 16, 16)), 0, 1)

    report = evaluate(None, val, FlowSchedule(), seeds=[0, 1, 2], generator=noisy)
    assert report.diversity > 0 and 0 < report.val_mse < 1e-3


def test_psnr_examples():
    assert psnr(0.0) == PSNR_CAP
    assert psnr(0.01) == pytest.approx(20.0)
    assert psnr(1.0) == 0.0


def test_centroid_is_translation_equivariant():
    base = SceneSpec("square", (0.9, 0.1, 0.1), ((10.0, 12.0),), 0, frames=1, height=32, width=32)
    moved = SceneSpec("square", (0.9, 0.1, 0.1), ((13.0, 17.0),), 0, frames=1, height=32, width=32)
    a = extract_centroid(generate(base, np.random.default_rng(0)).frames, base.sprite_color)[0]
    b = extract_centroid(generate(moved, np.random.default_rng(0)).frames, moved.sprite_color)[0]
    np.testing.assert_allclose(b - a, [3.0, 5.0], atol=0.25)


def test_missing_sprite_scores_the_diagonal():
    s = sample_from_seed(3, frames=2, height=16, width=20)
    blank = np.zeros_like(s.frames)
    assert np.isnan(extract_centroid(blank, s.spec.sprite_color)).all()
    np.testing.assert_allclose(centroid_errors(blank, s), math.hypot(16, 20))


def test_background_mask_excludes_dilated_silhouette():
    s = sample_from_seed(0)
    mask = background_mask(s)
    sil = s.pose_silhouette[0] > 0.5
    assert not (mask & sil).any()
    assert (~mask).sum() > sil.sum()
    assert background_mask(s, radius=0).sum() == (~sil).sum()


def test_report_formats():
    r = EvalReport(0.5, 3.0, 1.0, 0.9, 0.1, 0.0)
    lines = r.csv_row().splitlines()
    assert lines[0].split(",")[0] == "val_mse" and len(lines) == 2
    assert len(r.csv_row(header=False).splitlines()) == 1
    assert "pose_hit_rate" in r.text()


def test_evaluate_needs_seeds(val):
    with pytest.raises(ValueError):
        evaluate(None, val, FlowSchedule(), seeds=[], generator=copy_generator)
