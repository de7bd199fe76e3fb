from __future__ import annotations

import csv
import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from oracles import accuracy, ap_bruteforce, grid_best, grid_cell_slack, tpr_bruteforce
from reconalign.errors import EvaluationError
from reconalign.evaluation import (
    DistanceDetector,
    ScoreEntry,
    ScoreSet,
    accuracy_at_threshold,
    average_precision,
    calibrate_threshold,
    evaluate,
    mse_distance,
    reconstruction_distance_score,
    score,
    score_arrays,
    threshold_candidates,
    tpr_at_fpr,
)
from reconalign.manifest import Label
from reconalign.reconstruction import AutoencoderHandle, identity_handle, reconstruct


def ss(scores, labels, sources=None):
    return ScoreSet.from_arrays(scores, labels, sources)


@st.composite
def score_sets(draw, max_size=60, coarse=None):
    n = draw(st.integers(2, max_size))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
    labels[0], labels[1] = 0, 1
    if coarse if coarse is not None else draw(st.booleans()):
        scores = draw(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=n, max_size=n))
    else:
        scores = draw(st.lists(st.floats(0, 1, allow_nan=False), min_size=n, max_size=n))
    return ss(scores, labels)


class Constant(nn.Module):
    def __init__(self, logit: float):
        super().__init__()
        self.logit = logit

    def forward(self, x):
        return torch.full((x.shape[0],), self.logit)


class MeanBrightness(nn.Module):
    def forward(self, x):
        return (x.mean(dim=(1, 2, 3)) - 0.5) * 10


# -- ScoreSet -----------------------------------------------------------------

def test_scoreset_rejects_duplicates_and_out_of_range():
    e = ScoreEntry("a", 0.5, Label.REAL, "s")
    with pytest.raises(EvaluationError):
        ScoreSet((e, e))
    with pytest.raises(EvaluationError):
        ScoreSet((ScoreEntry("a", 1.5, Label.REAL, "s"),))
    with pytest.raises(EvaluationError):
        ScoreSet((ScoreEntry("a", float("nan"), Label.REAL, "s"),))


def test_scoreset_json_roundtrip():
    s = ss([0.1, 0.9], [0, 1], ["x", "y"])
    assert ScoreSet.from_json(json.loads(json.dumps(s.to_json()))) == s


# -- accuracy -----------------------------------------------------------------

def test_accuracy_perfect_and_inverted():
    assert accuracy_at_threshold(ss([0.0, 1.0], [0, 1]))["overall"] == 1.0
    assert accuracy_at_threshold(ss([0.6, 0.4], [0, 1]), 0.5)["overall"] == 0.0


def test_accuracy_hand_count():
    s = ss([.1, .2, .6, .7, .4, .8, .9, .55], [0, 0, 0, 0, 1, 1, 1, 1])
    a = accuracy_at_threshold(s, 0.5)
    assert a["by_label"] == {"real": 0.5, "fake": 0.75}
    assert a["overall"] == 0.625


def test_accuracy_threshold_bounds():
    with pytest.raises(EvaluationError):
        accuracy_at_threshold(ss([0.5], [0]), 0.0)
    with pytest.raises(EvaluationError):
        accuracy_at_threshold(ss([0.5], [0]), 1.0)


def test_single_label_group_is_omitted_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        a = accuracy_at_threshold(ss([0.2, 0.3], [0, 0]))
    assert "fake" not in a["by_label"] and "no fake entries" in caplog.text


@given(score_sets(), st.floats(0.01, 0.99))
def test_overall_accuracy_is_count_weighted_mean_of_sources(s, t):
    rng = np.random.default_rng(len(s))
    tags = rng.choice(["a", "b", "c"], len(s))
    s = ss(s.scores, s.labels, tags)
    a = accuracy_at_threshold(s, t)
    weighted = sum(a["by_source"][k] * a["counts"][k] for k in a["counts"]) / len(s)
    assert a["overall"] == pytest.approx(weighted, abs=1e-12)
    assert sum(a["counts"].values()) == len(s)


# -- average precision --------------------------------------------------------

def test_ap_perfect_separation():
    assert average_precision(ss([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0


def test_ap_all_tied_is_prevalence():
    assert average_precision(ss([0.5] * 10, [1, 1, 1] + [0] * 7)) == pytest.approx(0.3, abs=1e-15)


def test_ap_single_label_fatal():
    with pytest.raises(EvaluationError):
        average_precision(ss([0.1, 0.2], [1, 1]))


@given(score_sets(max_size=200))
def test_ap_matches_bruteforce(s):
    assert abs(average_precision(s) - ap_bruteforce(s.scores, s.labels)) <= 1e-12


@given(score_sets())
def test_ap_invariant_to_entry_order(s):
    perm = np.random.default_rng(len(s)).permutation(len(s))
    t = ss(s.scores[perm], s.labels[perm])
    assert average_precision(t) == pytest.approx(average_precision(s), abs=1e-12)


# -- TPR at FPR ---------------------------------------------------------------

def test_tpr_separated():
    assert tpr_at_fpr(ss([0.0] * 20 + [1.0] * 20, [0] * 20 + [1] * 20), 0.05) == 1.0


def test_tpr_admits_exactly_five_false_positives():
    rng = np.random.default_rng(3)
    reals = rng.permutation(100) / 100.0
    fakes = rng.uniform(0, 1, 50)
    s = ss(np.r_[reals, fakes], [0] * 100 + [1] * 50)
    # the most permissive observed threshold that admits only the top 5 reals
    t = min(x for x in np.r_[reals, fakes] if x > 0.94)
    assert int(np.sum(reals >= t)) == 5
    assert tpr_at_fpr(s, 0.05) == float(np.mean(fakes >= t))


def test_tpr_unreachable_returns_zero_with_warning(caplog):
    s = ss([0.9, 0.9, 0.9, 0.1], [0, 0, 1, 1])
    with caplog.at_level(logging.WARNING):
        assert tpr_at_fpr(s, 0.05) == 0.0
    assert "+inf" in caplog.text


@given(score_sets(max_size=200), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
def test_tpr_matches_bruteforce(s, f):
    assert tpr_at_fpr(s, f) == tpr_bruteforce(s.scores, s.labels, f)


@given(score_sets())
def test_tpr_monotone_in_target(s):
    assert tpr_at_fpr(s, 0.10) >= tpr_at_fpr(s, 0.05)


def test_tpr_target_bounds():
    with pytest.raises(EvaluationError):
        tpr_at_fpr(ss([0.1, 0.9], [0, 1]), 0.0)


# -- calibration --------------------------------------------------------------

def test_candidates_cover_boundaries():
    c = threshold_candidates(np.array([0.2, 0.4, 0.4, 0.8]))
    assert c[0] == 0.2 and list(c[1:3]) == [0.30000000000000004, 0.6000000000000001] and c[-1] > 0.8


def test_calibration_separable_picks_lowest_gap_midpoint():
    s = ss([0.1, 0.2, 0.7, 0.8], [0, 0, 1, 1])
    assert calibrate_threshold(s) == pytest.approx(0.45)


def test_calibration_single_label_fatal():
    with pytest.raises(EvaluationError):
        calibrate_threshold(ss([0.1, 0.2], [0, 0]))


@given(score_sets(max_size=120))
def test_calibration_dominates_half(s):
    t = calibrate_threshold(s)
    assert accuracy(s.scores, s.labels, t) >= accuracy(s.scores, s.labels, 0.5)


@given(score_sets(max_size=120))
def test_calibration_is_optimal_over_candidates(s):
    t = calibrate_threshold(s)
    best = max(accuracy(s.scores, s.labels, c) for c in threshold_candidates(s.scores))
    assert accuracy(s.scores, s.labels, t) == best


@pytest.mark.parametrize("lattice", [False, True])
def test_calibration_matches_grid_within_one_cell(lattice):
    rng = np.random.default_rng(int(lattice))
    for _ in range(20):
        y = rng.integers(0, 2, 500)
        y[:2] = (0, 1)
        x = np.clip(rng.normal(0.4 + 0.2 * y, 0.15), 0, 1)
        if lattice:
            x = np.round(x * 10000) / 10000
        s = ss(x, y)
        t = calibrate_threshold(s)
        acc_grid, t_grid = grid_best(s.scores, s.labels)
        acc = accuracy(s.scores, s.labels, t)
        assert acc >= acc_grid
        assert acc_grid >= acc - grid_cell_slack(s.scores, s.labels, t) / len(s) - 1e-12
        if lattice:
            # every gap between distinct scores holds a grid point, so the grid is exact
            assert acc_grid == acc
        split = s.scores >= t_grid
        assert any(np.array_equal(s.scores >= c, split) for c in threshold_candidates(s.scores))


# -- scoring ------------------------------------------------------------------

def test_constant_zero_logit_scores_half(small_reals):
    s = score(Constant(0.0), small_reals, min_side=1)
    assert np.all(s.scores == 0.5) and len(s) == len(small_reals)


def test_score_is_deterministic_and_excludes_small(small_reals, caplog):
    with caplog.at_level(logging.WARNING):
        a = score(MeanBrightness(), small_reals, min_side=48)
    b = score(MeanBrightness(), small_reals, min_side=48)
    assert a == b
    assert a.excluded == ("synthetic/img_0000.png",) and "excluded" in caplog.text


def test_score_arrays_restores_training_mode():
    m = MeanBrightness().train()
    score_arrays(m, [np.zeros((8, 8, 3), np.uint8)])
    assert m.training


# -- reports ------------------------------------------------------------------

def test_evaluate_and_write(tmp_path):
    s = ss([0.1, 0.6, 0.7, 0.9], [0, 0, 1, 1], ["a", "b", "a", "b"])
    r = evaluate(s, 0.5, (0.05, 0.5))
    assert r.ap == average_precision(s) and set(r.tpr_at_fpr) == {"0.05", "0.5"}
    out = r.write(tmp_path, s)
    assert json.loads((out / "report.json").read_text())["threshold"] == 0.5
    rows = list(csv.reader(open(out / "report.csv")))
    assert rows[0] == ["group", "n", "accuracy"] and rows[1][0] == "overall"
    sc = list(csv.DictReader(open(out / "scores.csv")))
    assert [float(r["score"]) for r in sc] == list(s.scores)


def test_evaluate_single_label_reports_none():
    r = evaluate(ss([0.1, 0.2], [0, 0]))
    assert r.ap is None and r.tpr_at_fpr == {"0.05": None}


# -- reconstruction-distance baseline -----------------------------------------

class Blur(nn.Module):
    def encode(self, x):
        return nn.functional.avg_pool2d(x, 2)

    def decode(self, z):
        return nn.functional.interpolate(z, scale_factor=2, mode="nearest")


def test_identity_ensemble_distance_zero(rng):
    x = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert reconstruction_distance_score([identity_handle()], x) == 0.0


def test_min_rule_never_increases(rng):
    blur = AutoencoderHandle("blur", Blur(), 2, 3)
    x = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    one = reconstruction_distance_score([blur], x)
    assert one > 0
    assert reconstruction_distance_score([blur, identity_handle()], x) <= one


def test_reconstruction_has_lower_distance_than_real(rng):
    blur = AutoencoderHandle("blur", Blur(), 2, 3)
    x = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    fake = reconstruct(blur, x)
    det = DistanceDetector([blur], threshold=0.01)
    assert det.distance(fake) < det.distance(x)
    assert det.is_fake(fake) and not det.is_fake(x)


def test_all_members_failing_is_fatal(rng):
    blur8 = AutoencoderHandle("blur", Blur(), 8, 3)  # f larger than the image
    with pytest.raises(EvaluationError):
        reconstruction_distance_score([blur8], rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
    with pytest.raises(EvaluationError):
        reconstruction_distance_score([], np.zeros((4, 4, 3), np.uint8))


def test_mse_distance_scale():
    a = np.zeros((2, 2, 3), np.uint8)
    assert mse_distance(a, a + 255) == 1.0
