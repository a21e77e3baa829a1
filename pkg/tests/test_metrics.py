import numpy as np
import pytest

from oracles import brute_eer, brute_mindcf, brute_rates
from repspk.metrics import (
    DcfParams,
    ScoredTrial,
    compute_eer,
    compute_mindcf,
    cosine_score,
    error_rates,
    read_scores,
    write_scores,
)


class TestCosine:
    def test_examples(self):
        assert cosine_score([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
        assert cosine_score([1, 0], [0, 1]) == 0.0
        assert cosine_score([1, 1], [-2, -2]) == pytest.approx(-1.0, abs=1e-15)

    def test_scale_invariant(self, rng):
        a, b = rng.normal(size=(2, 16))
        assert cosine_score(a, b) == pytest.approx(cosine_score(3.5 * a, 0.2 * b), rel=1e-14)

    def test_errors(self):
        with pytest.raises(ValueError):
            cosine_score([0, 0], [1, 0])
        with pytest.raises(ValueError):
            cosine_score([1, 0], [1, 0, 0])


class TestEer:
    def test_perfect_separation(self):
        eer, _ = compute_eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert eer == 0.0

    def test_inverted(self):
        assert compute_eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 1.0

    def test_interleaved(self):
        assert compute_eer([1.0, 3.0, 2.0, 4.0], [1, 1, 0, 0])[0] == 0.5

    def test_trial_list_input(self):
        trials = [ScoredTrial(0.9, True), ScoredTrial(0.1, False)]
        assert compute_eer(trials)[0] == 0.0

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            compute_eer([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            compute_mindcf([0.1, 0.2], [0, 0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            compute_eer([np.nan, 0.2], [1, 0])

    def test_rates_match_counting(self, rng):
        scores = rng.normal(size=50).round(1)
        labels = rng.random(50) < 0.4
        labels[:2] = [True, False]
        thresholds = np.unique(scores)
        far, frr = error_rates(scores, labels, thresholds)
        for t, a, b in zip(thresholds, far, frr):
            assert (a, b) == brute_rates(scores, labels, t)


class TestMinDcf:
    def test_perfect_separation(self):
        assert compute_mindcf([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 0.0

    def test_bounded_by_trivial_systems(self, rng):
        scores = rng.normal(size=200)
        labels = rng.random(200) < 0.5
        assert compute_mindcf(scores, labels)[0] <= 1.0

    def test_half_miss_example(self):
        assert compute_mindcf([0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0])[0] == pytest.approx(0.5, rel=1e-12)

    def test_params_positional(self):
        params = DcfParams(p_target=0.05)
        scores, labels = [0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0]
        trials = list(zip(scores, labels))
        assert compute_mindcf(trials, params) == compute_mindcf(scores, labels, params)

    def test_raw_vs_normalized(self):
        params = DcfParams(p_target=0.01)
        scores, labels = [0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0]
        raw = compute_mindcf(scores, labels, params, normalized=False)[0]
        assert raw == pytest.approx(compute_mindcf(scores, labels, params)[0] * params.c_default, rel=1e-14)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            DcfParams(p_target=0.0)


@pytest.mark.parametrize("size", [2, 3, 10, 97, 1000])
def test_against_brute_force(rng, size):
    for _ in range(5):
        scores = rng.normal(size=size)
        if size > 10:
            scores = scores.round(2)  # force ties
        labels = rng.random(size) < 0.3
        labels[0], labels[-1] = True, False
        assert compute_eer(scores, labels)[0] == brute_eer(scores, labels)
        assert compute_mindcf(scores, labels)[0] == brute_mindcf(scores, labels)


def test_rank_invariance(rng):
    scores = np.sort(rng.uniform(0, 1, 300))
    labels = rng.random(300) < 0.5
    labels[0], labels[-1] = False, True
    for transform in (lambda s: 3 * s + 1, np.exp, lambda s: s**3):
        assert compute_eer(transform(scores), labels)[0] == pytest.approx(compute_eer(scores, labels)[0], abs=1e-12)
        assert compute_mindcf(transform(scores), labels)[0] == compute_mindcf(scores, labels)[0]


def test_score_file_round_trip(tmp_path, rng):
    trials = [ScoredTrial(float(s), bool(l)) for s, l in zip(rng.normal(size=20).round(6), rng.random(20) < 0.5)]
    path = tmp_path / "scores.txt"
    write_scores(path, trials)
    assert read_scores(path) == trials


def test_score_file_bad_label(tmp_path):
    path = tmp_path / "scores.txt"
    path.write_text("0.5\tmaybe\n")
    with pytest.raises(ValueError):
        read_scores(path)
