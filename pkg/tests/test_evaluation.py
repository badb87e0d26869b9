import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aasv.corpus import Trial
from aasv.evaluation import (
    EvalReport,
    ScoreSet,
    build_report,
    cosine,
    eer,
    eer_bruteforce,
    format_scores,
    read_scores,
    score_matrix,
    score_trials,
    write_scores,
)
from aasv.fusion import FusionMode
from aasv.store import EmbeddingStore


def random_scores(rng, n_tar, n_non, rounded=False):
    t = rng.normal(1.0, 1.0, n_tar)
    n = rng.normal(0.0, 1.0, n_non)
    if rounded:
        # coarse grid forces ties within and across classes
        t, n = np.round(t, 1), np.round(n, 1)
    return ScoreSet(t, n)


class TestCosine:
    def test_identical(self):
        assert cosine([0.3, -2.0, 1.0], [0.3, -2.0, 1.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_hand_value(self):
        assert cosine([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])


class TestEer:
    def test_perfect_separation(self):
        assert eer(ScoreSet([0.9, 0.8], [0.1, 0.2]))[0] == 0.0

    def test_fully_inverted(self):
        assert eer(ScoreSet([0.1, 0.2], [0.8, 0.9]))[0] == 1.0

    def test_interleaved_third(self):
        value, _ = eer(ScoreSet([0.8, 0.6, 0.4], [0.5, 0.3, 0.2]))
        assert value == pytest.approx(1 / 3, abs=1e-12)

    def test_single_pair(self):
        assert eer(ScoreSet([1.0], [0.0]))[0] == 0.0
        assert eer_bruteforce(ScoreSet([1.0], [0.0])) == 0.0

    def test_threshold_separates_perfect_sets(self):
        _, thr = eer(ScoreSet([0.9, 0.8], [0.1, 0.2]))
        assert 0.2 < thr <= 0.8

    def test_same_distribution_near_half(self):
        rng = np.random.default_rng(3)
        s = ScoreSet(rng.normal(size=4000), rng.normal(size=4000))
        assert eer(s)[0] == pytest.approx(0.5, abs=0.03)

    @pytest.mark.parametrize("tar, non", [([], [0.1]), ([0.2], [])])
    def test_empty_rejected(self, tar, non):
        with pytest.raises(ValueError):
            eer(ScoreSet(tar, non))
        with pytest.raises(ValueError):
            eer_bruteforce(ScoreSet(tar, non))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            eer(ScoreSet([np.nan, 0.2], [0.1]))

    def test_ties_are_accepted(self):
        # a target tied with the only nontarget: both accepted at that threshold
        value, _ = eer(ScoreSet([0.5, 0.9], [0.5]))
        assert value == pytest.approx(eer_bruteforce(ScoreSet([0.5, 0.9], [0.5])), abs=1e-12)


class TestEerOracle:
    def test_matches_bruteforce_on_1000_random_sets(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for i in range(1000):
            n_tar, n_non = rng.integers(2, 501, size=2)
            s = random_scores(rng, n_tar, n_non, rounded=(i % 3 == 0))
            worst = max(worst, abs(eer(s)[0] - eer_bruteforce(s)))
        assert worst < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30),
           st.lists(st.integers(-5, 5), min_size=1, max_size=30))
    def test_matches_bruteforce_on_small_integer_sets(self, tar, non):
        s = ScoreSet(np.array(tar, float), np.array(non, float))
        assert abs(eer(s)[0] - eer_bruteforce(s)) < 1e-9


class TestEerProperties:
    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_transform_invariance(self, seed):
        s = random_scores(np.random.default_rng(seed), 200, 300)
        t = ScoreSet(np.exp(3 * s.target_scores), np.exp(3 * s.nontarget_scores))
        assert eer(t)[0] == pytest.approx(eer(s)[0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_swap_classes_complements(self, seed):
        s = random_scores(np.random.default_rng(seed), 150, 170)
        swapped = ScoreSet(s.nontarget_scores, s.target_scores)
        assert eer(swapped)[0] == pytest.approx(1 - eer(s)[0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_duplication_invariance(self, seed):
        s = random_scores(np.random.default_rng(seed), 80, 90, rounded=True)
        d = ScoreSet(np.repeat(s.target_scores, 2), np.repeat(s.nontarget_scores, 2))
        assert eer(d)[0] == pytest.approx(eer(s)[0], abs=1e-12)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            v = eer(random_scores(rng, 20, 30, rounded=True))[0]
            assert 0.0 <= v <= 1.0


def toy_store():
    rng = np.random.default_rng(0)
    ids = ["u0", "u1", "u2", "u3"]
    return EmbeddingStore(ids, e_c=rng.normal(size=(4, 5)), e_a=rng.normal(size=(4, 5)),
                          p=np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]]))


class TestScoreTrials:
    def test_identical_embeddings_score_one(self):
        v = np.array([[0.2, -1.0, 3.0]] * 2)
        store = EmbeddingStore(["a", "b"], e_c=v, e_a=v, p=np.array([[0.4, 0.6], [0.4, 0.6]]))
        for mode in FusionMode:
            s = score_trials([Trial(1, "a", "b")], store, mode)
            assert s.target_scores[0] == pytest.approx(1.0)

    def test_empty_trial_list_is_error(self):
        with pytest.raises(ValueError):
            score_trials([], toy_store(), FusionMode.ADULT_ONLY)

    def test_missing_id(self):
        with pytest.raises(KeyError):
            score_trials([Trial(1, "u0", "nope")], toy_store(), FusionMode.ADULT_ONLY)

    def test_adult_only_matches_direct_cosine(self):
        store = toy_store()
        trials = [Trial(1, "u0", "u1"), Trial(0, "u2", "u3")]
        s = score_trials(trials, store, FusionMode.ADULT_ONLY)
        assert s.target_scores[0] == pytest.approx(cosine(store.e_a[0], store.e_a[1]), abs=1e-12)
        assert s.nontarget_scores[0] == pytest.approx(cosine(store.e_a[2], store.e_a[3]), abs=1e-12)

    def test_child_only_matches_direct_cosine(self):
        store = toy_store()
        s = score_trials([Trial(0, "u1", "u3")], store, FusionMode.CHILD_ONLY)
        assert s.nontarget_scores[0] == pytest.approx(cosine(store.e_c[1], store.e_c[3]), abs=1e-12)

    def test_partition_by_label(self):
        trials = [Trial(1, "u0", "u1"), Trial(0, "u0", "u2"), Trial(0, "u1", "u3")]
        s = score_trials(trials, toy_store(), FusionMode.AASV)
        assert (s.target_scores.size, s.nontarget_scores.size) == (1, 2)

    def test_aasv_needs_posteriors_or_classifier(self):
        store = toy_store()
        store.p = None
        with pytest.raises(ValueError):
            score_trials([Trial(1, "u0", "u1")], store, FusionMode.AASV)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingStore(["a"], e_c=np.ones((1, 3)), e_a=np.ones((1, 4)))

    def test_zero_embedding_rejected(self):
        m = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ValueError):
            score_matrix([Trial(0, "a", "b")], ["a", "b"], m)


class TestScoreFiles:
    def test_roundtrip(self, tmp_path):
        trials = [Trial(1, "a", "b"), Trial(0, "a", "c"), Trial(1, "c", "d")]
        s = ScoreSet([0.5, -0.25], [0.125])
        write_scores(tmp_path / "s.txt", trials, s)
        assert (tmp_path / "s.txt").read_text().splitlines()[1] == "0 0.12500000"
        back = read_scores(tmp_path / "s.txt")
        np.testing.assert_array_equal(back.target_scores, [0.5, -0.25])
        np.testing.assert_array_equal(back.nontarget_scores, [0.125])

    def test_format_follows_trial_order(self):
        text = format_scores([Trial(0, "a", "b"), Trial(1, "a", "c")], ScoreSet([0.9], [0.1]))
        assert text == "0 0.10000000\n1 0.90000000\n"

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.txt").write_text("2 0.5\n")
        with pytest.raises(ValueError):
            read_scores(tmp_path / "bad.txt")


class TestReport:
    def test_grid_size(self):
        cells = {(s, t): 1.0 for s in ("A", "B") for t in ("x", "y", "z")}
        rep = build_report(cells, ["A", "B"], ["x", "y", "z"])
        assert len(rep.rows) == 6

    def test_missing_cell_dash(self):
        rep = build_report({("A", "x"): 12.345}, ["A"], ["x", "y"])
        assert rep.to_tsv() == "system\tx\ty\nA\t12.35\t-\n"
        assert rep.to_text().splitlines()[-1].split() == ["A", "12.35", "-"]

    def test_declaration_order(self):
        cells = {(s, t): 0.0 for s in ("z", "a") for t in ("young", "old", "adult")}
        rep = build_report(cells, ["z", "a"], ["young", "old", "adult"])
        lines = rep.to_tsv().splitlines()
        assert lines[0] == "system\tyoung\told\tadult"
        assert [l.split("\t")[0] for l in lines[1:]] == ["z", "a"]

    def test_scoreset_cells_become_percent(self):
        rep = build_report({("A", "x"): ScoreSet([0.8, 0.6, 0.4], [0.5, 0.3, 0.2])}, ["A"], ["x"])
        assert rep.get("A", "x") == pytest.approx(100 / 3)
        assert "33.33" in rep.to_tsv()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            build_report({("A", "x"): 120.0}, ["A"], ["x"])

    def test_text_columns_aligned(self):
        rep = build_report({("A-SV", "t1"): 1.5, ("w/o DC", "t1"): 22.25}, ["A-SV", "w/o DC"], ["t1"])
        lines = rep.to_text().splitlines()[1:]
        assert len({len(l) for l in lines if not l.startswith("-")}) == 1

    def test_metadata_kept(self):
        rep = build_report({}, ["A"], ["x"], {"seed": 3})
        assert isinstance(rep, EvalReport) and rep.metadata == {"seed": 3}
