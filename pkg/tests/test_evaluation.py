import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmilab.evaluation import (WerReport, best_entry, decode_method_a, edit_distance, rescore_method_b,
                               rescore_method_c, wer_report)
from mmilab.lattice import (LatticeConfig, UtteranceScorer, generate_word_lattice, lattice_acoustic_score,
                            phone_mark, score_transcriptions, align_phones, LatticeEntry)


def exhaustive_scripts(hyp, ref):
    """Every (S, D, I) reachable by an edit script turning ref into hyp."""
    out = set()

    def walk(i, j, s, d, ins):
        if i == len(ref) and j == len(hyp):
            out.add((s, d, ins))
            return
        if i < len(ref) and j < len(hyp):
            walk(i + 1, j + 1, s + (ref[i] != hyp[j]), d, ins)
        if i < len(ref):
            walk(i + 1, j, s, d + 1, ins)
        if j < len(hyp):
            walk(i, j + 1, s, d, ins + 1)

    walk(0, 0, 0, 0, 0)
    return out


class TestEditDistance:
    def test_examples(self):
        assert edit_distance(["a", "b", "c"], ["a", "b", "c"]) == (0, 0, 0)
        assert edit_distance(["a", "x", "c"], ["a", "b", "c"]) == (1, 0, 0)
        assert edit_distance(["a", "c"], ["a", "b", "c"]) == (0, 1, 0)
        assert edit_distance(["a", "b", "b", "c"], ["a", "b", "c"]) == (0, 0, 1)
        assert edit_distance([], ["a", "b"]) == (0, 2, 0)
        assert edit_distance(["a"], []) == (0, 0, 1)

    def test_prefers_substitution_on_ties(self):
        assert edit_distance(["x"], ["a"]) == (1, 0, 0)

    @pytest.mark.parametrize("n,m", [(a, b) for a in range(4) for b in range(4)])
    def test_all_short_pairs_against_exhaustive(self, n, m):
        for ref in itertools.product("ab", repeat=n):
            for hyp in itertools.product("abc", repeat=m):
                scripts = exhaustive_scripts(hyp, ref)
                best = min(sum(x) for x in scripts)
                got = edit_distance(hyp, ref)
                assert sum(got) == best
                assert got in scripts
                assert got[1] + got[2] == min(d + i for s, d, i in scripts if s + d + i == best)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.sampled_from("abcd"), max_size=5), st.lists(st.sampled_from("abcd"), max_size=5))
    def test_random_against_exhaustive(self, hyp, ref):
        scripts = exhaustive_scripts(hyp, ref)
        got = edit_distance(hyp, ref)
        assert got in scripts and sum(got) == min(sum(x) for x in scripts)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from("abc"), max_size=6), st.lists(st.sampled_from("abc"), max_size=6))
    def test_symmetry_swaps_deletions_and_insertions(self, a, b):
        s1, d1, i1 = edit_distance(a, b)
        s2, d2, i2 = edit_distance(b, a)
        assert s1 + d1 + i1 == s2 + d2 + i2


class TestWer:
    def test_report_arithmetic(self):
        r = wer_report([["a", "x"], ["b"]], [["a", "b"], ["b", "c"]])
        assert (r.substitutions, r.deletions, r.insertions, r.ref_words) == (1, 1, 0, 4)
        assert r.wer == 50.0

    def test_sum(self):
        assert (WerReport(1, 0, 0, 2) + WerReport(0, 1, 1, 3)).wer == pytest.approx(60.0)

    def test_empty(self):
        assert WerReport(0, 0, 0, 0).wer == 0.0


class TestBestEntry:
    def test_tie_goes_to_lexicographic_smallest(self):
        assert best_entry(np.array([1.0, 1.0]), [("b",), ("a",)]) == 1

    def test_skips_impossible(self):
        assert best_entry(np.array([-np.inf, -5.0]), [("a",), ("b",)]) == 1

    def test_all_impossible(self):
        assert best_entry(np.array([-np.inf]), [("a",)]) == -1


@pytest.fixture(scope="module")
def setup(small_task, small_mle):
    cfg = LatticeConfig(eps=1e-3, max_len=4, kappa=4.0)
    wls, pmls = [], []
    for u in small_task.train:
        wl = generate_word_lattice(small_mle, small_task.lexicon, small_task.train_lm, u, cfg)
        wls.append(wl)
        pmls.append(phone_mark(wl, small_mle, small_task.lexicon, u.frames))
    return cfg, wls, pmls


class TestMethods:
    def test_method_a_equals_bruteforce_argmax(self, small_task, small_mle, setup):
        """Argmax over the regenerated lattice of the phone-mark-restricted posterior."""
        cfg, _, _ = setup
        t = small_task
        _, hyps = decode_method_a(small_mle, t.train, t.lexicon, t.train_lm, cfg)
        for u, h in zip(t.train, hyps):
            sc = score_transcriptions(small_mle, t.lexicon, t.train_lm, u.frames, cfg.max_len)
            post = sc.log_posteriors(cfg.kappa)
            best, best_s = None, -np.inf
            for i in np.nonzero(post >= np.log(cfg.eps))[0]:
                w = sc.words[i]
                arcs = align_phones(small_mle, t.lexicon, u.frames, w, cfg.silence)
                s = lattice_acoustic_score(small_mle, u.frames, LatticeEntry(w, arcs, 0.0)) / cfg.kappa + sc.lm[i]
                if s > best_s or (s == best_s and w < best):
                    best, best_s = w, s
            assert h == best

    def test_method_b_at_generation_model_matches_c(self, small_task, small_mle, setup):
        cfg, wls, pmls = setup
        t = small_task
        b = rescore_method_b(small_mle, t.train, pmls, cfg.kappa)
        c = rescore_method_c(small_mle, t.train, wls, cfg.kappa, t.lexicon)
        assert b[1] == c[1]

    def test_method_b_picks_highest_joint(self, small_task, small_mle, setup):
        cfg, _, pmls = setup
        _, hyps = rescore_method_b(small_mle, small_task.train, pmls, cfg.kappa)
        for u, pml, h in zip(small_task.train, pmls, hyps):
            j = UtteranceScorer(small_mle, u.frames).joint(pml, cfg.kappa)
            assert j[[e.words for e in pml.entries].index(h)] == j.max()

    def test_method_c_differs_only_where_marks_change(self, small_task, small_mle, setup):
        """After a model change, B and C disagree only on utterances whose phone marks moved."""
        cfg, wls, pmls = setup
        t = small_task
        moved = small_mle.with_params(small_mle.means + 0.3, small_mle.variances)
        _, hb = rescore_method_b(moved, t.train, pmls, cfg.kappa)
        _, hc = rescore_method_c(moved, t.train, wls, cfg.kappa, t.lexicon)
        for u, wl, pml, b, c in zip(t.train, wls, pmls, hb, hc):
            if b != c:
                remarked = phone_mark(wl, moved, t.lexicon, u.frames)
                assert [e.arcs for e in remarked.entries] != [e.arcs for e in pml.entries]
