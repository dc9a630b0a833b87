import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmilab.criteria import (CriterionReport, ReferenceStarvedError, approx_mmi_criterion, approx_mpe_criterion,
                             entry_posteriors, exact_mmi_criterion, levenshtein, numerator_ll, phone_accuracy,
                             utterance_mmi)
from mmilab.gauss_hmm import ContractError
from mmilab.lattice import (LatticeConfig, LatticeEntry, PhoneArc, PhoneMarkedLattice, generate_word_lattice,
                            lattice_acoustic_score, phone_mark, reference_acoustic)
from mmilab.lexicon_lm import BigramLm, Lexicon, enumerate_transcriptions, lm_log_prob
from mmilab.synth import TaskSpec, generate_task


def brute_levenshtein(a, b):
    """Minimum edit count over every edit script, by exhaustive recursion."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(brute_levenshtein(a[1:], b) + 1, brute_levenshtein(a, b[1:]) + 1,
               brute_levenshtein(a[1:], b[1:]) + (a[0] != b[0]))


@pytest.fixture(scope="module")
def lattices(small_task, small_mle):
    cfg = LatticeConfig(eps=1e-3, max_len=4, kappa=4.0)
    out = []
    for u in small_task.train:
        wl = generate_word_lattice(small_mle, small_task.lexicon, small_task.train_lm, u, cfg)
        out.append(phone_mark(wl, small_mle, small_task.lexicon, u.frames))
    return out


class TestReport:
    def test_identity(self):
        r = CriterionReport.from_totals(-10.0, -8.0, 4)
        assert r.log_mmi_per_frame == r.num_ll_per_frame - r.den_ll_per_frame == -0.5

    def test_zero_frames(self):
        with pytest.raises(ContractError):
            CriterionReport.from_totals(0.0, 0.0, 0)


class TestNumerator:
    def test_is_scaled_g_plus_lm(self, small_task, small_mle, lattices):
        u, pml = small_task.train[0], lattices[0]
        e = pml.reference_entry()
        g = lattice_acoustic_score(small_mle, u.frames, e)
        for kappa in (1.0, 16.0):
            assert numerator_ll(small_mle, u.frames, pml, kappa) == pytest.approx(
                g / kappa + lm_log_prob(small_task.train_lm, u.words), abs=1e-9)

    def test_starved_reference(self, small_task, small_mle):
        u = small_task.train[0]
        # every phone squeezed into one frame: impossible under three-state phones
        phones = small_task.lexicon.phones(u.words)
        T = len(phones)
        arcs = tuple(PhoneArc(p, k, k + 1, 0) for k, p in enumerate(phones))
        pml = PhoneMarkedLattice(u.uid, T, u.words, (LatticeEntry(u.words, arcs, 0.0),))
        with pytest.raises(ReferenceStarvedError, match=u.uid):
            numerator_ll(small_mle, u.frames[:T], pml, 1.0)


class TestApproxMmi:
    def test_reference_only_lattice_is_zero(self, small_task, small_mle, lattices):
        refs = [p.only_reference() for p in lattices]
        r = approx_mmi_criterion(small_mle, small_task.train, refs, refs, 4.0)
        assert r.log_mmi_per_frame == 0.0

    def test_two_equal_entries(self, small_task, small_mle, lattices):
        u, pml = small_task.train[0], lattices[0]
        e = pml.reference_entry()
        other = ("zz",)
        twin = LatticeEntry(other, e.arcs, e.lm_logprob)
        den = PhoneMarkedLattice(u.uid, u.n_frames, u.words, (e, twin))
        n, d = utterance_mmi(small_mle, u.frames, pml, den, 4.0)
        assert n - d == pytest.approx(-math.log(2), abs=1e-12)

    def test_matches_bruteforce_bayes(self, small_task, small_mle, lattices):
        kappa = 4.0
        num = den = 0.0
        for u, pml in zip(small_task.train, lattices):
            joint = [lattice_acoustic_score(small_mle, u.frames, e) / kappa + e.lm_logprob for e in pml.entries]
            ref = [j for j, e in zip(joint, pml.entries) if e.words == u.words][0]
            num += ref
            den += np.logaddexp.reduce(joint)
        r = approx_mmi_criterion(small_mle, small_task.train, lattices, lattices, kappa)
        frames = small_task.train.n_frames
        assert r.num_ll_per_frame == pytest.approx(num / frames, abs=1e-10)
        assert r.den_ll_per_frame == pytest.approx(den / frames, abs=1e-10)
        assert r.log_mmi_per_frame <= 0.0


class TestExactMmi:
    def test_matches_enumeration(self, small_task, small_mle):
        t, kappa = small_task, 4.0
        corpus = list(t.train)[:3]
        r = exact_mmi_criterion(small_mle, t.lexicon, t.train_lm, corpus, kappa, 4)
        num = den = 0.0
        for u in corpus:
            joint = {w: reference_acoustic(small_mle, t.lexicon, u.frames, w, "optional-boundary") / kappa + lp
                     for w, lp in enumerate_transcriptions(t.train_lm, 4)}
            num += joint[u.words]
            den += np.logaddexp.reduce(list(joint.values()))
        frames = sum(u.n_frames for u in corpus)
        assert r.log_mmi_per_frame == pytest.approx((num - den) / frames, abs=1e-10)

    def test_single_hypothesis_is_zero(self):
        t = generate_task(TaskSpec(vocab_size=1, phone_count=2, train_utterances=1, test_utterances=1,
                                   words_per_utterance=(1, 1)))
        lm = BigramLm(t.train_lm.vocab, np.array([[0.0, -math.inf], [-math.inf, 0.0]]))
        r = exact_mmi_criterion(t.true_model, t.lexicon, lm, t.train, 4.0, 1)
        assert r.log_mmi_per_frame == 0.0

    def test_denominator_superset_lowers_criterion(self, small_task, small_mle, lattices):
        """Adding hypotheses to a denominator can only lower the criterion."""
        u, pml = small_task.train[0], lattices[0]
        full = approx_mmi_criterion(small_mle, [u], [pml], [pml], 4.0).log_mmi_per_frame
        r = np.random.default_rng(0)
        for _ in range(5):
            keep = [e for e in pml.entries if e.words == u.words or r.random() < 0.5]
            sub = PhoneMarkedLattice(pml.uid, pml.n_frames, pml.reference, tuple(keep))
            assert approx_mmi_criterion(small_mle, [u], [pml], [sub], 4.0).log_mmi_per_frame >= full - 1e-12


class TestPhoneAccuracy:
    LEX = Lexicon({"a": ("p", "q"), "b": ("r", "s"), "c": ("p",), "d": ("q",)})

    def test_identity(self):
        assert phone_accuracy(("a", "b"), ("a", "b"), self.LEX) == 4

    def test_disjoint_word(self):
        assert phone_accuracy(("b",), ("a",), self.LEX) == 2 - 2

    def test_can_be_negative(self):
        assert phone_accuracy(("b", "b", "b"), ("c",), self.LEX) < 0

    def test_relabel_invariance(self):
        """Words with identical phone strings are interchangeable."""
        assert phone_accuracy(("c", "d"), ("a",), self.LEX) == phone_accuracy(("a",), ("a",), self.LEX)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.sampled_from("pqrs"), max_size=5), st.lists(st.sampled_from("pqrs"), max_size=5))
    def test_levenshtein_vs_exhaustive(self, a, b):
        assert levenshtein(a, b) == brute_levenshtein(tuple(a), tuple(b))

    def test_random_five_phone_pairs(self):
        r = np.random.default_rng(1)
        for _ in range(20):
            a = tuple(r.choice(list("pqrst"), 5))
            b = tuple(r.choice(list("pqrst"), 5))
            assert levenshtein(a, b) == brute_levenshtein(a, b)


class TestMpe:
    def test_all_mass_on_reference(self, small_task, small_mle, lattices):
        refs = [p.only_reference() for p in lattices]
        total = sum(len(small_task.lexicon.phones(u.words)) for u in small_task.train)
        assert approx_mpe_criterion(small_mle, small_task.train, refs, 4.0, small_task.lexicon) == total

    def test_two_entries_half_half(self, small_task, small_mle, lattices):
        u, pml = small_task.train[0], lattices[0]
        e = pml.reference_entry()
        lex = small_task.lexicon
        k = len(lex.phones(u.words))
        # a competitor with accuracy k - 2 sharing the reference's scores
        w0 = u.words[0]
        other = [w for w in lex.words if len(lex.entries[w]) == len(lex.entries[w0])
                 and sum(x != y for x, y in zip(lex.entries[w], lex.entries[w0])) == 2]
        if not other:
            pytest.skip("no two-substitution neighbour in this lexicon")
        comp = LatticeEntry((other[0],) + u.words[1:], e.arcs, e.lm_logprob)
        assert phone_accuracy(comp.words, u.words, lex) == k - 2
        den = PhoneMarkedLattice(u.uid, u.n_frames, u.words, (e, comp))
        assert approx_mpe_criterion(small_mle, [u], [den], 4.0, lex) == pytest.approx(k - 1)

    def test_bounded_by_reference_phones(self, small_task, small_mle, lattices):
        total = sum(len(small_task.lexicon.phones(u.words)) for u in small_task.train)
        assert approx_mpe_criterion(small_mle, small_task.train, lattices, 4.0, small_task.lexicon) <= total

    def test_posteriors_sum_to_one(self, small_task, small_mle, lattices):
        for u, p in zip(small_task.train, lattices):
            assert entry_posteriors(small_mle, u.frames, p, 4.0).sum() == pytest.approx(1.0)
