"""Approximate and exact MMI criteria, phone accuracy and the MPE criterion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from mmilab.gauss_hmm import AcousticModel, ContractError
from mmilab.lattice import (EmptyDenominatorError, PhoneMarkedLattice, TranscriptionScores, UtteranceScorer,
                            compile_lattice, entry_joint_scores, reference_acoustic, score_transcriptions)
from mmilab.lexicon_lm import BigramLm, Lexicon, lm_log_prob

NEG_INF = -math.inf


class ReferenceStarvedError(RuntimeError):
    """The reference transcription has zero likelihood under its phone marks."""

    def __init__(self, uid: str, iteration: Optional[int] = None):
        self.uid = uid
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"reference starved for utterance {uid}{where}")


@dataclass(frozen=True)
class CriterionReport:
    num_ll_per_frame: float
    den_ll_per_frame: float
    log_mmi_per_frame: float
    frame_count: int

    @classmethod
    def from_totals(cls, num: float, den: float, frames: int) -> "CriterionReport":
        if frames <= 0:
            raise ContractError("criterion needs at least one frame")
        n, d = num / frames, den / frames
        return cls(n, d, n - d, frames)


def numerator_ll(model: AcousticModel, frames, pml: PhoneMarkedLattice, kappa: float,
                 scorer: Optional[UtteranceScorer] = None) -> float:
    """(1/kappa) log g(x|w; R) + log p(w) for the reference entry."""
    scorer = scorer or UtteranceScorer(model, frames)
    ref = compile_lattice(pml, model).ref
    if ref < 0:
        raise KeyError(f"{pml.uid}: reference missing from lattice")
    val = float(scorer.joint(pml, kappa)[ref])
    if val == NEG_INF:
        raise ReferenceStarvedError(pml.uid)
    return val


def _den(joint: np.ndarray) -> float:
    m = np.max(joint)
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(joint - m))))


def utterance_mmi(model, frames, num_pml, den_pml, kappa, scorer=None):
    """(num, den) log scores for one utterance."""
    scorer = scorer or UtteranceScorer(model, frames)
    num = numerator_ll(model, frames, num_pml, kappa, scorer)
    den = _den(entry_joint_scores(scorer, den_pml, kappa))
    if any(e.words == num_pml.reference for e in den_pml.entries):
        den = max(den, num)  # rounding only; the reference is one of the summands
    return num, den


def approx_mmi_criterion(model: AcousticModel, corpus, num_pmls: Sequence[PhoneMarkedLattice],
                         den_pmls: Sequence[PhoneMarkedLattice], kappa: float) -> CriterionReport:
    num = den = 0.0
    frames = 0
    for utt, npml, dpml in zip(corpus, num_pmls, den_pmls):
        n, d = utterance_mmi(model, utt.frames, npml, dpml, kappa)
        num += n
        den += d
        frames += utt.n_frames
    return CriterionReport.from_totals(num, den, frames)


def exact_utterance(model, lex, lm, utt, kappa, scores: TranscriptionScores, silence) -> tuple:
    i = scores.index(utt.words)
    if i is None:
        ac = reference_acoustic(model, lex, utt.frames, utt.words, silence)
        num = ac / kappa + lm_log_prob(lm, utt.words)
        den = float(np.logaddexp(scores.log_norm(kappa), num))
    else:
        num = float(scores.acoustic[i] / kappa + scores.lm[i])
        den = scores.log_norm(kappa)
    if num == NEG_INF:
        raise ReferenceStarvedError(utt.uid)
    return num, den


def exact_mmi_criterion(model: AcousticModel, lex: Lexicon, lm: BigramLm, corpus, kappa: float,
                        max_len: int, silence="optional-boundary", cap: int = 200_000,
                        tables: Optional[Dict[str, TranscriptionScores]] = None) -> CriterionReport:
    """Denominator over the whole enumerable transcription space, full HMM sums.

    A reference longer than ``max_len`` is added to the denominator explicitly.
    """
    num = den = 0.0
    frames = 0
    for utt in corpus:
        sc = tables.get(utt.uid) if tables is not None else None
        if sc is None:
            sc = score_transcriptions(model, lex, lm, utt.frames, max_len, silence, cap)
        n, d = exact_utterance(model, lex, lm, utt, kappa, sc, silence)
        num += n
        den += d
        frames += utt.n_frames
    return CriterionReport.from_totals(num, den, frames)


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def phone_accuracy(hyp: Sequence[str], ref: Sequence[str], lex: Lexicon) -> int:
    """Reference phone count minus phone-level edit distance (may be negative)."""
    r = lex.phones(ref)
    return len(r) - levenshtein(lex.phones(hyp), r)


def entry_posteriors(model, frames, pml: PhoneMarkedLattice, kappa, scorer=None) -> np.ndarray:
    scorer = scorer or UtteranceScorer(model, frames)
    joint = entry_joint_scores(scorer, pml, kappa)
    den = _den(joint)
    if den == NEG_INF:
        raise EmptyDenominatorError(f"{pml.uid}: every lattice entry scores -inf")
    return np.exp(joint - den)


def approx_mpe_criterion(model: AcousticModel, corpus, den_pmls: Sequence[PhoneMarkedLattice],
                         kappa: float, lex: Lexicon) -> float:
    """Posterior-expected phone accuracy summed over utterances."""
    total = 0.0
    for utt, pml in zip(corpus, den_pmls):
        post = entry_posteriors(model, utt.frames, pml, kappa)
        acc = np.array([phone_accuracy(e.words, pml.reference, lex) for e in pml.entries], dtype=float)
        total += float(post @ acc)
    return total
