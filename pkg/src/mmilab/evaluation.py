"""Word error rate and the three recognition methods used as diagnostics.

A: regenerate lattice and phone marks with the current model, pick the best entry.
B: rescore the stored entries under their stored phone marks.
C: keep the stored word lattice but re-align its phone marks first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mmilab.gauss_hmm import AcousticModel, EmptyCompositionError
from mmilab.lattice import (LatticeConfig, LatticeEntry, PhoneMarkedLattice, TranscriptionScores, UtteranceScorer,
                            WordLattice, align_phones, entry_joint_scores, phone_mark,
                            score_transcriptions)
from mmilab.lexicon_lm import BigramLm, Lexicon, SilencePolicy

NEG_INF = -math.inf


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words if self.ref_words else 0.0

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_words + other.ref_words)


def edit_distance(hyp: Sequence, ref: Sequence) -> Tuple[int, int, int]:
    """(S, D, I) of a minimum-cost alignment.

    Among equal-cost alignments the one with fewest deletions plus
    insertions wins, i.e. substitutions are preferred.
    """
    n, m = len(ref), len(hyp)
    # cell: (cost, del+ins, S, D, I)
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        for j in range(1, m + 1):
            c, g, s, d, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, g, s, d, ins)
            else:
                diag = (c + 1, g, s + 1, d, ins)
            c, g, s, d, ins = prev[j]
            dele = (c + 1, g + 1, s, d + 1, ins)
            c, g, s, d, ins = cur[j - 1]
            inse = (c + 1, g + 1, s, d, ins + 1)
            cur.append(min(diag, dele, inse, key=lambda t: (t[0], t[1])))
        prev = cur
    _, _, s, d, ins = prev[m]
    return s, d, ins


def wer_report(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> WerReport:
    total = WerReport(0, 0, 0, 0)
    for h, r in zip(hyps, refs):
        s, d, i = edit_distance(h, r)
        total = total + WerReport(s, d, i, len(r))
    return total


def best_entry(joint: np.ndarray, words: Sequence[Tuple[str, ...]]) -> int:
    """Highest score; ties go to the lexicographically smallest transcription."""
    best = -1
    for i in range(len(joint)):
        if joint[i] == NEG_INF:
            continue
        if best < 0 or joint[i] > joint[best] or (joint[i] == joint[best] and words[i] < words[best]):
            best = i
    return best


def decode_utterance_a(model: AcousticModel, lex: Lexicon, lm: BigramLm, utt, cfg: LatticeConfig,
                       scores: Optional[TranscriptionScores] = None) -> Tuple[str, ...]:
    """argmax over the regenerated lattice of p(v|x; kappa, V, R).

    Phone-restricted scores never exceed the full ones, so candidates are
    visited in decreasing full-score order and the search stops once no
    remaining candidate can beat the best restricted score found.
    """
    if scores is None:
        scores = score_transcriptions(model, lex, lm, utt.frames, cfg.max_len, cfg.silence, cfg.cap)
    post = scores.log_posteriors(cfg.kappa)
    joint = scores.joint(cfg.kappa)
    keep = np.nonzero(post >= math.log(cfg.eps))[0]
    order = sorted(keep, key=lambda i: (-joint[i], scores.words[i]))
    scorer = UtteranceScorer(model, utt.frames)
    best_w, best_s = None, NEG_INF
    for i in order:
        if joint[i] < best_s:
            break
        words = scores.words[i]
        try:
            arcs = align_phones(model, lex, utt.frames, words, cfg.silence, scorer.logb)
        except EmptyCompositionError:
            continue
        s = scorer.entry_score(LatticeEntry(words, arcs, 0.0), cfg.silence) / cfg.kappa + scores.lm[i]
        if s > best_s or (s == best_s and best_w is not None and words < best_w):
            best_w, best_s = words, s
    return best_w if best_w is not None else ()


def decode_method_a(model: AcousticModel, corpus, lex: Lexicon, lm: BigramLm, cfg: LatticeConfig,
                    tables: Optional[Dict[str, TranscriptionScores]] = None):
    """Returns (WerReport, hypotheses)."""
    hyps = []
    for utt in corpus:
        sc = tables.get(utt.uid) if tables is not None else None
        hyps.append(decode_utterance_a(model, lex, lm, utt, cfg, sc))
    return wer_report(hyps, [u.words for u in corpus]), hyps


def rescore_method_b(model: AcousticModel, corpus, pmls: Sequence[PhoneMarkedLattice], kappa: float):
    hyps = []
    for utt, pml in zip(corpus, pmls):
        scorer = UtteranceScorer(model, utt.frames)
        joint = entry_joint_scores(scorer, pml, kappa)
        i = best_entry(joint, [e.words for e in pml.entries])
        hyps.append(pml.entries[i].words if i >= 0 else ())
    return wer_report(hyps, [u.words for u in corpus]), hyps


def rescore_method_c(model: AcousticModel, corpus, wls: Sequence[WordLattice], kappa: float,
                     lex: Lexicon, silence=SilencePolicy.BOUNDARY):
    pmls = [phone_mark(wl, model, lex, utt.frames, silence) for utt, wl in zip(corpus, wls)]
    return rescore_method_b(model, corpus, pmls, kappa)
