"""Word lattices, phone-marked lattices and arc-level forward-backward.

Lattices here are transcription-level: each entry is one competing word
sequence together with its phone marks.  Generation enumerates the whole
(bigram-supported, length-capped) transcription space exactly and keeps
the hypotheses whose posterior clears the pruning threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mmilab import _kernels
from mmilab.gauss_hmm import AcousticModel, ContractError, EmptyCompositionError, forward_backward
from mmilab.lexicon_lm import (BigramLm, EnumerationCapError, Lexicon, SilencePolicy,
                               _unit_sequence, compile_utterance_graph, count_transcriptions,
                               lm_log_prob)
from mmilab.stats import SufficientStats

log = logging.getLogger(__name__)

NEG_INF = -math.inf
HEADER = "#mmi-lab-lattice v1"


class EmptyDenominatorError(RuntimeError):
    """Every lattice entry scores -inf."""


@dataclass(frozen=True)
class LatticeConfig:
    eps: float = 1e-3
    max_len: int = 6
    kappa: float = 2.25
    cap: int = 200_000
    silence: str = SilencePolicy.BOUNDARY.value

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ContractError("eps must lie in (0, 1)")
        if self.kappa <= 0:
            raise ContractError("kappa must be positive")
        if self.max_len < 1:
            raise ContractError("max_len must be at least 1")
        SilencePolicy(self.silence)


class PhoneArc(NamedTuple):
    """Phone occurrence anchored to frames [start, end)."""

    phone: str
    start: int
    end: int
    word: int = -1  # index of the parent word, -1 for silence


@dataclass(frozen=True)
class LatticeEntry:
    words: Tuple[str, ...]
    arcs: Tuple[PhoneArc, ...]
    lm_logprob: float


@dataclass(frozen=True)
class WordLattice:
    uid: str
    n_frames: int
    reference: Tuple[str, ...]
    hypotheses: Tuple[Tuple[Tuple[str, ...], float, float], ...]  # (words, log f, lm)
    tag: str = ""
    eps: float = 0.0

    @property
    def transcriptions(self) -> List[Tuple[str, ...]]:
        return [h[0] for h in self.hypotheses]


@dataclass(frozen=True)
class PhoneMarkedLattice:
    uid: str
    n_frames: int
    reference: Tuple[str, ...]
    entries: Tuple[LatticeEntry, ...]
    silence: str = SilencePolicy.BOUNDARY.value
    tag: str = ""
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def reference_entry(self) -> LatticeEntry:
        for e in self.entries:
            if e.words == self.reference:
                return e
        raise KeyError(f"{self.uid}: reference missing from lattice")

    def only_reference(self) -> "PhoneMarkedLattice":
        return PhoneMarkedLattice(self.uid, self.n_frames, self.reference,
                                  (self.reference_entry(),), self.silence, self.tag)


# ---------------------------------------------------------------------------
# exact scores over the transcription space


@dataclass
class TranscriptionScores:
    """log f(x|w) and log p(w) for every enumerable transcription."""

    words: List[Tuple[str, ...]]
    acoustic: np.ndarray
    lm: np.ndarray
    _index: Dict[Tuple[str, ...], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def index(self, words) -> Optional[int]:
        return self._index.get(tuple(words))

    def joint(self, kappa: float) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(np.isfinite(self.acoustic), self.acoustic / kappa + self.lm, NEG_INF)

    def log_norm(self, kappa: float) -> float:
        j = self.joint(kappa)
        m = np.max(j)
        if m == NEG_INF:
            return NEG_INF
        return float(m + np.log(np.sum(np.exp(j - m))))

    def log_posteriors(self, kappa: float) -> np.ndarray:
        return self.joint(kappa) - self.log_norm(kappa)


def _word_tables(model: AcousticModel, lex: Lexicon, vocab: Sequence[str]):
    seqs = []
    for w in vocab:
        st = []
        for p in lex.entries[w]:
            st.extend(model.phone_states[p])
        seqs.append(st)
    kmax = max(len(s) for s in seqs)
    table = np.zeros((len(seqs), kmax), dtype=np.int64)
    lens = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        table[i, : len(s)] = s
        lens[i] = len(s)
    return table, lens


def score_transcriptions(model: AcousticModel, lex: Lexicon, lm: BigramLm, frames, max_len: int,
                         silence=SilencePolicy.BOUNDARY, cap: int = 200_000,
                         log_emissions: Optional[np.ndarray] = None) -> TranscriptionScores:
    """Full-HMM acoustic log-likelihood of every transcription in the LM support.

    Prefixes are shared through a trie so each word is pushed through the
    frames once per distinct history.
    """
    policy = SilencePolicy(silence)
    total = count_transcriptions(lm, max_len)
    if total > cap:
        raise EnumerationCapError(f"{total} transcriptions exceed the cap of {cap}")
    logb = model.log_emissions(frames) if log_emissions is None else log_emissions
    T = logb.shape[0]
    vocab = lm.vocab
    V = len(vocab)
    table, lens = _word_tables(model, lex, vocab)
    loop, adv = model.log_loop, model.log_adv
    cnorm = logb.max(axis=1)
    sil = model.phone_states[model.silence][0]
    span = _kernels.span_scores(np.ascontiguousarray(logb[:, sil]), loop[sil], adv[sil])
    lt, ls = math.log(model.sil_prob), math.log1p(-model.sil_prob)

    root = np.full(T + 1, NEG_INF)
    tail = np.full(T + 1, NEG_INF)
    if policy is SilencePolicy.NONE:
        root[0] = 0.0
        tail[T] = 0.0
    else:
        root[0] = ls
        root[1:] = lt + span[0, 1:]
        tail[:T] = lt + span[:T, T]
        tail[T] = ls
    allowed = np.isfinite(lm.logp)

    out_words: List[Tuple[str, ...]] = []
    out_ac: List[np.ndarray] = []
    out_lm: List[np.ndarray] = []
    ent = root[None, :]
    hist: List[Tuple[str, ...]] = [()]
    last = np.array([-1])
    lmp = np.array([0.0])
    for depth in range(1, max_len + 1):
        rows = last + 1
        pp, pw = np.nonzero(allowed[rows, :V])
        if pp.size == 0:
            break
        end = _kernels.extend_words(ent, pp.astype(np.int64), pw.astype(np.int64), table, lens,
                                    logb, loop, adv, cnorm)
        new_lm = lmp[pp] + lm.logp[rows[pp], pw]
        new_hist = [hist[p] + (vocab[w],) for p, w in zip(pp, pw)]
        endp = lm.logp[pw + 1, V]
        keep = np.isfinite(endp)
        if np.any(keep):
            fin = _kernels.finish_rows(end[keep], tail)
            out_words.extend(h for h, k in zip(new_hist, keep) if k)
            out_ac.append(fin)
            out_lm.append(new_lm[keep] + endp[keep])
        if depth == max_len:
            break
        if policy is SilencePolicy.EVERYWHERE:
            ent = _kernels.optional_unit(end, span, lt, ls)
        else:
            ent = end
        hist, last, lmp = new_hist, pw, new_lm
    acoustic = np.concatenate(out_ac) if out_ac else np.zeros(0)
    lmv = np.concatenate(out_lm) if out_lm else np.zeros(0)
    return TranscriptionScores(out_words, acoustic, lmv)


_GRAPHS: Dict[tuple, object] = {}


def utterance_graph(model: AcousticModel, lex: Lexicon, words, silence):
    """compile_utterance_graph memoised on everything the graph depends on."""
    words = tuple(words)
    key = (words, SilencePolicy(silence).value, tuple(lex.entries[w] for w in words),
           model.self_loop.tobytes(), model.sil_prob, model.silence,
           tuple(sorted(model.phone_states.items())))
    g = _GRAPHS.get(key)
    if g is None:
        if len(_GRAPHS) > 100_000:
            _GRAPHS.clear()
        g = compile_utterance_graph(lex, model, words, silence)
        _GRAPHS[key] = g
    return g


def reference_acoustic(model, lex, frames, words, silence, log_emissions=None) -> float:
    g = utterance_graph(model, lex, words, silence)
    try:
        _, tot = forward_backward(model, g, frames, 1.0, log_emissions=log_emissions)
    except EmptyCompositionError:
        return NEG_INF
    return tot


def generate_word_lattice(model: AcousticModel, lex: Lexicon, lm: BigramLm, utt, cfg: LatticeConfig,
                          scores: Optional[TranscriptionScores] = None, tag: str = "") -> WordLattice:
    """Hypotheses with posterior >= eps under ``model``, plus the reference."""
    frames, reference = utt.frames, tuple(utt.words)
    if scores is None:
        scores = score_transcriptions(model, lex, lm, frames, cfg.max_len, cfg.silence, cfg.cap)
    post = scores.log_posteriors(cfg.kappa)
    thr = math.log(cfg.eps)
    hyps = {}
    for i in np.nonzero(post >= thr)[0]:
        hyps[scores.words[i]] = (float(scores.acoustic[i]), float(scores.lm[i]))
    if reference not in hyps:
        i = scores.index(reference)
        if i is not None:
            hyps[reference] = (float(scores.acoustic[i]), float(scores.lm[i]))
        else:
            hyps[reference] = (reference_acoustic(model, lex, frames, reference, cfg.silence),
                               lm_log_prob(lm, reference))
    ordered = tuple((w, a, l) for w, (a, l) in sorted(hyps.items()))
    return WordLattice(getattr(utt, "uid", ""), frames.shape[0], reference, ordered, tag, cfg.eps)


# ---------------------------------------------------------------------------
# phone marks


def _slot_count(n_words: int, policy: SilencePolicy) -> int:
    if policy is SilencePolicy.NONE:
        return 0
    if policy is SilencePolicy.BOUNDARY:
        return 2
    return n_words + 1


_CHAINS: Dict[tuple, tuple] = {}


def _chain(model: AcousticModel, lex: Lexicon, words, silence):
    words = tuple(words)
    policy = SilencePolicy(silence)
    key = (words, policy.value, tuple(lex.entries[w] for w in words), model.silence,
           tuple(sorted(model.phone_states.items())))
    hit = _CHAINS.get(key)
    if hit is not None:
        return hit
    pos, first, last, opt, labels = [], [], [], [], []
    for kind, info in _unit_sequence(lex, words, policy):
        phone, wi = (model.silence, -1) if kind == "slot" else info
        first.append(len(pos))
        pos.extend(model.phone_states[phone])
        last.append(len(pos) - 1)
        opt.append(kind == "slot")
        labels.append((phone, wi))
    hit = (np.array(pos, dtype=np.int64), np.array(first, dtype=np.int64),
           np.array(last, dtype=np.int64), np.array(opt, dtype=np.bool_), tuple(labels))
    if len(_CHAINS) > 100_000:
        _CHAINS.clear()
    _CHAINS[key] = hit
    return hit


def align_phones(model: AcousticModel, lex: Lexicon, frames, words, silence,
                 log_emissions=None) -> Tuple[PhoneArc, ...]:
    """Viterbi forced alignment of ``words``, reduced to phone boundaries."""
    logb = model.log_emissions(frames) if log_emissions is None else log_emissions
    pos, first, last, opt, labels = _chain(model, lex, words, silence)
    score, starts, ends = _kernels.align_chain(
        logb, pos, first, last, opt, model.log_loop, model.log_adv,
        math.log(model.sil_prob), math.log1p(-model.sil_prob))
    if score == NEG_INF:
        raise EmptyCompositionError("transcription cannot be aligned to this many frames")
    return tuple(PhoneArc(labels[u][0], int(starts[u]), int(ends[u]), labels[u][1])
                 for u in range(len(labels)) if starts[u] >= 0)


def phone_mark(wl: WordLattice, model: AcousticModel, lex: Lexicon, frames,
               silence=SilencePolicy.BOUNDARY, tag: str = "", log_emissions=None) -> PhoneMarkedLattice:
    """Force-align every lattice hypothesis and keep only its phone marks."""
    if log_emissions is None:
        log_emissions = model.log_emissions(frames)
    entries = []
    for words, _, lmlp in wl.hypotheses:
        try:
            arcs = align_phones(model, lex, frames, words, silence, log_emissions)
        except EmptyCompositionError:
            if words == wl.reference:
                raise
            log.warning("%s: dropping unalignable hypothesis %s", wl.uid, " ".join(words))
            continue
        entries.append(LatticeEntry(words, arcs, lmlp))
    return PhoneMarkedLattice(wl.uid, wl.n_frames, wl.reference, tuple(entries),
                              SilencePolicy(silence).value, tag)


def validate_entry(entry: LatticeEntry, lex: Lexicon, n_frames: int, silence) -> None:
    policy = SilencePolicy(silence)
    pos = 0
    for a in entry.arcs:
        if a.end <= a.start:
            raise ContractError("phone arc must span at least one frame")
        if a.start != pos:
            raise ContractError("phone arcs must abut exactly")
        pos = a.end
    if pos != n_frames:
        raise ContractError("phone arcs must tile the utterance")
    sil = [a for a in entry.arcs if a.word < 0]
    phones = [a.phone for a in entry.arcs if a.word >= 0]
    if phones != lex.phones(entry.words):
        raise ContractError("arc phones do not match the pronunciation")
    if len(sil) > _slot_count(len(entry.words), policy):
        raise ContractError("more silence arcs than optional slots")


# ---------------------------------------------------------------------------
# scoring under phone marks


_UNITS: Dict[tuple, tuple] = {}


def _unit_table(model: AcousticModel):
    key = tuple(sorted(model.phone_states.items()))
    hit = _UNITS.get(key)
    if hit is None:
        names = [p for p, _ in key]
        kmax = max(len(s) for _, s in key)
        states = np.zeros((len(names), kmax), dtype=np.int64)
        lens = np.zeros(len(names), dtype=np.int64)
        for i, (_, s) in enumerate(key):
            states[i, : len(s)] = s
            lens[i] = len(s)
        hit = ({p: i for i, p in enumerate(names)}, states, lens, key)
        _UNITS[key] = hit
    return hit


@dataclass(frozen=True)
class CompiledLattice:
    """Array form of a phone-marked lattice: unique segments plus per-entry index lists."""

    seg_unit: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    flat: np.ndarray  # segment ids of all entries, concatenated
    offsets: np.ndarray  # entry e owns flat[offsets[e]:offsets[e+1]]
    n_sil: np.ndarray
    slots: np.ndarray
    lm: np.ndarray
    ref: int  # entry index of the reference, -1 if absent


def compile_lattice(pml: PhoneMarkedLattice, model: AcousticModel) -> CompiledLattice:
    index, _, _, key = _unit_table(model)
    hit = pml._cache.get(key)
    if hit is not None:
        return hit
    policy = SilencePolicy(pml.silence)
    seg_ids: Dict[Tuple[str, int, int], int] = {}
    flat, offsets, n_sil, slots, lm = [], [0], [], [], []
    ref = -1
    for e_i, e in enumerate(pml.entries):
        if e.words == pml.reference and ref < 0:
            ref = e_i
        for a in e.arcs:
            k = (a.phone, a.start, a.end)
            if k not in seg_ids:
                seg_ids[k] = len(seg_ids)
            flat.append(seg_ids[k])
        offsets.append(len(flat))
        n_sil.append(sum(1 for a in e.arcs if a.word < 0))
        slots.append(_slot_count(len(e.words), policy))
        lm.append(e.lm_logprob)
    segs = list(seg_ids)
    try:
        unit = np.array([index[p] for p, _, _ in segs], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"lattice phone {exc.args[0]!r} unknown to the model") from None
    cl = CompiledLattice(unit, np.array([s for _, s, _ in segs], dtype=np.int64),
                         np.array([t for _, _, t in segs], dtype=np.int64),
                         np.array(flat, dtype=np.int64), np.array(offsets, dtype=np.int64),
                         np.array(n_sil, dtype=float), np.array(slots, dtype=float),
                         np.array(lm, dtype=float), ref)
    pml._cache[key] = cl
    return cl


class UtteranceScorer:
    """Emission table of one utterance under one model, with per-lattice score caching."""

    def __init__(self, model: AcousticModel, frames, log_emissions=None):
        self.model = model
        self.frames = np.asarray(frames, dtype=float)
        self.logb = model.log_emissions(self.frames) if log_emissions is None else log_emissions
        self._acoustic: Dict[int, tuple] = {}

    def acoustic(self, pml: PhoneMarkedLattice) -> np.ndarray:
        """log g(x|v; R) for every entry."""
        hit = self._acoustic.get(id(pml))
        if hit is not None and hit[0] is pml:
            return hit[1]
        m = self.model
        cl = compile_lattice(pml, m)
        _, states, lens, _ = _unit_table(m)
        seg = _kernels.segment_scores(self.logb, states, lens, cl.seg_unit, cl.seg_start, cl.seg_end,
                                      m.log_loop, m.log_adv)
        vals = seg[cl.flat]
        with np.errstate(invalid="ignore"):
            sums = np.add.reduceat(vals, cl.offsets[:-1]) if vals.size else np.zeros(0)
        lt, ls = math.log(m.sil_prob), math.log1p(-m.sil_prob)
        skel = np.where(cl.n_sil <= cl.slots, cl.n_sil * lt + (cl.slots - cl.n_sil) * ls, NEG_INF)
        out = np.where(np.isfinite(sums), sums + skel, NEG_INF)
        self._acoustic[id(pml)] = (pml, out)
        return out

    def joint(self, pml: PhoneMarkedLattice, kappa: float) -> np.ndarray:
        ac = self.acoustic(pml)
        lm = compile_lattice(pml, self.model).lm
        return np.where(np.isfinite(ac), ac / kappa + lm, NEG_INF)

    def accumulate(self, pml: PhoneMarkedLattice, weights, occ: Optional[np.ndarray] = None) -> np.ndarray:
        """Add sum_e weights[e] * (within-entry state posteriors) into a (T, J) table."""
        m = self.model
        if occ is None:
            occ = np.zeros((self.logb.shape[0], m.n_states))
        cl = compile_lattice(pml, m)
        _, states, lens, _ = _unit_table(m)
        counts = np.diff(cl.offsets)
        segw = np.bincount(cl.flat, weights=np.repeat(np.asarray(weights, dtype=float), counts),
                           minlength=cl.seg_unit.shape[0])
        _kernels.segment_accumulate(self.logb, states, lens, cl.seg_unit, cl.seg_start, cl.seg_end,
                                    segw, m.log_loop, m.log_adv, occ)
        return occ

    def entry_score(self, entry: LatticeEntry, silence) -> float:
        single = PhoneMarkedLattice("", self.logb.shape[0], entry.words, (entry,), SilencePolicy(silence).value)
        return float(self.acoustic(single)[0])


def lattice_acoustic_score(model: AcousticModel, frames, entry: LatticeEntry,
                           silence=SilencePolicy.BOUNDARY) -> float:
    """log g(x|v; R): full-HMM sum restricted to the entry's phone marks."""
    return UtteranceScorer(model, frames).entry_score(entry, silence)


def entry_joint_scores(scorer: UtteranceScorer, pml: PhoneMarkedLattice, kappa: float) -> np.ndarray:
    return scorer.joint(pml, kappa)


def lattice_forward_backward(model: AcousticModel, frames, pml: PhoneMarkedLattice, kappa: float,
                             scorer: Optional[UtteranceScorer] = None):
    """Denominator log-likelihood, entry posteriors and denominator statistics.

    Statistics are posterior-weighted occupancies scaled by 1/kappa.
    """
    scorer = scorer or UtteranceScorer(model, frames)
    joint = scorer.joint(pml, kappa)
    m = np.max(joint) if joint.size else NEG_INF
    if m == NEG_INF:
        raise EmptyDenominatorError(f"{pml.uid}: every lattice entry scores -inf")
    den = float(m + np.log(np.sum(np.exp(joint - m))))
    post = np.exp(joint - den)
    occ = scorer.accumulate(pml, post)
    stats = SufficientStats.from_occupancy(occ / kappa, scorer.frames)
    return den, post, stats


# ---------------------------------------------------------------------------
# text format


def write_lattices(path, lattices: Iterable[PhoneMarkedLattice]) -> None:
    lines = [HEADER]
    for pml in lattices:
        lines.append(f"UTT {pml.uid} {pml.n_frames}")
        for e in sorted(pml.entries, key=lambda e: e.words):
            lines.append(f"ENTRY {e.lm_logprob!r} {' '.join(e.words)}")
            for a in e.arcs:
                lines.append(f"ARC {a.phone} {a.start} {a.end}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_lattices(path, corpus, lex: Lexicon, silence=SilencePolicy.BOUNDARY,
                  silence_phone: str = "sil", tag: str = "") -> List[PhoneMarkedLattice]:
    """Parse the text format; references come from ``corpus``."""
    refs = {u.uid: tuple(u.words) for u in corpus}
    policy = SilencePolicy(silence).value
    with open(path) as fh:
        lines = [ln.split() for ln in fh.read().splitlines() if ln.strip()]
    if not lines or " ".join(lines[0]) != HEADER:
        raise ContractError("not a lattice file (bad header)")
    out: List[PhoneMarkedLattice] = []
    uid, n, entries, cur = None, 0, [], None

    def close_entry():
        if cur is not None:
            words, lmlp, raw = cur
            entries.append(_attach_words(words, lmlp, raw, lex, silence_phone))

    def close_utt():
        if uid is not None:
            if uid not in refs:
                raise ContractError(f"lattice utterance {uid} not in corpus")
            pml = PhoneMarkedLattice(uid, n, refs[uid], tuple(entries), policy, tag)
            for e in pml.entries:
                validate_entry(e, lex, n, policy)
            pml.reference_entry()
            out.append(pml)

    for tok in lines[1:]:
        if tok[0] == "UTT":
            close_entry()
            cur = None
            close_utt()
            uid, n, entries = tok[1], int(tok[2]), []
        elif tok[0] == "ENTRY":
            close_entry()
            cur = (tuple(tok[2:]), float(tok[1]), [])
        elif tok[0] == "ARC":
            cur[2].append((tok[1], int(tok[2]), int(tok[3])))
        else:
            raise ContractError(f"unknown lattice record {tok[0]!r}")
    close_entry()
    close_utt()
    return out


def _attach_words(words, lmlp, raw, lex: Lexicon, silence_phone: str) -> LatticeEntry:
    owners = []
    for i, w in enumerate(words):
        owners.extend([i] * len(lex.entries[w]))
    arcs = []
    k = 0
    for phone, s, e in raw:
        if phone == silence_phone:
            arcs.append(PhoneArc(phone, s, e, -1))
        else:
            if k >= len(owners):
                raise ContractError("more phone arcs than the pronunciation allows")
            arcs.append(PhoneArc(phone, s, e, owners[k]))
            k += 1
    return LatticeEntry(tuple(words), tuple(arcs), lmlp)
