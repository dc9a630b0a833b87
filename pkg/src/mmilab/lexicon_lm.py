"""Lexicon, bigram language model and graph compilation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from mmilab.gauss_hmm import AcousticModel, Arc, ContractError, DecodeGraph

NEG_INF = -math.inf
BOS = "<s>"
EOS = "</s>"

Transcription = Tuple[str, ...]


class SilencePolicy(str, enum.Enum):
    NONE = "none"
    BOUNDARY = "optional-boundary"
    EVERYWHERE = "optional-everywhere"


class EnumerationCapError(RuntimeError):
    """Enumerating the transcription space would exceed the configured cap."""


@dataclass(frozen=True)
class Lexicon:
    entries: Dict[str, Tuple[str, ...]]

    def __post_init__(self):
        for w, pron in self.entries.items():
            if len(pron) == 0:
                raise ContractError(f"empty pronunciation for {w!r}")

    @property
    def words(self) -> List[str]:
        return sorted(self.entries)

    def phones(self, t: Sequence[str]) -> List[str]:
        out = []
        for w in t:
            if w not in self.entries:
                raise ContractError(f"unknown word {w!r}")
            out.extend(self.entries[w])
        return out


@dataclass(frozen=True)
class BigramLm:
    """Bigram log-probabilities.

    ``logp[i, j]`` is log p(next_j | prev_i) where rows are ``[BOS] + vocab``
    and columns are ``vocab + [EOS]``.
    """

    vocab: Tuple[str, ...]
    logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        object.__setattr__(self, "logp", np.asarray(self.logp, dtype=float))
        V = len(self.vocab)
        if self.logp.shape != (V + 1, V + 1):
            raise ContractError("bigram table has the wrong shape")
        sums = np.exp(self.logp).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ContractError("bigram rows must sum to one")

    @property
    def index(self) -> Dict[str, int]:
        return {w: i for i, w in enumerate(self.vocab)}

    def row(self, prev: str) -> int:
        return 0 if prev == BOS else self.index[prev] + 1

    def col(self, nxt: str) -> int:
        return len(self.vocab) if nxt == EOS else self.index[nxt]

    def bigram(self, prev: str, nxt: str) -> float:
        return float(self.logp[self.row(prev), self.col(nxt)])

    @classmethod
    def from_counts(cls, vocab, counts: np.ndarray, support: np.ndarray, add: float = 0.5) -> "BigramLm":
        """Add-constant estimate restricted to ``support`` (same layout as logp)."""
        c = np.where(support, np.asarray(counts, dtype=float) + add, 0.0)
        with np.errstate(divide="ignore"):
            logp = np.log(c / c.sum(axis=1, keepdims=True))
        return cls(tuple(vocab), logp)


def lm_log_prob(lm: BigramLm, t: Sequence[str]) -> float:
    idx = lm.index
    for w in t:
        if w not in idx:
            raise ContractError(f"unknown word {w!r}")
    total = 0.0
    prev = BOS
    for w in list(t) + [EOS]:
        total += lm.bigram(prev, w)
        prev = w
    return float(total)


def _unit_sequence(lex: Lexicon, t: Sequence[str], policy: SilencePolicy):
    """Units of the transcription with optional-silence slot markers.

    Returns a list of ("slot", None) and ("phone", (phone, word_index)).
    """
    policy = SilencePolicy(policy)
    units = []
    for i, w in enumerate(t):
        if policy is SilencePolicy.EVERYWHERE or (policy is SilencePolicy.BOUNDARY and i == 0):
            units.append(("slot", None))
        for p in lex.entries[w]:
            units.append(("phone", (p, i)))
    if policy is not SilencePolicy.NONE:
        units.append(("slot", None))
    return units


def compile_utterance_graph(lex: Lexicon, model: AcousticModel, t: Sequence[str],
                            silence: SilencePolicy = SilencePolicy.BOUNDARY) -> DecodeGraph:
    """Graph whose complete paths are the state sequences compatible with ``t``."""
    if len(t) < 1:
        raise ContractError("transcription must contain at least one word")
    lex.phones(t)
    node_state: List[int] = []
    node_unit: List[int] = []
    units: List[Tuple[str, int]] = []
    arcs: List[Arc] = []

    def new(state, unit=-1):
        node_state.append(state)
        node_unit.append(unit)
        return len(node_state) - 1

    lt, ls = math.log(model.sil_prob), math.log1p(-model.sil_prob)
    sil_state = model.phone_states[model.silence][0]
    start = new(-1)
    cur = start  # epsilon node ready to enter the next unit
    started = set()
    for kind, info in _unit_sequence(lex, t, silence):
        if kind == "slot":
            units.append((model.silence, -1))
            u = len(units) - 1
            s = new(sil_state, u)
            nxt = new(-1)
            arcs.append(Arc(cur, s, lt, model.silence))
            arcs.append(Arc(s, s, float(model.log_loop[sil_state])))
            arcs.append(Arc(s, nxt, float(model.log_adv[sil_state])))
            arcs.append(Arc(cur, nxt, ls))
            cur = nxt
        else:
            phone, wi = info
            units.append((phone, wi))
            u = len(units) - 1
            label = t[wi] if wi not in started else None
            started.add(wi)
            prev = None
            for st in model.phone_states[phone]:
                node = new(st, u)
                if prev is None:
                    arcs.append(Arc(cur, node, 0.0, label))
                else:
                    arcs.append(Arc(prev, node, float(model.log_adv[node_state[prev]])))
                arcs.append(Arc(node, node, float(model.log_loop[st])))
                prev = node
            nxt = new(-1)
            arcs.append(Arc(prev, nxt, float(model.log_adv[node_state[prev]])))
            cur = nxt
    return DecodeGraph(node_state, arcs, (start,), (cur,), node_unit, units)


def compile_decoding_graph(lex: Lexicon, lm: BigramLm, model: AcousticModel,
                           silence: SilencePolicy = SilencePolicy.BOUNDARY,
                           lm_weight: float = 1.0) -> DecodeGraph:
    """Free word-loop graph weighted by the bigram; word labels on entry arcs."""
    policy = SilencePolicy(silence)
    node_state: List[int] = []

    def new(state):
        node_state.append(state)
        return len(node_state) - 1

    arcs: List[Arc] = []
    lt, ls = math.log(model.sil_prob), math.log1p(-model.sil_prob)
    sil_state = model.phone_states[model.silence][0]

    def optional_sil(a, b):
        s = new(sil_state)
        arcs.append(Arc(a, s, lt, model.silence))
        arcs.append(Arc(s, s, float(model.log_loop[sil_state])))
        arcs.append(Arc(s, b, float(model.log_adv[sil_state])))
        arcs.append(Arc(a, b, ls))

    start = new(-1)
    final = new(-1)
    w_in, w_out = {}, {}
    for w in lm.vocab:
        if w not in lex.entries:
            raise ContractError(f"LM word {w!r} missing from lexicon")
        a = new(-1)
        b = new(-1)
        w_in[w], w_out[w] = a, b
        prev = None
        for p in lex.entries[w]:
            for st in model.phone_states[p]:
                node = new(st)
                if prev is None:
                    arcs.append(Arc(a, node, 0.0, w))
                else:
                    arcs.append(Arc(prev, node, float(model.log_adv[node_state[prev]])))
                arcs.append(Arc(node, node, float(model.log_loop[st])))
                prev = node
        arcs.append(Arc(prev, b, float(model.log_adv[node_state[prev]])))
    if policy is SilencePolicy.NONE:
        head, tail = start, final
    else:
        head, tail = new(-1), new(-1)
        optional_sil(start, head)
        optional_sil(tail, final)
    for w in lm.vocab:
        lp = lm_weight * lm.bigram(BOS, w)
        if lp > NEG_INF:
            arcs.append(Arc(head, w_in[w], lp))
        lp = lm_weight * lm.bigram(w, EOS)
        if lp > NEG_INF:
            arcs.append(Arc(w_out[w], tail, lp))
        if policy is SilencePolicy.EVERYWHERE:
            mid = new(-1)
            optional_sil(w_out[w], mid)
            src = mid
        else:
            src = w_out[w]
        for v in lm.vocab:
            lp = lm_weight * lm.bigram(w, v)
            if lp > NEG_INF:
                arcs.append(Arc(src, w_in[v], lp))
    return DecodeGraph(node_state, arcs, (start,), (final,))


def path_words(graph: DecodeGraph, path: Sequence[int]) -> List[str]:
    """Recover word labels along a node path of a decoding graph.

    The path lists emitting nodes only; a word starts whenever the path
    enters the first state of a word from outside it.
    """
    firsts = {}
    for a in graph.arcs:
        if a.label is not None and graph.node_state[a.dst] >= 0 and a.label != "sil":
            firsts[a.dst] = a.label
    self_loops = {a.src for a in graph.arcs if a.src == a.dst}
    words = []
    prev = None
    for node in path:
        if node in firsts and (prev != node or node not in self_loops):
            words.append(firsts[node])
        prev = node
    return words


def count_transcriptions(lm: BigramLm, max_len: int) -> int:
    V = len(lm.vocab)
    allowed = np.isfinite(lm.logp)
    start = allowed[0, :V].astype(float)
    trans = allowed[1:, :V].astype(float)
    ends = allowed[1:, V].astype(float)
    total = 0.0
    cur = start
    for _ in range(max_len):
        total += float(cur @ ends)
        cur = cur @ trans
    return int(round(total))


def enumerate_transcriptions(lm: BigramLm, max_len: int, cap: int = 200_000):
    """Every transcription of length <= max_len with finite LM probability.

    Returned in depth-first lexicographic order as (words, log-prob).
    """
    if max_len < 1:
        raise ContractError("max_len must be at least 1")
    n = count_transcriptions(lm, max_len)
    if n > cap:
        raise EnumerationCapError(f"{n} transcriptions exceed the cap of {cap}")
    out = []
    vocab = sorted(lm.vocab)

    def walk(prefix, prev, lp):
        end = lp + lm.bigram(prev, EOS)
        if prefix and end > NEG_INF:
            out.append((tuple(prefix), end))
        if len(prefix) == max_len:
            return
        for w in vocab:
            step = lm.bigram(prev, w)
            if step > NEG_INF:
                prefix.append(w)
                walk(prefix, w, lp + step)
                prefix.pop()

    walk([], BOS, 0.0)
    return out
