"""Deterministic generator for a small synthetic recognition task."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Tuple

import numpy as np

from mmilab.gauss_hmm import AcousticModel, ContractError
from mmilab.lexicon_lm import BOS, EOS, BigramLm, Lexicon, SilencePolicy

SILENCE = "sil"


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 8
    phone_count: int = 5
    phones_per_word: Tuple[int, int] = (2, 3)
    feature_dim: int = 4
    frames_per_state: float = 2.0
    train_utterances: int = 200
    test_utterances: int = 50
    words_per_utterance: Tuple[int, int] = (3, 6)
    mean_separation: float = 1.5
    seed: int = 7
    lm_fanout: int = 3
    sil_prob: float = 0.5
    silence: str = SilencePolicy.BOUNDARY.value
    lm_add: float = 0.5
    test_lm_sentences: int = 2000
    floor_fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "phones_per_word", tuple(self.phones_per_word))
        object.__setattr__(self, "words_per_utterance", tuple(self.words_per_utterance))
        for name in ("vocab_size", "phone_count", "feature_dim", "train_utterances",
                     "test_utterances", "lm_fanout", "test_lm_sentences"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be at least 1")
        lo, hi = self.phones_per_word
        if not 1 <= lo <= hi:
            raise ContractError("phones_per_word must be a non-empty range")
        lo, hi = self.words_per_utterance
        if not 1 <= lo <= hi:
            raise ContractError("words_per_utterance must be a non-empty range")
        if self.mean_separation < 0:
            raise ContractError("mean_separation must be non-negative")
        if self.frames_per_state <= 1.0:
            raise ContractError("frames_per_state must exceed 1")
        if not 0.0 < self.sil_prob < 1.0:
            raise ContractError("sil_prob must lie in (0, 1)")
        lo, hi = self.phones_per_word
        if sum(self.phone_count**k for k in range(lo, hi + 1)) < self.vocab_size:
            raise ContractError("not enough distinct pronunciations for the vocabulary")
        SilencePolicy(self.silence)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phones_per_word"] = list(self.phones_per_word)
        d["words_per_utterance"] = list(self.words_per_utterance)
        return d


@dataclass(frozen=True)
class Utterance:
    uid: str
    frames: np.ndarray
    words: Tuple[str, ...]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Corpus:
    utterances: Tuple[Utterance, ...] = field(default_factory=tuple)

    def __iter__(self):
        return iter(self.utterances)

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def n_frames(self) -> int:
        return sum(u.n_frames for u in self.utterances)

    def all_frames(self) -> np.ndarray:
        return np.concatenate([u.frames for u in self.utterances], axis=0)


class Task(NamedTuple):
    lexicon: Lexicon
    train_lm: BigramLm
    test_lm: BigramLm
    true_model: AcousticModel
    train: Corpus
    test: Corpus


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def variance_floor_from_corpus(corpus: Corpus, fraction: float) -> np.ndarray:
    if not 0.0 < fraction < 1.0:
        raise ContractError("fraction must lie strictly between 0 and 1")
    x = corpus.all_frames()
    if x.shape[0] < 2:
        raise ContractError("need at least two frames to estimate a variance")
    return fraction * x.var(axis=0)


def _lexicon(spec: TaskSpec, phones: List[str]) -> Lexicon:
    rng = _rng(spec.seed, 1)
    lo, hi = spec.phones_per_word
    entries = {}
    seen = set()
    width = len(str(spec.vocab_size))
    while len(entries) < spec.vocab_size:
        k = int(rng.integers(lo, hi + 1))
        pron = tuple(phones[i] for i in rng.integers(0, len(phones), size=k))
        if pron in seen:
            continue
        seen.add(pron)
        entries[f"w{len(entries) + 1:0{width}d}"] = pron
    return Lexicon(entries)


def _support(spec: TaskSpec, V: int) -> np.ndarray:
    rng = _rng(spec.seed, 2)
    mask = np.zeros((V + 1, V + 1), dtype=bool)
    mask[0, :V] = True
    mask[1:, V] = True
    fan = min(spec.lm_fanout, V)
    for i in range(V):
        mask[i + 1, rng.choice(V, size=fan, replace=False)] = True
    return mask


def _sentence_source(spec: TaskSpec, support: np.ndarray) -> np.ndarray:
    """Random word-transition weights over the support (rows: BOS + words)."""
    rng = _rng(spec.seed, 3)
    V = support.shape[0] - 1
    w = np.where(support[:, :V], rng.dirichlet(np.full(V, 2.0), size=V + 1), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def _sample_sentence(rng, spec: TaskSpec, trans: np.ndarray, vocab) -> Tuple[str, ...]:
    lo, hi = spec.words_per_utterance
    n = int(rng.integers(lo, hi + 1))
    out = []
    row = 0
    for _ in range(n):
        j = int(rng.choice(len(vocab), p=trans[row]))
        out.append(vocab[j])
        row = j + 1
    return tuple(out)


def _lm_from(sentences, vocab, support, add) -> BigramLm:
    V = len(vocab)
    idx = {w: i for i, w in enumerate(vocab)}
    counts = np.zeros((V + 1, V + 1))
    for s in sentences:
        row = 0
        for w in s:
            counts[row, idx[w]] += 1
            row = idx[w] + 1
        counts[row, V] += 1
    return BigramLm.from_counts(vocab, counts, support, add)


def _true_model(spec: TaskSpec, phones: List[str]) -> AcousticModel:
    rng = _rng(spec.seed, 4)
    J = 3 * len(phones) + 1
    d = spec.feature_dim
    raw = rng.standard_normal((J, d))
    raw -= raw.mean(axis=0)
    diffs = raw[:, None, :] - raw[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))[np.triu_indices(J, 1)].mean()
    means = raw * (spec.mean_separation / dist) if dist > 0 else np.zeros_like(raw)
    variances = np.exp(rng.uniform(-0.3, 0.3, size=(J, d)))
    phone_states = {p: (3 * i, 3 * i + 1, 3 * i + 2) for i, p in enumerate(phones)}
    phone_states[SILENCE] = (J - 1,)
    loop = np.full(J, 1.0 - 1.0 / spec.frames_per_state)
    return AcousticModel(
        phones=tuple(phones) + (SILENCE,),
        phone_states=phone_states,
        means=means,
        variances=variances,
        self_loop=loop,
        floor=np.full(d, 1e-6),
        sil_prob=spec.sil_prob,
        silence=SILENCE,
    )


def _render(rng, model: AcousticModel, lex: Lexicon, words, policy: SilencePolicy) -> np.ndarray:
    units = []
    for i, w in enumerate(words):
        if policy is SilencePolicy.EVERYWHERE or (policy is SilencePolicy.BOUNDARY and i == 0):
            if rng.random() < model.sil_prob:
                units.append(model.silence)
        units.extend(lex.entries[w])
    if policy is not SilencePolicy.NONE and rng.random() < model.sil_prob:
        units.append(model.silence)
    states = []
    for u in units:
        for s in model.phone_states[u]:
            dur = int(rng.geometric(1.0 - model.self_loop[s]))
            states.extend([s] * dur)
    states = np.array(states)
    noise = rng.standard_normal((len(states), model.dim))
    return model.means[states] + noise * np.sqrt(model.variances[states])


def generate_task(spec: TaskSpec = TaskSpec()) -> Task:
    """Build lexicon, both language models, the generating model and corpora.

    Every random draw comes from a generator keyed on (seed, stream, index),
    so the result is a pure function of ``spec``.
    """
    phones = [f"p{i + 1}" for i in range(spec.phone_count)]
    lex = _lexicon(spec, phones)
    vocab = tuple(lex.words)
    support = _support(spec, len(vocab))
    trans = _sentence_source(spec, support)
    model = _true_model(spec, phones)
    policy = SilencePolicy(spec.silence)

    def corpus(tag, count, prefix):
        utts = []
        for i in range(count):
            rng = _rng(spec.seed, tag, i)
            words = _sample_sentence(rng, spec, trans, vocab)
            frames = _render(rng, model, lex, words, policy)
            utts.append(Utterance(f"{prefix}{i:04d}", frames, words))
        return Corpus(tuple(utts))

    train = corpus(10, spec.train_utterances, "tr")
    test = corpus(11, spec.test_utterances, "te")
    lm_text = [_sample_sentence(_rng(spec.seed, 12, i), spec, trans, vocab)
               for i in range(spec.test_lm_sentences)]
    train_lm = _lm_from([u.words for u in train], vocab, support, spec.lm_add)
    test_lm = _lm_from(lm_text, vocab, support, spec.lm_add)
    floor = variance_floor_from_corpus(train, spec.floor_fraction)
    model = AcousticModel(model.phones, model.phone_states, model.means,
                          np.maximum(model.variances, floor), model.self_loop, floor,
                          model.sil_prob, model.silence)
    return Task(lex, train_lm, test_lm, model, train, test)
