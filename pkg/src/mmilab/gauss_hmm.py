"""Diagonal Gaussians, HMM state graphs, forward-backward and Viterbi."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from mmilab import _kernels

LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = -math.inf


class ContractError(ValueError):
    """An operation was called outside its stated preconditions."""


class EmptyCompositionError(RuntimeError):
    """The graph admits no complete path of the requested length."""


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ContractError("mean and variance dimensions differ")
        if np.any(self.variance <= 0):
            raise ContractError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def log_gaussian_density(g: DiagonalGaussian, y) -> float:
    """Log density of ``y`` under ``g``, constants included."""
    y = np.asarray(y, dtype=float)
    if y.shape != g.mean.shape:
        raise ContractError(f"dimension mismatch: {y.shape} vs {g.mean.shape}")
    diff = y - g.mean
    return float(-0.5 * np.sum(diff * diff / g.variance + np.log(g.variance) + LOG_2PI))


def log_sum_exp(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ContractError("log_sum_exp of an empty list")
    m = np.max(v)
    if m == NEG_INF:
        return NEG_INF
    if v.size == 1:
        return float(v[0])
    return float(m + np.log(np.sum(np.exp(v - m))))


@dataclass(frozen=True)
class AcousticModel:
    """Tied-state monophone HMM set with one diagonal Gaussian per state.

    ``phone_states`` maps each phone to its emitting-state indices (left to
    right).  ``self_loop`` holds the self-loop probability of every state;
    the advance/exit probability is its complement.  ``sil_prob`` is the
    probability of taking an optional silence slot.
    """

    phones: tuple
    phone_states: dict
    means: np.ndarray
    variances: np.ndarray
    self_loop: np.ndarray
    floor: np.ndarray
    sil_prob: float = 0.5
    silence: str = "sil"

    def __post_init__(self):
        for name in ("means", "variances", "self_loop", "floor"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "phones", tuple(self.phones))
        object.__setattr__(
            self, "phone_states", {p: tuple(int(s) for s in v) for p, v in self.phone_states.items()}
        )
        J, d = self.means.shape
        if self.variances.shape != (J, d) or self.floor.shape != (d,) or self.self_loop.shape != (J,):
            raise ContractError("inconsistent model array shapes")
        for p in self.phones:
            if p not in self.phone_states:
                raise ContractError(f"phone {p!r} has no states")
            if any(s < 0 or s >= J for s in self.phone_states[p]):
                raise ContractError(f"phone {p!r} references a missing state")
        if np.any(self.self_loop <= 0) or np.any(self.self_loop >= 1):
            raise ContractError("self-loop probabilities must lie in (0, 1)")
        if not 0.0 < self.sil_prob < 1.0:
            raise ContractError("sil_prob must lie in (0, 1)")
        if np.any(self.floor <= 0):
            raise ContractError("variance floor must be strictly positive")
        if np.any(self.variances < self.floor[None, :] * (1 - 1e-12)):
            raise ContractError("variance below floor")

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def state(self, j: int) -> DiagonalGaussian:
        return DiagonalGaussian(self.means[j], self.variances[j])

    @cached_property
    def log_loop(self) -> np.ndarray:
        return np.log(self.self_loop)

    @cached_property
    def log_adv(self) -> np.ndarray:
        return np.log1p(-self.self_loop)

    def log_emissions(self, frames) -> np.ndarray:
        """(T, J) matrix of per-state log densities."""
        x = np.asarray(frames, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError(f"frames must be (T, {self.dim})")
        inv = 1.0 / self.variances
        quad = (x * x) @ inv.T - 2.0 * x @ (self.means * inv).T + np.sum(self.means**2 * inv, axis=1)
        const = np.sum(np.log(self.variances), axis=1) + self.dim * LOG_2PI
        return -0.5 * (quad + const[None, :])

    def with_params(self, means, variances) -> "AcousticModel":
        return replace(self, means=np.array(means, dtype=float), variances=np.array(variances, dtype=float))


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    logp: float
    label: Optional[str] = None


@dataclass(eq=False)
class DecodeGraph:
    """State graph whose emitting nodes reference model states.

    ``node_state[i]`` is a state index or -1 for an epsilon node.  A
    complete path runs from a start node to a final node; each emitting
    node on it consumes one frame.  ``node_unit`` optionally tags emitting
    nodes with the index of the phone occurrence they belong to.
    """

    node_state: list
    arcs: list
    start: tuple
    final: tuple
    node_unit: Optional[list] = None
    units: Optional[list] = None
    _compiled: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.start or not self.final:
            raise ContractError("start and final node sets must be non-empty")

    @property
    def n_nodes(self) -> int:
        return len(self.node_state)

    def emitting(self) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.node_state) if s >= 0], dtype=np.int64)

    def compiled(self):
        """Collapse epsilon nodes.

        Returns (emit_nodes, states, init, src, dst, w_sum, w_max, final)
        indexed over emitting nodes, with parallel arcs merged.
        """
        if self._compiled is None:
            self._compiled = _collapse(self)
        return self._compiled


def _collapse(g: DecodeGraph):
    n = g.n_nodes
    is_eps = [s < 0 for s in g.node_state]
    out = [[] for _ in range(n)]
    for a in g.arcs:
        out[a.src].append((a.dst, a.logp))
    # topological order over epsilon nodes
    eps_nodes = [i for i in range(n) if is_eps[i]]
    indeg = {i: 0 for i in eps_nodes}
    for i in eps_nodes:
        for d, _ in out[i]:
            if is_eps[d]:
                indeg[d] += 1
    order = [i for i in eps_nodes if indeg[i] == 0]
    k = 0
    while k < len(order):
        i = order[k]
        k += 1
        for d, _ in out[i]:
            if is_eps[d]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    order.append(d)
    if len(order) != len(eps_nodes):
        raise ContractError("epsilon arcs contain a cycle")
    final_set = set(g.final)

    # closure[i]: dict target -> (logsum, logmax); targets are emitting nodes
    # or the pseudo-target "F" meaning reaching a final node.
    closure = {}

    def merge(acc, key, ls, lm):
        if key in acc:
            s0, m0 = acc[key]
            acc[key] = (np.logaddexp(s0, ls), max(m0, lm))
        else:
            acc[key] = (ls, lm)

    for i in reversed(order):
        acc = {}
        if i in final_set:
            merge(acc, "F", 0.0, 0.0)
        for d, w in out[i]:
            if is_eps[d]:
                for key, (ls, lm) in closure[d].items():
                    merge(acc, key, ls + w, lm + w)
            else:
                merge(acc, d, w, w)
        closure[i] = acc

    def expand(i):
        if is_eps[i]:
            return closure[i]
        return {i: (0.0, 0.0)}

    emit = [i for i in range(n) if not is_eps[i]]
    pos = {i: k for k, i in enumerate(emit)}
    N = len(emit)
    init = np.full(N, NEG_INF)
    for s in g.start:
        for key, (ls, _) in expand(s).items():
            if key != "F":
                init[pos[key]] = np.logaddexp(init[pos[key]], ls)
    final = np.full(N, NEG_INF)
    arcs = {}
    for i in emit:
        if i in final_set:
            final[pos[i]] = np.logaddexp(final[pos[i]], 0.0)
        for d, w in out[i]:
            targets = closure[d] if is_eps[d] else {d: (0.0, 0.0)}
            for key, (ls, lm) in targets.items():
                if key == "F":
                    final[pos[i]] = np.logaddexp(final[pos[i]], ls + w)
                else:
                    k2 = (pos[i], pos[key])
                    if k2 in arcs:
                        s0, m0 = arcs[k2]
                        arcs[k2] = (np.logaddexp(s0, ls + w), max(m0, lm + w))
                    else:
                        arcs[k2] = (ls + w, lm + w)
    keys = sorted(arcs)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    w_sum = np.array([arcs[k][0] for k in keys], dtype=float)
    w_max = np.array([arcs[k][1] for k in keys], dtype=float)
    states = np.array([g.node_state[i] for i in emit], dtype=np.int64)
    return np.array(emit, dtype=np.int64), states, init, src, dst, w_sum, w_max, final


def _check_frames(model: AcousticModel, frames) -> np.ndarray:
    x = np.asarray(frames, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError("need at least one frame")
    if x.shape[1] != model.dim:
        raise ContractError("frame dimension does not match the model")
    if not np.all(np.isfinite(x)):
        raise ContractError("frames must be finite")
    return x


def forward_backward(model: AcousticModel, graph: DecodeGraph, frames, acoustic_scale: float = 1.0,
                     log_emissions: Optional[np.ndarray] = None):
    """Per-frame node posteriors and total log-likelihood.

    Acoustic log densities are multiplied by ``acoustic_scale``; transition
    log-probabilities are not.  Returns ``(posteriors, total)`` with
    posteriors of shape (T, n_nodes) (zero on epsilon nodes).
    """
    if log_emissions is None:
        x = _check_frames(model, frames)
        log_emissions = model.log_emissions(x)
    emit, states, init, src, dst, w_sum, _, final = graph.compiled()
    emis = acoustic_scale * log_emissions[:, states]
    alpha, total = _kernels.graph_forward(init, src, dst, w_sum, final, emis)
    if total == NEG_INF:
        raise EmptyCompositionError("graph admits no complete path of this length")
    if not np.isfinite(total):
        raise FloatingPointError("non-finite total log-likelihood")
    beta = _kernels.graph_backward(src, dst, w_sum, final, emis)
    lp = alpha + beta
    m = np.max(lp, axis=1, keepdims=True)
    p = np.exp(lp - m)
    p /= p.sum(axis=1, keepdims=True)
    post = np.zeros((emis.shape[0], graph.n_nodes))
    post[:, emit] = p
    return post, float(total)


def viterbi(model: AcousticModel, graph: DecodeGraph, frames, acoustic_scale: float = 1.0,
            log_emissions: Optional[np.ndarray] = None):
    """Best node sequence (graph node ids, one per frame) and its score.

    Ties are resolved towards the lexicographically smallest node sequence.
    """
    if log_emissions is None:
        x = _check_frames(model, frames)
        log_emissions = model.log_emissions(x)
    emit, states, init, src, dst, _, w_max, final = graph.compiled()
    emis = acoustic_scale * log_emissions[:, states]
    path, best = _kernels.graph_viterbi(init, src, dst, w_max, final, emis, 1e-12)
    if best == NEG_INF:
        raise EmptyCompositionError("graph admits no complete path of this length")
    return [int(emit[i]) for i in path], float(best)


def state_occupancy(graph: DecodeGraph, posteriors: np.ndarray, n_states: int) -> np.ndarray:
    """Fold node posteriors (T, n_nodes) into model-state occupancies (T, J)."""
    emit = graph.emitting()
    states = np.asarray(graph.node_state)[emit]
    occ = np.zeros((posteriors.shape[0], n_states))
    np.add.at(occ.T, states, posteriors[:, emit].T)
    return occ
