"""Baum-Welch, extended Baum-Welch and the three-regime iteration driver."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from mmilab.analysis import count_floored
from mmilab.criteria import (CriterionReport, ReferenceStarvedError, exact_utterance, phone_accuracy,
                             utterance_mmi)
from mmilab.evaluation import WerReport, decode_method_a, rescore_method_b
from mmilab.gauss_hmm import (AcousticModel, ContractError, EmptyCompositionError, forward_backward,
                              state_occupancy)
from mmilab.lattice import (LatticeConfig, PhoneMarkedLattice, UtteranceScorer, WordLattice, compile_lattice,
                            entry_joint_scores, generate_word_lattice, phone_mark,
                            score_transcriptions, utterance_graph)
from mmilab.lexicon_lm import SilencePolicy
from mmilab.parallel import ordered_map
from mmilab.stats import SufficientStats

__all__ = [
    "SufficientStats", "EbwConfig", "Regime", "EvalPlan", "IterationRow", "IterationLog",
    "flat_start", "ml_accumulate", "ml_update", "train_ml", "mmi_accumulate", "ebw_update",
    "mpe_accumulate", "mpe_ebw_update", "parameter_distance", "count_floored", "run_regime", "e_sweep",
    "TrainingError",
]

log = logging.getLogger(__name__)

NEG_INF = -math.inf


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# maximum likelihood


def flat_start(template: AcousticModel, frames: np.ndarray) -> AcousticModel:
    """Every state gets the global mean and (floored) global variance."""
    x = np.asarray(frames, dtype=float)
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), template.floor)
    J = template.n_states
    return template.with_params(np.tile(mu, (J, 1)), np.tile(var, (J, 1)))


def _ml_utt(args):
    model, lex, utt, silence = args
    g = utterance_graph(model, lex, utt.words, silence)
    try:
        post, tot = forward_backward(model, g, utt.frames, 1.0)
    except EmptyCompositionError:
        return None, NEG_INF
    occ = state_occupancy(g, post, model.n_states)
    return SufficientStats.from_occupancy(occ, utt.frames), tot


def ml_accumulate(model: AcousticModel, corpus, lex, silence=SilencePolicy.BOUNDARY, jobs: int = 1):
    """Returns (stats, total log-likelihood, aligned frame count, skipped utterances)."""
    stats = SufficientStats.zeros(model.n_states, model.dim)
    total, frames, skipped = 0.0, 0, 0
    for utt, (st, tot) in zip(corpus, ordered_map(_ml_utt, [(model, lex, u, silence) for u in corpus], jobs)):
        if st is None:
            skipped += 1
            log.warning("%s: unalignable, skipped", utt.uid)
            continue
        stats += st
        total += tot
        frames += utt.n_frames
    return stats, total, frames, skipped


def ml_update(model: AcousticModel, stats: SufficientStats) -> AcousticModel:
    means = model.means.copy()
    var = model.variances.copy()
    ok = stats.occ > 0
    g = stats.occ[ok][:, None]
    mu = stats.m1[ok] / g
    means[ok] = mu
    var[ok] = stats.m2[ok] / g - mu * mu
    var = np.maximum(var, model.floor[None, :])
    return model.with_params(means, var)


def train_ml(model: AcousticModel, corpus, lex, iters: int, silence=SilencePolicy.BOUNDARY, jobs: int = 1):
    """Baum-Welch from ``model``.

    Returns (models, ll_per_frame) where models[k] is the k-th iterate and
    ll_per_frame[k] its corpus log-likelihood per frame.
    """
    models = [model]
    lls = []
    for k in range(iters + 1):
        stats, total, frames, _ = ml_accumulate(models[-1], corpus, lex, silence, jobs)
        if frames == 0:
            raise TrainingError("no alignable utterances")
        lls.append(total / frames)
        if k < iters:
            models.append(ml_update(models[-1], stats))
    return models, lls


# ---------------------------------------------------------------------------
# extended Baum-Welch


@dataclass(frozen=True)
class EbwConfig:
    E: float = 1.0
    floor: Optional[np.ndarray] = None  # defaults to the model's floor
    d_min_doubling: bool = True
    kappa: float = 2.25
    tau: float = 50.0  # recorded for MPE provenance only; no I-smoothing is applied

    def __post_init__(self):
        if not self.E >= 0:
            raise ContractError("E must be nonnegative")
        if self.kappa <= 0:
            raise ContractError("kappa must be positive")


def _d_min(a, b, c, mu, var) -> float:
    """Smallest D >= 0 with c + D > 0 keeping every variance component positive.

    Per dimension the new variance is positive iff
    var D^2 + (b + c (var + mu^2) - 2 a mu) D + (b c - a^2) > 0.
    """
    lin = b + c * (var + mu * mu) - 2.0 * a * mu
    const = b * c - a * a
    disc = lin * lin - 4.0 * var * const
    root = np.where(disc >= 0, (-lin + np.sqrt(np.maximum(disc, 0.0))) / (2.0 * var), -np.inf)
    return float(max(0.0, -c, np.max(root)))


def ebw_update(model: AcousticModel, num: SufficientStats, den: SufficientStats, cfg: EbwConfig) -> AcousticModel:
    floor = model.floor if cfg.floor is None else np.asarray(cfg.floor, dtype=float)
    means = model.means.copy()
    var = model.variances.copy()
    for j in range(model.n_states):
        gn, gd = num.occ[j], den.occ[j]
        if gn == 0.0 and gd == 0.0:
            continue
        a = num.m1[j] - den.m1[j]
        b = num.m2[j] - den.m2[j]
        c = gn - gd
        mu, s2 = model.means[j], model.variances[j]
        dmin = _d_min(a, b, c, mu, s2)
        D = cfg.E * gd
        if cfg.d_min_doubling:
            D = max(D, 2.0 * dmin)
        else:
            D = max(D, dmin)
        if c + D <= 0.0:
            continue
        new_mu = (a + D * mu) / (c + D)
        new_var = (b + D * (s2 + mu * mu)) / (c + D) - new_mu * new_mu
        means[j] = new_mu
        var[j] = new_var
    var = np.maximum(var, floor[None, :])
    return model.with_params(means, var)


def parameter_distance(a: AcousticModel, b: AcousticModel) -> float:
    if a.means.shape != b.means.shape or a.variances.shape != b.variances.shape:
        raise ContractError("models have different architectures")
    return float(np.sqrt(np.sum((a.means - b.means) ** 2) + np.sum((a.variances - b.variances) ** 2)))


# ---------------------------------------------------------------------------
# MMI / MPE statistics


def _mmi_utt(args):
    model, utt, npml, dpml, kappa = args
    scorer = UtteranceScorer(model, utt.frames)
    num_ll, den_ll = utterance_mmi(model, utt.frames, npml, dpml, kappa, scorer)
    onehot = np.zeros(len(npml.entries))
    onehot[compile_lattice(npml, model).ref] = 1.0
    occ = scorer.accumulate(npml, onehot)
    num = SufficientStats.from_occupancy(occ / kappa, utt.frames)
    joint = scorer.joint(dpml, kappa)
    occ = scorer.accumulate(dpml, np.exp(joint - den_ll))
    den = SufficientStats.from_occupancy(occ / kappa, utt.frames)
    return num, den, num_ll, den_ll, joint


def mmi_accumulate(model: AcousticModel, corpus, num_pmls, den_pmls, kappa: float, jobs: int = 1):
    """Numerator and denominator statistics plus the approximate criterion.

    Returns (num, den, CriterionReport, per-utterance entry joint scores).
    """
    num = SufficientStats.zeros(model.n_states, model.dim)
    den = SufficientStats.zeros(model.n_states, model.dim)
    tn = td = 0.0
    frames = 0
    joints = []
    work = [(model, u, n, d, kappa) for u, n, d in zip(corpus, num_pmls, den_pmls)]
    for utt, (n, d, nl, dl, joint) in zip(corpus, ordered_map(_mmi_utt, work, jobs)):
        num += n
        den += d
        tn += nl
        td += dl
        frames += utt.n_frames
        joints.append(joint)
    return num, den, CriterionReport.from_totals(tn, td, frames), joints


def _mpe_utt(args):
    model, utt, pml, kappa, acc = args
    scorer = UtteranceScorer(model, utt.frames)
    joint = scorer.joint(pml, kappa)
    post = np.exp(joint - np.max(joint))
    post /= post.sum()
    avg = float(post @ acc)
    w = post * (acc - avg)
    pos = scorer.accumulate(pml, np.where(w > 0.0, w, 0.0))
    neg = scorer.accumulate(pml, np.where(w < 0.0, -w, 0.0))
    return (SufficientStats.from_occupancy(pos / kappa, utt.frames),
            SufficientStats.from_occupancy(neg / kappa, utt.frames), avg)


def entry_accuracies(pmls, lex) -> List[np.ndarray]:
    return [np.array([phone_accuracy(e.words, p.reference, lex) for e in p.entries], dtype=float)
            for p in pmls]


def mpe_accumulate(model, corpus, den_pmls, kappa, lex, accs=None, jobs: int = 1):
    """Centered-accuracy statistics; returns (num, den, approximate MPE criterion)."""
    accs = accs if accs is not None else entry_accuracies(den_pmls, lex)
    num = SufficientStats.zeros(model.n_states, model.dim)
    den = SufficientStats.zeros(model.n_states, model.dim)
    crit = 0.0
    work = [(model, u, p, kappa, a) for u, p, a in zip(corpus, den_pmls, accs)]
    for n, d, avg in ordered_map(_mpe_utt, work, jobs):
        num += n
        den += d
        crit += avg
    return num, den, crit


def mpe_ebw_update(model, corpus, den_pmls, kappa, cfg: EbwConfig, lex, accs=None, jobs: int = 1):
    num, den, _ = mpe_accumulate(model, corpus, den_pmls, kappa, lex, accs, jobs)
    return ebw_update(model, num, den, cfg)


# ---------------------------------------------------------------------------
# the iteration driver


class Regime(str, enum.Enum):
    FIXED = "fixed"
    REGENERATE_ALL = "regenerate-all"
    REGENERATE_MARKS = "regenerate-phone-marks"


@dataclass(frozen=True)
class EvalPlan:
    wer_every: int = 1  # 0 disables WER evaluation
    train_a: bool = True
    train_b_or_c: bool = True
    test: bool = True
    exact_every: int = 0  # 0 disables the exact oracle
    snapshots: Tuple[int, ...] = (10, 100)

    def wants_wer(self, k: int) -> bool:
        return self.wer_every > 0 and k % self.wer_every == 0

    def wants_exact(self, k: int) -> bool:
        return self.exact_every > 0 and k % self.exact_every == 0


@dataclass
class IterationRow:
    iter: int
    criterion: CriterionReport
    exact: Optional[CriterionReport]
    param_dist: float
    floored_count: int
    train_wer_a: Optional[float]
    train_wer_b_or_c: Optional[float]
    test_wer: Optional[float]
    mpe_criterion: Optional[float]
    wall_time: float


@dataclass
class IterationLog:
    regime: Regime
    criterion: str
    rows: List[IterationRow] = field(default_factory=list)
    snapshots: Dict[int, AcousticModel] = field(default_factory=dict)
    final_model: Optional[AcousticModel] = None

    def column(self, name: str) -> np.ndarray:
        out = []
        for r in self.rows:
            if name in ("num_ll_pf", "den_ll_pf", "log_mmi_pf"):
                key = {"num_ll_pf": "num_ll_per_frame", "den_ll_pf": "den_ll_per_frame",
                       "log_mmi_pf": "log_mmi_per_frame"}[name]
                out.append(getattr(r.criterion, key))
            elif name == "exact_log_mmi_pf":
                out.append(r.exact.log_mmi_per_frame if r.exact is not None else np.nan)
            else:
                v = getattr(r, name)
                out.append(np.nan if v is None else v)
        return np.array(out, dtype=float)


def _tables(model, task, lm, corpus, cfg: LatticeConfig, jobs):
    def one(u):
        return score_transcriptions(model, task.lexicon, lm, u.frames, cfg.max_len, cfg.silence, cfg.cap)

    return {u.uid: t for u, t in zip(corpus, ordered_map(one, list(corpus), jobs))}


def build_lattices(model, task, corpus, cfg: LatticeConfig, tables=None, tag="", jobs: int = 1):
    """(word lattices, phone-marked lattices) generated with ``model``."""
    tables = tables or _tables(model, task, task.train_lm, corpus, cfg, jobs)

    def one(u):
        wl = generate_word_lattice(model, task.lexicon, task.train_lm, u, cfg, tables[u.uid], tag)
        return wl, phone_mark(wl, model, task.lexicon, u.frames, cfg.silence, tag)

    pairs = ordered_map(one, list(corpus), jobs)
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _remark(model, task, corpus, wls, cfg, jobs):
    def one(args):
        u, wl = args
        return phone_mark(wl, model, task.lexicon, u.frames, cfg.silence)

    return ordered_map(one, list(zip(corpus, wls)), jobs)


def _exact(model, task, corpus, cfg, tables) -> CriterionReport:
    num = den = 0.0
    frames = 0
    for u in corpus:
        n, d = exact_utterance(model, task.lexicon, task.train_lm, u, cfg.kappa, tables[u.uid], cfg.silence)
        num += n
        den += d
        frames += u.n_frames
    return CriterionReport.from_totals(num, den, frames)


def run_regime(regime, iters: int, task, theta_mle: AcousticModel, cfg: EbwConfig,
               lattice_cfg: LatticeConfig, plan: EvalPlan = EvalPlan(), criterion: str = "mmi",
               mle_lattices=None, jobs: int = 1, progress=None) -> IterationLog:
    """Run ``iters`` EBW iterations from theta_mle under the given lattice regime.

    Row k describes theta_k together with the lattices used to update it.
    ``mle_lattices`` may pass precomputed (word lattices, phone-marked
    lattices) built from theta_mle so several runs can share them.
    """
    regime = Regime(regime)
    if criterion not in ("mmi", "mpe"):
        raise ContractError("criterion must be 'mmi' or 'mpe'")
    if iters < 0:
        raise ContractError("iters must be nonnegative")
    if cfg.kappa != lattice_cfg.kappa:
        raise ContractError("EBW and lattice kappa differ")
    train, test = task.train, task.test
    kappa = cfg.kappa
    out = IterationLog(regime, criterion)
    model = theta_mle
    mle_tables = None
    if mle_lattices is None:
        mle_tables = _tables(theta_mle, task, task.train_lm, train, lattice_cfg, jobs)
        mle_lattices = build_lattices(theta_mle, task, train, lattice_cfg, mle_tables, "mle", jobs)
    mle_wls, mle_pmls = mle_lattices
    accs = entry_accuracies(mle_pmls, task.lexicon) if criterion == "mpe" else None
    for k in range(iters + 1):
        t0 = time.perf_counter()
        need_tables = (regime is Regime.REGENERATE_ALL or plan.wants_exact(k)
                       or (plan.wants_wer(k) and plan.train_a))
        if k == 0 and mle_tables is not None:
            tables = mle_tables
        elif need_tables:
            tables = _tables(model, task, task.train_lm, train, lattice_cfg, jobs)
        else:
            tables = None
        if regime is Regime.FIXED or k == 0:
            pmls = mle_pmls
        elif regime is Regime.REGENERATE_ALL:
            _, pmls = build_lattices(model, task, train, lattice_cfg, tables, f"it{k}", jobs)
        else:
            pmls = _remark(model, task, train, mle_wls, lattice_cfg, jobs)
        try:
            num, den, report, joints = mmi_accumulate(model, train, pmls, pmls, kappa, jobs)
        except ReferenceStarvedError as e:
            raise ReferenceStarvedError(e.uid, k) from None
        mpe = None
        if criterion == "mpe":
            if regime is not Regime.FIXED:
                accs = entry_accuracies(pmls, task.lexicon)
            num, den, mpe = mpe_accumulate(model, train, pmls, kappa, task.lexicon, accs, jobs)
        exact = _exact(model, task, train, lattice_cfg, tables) if plan.wants_exact(k) else None
        wa = wb = wt = None
        if plan.wants_wer(k):
            if plan.train_a:
                wa = decode_method_a(model, train, task.lexicon, task.train_lm, lattice_cfg, tables)[0].wer
            if plan.train_b_or_c:
                if regime is Regime.REGENERATE_MARKS:
                    wb = rescore_method_b(model, train, pmls, kappa)[0].wer
                else:
                    wb = rescore_method_b(model, train, mle_pmls, kappa)[0].wer
            if plan.test:
                ttab = _tables(model, task, task.test_lm, test, lattice_cfg, jobs)
                wt = decode_method_a(model, test, task.lexicon, task.test_lm, lattice_cfg, ttab)[0].wer
        if k in plan.snapshots:
            out.snapshots[k] = model
        row = IterationRow(k, report, exact, parameter_distance(model, theta_mle), count_floored(model),
                           wa, wb, wt, mpe, 0.0)
        if k < iters:
            model = ebw_update(model, num, den, cfg)
        row.wall_time = time.perf_counter() - t0
        out.rows.append(row)
        if progress is not None:
            progress(row)
    out.final_model = model
    return out


def e_sweep(E_values: Sequence[float], iters: int, task, theta_mle: AcousticModel, cfg: EbwConfig,
            lattice_cfg: LatticeConfig, plan: EvalPlan = EvalPlan(wer_every=0), jobs: int = 1):
    """One fixed-lattice run per E, all sharing theta_mle and its lattices."""
    tables = _tables(theta_mle, task, task.train_lm, task.train, lattice_cfg, jobs)
    lattices = build_lattices(theta_mle, task, task.train, lattice_cfg, tables, "mle", jobs)
    out = {}
    for E in E_values:
        c = EbwConfig(E=float(E), floor=cfg.floor, d_min_doubling=cfg.d_min_doubling, kappa=cfg.kappa,
                      tau=cfg.tau)
        out[float(E)] = run_regime(Regime.FIXED, iters, task, theta_mle, c, lattice_cfg, plan,
                                   mle_lattices=lattices, jobs=jobs)
    return out
