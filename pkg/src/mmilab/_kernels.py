"""Compiled inner loops.

Everything here works on plain arrays so that numba can compile it; the
public modules wrap these with model/graph objects.
"""

import math

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True)
def _lae(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _lse(v):
    m = NEG_INF
    for x in v:
        if x > m:
            m = x
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for x in v:
        s += math.exp(x - m)
    return m + math.log(s)


# ---------------------------------------------------------------------------
# emitting-node graphs (epsilons already collapsed)


@njit(cache=True)
def graph_forward(init, src, dst, w, final, emis):
    T, N = emis.shape
    alpha = np.full((T, N), NEG_INF)
    for j in range(N):
        if init[j] > NEG_INF:
            alpha[0, j] = init[j] + emis[0, j]
    for t in range(1, T):
        for m in range(src.shape[0]):
            a = alpha[t - 1, src[m]]
            if a > NEG_INF:
                alpha[t, dst[m]] = _lae(alpha[t, dst[m]], a + w[m])
        for j in range(N):
            if alpha[t, j] > NEG_INF:
                alpha[t, j] += emis[t, j]
    tot = NEG_INF
    for j in range(N):
        if final[j] > NEG_INF and alpha[T - 1, j] > NEG_INF:
            tot = _lae(tot, alpha[T - 1, j] + final[j])
    return alpha, tot


@njit(cache=True)
def graph_backward(src, dst, w, final, emis):
    T, N = emis.shape
    beta = np.full((T, N), NEG_INF)
    for j in range(N):
        beta[T - 1, j] = final[j]
    for t in range(T - 2, -1, -1):
        for m in range(src.shape[0]):
            b = beta[t + 1, dst[m]]
            if b > NEG_INF:
                beta[t, src[m]] = _lae(beta[t, src[m]], w[m] + emis[t + 1, dst[m]] + b)
    return beta


@njit(cache=True)
def graph_viterbi(init, src, dst, w, final, emis, rtol):
    """Best path with the lexicographically smallest node sequence among ties."""
    T, N = emis.shape
    delta = np.full((T, N), NEG_INF)
    for j in range(N):
        if init[j] > NEG_INF:
            delta[0, j] = init[j] + emis[0, j]
    for t in range(1, T):
        for m in range(src.shape[0]):
            a = delta[t - 1, src[m]]
            if a > NEG_INF:
                v = a + w[m]
                if v > delta[t, dst[m]]:
                    delta[t, dst[m]] = v
        for j in range(N):
            if delta[t, j] > NEG_INF:
                delta[t, j] += emis[t, j]
    # best completion score from (t, j), emission at t excluded
    psi = np.full((T, N), NEG_INF)
    for j in range(N):
        psi[T - 1, j] = final[j]
    for t in range(T - 2, -1, -1):
        for m in range(src.shape[0]):
            b = psi[t + 1, dst[m]]
            if b > NEG_INF:
                v = w[m] + emis[t + 1, dst[m]] + b
                if v > psi[t, src[m]]:
                    psi[t, src[m]] = v
    best = NEG_INF
    for j in range(N):
        if delta[T - 1, j] > NEG_INF and final[j] > NEG_INF:
            v = delta[T - 1, j] + final[j]
            if v > best:
                best = v
    path = np.full(T, -1, dtype=np.int64)
    if best == NEG_INF:
        return path, best
    tol = rtol * (1.0 + abs(best))
    prefix = NEG_INF
    for j in range(N):
        if init[j] > NEG_INF and psi[0, j] > NEG_INF:
            v = init[j] + emis[0, j] + psi[0, j]
            if v >= best - tol:
                path[0] = j
                prefix = init[j] + emis[0, j]
                break
    for t in range(1, T):
        cur = path[t - 1]
        choice = -1
        cval = 0.0
        for m in range(src.shape[0]):
            if src[m] != cur:
                continue
            j = dst[m]
            if choice != -1 and j >= choice:
                continue
            if psi[t, j] == NEG_INF:
                continue
            v = prefix + w[m] + emis[t, j] + psi[t, j]
            if v >= best - tol:
                choice = j
                cval = prefix + w[m] + emis[t, j]
        path[t] = choice
        prefix = cval
    return path, best


# ---------------------------------------------------------------------------
# anchored left-to-right segments


@njit(cache=True)
def segment_forward_backward(emis, loop, adv):
    """Forward-backward over a no-skip chain forced to start in its first
    state at frame 0 and leave its last state after the final frame.

    emis: (L, K) log densities; loop/adv: (K,) log self-loop / advance.
    Returns (log score including the exit transition, posteriors (L, K)).
    """
    L, K = emis.shape
    post = np.zeros((L, K))
    if L < K:
        return NEG_INF, post
    alpha = np.full((L, K), NEG_INF)
    alpha[0, 0] = emis[0, 0]
    for t in range(1, L):
        for k in range(K):
            a = alpha[t - 1, k] + loop[k]
            if k > 0:
                a = _lae(a, alpha[t - 1, k - 1] + adv[k - 1])
            if a > NEG_INF:
                alpha[t, k] = a + emis[t, k]
    score = alpha[L - 1, K - 1] + adv[K - 1]
    if score == NEG_INF or math.isnan(score):
        return NEG_INF, post
    beta = np.full((L, K), NEG_INF)
    beta[L - 1, K - 1] = adv[K - 1]
    for t in range(L - 2, -1, -1):
        for k in range(K):
            b = beta[t + 1, k] + loop[k] + emis[t + 1, k]
            if k + 1 < K:
                b = _lae(b, beta[t + 1, k + 1] + adv[k] + emis[t + 1, k + 1])
            beta[t, k] = b
    for t in range(L):
        for k in range(K):
            v = alpha[t, k] + beta[t, k] - score
            if v > -745.0:
                post[t, k] = math.exp(v)
    # renormalise per frame against rounding
    for t in range(L):
        s = 0.0
        for k in range(K):
            s += post[t, k]
        if s > 0.0:
            for k in range(K):
                post[t, k] /= s
    return score, post


@njit(cache=True)
def span_scores(emis_col, loop, adv):
    """Log score of a single-state unit covering [t, u) for every t < u.

    Returns an (n+1, n+1) matrix, -inf outside t < u.
    """
    n = emis_col.shape[0]
    out = np.full((n + 1, n + 1), NEG_INF)
    csum = np.zeros(n + 1)
    for t in range(n):
        csum[t + 1] = csum[t] + emis_col[t]
    for t in range(n):
        for u in range(t + 1, n + 1):
            out[t, u] = csum[u] - csum[t] + (u - t - 1) * loop + adv
    return out


# ---------------------------------------------------------------------------
# transcription trie: exact acoustic scores for every word sequence


@njit(cache=True, nogil=True)
def extend_words(parent_end, pairs_parent, pairs_word, word_states, word_len,
                 logb, loop, adv, cnorm):
    """Push each (parent, word) pair through the word's state chain.

    parent_end: (P, n+1) log prob of having consumed [0, t) and being ready
    to enter the next unit at frame t.  Returns (C, n+1) of the same for the
    extended prefixes.  Arithmetic is done in the probability domain with
    per-frame normalisation ``cnorm`` and a running per-pair rescale.
    """
    C = pairs_parent.shape[0]
    n = logb.shape[0]
    Kmax = word_states.shape[1]
    out = np.full((C, n + 1), NEG_INF)
    cum = np.zeros(n + 1)
    for t in range(n):
        cum[t + 1] = cum[t] + cnorm[t]
    bnorm = np.empty((n, logb.shape[1]))
    for t in range(n):
        for j in range(logb.shape[1]):
            bnorm[t, j] = math.exp(logb[t, j] - cnorm[t])
    eloop = np.zeros((word_states.shape[0], Kmax))
    eadv = np.zeros((word_states.shape[0], Kmax))
    for wd in range(word_states.shape[0]):
        for k in range(word_len[wd]):
            eloop[wd, k] = math.exp(loop[word_states[wd, k]])
            eadv[wd, k] = math.exp(adv[word_states[wd, k]])
    alpha = np.zeros(Kmax)
    nxt = np.zeros(Kmax)
    ent = np.empty(n + 1)
    for c in range(C):
        p = pairs_parent[c]
        wd = pairs_word[c]
        K = word_len[wd]
        o = NEG_INF
        first = -1
        for t in range(n + 1):
            v = parent_end[p, t] - cum[t]
            ent[t] = v
            if v > o:
                o = v
            if first < 0 and v > NEG_INF:
                first = t
        if o == NEG_INF or first >= n:
            continue
        for t in range(n + 1):
            ent[t] = ent[t] - o
        for k in range(K):
            alpha[k] = 0.0
        s = 0.0
        started = False
        for t in range(first, n):
            inj = ent[t]
            if inj > NEG_INF:
                if not started:
                    s = inj
                    started = True
                elif inj - s > 50.0:
                    f = math.exp(s - inj)
                    for k in range(K):
                        alpha[k] *= f
                    s = inj
                injv = math.exp(inj - s)
            else:
                injv = 0.0
            m = 0.0
            for k in range(K):
                st = word_states[wd, k]
                a = alpha[k] * eloop[wd, k]
                if k > 0:
                    a += alpha[k - 1] * eadv[wd, k - 1]
                else:
                    a += injv
                a *= bnorm[t, st]
                nxt[k] = a
                if a > m:
                    m = a
            for k in range(K):
                alpha[k] = nxt[k]
            last = word_states[wd, K - 1]
            e = alpha[K - 1]
            if e > 0.0:
                out[c, t + 1] = math.log(e) + adv[last] + s + o + cum[t + 1]
            if m > 0.0 and (m < 1e-100 or m > 1e100):
                for k in range(K):
                    alpha[k] /= m
                s += math.log(m)
    return out


@njit(cache=True)
def optional_unit(end, span, log_take, log_skip):
    """Insert an optional single-state unit after ``end`` (rows of log vectors)."""
    R, n1 = end.shape
    out = np.full((R, n1), NEG_INF)
    buf = np.empty(n1)
    for r in range(R):
        for u in range(n1):
            acc = NEG_INF
            for t in range(u):
                if end[r, t] > NEG_INF and span[t, u] > NEG_INF:
                    acc = _lae(acc, end[r, t] + span[t, u])
            buf[u] = _lae(end[r, u] + log_skip, acc + log_take)
        for u in range(n1):
            out[r, u] = buf[u]
    return out


@njit(cache=True)
def finish_rows(end, tail):
    R, n1 = end.shape
    out = np.full(R, NEG_INF)
    for r in range(R):
        m = NEG_INF
        for t in range(n1):
            v = end[r, t] + tail[t]
            if v > m:
                m = v
        if m == NEG_INF:
            continue
        acc = 0.0
        for t in range(n1):
            v = end[r, t] + tail[t]
            if v > NEG_INF:
                acc += math.exp(v - m)
        out[r] = m + math.log(acc)
    return out


# ---------------------------------------------------------------------------
# batched phone segments and linear-chain alignment


@njit(cache=True, nogil=True)
def _segment_alpha(logb, states, K, a, b, loop, adv, alpha):
    L = b - a
    for t in range(L):
        for k in range(K):
            alpha[t, k] = NEG_INF
    alpha[0, 0] = logb[a, states[0]]
    for t in range(1, L):
        for k in range(K):
            st = states[k]
            v = alpha[t - 1, k] + loop[st]
            if k > 0:
                v = _lae(v, alpha[t - 1, k - 1] + adv[states[k - 1]])
            if v > NEG_INF:
                alpha[t, k] = v + logb[a + t, st]
    return alpha[L - 1, K - 1] + adv[states[K - 1]]


@njit(cache=True, nogil=True)
def segment_scores(logb, unit_states, unit_len, seg_unit, seg_start, seg_end, loop, adv):
    """Anchored log score (exit included) of every (unit, start, end) segment."""
    S = seg_unit.shape[0]
    out = np.full(S, NEG_INF)
    Lmax = 1
    for s in range(S):
        if seg_end[s] - seg_start[s] > Lmax:
            Lmax = seg_end[s] - seg_start[s]
    alpha = np.empty((Lmax, unit_states.shape[1]))
    for s in range(S):
        u = seg_unit[s]
        K = unit_len[u]
        if seg_end[s] - seg_start[s] < K:
            continue
        out[s] = _segment_alpha(logb, unit_states[u], K, seg_start[s], seg_end[s], loop, adv, alpha)
    return out


@njit(cache=True, nogil=True)
def segment_accumulate(logb, unit_states, unit_len, seg_unit, seg_start, seg_end, weight, loop, adv, occ):
    """occ[t, state] += weight[s] * posterior within segment s, for all s."""
    S = seg_unit.shape[0]
    Lmax = 1
    for s in range(S):
        if seg_end[s] - seg_start[s] > Lmax:
            Lmax = seg_end[s] - seg_start[s]
    Kmax = unit_states.shape[1]
    alpha = np.empty((Lmax, Kmax))
    beta = np.empty((Lmax, Kmax))
    post = np.empty(Kmax)
    for s in range(S):
        w = weight[s]
        if w == 0.0:
            continue
        u = seg_unit[s]
        K = unit_len[u]
        a = seg_start[s]
        L = seg_end[s] - a
        if L < K:
            continue
        states = unit_states[u]
        score = _segment_alpha(logb, states, K, a, a + L, loop, adv, alpha)
        if score == NEG_INF:
            continue
        for k in range(K):
            beta[L - 1, k] = NEG_INF
        beta[L - 1, K - 1] = adv[states[K - 1]]
        for t in range(L - 2, -1, -1):
            for k in range(K):
                st = states[k]
                v = beta[t + 1, k] + loop[st] + logb[a + t + 1, st]
                if k + 1 < K:
                    v = _lae(v, beta[t + 1, k + 1] + adv[st] + logb[a + t + 1, states[k + 1]])
                beta[t, k] = v
        for t in range(L):
            tot = 0.0
            for k in range(K):
                v = alpha[t, k] + beta[t, k] - score
                p = math.exp(v) if v > -745.0 else 0.0
                post[k] = p
                tot += p
            if tot > 0.0:
                for k in range(K):
                    occ[a + t, states[k]] += w * post[k] / tot


@njit(cache=True, nogil=True)
def align_chain(logb, pos_state, unit_first, unit_last, unit_opt, loop, adv, log_take, log_skip):
    """Viterbi through a chain of units, some of them optional.

    Positions are the emitting states in order; unit u spans positions
    unit_first[u]..unit_last[u].  Returns (best score, unit start frames,
    unit end frames) with -1 for skipped optional units.
    """
    T = logb.shape[0]
    P = pos_state.shape[0]
    U = unit_first.shape[0]
    unit_of = np.empty(P, dtype=np.int64)
    for u in range(U):
        for i in range(unit_first[u], unit_last[u] + 1):
            unit_of[i] = u
    delta = np.full((T, P), NEG_INF)
    back = np.zeros((T, P), dtype=np.int8)  # 0 loop, 1 advance, 2 entered
    ready = np.full((T + 1, U + 1), NEG_INF)
    rback = np.zeros((T + 1, U + 1), dtype=np.int8)  # 0 exit of u-1, 1 skip of u-1
    for t in range(T + 1):
        for u in range(U + 1):
            if u == 0:
                if t == 0:
                    ready[t, u] = 0.0
                continue
            best = NEG_INF
            code = 0
            if t > 0:
                last = unit_last[u - 1]
                v = delta[t - 1, last]
                if v > NEG_INF:
                    best = v + adv[pos_state[last]]
            if unit_opt[u - 1] and ready[t, u - 1] > NEG_INF:
                v = ready[t, u - 1] + log_skip
                if v > best:
                    best = v
                    code = 1
            ready[t, u] = best
            rback[t, u] = code
        if t == T:
            break
        for i in range(P):
            st = pos_state[i]
            u = unit_of[i]
            best = NEG_INF
            code = 0
            if t > 0:
                best = delta[t - 1, i] + loop[st]
            if i == unit_first[u]:
                r = ready[t, u]
                if r > NEG_INF:
                    v = r + (log_take if unit_opt[u] else 0.0)
                    if v > best:
                        best = v
                        code = 2
            elif t > 0:
                v = delta[t - 1, i - 1] + adv[pos_state[i - 1]]
                if v > best:
                    best = v
                    code = 1
            if best > NEG_INF:
                delta[t, i] = best + logb[t, st]
                back[t, i] = code
    starts = np.full(U, -1, dtype=np.int64)
    ends = np.full(U, -1, dtype=np.int64)
    score = ready[T, U]
    if score == NEG_INF:
        return score, starts, ends
    t = T
    u = U
    while u > 0:
        if rback[t, u] == 1:
            u -= 1
            continue
        # unit u-1 ends at frame t (exclusive)
        ends[u - 1] = t
        i = unit_last[u - 1]
        t -= 1
        while True:
            c = back[t, i]
            if c == 0:
                t -= 1
            elif c == 1:
                i -= 1
                t -= 1
            else:
                break
        starts[u - 1] = t
        u -= 1
    return score, starts, ends
