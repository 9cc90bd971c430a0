# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rollout and stage-LP kernels; mirrors ``_fallback`` operation for operation."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libc.math cimport fabs, fabsf

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t GOLDEN2 = 0xD1B54A32D192ED03ULL
cdef double INV53 = 1.0 / 9007199254740992.0
cdef double PIVOT_EPS = 1e-12
cdef int MAX_PIVOTS = 10000
cdef float VEL_FLUSH = 1e-30


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double uniform(uint64_t key, uint64_t counter) nogil:
    return <double>(mix64(key + (counter + 1) * GOLDEN2) >> 11) * INV53


cdef inline int64_t select(const int64_t[:] off, const double[:] cum, int64_t s, double u) nogil:
    cdef int64_t idx = off[s]
    cdef int64_t hi = off[s + 1] - 1
    while idx < hi and u >= cum[idx]:
        idx += 1
    return idx


cdef int64_t run_one(const int64_t[:] a_off, const int64_t[:] a_target, const double[:] a_cum,
                     const int64_t[:] d_off, const int64_t[:] d_target, const double[:] d_cum,
                     const double[:] detect, const double[:] fp, const unsigned char[:] absorbing,
                     int64_t start, uint64_t key, int64_t cap, int64_t* steps_out) nogil:
    cdef int64_t n_states = absorbing.shape[0]
    cdef int64_t tau_a = n_states - 2, tau_b = n_states - 1
    cdef int64_t s = start, a, d, t = 0
    cdef double u1, u2, u3
    while not absorbing[s]:
        if t >= cap:
            steps_out[0] = t
            return -1
        u1 = uniform(key, 3 * t)
        u2 = uniform(key, 3 * t + 1)
        u3 = uniform(key, 3 * t + 2)
        a = a_target[select(a_off, a_cum, s, u1)]
        d = d_target[select(d_off, d_cum, s, u2)]
        if d >= 0 and d == a and u3 < detect[d]:
            s = tau_a
        elif d >= 0 and d != a and u3 < fp[d]:
            s = tau_b
        else:
            s = a
        t += 1
    steps_out[0] = t
    return s


def rollout_batch(tab, double[:] a_cum, double[:] d_cum, int64_t start, uint64_t key0,
                  int64_t first, int64_t n, int64_t cap):
    cdef const int64_t[:] a_off = tab[0]
    cdef const int64_t[:] a_target = tab[1]
    cdef const int64_t[:] d_off = tab[2]
    cdef const int64_t[:] d_target = tab[3]
    cdef const double[:] detect = tab[4]
    cdef const double[:] fp = tab[5]
    cdef const unsigned char[:] absorbing = np.ascontiguousarray(tab[6], dtype=np.uint8)
    term = np.empty(n, dtype=np.int64)
    steps = np.empty(n, dtype=np.int64)
    cdef int64_t[:] tv = term
    cdef int64_t[:] sv = steps
    cdef int64_t i
    cdef uint64_t key
    with nogil:
        for i in range(n):
            key = mix64(key0 + <uint64_t>(first + i + 1) * GOLDEN)
            tv[i] = run_one(a_off, a_target, a_cum, d_off, d_target, d_cum,
                            detect, fp, absorbing, start, key, cap, &sv[i])
    return term, steps


def value_batch(tab, double[:, :] A_cum, double[:, :] D_cum, starts, int64_t n,
                keys0, wins_mask, int64_t cap):
    cdef const int64_t[:] a_off = tab[0]
    cdef const int64_t[:] a_target = tab[1]
    cdef const int64_t[:] d_off = tab[2]
    cdef const int64_t[:] d_target = tab[3]
    cdef const double[:] detect = tab[4]
    cdef const double[:] fp = tab[5]
    cdef const unsigned char[:] absorbing = np.ascontiguousarray(tab[6], dtype=np.uint8)
    cdef const unsigned char[:] wm = np.ascontiguousarray(wins_mask, dtype=np.uint8)
    cdef const int64_t[:] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef const uint64_t[:] k0 = np.ascontiguousarray(keys0, dtype=np.uint64)
    cdef int64_t K = A_cum.shape[0], ns = st.shape[0]
    wins = np.zeros((K, ns), dtype=np.int64)
    capped = np.zeros((K, ns), dtype=np.int64)
    cdef int64_t[:, :] wv = wins
    cdef int64_t[:, :] cv = capped
    cdef int64_t k, j, r, term, steps
    cdef uint64_t key
    with nogil:
        for k in range(K):
            for j in range(ns):
                for r in range(n):
                    key = mix64(k0[k] + <uint64_t>(j * n + r + 1) * GOLDEN)
                    term = run_one(a_off, a_target, A_cum[k], d_off, d_target, D_cum[k],
                                   detect, fp, absorbing, st[j], key, cap, &steps)
                    if term < 0:
                        cv[k, j] += 1
                    elif wm[term]:
                        wv[k, j] += 1
    return wins, capped


# -- stage game LP --------------------------------------------------------------

cdef void pivot(double[:, :] T, int64_t[:] basis, int64_t r, int64_t c) nogil:
    cdef int64_t rows = T.shape[0], cols = T.shape[1], i, j
    cdef double piv = T[r, c], f
    for j in range(cols):
        T[r, j] /= piv
    for i in range(rows):
        if i != r:
            f = T[i, c]
            if f != 0.0:
                for j in range(cols):
                    T[i, j] -= f * T[r, j]
    basis[r] = c


cdef int optimize(double[:, :] T, int64_t[:] basis, double[:] cost, unsigned char[:] allowed,
                  double[:] red) nogil:
    cdef int64_t rows = T.shape[0], cols = T.shape[1], rhs = cols - 1
    cdef int64_t i, j, enter, leave, it
    cdef double z, ratio, best
    for it in range(MAX_PIVOTS):
        for j in range(cols - 1):
            red[j] = 0.0
            if allowed[j]:
                z = 0.0
                for i in range(rows):
                    z += cost[basis[i]] * T[i, j]
                red[j] = cost[j] - z
        enter = -1
        for j in range(cols - 1):
            if allowed[j] and red[j] > PIVOT_EPS:
                enter = j
                break
        if enter < 0:
            return 0
        leave = -1
        best = 0.0
        for i in range(rows):
            if T[i, enter] > PIVOT_EPS:
                ratio = T[i, rhs] / T[i, enter]
                if leave < 0 or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    leave = i
                    best = ratio
        if leave < 0:
            return 1
        pivot(T, basis, leave, enter)
    return 2


def matrix_game_lp(Q):
    cdef double[:, :] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef int64_t k = q.shape[0], m = q.shape[1]
    cdef int64_t nvar = k + 1 + m + 1
    cdef int64_t art = nvar - 1, wcol = k, a, d, i, j
    cdef double qmin = q[0, 0]
    for d in range(k):
        for a in range(m):
            if q[d, a] < qmin:
                qmin = q[d, a]
    cdef double[:, :] T = np.zeros((m + 1, nvar + 1))
    cdef int64_t[:] basis = np.zeros(m + 1, dtype=np.int64)
    cdef double[:] cost = np.zeros(nvar)
    cdef double[:] red = np.zeros(nvar)
    cdef unsigned char[:] allowed = np.ones(nvar, dtype=np.uint8)
    cdef int status
    for a in range(m):
        for d in range(k):
            T[a, d] = -(q[d, a] - qmin)
        T[a, wcol] = 1.0
        T[a, k + 1 + a] = 1.0
        basis[a] = k + 1 + a
    for d in range(k):
        T[m, d] = 1.0
    T[m, art] = 1.0
    T[m, nvar] = 1.0
    basis[m] = art
    cost[art] = -1.0
    status = optimize(T, basis, cost, allowed, red)
    if status:
        raise ArithmeticError("stage LP pivot limit reached" if status == 2 else "stage LP unbounded")
    for i in range(m + 1):
        if basis[i] == art:
            if T[i, nvar] > 1e-9:
                raise ArithmeticError("stage LP infeasible")
            for j in range(nvar - 1):
                if fabs(T[i, j]) > PIVOT_EPS:
                    pivot(T, basis, i, j)
                    break
    allowed[art] = 0
    cost[art] = 0.0
    cost[wcol] = 1.0
    status = optimize(T, basis, cost, allowed, red)
    if status:
        raise ArithmeticError("stage LP pivot limit reached" if status == 2 else "stage LP unbounded")
    p = np.zeros(k)
    for i in range(m + 1):
        if basis[i] < k:
            p[basis[i]] = T[i, nvar]
    return p


# -- MLP training (single precision, BLAS) -------------------------------------

from scipy.linalg.cython_blas cimport sgemm


cdef inline void mm(char ta, char tb, int m, int n, int k, float* A, int lda,
                    float* B, int ldb, float beta, float* C, int ldc) nogil:
    # column-major C(m x n) = op(A) op(B) + beta C
    cdef float one = 1.0
    sgemm(&ta, &tb, &m, &n, &k, &one, A, &lda, B, &ldb, &beta, C, &ldc)


def sgd_epoch(float[::1] params, float[::1] vel, layout, const float[:, ::1] X,
              const float[:, ::1] Y, const int64_t[::1] order, int64_t batch,
              float lr, float momentum):
    cdef int64_t L = len(layout) - 1
    cdef int64_t[::1] lay = np.ascontiguousarray(layout, dtype=np.int64)
    cdef int64_t[::1] woff = np.zeros(L, dtype=np.int64)
    cdef int64_t[::1] boff = np.zeros(L, dtype=np.int64)
    cdef int64_t[::1] aoff = np.zeros(L + 2, dtype=np.int64)
    cdef int64_t l, pos = 0, maxw = 0
    for l in range(L):
        woff[l] = pos
        pos += lay[l] * lay[l + 1]
        boff[l] = pos
        pos += lay[l + 1]
    for l in range(L + 1):
        aoff[l + 1] = aoff[l] + batch * lay[l]
        maxw = max(maxw, lay[l])
    cdef float[::1] grad_m = np.zeros(params.shape[0], dtype=np.float32)
    cdef float[::1] acts_m = np.zeros(aoff[L + 1], dtype=np.float32)
    cdef float[::1] g_m = np.zeros(batch * maxw, dtype=np.float32)
    cdef float[::1] g2_m = np.zeros(batch * maxw, dtype=np.float32)
    cdef int64_t n = order.shape[0], lo, m, r, c, i, o, dim = lay[0], out = lay[L]
    cdef int64_t P = params.shape[0]
    cdef double total = 0.0, loss
    cdef float e, scale, flush = VEL_FLUSH
    cdef float* prm = &params[0]
    cdef float* vl = &vel[0]
    cdef float* grad = &grad_m[0]
    cdef float* acts = &acts_m[0]
    cdef float* gp
    cdef float* gq
    cdef float* tmp
    cdef float* h
    cdef float* b
    cdef const float* src
    cdef bint ok = True
    with nogil:
        lo = 0
        while lo < n:
            m = min(batch, n - lo)
            for r in range(m):
                src = &X[order[lo + r], 0]
                for c in range(dim):
                    acts[r * dim + c] = src[c]
            # forward: H_{l+1} = relu(H_l W_l + b_l)
            for l in range(L):
                i = lay[l]
                o = lay[l + 1]
                h = acts + aoff[l + 1]
                b = prm + boff[l]
                for r in range(m):
                    for c in range(o):
                        h[r * o + c] = b[c]
                mm(b'N', b'N', <int>o, <int>m, <int>i, prm + woff[l], <int>o,
                   acts + aoff[l], <int>i, 1.0, h, <int>o)
                if l < L - 1:
                    for r in range(m * o):
                        h[r] = h[r] if h[r] > 0 else 0
            loss = 0.0
            scale = 2.0 / (m * out)
            h = acts + aoff[L]
            gp = &g_m[0]
            for r in range(m):
                src = &Y[order[lo + r], 0]
                for c in range(out):
                    e = h[r * out + c] - src[c]
                    loss += <double>e * e
                    gp[r * out + c] = e * scale
            loss /= m * out
            if not (loss == loss) or loss > 1e300:
                ok = False
                break
            gq = &g2_m[0]
            for l in range(L - 1, -1, -1):
                i = lay[l]
                o = lay[l + 1]
                h = acts + aoff[l]
                b = grad + boff[l]
                # dW = H_l^T G ; db = colsum G
                mm(b'N', b'T', <int>o, <int>i, <int>m, gp, <int>o, h, <int>i,
                   0.0, grad + woff[l], <int>o)
                for c in range(o):
                    b[c] = 0
                for r in range(m):
                    for c in range(o):
                        b[c] += gp[r * o + c]
                if l > 0:
                    # G_prev = (G W_l^T) * [H_l > 0]
                    mm(b'T', b'N', <int>i, <int>m, <int>o, prm + woff[l], <int>o, gp, <int>o,
                       0.0, gq, <int>i)
                    for r in range(m * i):
                        gq[r] = gq[r] if h[r] > 0 else 0
                    tmp = gp
                    gp = gq
                    gq = tmp
            for r in range(P):
                e = momentum * vl[r] - lr * grad[r]
                # decaying velocities of idle units would go subnormal; a select,
                # not a branch, since the sign pattern is unpredictable
                e = e if fabsf(e) >= flush else 0
                vl[r] = e
                prm[r] += e
            total += loss * m
            lo += m
    return total, lo, bool(ok)
