"""Pure numpy/Python kernels. Same semantics and bit-identical output as ``_kernels.pyx``.

Randomness is counter based: rollout ``i`` of a stream keyed by ``key0`` owns
``key = mix64(key0 + (i + 1) * GOLDEN)`` and its ``c``-th uniform is
``(mix64(key + (c + 1) * GOLDEN2) >> 11) * 2**-53``. Step ``t`` of a rollout
consumes counters ``3t`` (attacker), ``3t + 1`` (defender), ``3t + 2`` (nature).
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
GOLDEN2 = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0
PIVOT_EPS = 1e-12
MAX_PIVOTS = 10_000
VEL_FLUSH = 1e-30


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_keys(key0, first, n):
    idx = np.arange(first + 1, first + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(key0) + idx * GOLDEN)


def uniforms(keys, counter):
    with np.errstate(over="ignore"):
        z = keys + np.uint64(counter + 1) * GOLDEN2
    return (mix64(z) >> np.uint64(11)).astype(np.float64) * _INV53


def _select(off, cum, rows, s, u, maxdeg):
    idx = off[s].copy()
    hi = off[s + 1] - 1
    for _ in range(maxdeg):
        step = (idx < hi) & (u >= cum[rows, idx])
        if not step.any():
            break
        idx += step
    return idx


def _run(tab, A_cum, D_cum, sample, state, keys, cap):
    a_off, a_target, d_off, d_target, detect, fp, absorbing = tab
    n_states = len(absorbing)
    tau_a, tau_b = n_states - 2, n_states - 1
    maxa = int(np.diff(a_off).max(initial=1))
    maxd = int(np.diff(d_off).max(initial=1))
    steps = np.zeros(len(state), dtype=np.int64)
    alive = ~absorbing[state].astype(bool)
    t = 0
    while t < cap:
        act = np.flatnonzero(alive)
        if act.size == 0:
            break
        s, k, rows = state[act], keys[act], sample[act]
        u1 = uniforms(k, 3 * t)
        u2 = uniforms(k, 3 * t + 1)
        u3 = uniforms(k, 3 * t + 2)
        a = a_target[_select(a_off, A_cum, rows, s, u1, maxa)]
        d = d_target[_select(d_off, D_cum, rows, s, u2, maxd)]
        dd = np.where(d >= 0, d, 0)
        nxt = a.copy()
        trap = d >= 0
        nxt[trap & (d == a) & (u3 < detect[dd])] = tau_a
        nxt[trap & (d != a) & (u3 < fp[dd])] = tau_b
        state[act] = nxt
        steps[act] += 1
        alive[act] = ~absorbing[nxt].astype(bool)
        t += 1
    state[alive] = -1
    return state, steps


def rollout_batch(tab, a_cum, d_cum, start, key0, first, n, cap):
    """Terminal states (``-1`` if capped) and step counts of ``n`` rollouts."""
    state = np.full(n, start, dtype=np.int64)
    keys = stream_keys(key0, first, n)
    sample = np.zeros(n, dtype=np.int64)
    return _run(tab, a_cum[None, :], d_cum[None, :], sample, state, keys, cap)


def value_batch(tab, A_cum, D_cum, starts, n, keys0, wins_mask, cap, chunk=64):
    """Defender-win and cap-hit counts, shape ``(K, len(starts))``.

    Sample ``k`` uses stream ``keys0[k]``; the ``r``-th rollout from the
    ``j``-th start state uses rollout index ``j * n + r``.
    """
    K, ns = A_cum.shape[0], len(starts)
    wins = np.zeros((K, ns), dtype=np.int64)
    capped = np.zeros((K, ns), dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    per = ns * n
    for lo in range(0, K, chunk):
        hi = min(K, lo + chunk)
        kk = np.repeat(np.arange(lo, hi), per)
        state = np.tile(np.repeat(starts, n), hi - lo)
        keys = np.concatenate([stream_keys(keys0[k], 0, per) for k in range(lo, hi)])
        term, _ = _run(tab, A_cum, D_cum, kk, state, keys, cap)
        term = term.reshape(hi - lo, ns, n)
        capped[lo:hi] = (term < 0).sum(axis=2)
        wins[lo:hi] = ((term >= 0) & wins_mask[np.maximum(term, 0)].astype(bool)).sum(axis=2)
    return wins, capped


# -- stage game LP --------------------------------------------------------------

def _pivot(T, basis, r, c):
    row = T[r]
    piv = row[c]
    for j in range(len(row)):
        row[j] /= piv
    for i, other in enumerate(T):
        if i != r:
            f = other[c]
            if f != 0.0:
                for j in range(len(row)):
                    other[j] -= f * row[j]
    basis[r] = c


def _reduced(T, basis, cost, allowed):
    rows, cols = len(T), len(T[0])
    red = [0.0] * (cols - 1)
    for j in range(cols - 1):
        if allowed[j]:
            z = 0.0
            for i in range(rows):
                z += cost[basis[i]] * T[i][j]
            red[j] = cost[j] - z
    return red


def _optimize(T, basis, cost, allowed):
    rows, cols = len(T), len(T[0])
    rhs = cols - 1
    for _ in range(MAX_PIVOTS):
        red = _reduced(T, basis, cost, allowed)
        enter = -1
        for j in range(cols - 1):  # Bland: lowest improving index
            if allowed[j] and red[j] > PIVOT_EPS:
                enter = j
                break
        if enter < 0:
            return
        leave, best = -1, 0.0
        for i in range(rows):
            if T[i][enter] > PIVOT_EPS:
                ratio = T[i][rhs] / T[i][enter]
                if leave < 0 or ratio < best or (ratio == best and basis[i] < basis[leave]):
                    leave, best = i, ratio
        if leave < 0:
            raise ArithmeticError("stage LP unbounded")
        _pivot(T, basis, leave, enter)
    raise ArithmeticError("stage LP pivot limit reached")


def matrix_game_lp(Q):
    """Maximin defender mix of ``Q`` (rows: defender actions, cols: attacker actions).

    Two-phase dense simplex with Bland's rule on
    ``max w  s.t.  w <= sum_d (Q[d,a] - min Q) p_d  for all a,  sum p = 1,  p, w >= 0``.
    Returns the raw basic solution ``p`` (length ``rows``).
    """
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    k, m = Q.shape
    qmin = float(Q.min())
    nvar = k + 1 + m + 1
    art, wcol = nvar - 1, k
    T = [[0.0] * (nvar + 1) for _ in range(m + 1)]
    basis = [0] * (m + 1)
    for a in range(m):
        for d in range(k):
            T[a][d] = -(float(Q[d, a]) - qmin)
        T[a][wcol] = 1.0
        T[a][k + 1 + a] = 1.0
        basis[a] = k + 1 + a
    for d in range(k):
        T[m][d] = 1.0
    T[m][art] = 1.0
    T[m][nvar] = 1.0
    basis[m] = art

    allowed = [True] * nvar
    cost = [0.0] * nvar
    cost[art] = -1.0
    _optimize(T, basis, cost, allowed)
    for i in range(m + 1):
        if basis[i] == art:
            if T[i][nvar] > 1e-9:
                raise ArithmeticError("stage LP infeasible")
            for j in range(nvar - 1):
                if abs(T[i][j]) > PIVOT_EPS:
                    _pivot(T, basis, i, j)
                    break
    allowed[art] = False
    cost = [0.0] * nvar
    cost[wcol] = 1.0
    _optimize(T, basis, cost, allowed)
    p = np.zeros(k)
    for i in range(m + 1):
        if basis[i] < k:
            p[basis[i]] = T[i][nvar]
    return p


# -- MLP training ---------------------------------------------------------------

def mlp_views(flat, layout):
    ws, bs, pos = [], [], 0
    for i, o in zip(layout[:-1], layout[1:]):
        ws.append(flat[pos:pos + i * o].reshape(i, o))
        pos += i * o
        bs.append(flat[pos:pos + o])
        pos += o
    return ws, bs


def mlp_loss_grad(params, layout, X, Y, grad):
    """Mean squared error of a ReLU MLP and its gradient (written into ``grad``)."""
    ws, bs = mlp_views(params, layout)
    gw, gb = mlp_views(grad, layout)
    acts = [X]
    h = X
    last = len(ws) - 1
    for i in range(last + 1):
        h = h @ ws[i] + bs[i]
        if i < last:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    err = acts[-1] - Y
    loss = float(np.vdot(err, err)) / err.size
    g = err * (2.0 / err.size)
    for i in range(last, -1, -1):
        np.matmul(acts[i].T, g, out=gw[i])
        np.sum(g, axis=0, out=gb[i])
        if i > 0:
            g = g @ ws[i].T
            g *= acts[i] > 0
    return loss


def sgd_epoch(params, vel, layout, X, Y, order, batch, lr, momentum):
    """One pass of momentum SGD over ``order``; returns (summed batch loss * size, rows, ok)."""
    grad = np.empty_like(params)
    step = np.empty_like(params)
    total = 0.0
    n = len(order)
    for lo in range(0, n, batch):
        idx = order[lo:lo + batch]
        loss = mlp_loss_grad(params, layout, X[idx], Y[idx], grad)
        if not np.isfinite(loss):
            return total, lo, False
        vel *= momentum
        np.multiply(grad, lr, out=step)
        vel -= step
        vel[np.abs(vel) < VEL_FLUSH] = 0.0  # keep idle units out of subnormal range
        params += vel
        total += loss * len(idx)
    return total, n, True
