"""Monte-Carlo rollouts of the game; the only component allowed to use hidden detection rates."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _fallback, kernels
from .game import NO_TRAP_INDEX, GameError, GameSpec, Strategy, terminal_payoff, unveil

CAP_FACTOR = 1000


def derive_key(seed: int, *path: int) -> int:
    """Stream key for ``seed`` refined by a path of integer labels."""
    key = int(_fallback.mix64(np.uint64(seed % 2**64)))
    for p in path:
        key = int(_fallback.mix64(np.uint64(key ^ int(_fallback.mix64(np.uint64(p + 1))))))
    return key


def step_cap(spec: GameSpec) -> int:
    return spec.n + 4 if spec.is_acyclic() else CAP_FACTOR * spec.n_states


def tables(spec: GameSpec):
    fn, fp = unveil(spec)
    return (spec.a_off, spec.a_target, spec.d_off, spec.d_target,
            1.0 - fn, fp, spec.absorbing.astype(np.uint8))


def cumulative(spec: GameSpec, strat: Strategy) -> np.ndarray:
    """Per-state cumulative distributions, each segment ending at exactly 1."""
    off = spec.a_off if strat.player == "apt" else spec.d_off
    cum = np.empty_like(strat.probs, dtype=np.float64)
    for s in range(spec.n_states):
        lo, hi = off[s], off[s + 1]
        if hi > lo:
            cum[lo:hi] = np.cumsum(strat.probs[lo:hi])
            cum[hi - 1] = 1.0
    return cum


def check_strategy(spec: GameSpec, strat: Strategy, player: str, tol: float = 1e-9):
    off = spec.a_off if player == "apt" else spec.d_off
    if strat.player != player or strat.probs.shape != (off[-1],):
        raise GameError(f"{player} strategy does not match the game layout")
    p = strat.probs
    if not np.all(np.isfinite(p)) or np.any(p < -tol):
        raise GameError(f"{player} strategy has negative or non-finite entries")
    for s in range(spec.n_states):
        if off[s + 1] > off[s]:
            total = p[off[s]:off[s + 1]].sum()
            if abs(total - 1.0) > tol:
                raise GameError(f"{player} strategy sums to {total:.12g} at {spec.names[s]}")


@dataclass
class Rollout:
    states: list[int]
    actions: list[tuple[int, int]]
    terminal: int
    T: int
    payoff_a: float
    payoff_d: float


def rollout(spec: GameSpec, apt: Strategy, dift: Strategy, start: int = 0,
            seed: int = 0, index: int = 0, cap: int | None = None) -> Rollout:
    """One traced rollout; it is rollout number ``index`` of the stream used by :func:`estimate`."""
    check_strategy(spec, apt, "apt")
    check_strategy(spec, dift, "dift")
    if spec.absorbing[start]:
        raise GameError(f"start state {spec.names[start]} is absorbing")
    cap = cap or step_cap(spec)
    tab = tables(spec)
    detect, fp = tab[4], tab[5]
    acum, dcum = cumulative(spec, apt), cumulative(spec, dift)
    key = _fallback.stream_keys(derive_key(seed), index, 1)
    s, t = start, 0
    states, actions = [s], []
    while not spec.absorbing[s]:
        if t >= cap:
            raise GameError(f"rollout did not terminate within {cap} steps")
        u1, u2, u3 = (float(_fallback.uniforms(key, 3 * t + j)[0]) for j in range(3))
        ai = spec.a_off[s]
        while ai < spec.a_off[s + 1] - 1 and u1 >= acum[ai]:
            ai += 1
        di = spec.d_off[s]
        while di < spec.d_off[s + 1] - 1 and u2 >= dcum[di]:
            di += 1
        a, d = int(spec.a_target[ai]), int(spec.d_target[di])
        if d != NO_TRAP_INDEX and d == a and u3 < detect[d]:
            nxt = spec.tau_a
        elif d != NO_TRAP_INDEX and d != a and u3 < fp[d]:
            nxt = spec.tau_b
        else:
            nxt = a
        actions.append((a, d))
        s = nxt
        states.append(s)
        t += 1
    ra, rd = terminal_payoff(spec, s)
    return Rollout(states, actions, s, t, ra, rd)


@dataclass
class RolloutStats:
    n: int
    frequencies: dict[str, float]
    u_a: float
    u_d: float
    stderr: float
    capped: int = 0
    max_steps: int = 0
    terminals: np.ndarray = field(default=None, repr=False)
    steps: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"n": self.n, "frequencies": self.frequencies, "U_A": self.u_a, "U_D": self.u_d,
                "stderr": self.stderr, "capped": self.capped, "max_steps": self.max_steps}


def run_rollouts(spec: GameSpec, apt: Strategy, dift: Strategy, start: int, n: int,
                 seed: int, threads: int = 1, cap: int | None = None):
    """Raw terminal states (``-1`` = cap hit) and step counts of ``n`` seeded rollouts."""
    check_strategy(spec, apt, "apt")
    check_strategy(spec, dift, "dift")
    if spec.absorbing[start]:
        raise GameError(f"start state {spec.names[start]} is absorbing")
    cap = cap or step_cap(spec)
    tab = tables(spec)
    acum, dcum = cumulative(spec, apt), cumulative(spec, dift)
    key0 = derive_key(seed)
    if threads <= 1 or n < 10_000:
        return kernels.rollout_batch(tab, acum, dcum, start, key0, 0, n, cap)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(
            lambda lo_hi: kernels.rollout_batch(tab, acum, dcum, start, key0, int(lo_hi[0]),
                                                int(lo_hi[1] - lo_hi[0]), cap),
            zip(bounds[:-1], bounds[1:])))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def estimate(spec: GameSpec, apt: Strategy, dift: Strategy, start: int = 0, n: int = 10_000,
             seed: int = 0, threads: int = 1) -> RolloutStats:
    """Terminal-state frequencies and mean payoffs over ``n`` rollouts.

    Rollouts that hit the step cap (possible only on cyclic games) are
    counted in ``capped`` and excluded from every mean.
    """
    if n < 1:
        raise ValueError("need at least one rollout")
    term, steps = run_rollouts(spec, apt, dift, start, n, seed, threads)
    ok = term >= 0
    m = int(ok.sum())
    t = term[ok]
    dest = int(np.count_nonzero((t >= 1) & (t <= spec.q)))
    counts = {"phi": int(np.count_nonzero(t == spec.phi)),
              "tau_A": int(np.count_nonzero(t == spec.tau_a)),
              "tau_B": int(np.count_nonzero(t == spec.tau_b)),
              "D": dest}
    freq = {k: (v / m if m else 0.0) for k, v in counts.items()}
    payoff_d = spec.beta * spec.defender_wins[t].astype(np.float64)
    u_d = float(payoff_d.mean()) if m else float("nan")
    std = float(payoff_d.std(ddof=1)) if m > 1 else 0.0
    return RolloutStats(n, freq, spec.beta - u_d, u_d, std / np.sqrt(max(m, 1)),
                        n - m, int(steps.max(initial=0)), term, steps)


def value_samples_batch(spec: GameSpec, A_cum: np.ndarray, D_cum: np.ndarray, n: int,
                        keys: np.ndarray, threads: int = 1) -> np.ndarray:
    """Monte-Carlo value vectors for ``K`` strategy pairs given as cumulative tables."""
    states = np.array(spec.decision_states, dtype=np.int64)
    tab = tables(spec)
    cap = step_cap(spec)
    wins_mask = spec.defender_wins.astype(np.uint8)
    K = A_cum.shape[0]
    if threads <= 1 or K < 2 * threads:
        wins, capped = kernels.value_batch(tab, A_cum, D_cum, states, n, keys, wins_mask, cap)
    else:
        bounds = np.linspace(0, K, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(
                lambda b: kernels.value_batch(tab, A_cum[b[0]:b[1]], D_cum[b[0]:b[1]], states, n,
                                              keys[b[0]:b[1]], wins_mask, cap),
                zip(bounds[:-1], bounds[1:])))
        wins = np.concatenate([p[0] for p in parts])
        capped = np.concatenate([p[1] for p in parts])
    out = np.tile(np.where(spec.defender_wins, spec.beta, 0.0), (K, 1))
    done = np.maximum(n - capped, 1)
    out[:, states] = spec.beta * wins / done
    return out


def value_samples(spec: GameSpec, apt: Strategy, dift: Strategy, n: int = 1000,
                  seed: int = 0) -> np.ndarray:
    """Estimated value vector: mean defender payoff of ``n`` rollouts from every state.

    Absorbing states are filled in analytically.
    """
    check_strategy(spec, apt, "apt")
    check_strategy(spec, dift, "dift")
    keys = np.array([derive_key(seed)], dtype=np.uint64)
    return value_samples_batch(spec, cumulative(spec, apt)[None, :],
                               cumulative(spec, dift)[None, :], n, keys)[0]
