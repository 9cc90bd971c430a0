"""Per-state minimax stage games solved as small linear programs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class StageError(ValueError):
    pass


@dataclass(frozen=True)
class QMatrix:
    """Continuation values at one state: ``values[i, j]`` = Q(s, a_j, d_i)."""

    state: int
    values: np.ndarray
    defender_actions: tuple = ()
    attacker_actions: tuple = ()


@dataclass(frozen=True)
class StageSolution:
    value: float
    mix: np.ndarray  # over defender actions
    best_response: int  # local attacker action index


def solve_matrix(Q: np.ndarray, tie_tol: float = 1e-9) -> StageSolution:
    """Maximin defender mix of ``Q`` (rows: defender, cols: attacker).

    The reported value is the defender's security level under the returned
    mix, so ``min_a sum_d Q[d, a] mix[d] == value`` holds by construction.
    The attacker's best response is the lowest-index column within
    ``tie_tol`` (scaled by the largest entry) of that minimum.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] == 0 or Q.shape[1] == 0:
        raise StageError(f"Q-matrix must be non-empty 2-D, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise StageError("Q-matrix has NaN or infinite entries")
    if Q.shape[0] == 1:
        p = np.ones(1)
    else:
        try:
            p = kernels.matrix_game_lp(Q)
        except ArithmeticError as exc:  # cannot happen for finite Q
            raise RuntimeError(f"internal stage LP failure: {exc}") from exc
        p = np.clip(p, 0.0, None)
        p /= p.sum()
    cols = p @ Q
    value = float(cols.min())
    scale = max(1.0, float(np.abs(Q).max()))
    best = int(np.flatnonzero(cols <= value + tie_tol * scale)[0])
    return StageSolution(value, p, best)


def solve_stage(q: QMatrix) -> StageSolution:
    return solve_matrix(q.values)
