"""Dense ReLU network mapping a flattened strategy pair to the game's value vector."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._fallback import mlp_loss_grad, mlp_views
from .game import GameSpec, Strategy
from .simulator import cumulative, derive_key, value_samples_batch
from .solvers import CycleError, compute_leveling

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
VAL_WARN_FRACTION = 0.01


class TrainingError(RuntimeError):
    pass


# -- strategy encoding ------------------------------------------------------------

class Encoding:
    """Canonical flattening of (attacker, defender) strategies.

    Attacker blocks for every decision state, then defender blocks for every
    state where the defender has a choice; states in topological order
    (index order if the game is cyclic), actions in action-table order.
    """

    def __init__(self, spec: GameSpec):
        try:
            order = compute_leveling(spec).order
        except CycleError:
            order = list(range(spec.n_states))
        dec = set(spec.decision_states)
        self.apt_states = [s for s in order if s in dec]
        self.dift_states = [s for s in order if s in dec and s != 0]
        self.apt_index = np.concatenate(
            [np.arange(spec.a_off[s], spec.a_off[s + 1]) for s in self.apt_states]).astype(np.int64)
        self.dift_index = np.concatenate(
            [np.arange(spec.d_off[s], spec.d_off[s + 1]) for s in self.dift_states]
            or [np.zeros(0)]).astype(np.int64)
        self.apt_size = int(spec.a_off[-1])
        self.dift_size = int(spec.d_off[-1])
        self.n_states = spec.n_states
        # position of each (player, state) block inside the flat vector
        self.apt_block = {}
        pos = 0
        for s in self.apt_states:
            w = int(spec.a_off[s + 1] - spec.a_off[s])
            self.apt_block[s] = (pos, pos + w)
            pos += w
        self.dift_block = {}
        for s in self.dift_states:
            w = int(spec.d_off[s + 1] - spec.d_off[s])
            self.dift_block[s] = (pos, pos + w)
            pos += w
        self.dim = pos
        self.v0_dift = int(spec.d_off[0])  # v0's lone no-trap entry

    def encode_arrays(self, A: np.ndarray, D: np.ndarray) -> np.ndarray:
        """Batch encode ``(K, |a_table|)`` and ``(K, |d_table|)`` probability arrays."""
        return np.concatenate([A[..., self.apt_index], D[..., self.dift_index]], axis=-1)

    def encode(self, apt: Strategy, dift: Strategy) -> np.ndarray:
        return self.encode_arrays(apt.probs, dift.probs)

    def decode(self, x: np.ndarray) -> tuple[Strategy, Strategy]:
        x = np.asarray(x, dtype=np.float64)
        a = np.zeros(self.apt_size)
        d = np.zeros(self.dift_size)
        na = len(self.apt_index)
        a[self.apt_index] = x[:na]
        d[self.dift_index] = x[na:]
        d[self.v0_dift] = 1.0
        return Strategy("apt", a), Strategy("dift", d)

    def describe(self, spec: GameSpec) -> dict:
        return {"apt": [[spec.names[s], spec.attacker_action_names(s)] for s in self.apt_states],
                "dift": [[spec.names[s], spec.defender_action_names(s)] for s in self.dift_states]}


# -- network ------------------------------------------------------------------------

class ValueNet:
    """Parameters live in one flat vector; ``weights``/``biases`` are views into it."""

    def __init__(self, layout, params: np.ndarray, beta: float, encoding_spec: dict | None = None):
        self.layout = [int(x) for x in layout]
        self.beta = float(beta)
        self.encoding_spec = encoding_spec
        params = np.asarray(params)
        self.params = np.ascontiguousarray(
            params, dtype=params.dtype if params.dtype in (np.float32, np.float64) else np.float64)
        if self.params.shape != (self.n_params(self.layout),):
            raise ValueError("parameter vector does not match layout")
        self.weights, self.biases = mlp_views(self.params, self.layout)

    @staticmethod
    def n_params(layout) -> int:
        return sum(i * o + o for i, o in zip(layout[:-1], layout[1:]))

    @classmethod
    def init(cls, layout, beta, seed=0, encoding_spec=None, dtype=np.float64) -> "ValueNet":
        rng = np.random.default_rng(seed)
        net = cls(layout, np.zeros(cls.n_params(layout), dtype=dtype), beta, encoding_spec)
        for W in net.weights:
            lim = np.sqrt(6.0 / W.shape[0])
            W[:] = rng.uniform(-lim, lim, size=W.shape)
        return net

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Raw output in units of beta (no clamping)."""
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h

    def astype(self, dtype) -> "ValueNet":
        return ValueNet(self.layout, self.params.astype(dtype), self.beta, self.encoding_spec)

    def predict_encoded(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=self.params.dtype)
        if X.shape[-1] != self.layout[0]:
            raise ValueError(f"input dimension {X.shape[-1]} != network input {self.layout[0]}")
        return np.clip(self.forward(X).astype(np.float64) * self.beta, 0.0, self.beta)

    def loss_and_grad(self, X, Y, grad: np.ndarray | None = None):
        """Mean squared error (over all outputs) and its gradient as a flat vector."""
        if grad is None:
            grad = np.empty_like(self.params)
        return mlp_loss_grad(self.params, self.layout, X, Y, grad), grad

    def to_json(self) -> dict:
        return {"version": FORMAT_VERSION, "layout": self.layout, "beta": self.beta,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases],
                "encoding_spec": self.encoding_spec}

    @classmethod
    def from_json(cls, doc: dict) -> "ValueNet":
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {doc.get('version')}")
        layout = [int(x) for x in doc["layout"]]
        net = cls(layout, np.zeros(cls.n_params(layout)), float(doc["beta"]), doc.get("encoding_spec"))
        for W, b, w_raw, b_raw in zip(net.weights, net.biases, doc["weights"], doc["biases"]):
            w_raw, b_raw = np.asarray(w_raw, dtype=np.float64), np.asarray(b_raw, dtype=np.float64)
            if w_raw.shape != W.shape or b_raw.shape != b.shape:
                raise ValueError("network weights do not match layout")
            W[:], b[:] = w_raw, b_raw
        if not np.all(np.isfinite(net.params)):
            raise ValueError("network weights are not finite")
        return net


def predict(net: ValueNet, enc: Encoding, apt: Strategy, dift: Strategy) -> np.ndarray:
    return net.predict_encoded(enc.encode(apt, dift))


def extract_q(net: ValueNet, enc: Encoding, apt: Strategy, dift: Strategy,
              s: int, a: int, d: int) -> float:
    """Q(s, a, d) read off the net: value at ``s`` with both players pure at ``s``.

    ``a`` and ``d`` are local action indices at ``s``.
    """
    x = enc.encode(apt, dift).copy()
    lo, hi = enc.apt_block[s]
    x[lo:hi] = 0.0
    x[lo + a] = 1.0
    if s in enc.dift_block:
        lo, hi = enc.dift_block[s]
        x[lo:hi] = 0.0
        x[lo + d] = 1.0
    return float(net.predict_encoded(x)[s])


# -- data -------------------------------------------------------------------------------

@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.X[:n], self.Y[:n], dict(self.meta, n=n))

    def save(self, path):
        buf = io.BytesIO()
        np.savez_compressed(buf, X=self.X, Y=self.Y, meta=np.array(json.dumps(self.meta)))
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["X"], z["Y"], json.loads(str(z["meta"])))


def random_strategies(spec: GameSpec, n: int, mix: float, rng: np.random.Generator):
    """``n`` strategy pairs: pure attacker policies, defender mixed w.p. ``mix`` (flat per-sample)."""
    A = np.zeros((n, int(spec.a_off[-1])))
    D = np.zeros((n, int(spec.d_off[-1])))
    rows = np.arange(n)
    for s in spec.decision_states:
        lo, hi = spec.a_off[s], spec.a_off[s + 1]
        A[rows, lo + rng.integers(0, hi - lo, size=n)] = 1.0
    stochastic = rng.random(n) < mix
    D[:, spec.d_off[0]] = 1.0
    for s in spec.dift_states:
        lo, hi = spec.d_off[s], spec.d_off[s + 1]
        D[rows, lo + rng.integers(0, hi - lo, size=n)] = 1.0
        k = int(stochastic.sum())
        if k:
            D[stochastic, lo:hi] = rng.dirichlet(np.ones(hi - lo), size=k)
    return A, D, stochastic


def _cum_rows(spec, P, off):
    C = np.empty_like(P)
    for s in range(spec.n_states):
        lo, hi = off[s], off[s + 1]
        if hi > lo:
            C[:, lo:hi] = np.cumsum(P[:, lo:hi], axis=1)
            C[:, hi - 1] = 1.0
    return C


def generate_dataset(spec: GameSpec, n: int, rollouts: int = 100, mix: float = 0.4,
                     seed: int = 0, threads: int = 1) -> Dataset:
    """Random strategy pairs labelled with simulator value estimates.

    Works on games with hidden detection rates: labels come from rollouts only.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    A, D, stochastic = random_strategies(spec, n, mix, rng)
    keys = np.array([derive_key(seed, k) for k in range(n)], dtype=np.uint64)
    Y = value_samples_batch(spec, _cum_rows(spec, A, spec.a_off), _cum_rows(spec, D, spec.d_off),
                            rollouts, keys, threads)
    enc = Encoding(spec)
    meta = {"n": n, "rollouts": rollouts, "mix": mix, "seed": seed, "beta": spec.beta,
            "n_stochastic": int(stochastic.sum()), "dim": enc.dim, "n_states": spec.n_states,
            "encoding": enc.describe(spec)}
    return Dataset(enc.encode_arrays(A, D), Y, meta)


# -- training -----------------------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: int
    train_loss: float
    mu_val: float  # mean absolute error on the held-out split, value units
    n_train: int
    n_val: int
    seed: int
    beta: float
    history: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def mu_val_fraction(self) -> float:
        return self.mu_val / self.beta

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "train_loss": self.train_loss, "mu_val": self.mu_val,
                "mu_val_fraction": self.mu_val_fraction, "n_train": self.n_train,
                "n_val": self.n_val, "seed": self.seed, "history": self.history}


def train(data: Dataset, hidden=(64, 64), epochs: int = 100, lr: float = 0.02,
          batch_size: int = 16, seed: int = 0, momentum: float = 0.9,
          val_fraction: float = 0.1, encoding_spec: dict | None = None,
          decay: bool = False) -> tuple[ValueNet, TrainReport]:
    """Mini-batch SGD (with optional momentum) on mean squared error of beta-scaled values.

    With ``decay`` the step size falls linearly from ``lr`` towards zero over
    the run. Training arithmetic is single precision; the returned net is
    double precision.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if batch_size < 1 or epochs < 0:
        raise ValueError("batch size must be positive and epochs non-negative")
    beta = float(data.meta.get("beta") or max(float(data.Y.max()), 1.0))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_val = int(round(val_fraction * len(data))) if len(data) > 1 else 0
    val, tr = perm[:n_val], perm[n_val:]
    X = np.ascontiguousarray(data.X, dtype=np.float32)
    Y = np.ascontiguousarray(data.Y / beta, dtype=np.float32)
    net = ValueNet.init([X.shape[1], *hidden, Y.shape[1]], beta, seed=seed,
                        encoding_spec=encoding_spec or data.meta.get("encoding"), dtype=np.float32)
    vel = np.zeros_like(net.params)
    history = []
    loss = float("nan")
    for epoch in range(1, epochs + 1):
        order = np.ascontiguousarray(tr[rng.permutation(len(tr))], dtype=np.int64)
        step = lr * (1.0 - (epoch - 1) / epochs) if decay else lr
        total, count, ok = kernels.sgd_epoch(net.params, vel, net.layout, X, Y, order,
                                             batch_size, step, momentum)
        if not ok:
            raise TrainingError(f"loss diverged (NaN/inf) in epoch {epoch}")
        loss = total / max(count, 1)
        mu = _mae(net, data.X[val], data.Y[val]) if n_val else float("nan")
        history.append((epoch, loss, mu))
    net = net.astype(np.float64)
    mu_val = history[-1][2] if history else float("nan")
    if n_val and mu_val > VAL_WARN_FRACTION * beta:
        log.warning("validation MAE %.4g exceeds %.0f%% of beta", mu_val, 100 * VAL_WARN_FRACTION)
    return net, TrainReport(epochs, loss, mu_val, len(tr), n_val, seed, beta, history)


def _mae(net: ValueNet, X, Y) -> float:
    return float(np.mean(np.abs(net.predict_encoded(X) - Y)))


def gradient_check(net: ValueNet, X, Y, eps: float = 1e-5) -> float:
    """Largest relative gap between back-propagated and central-difference gradients."""
    net = net.astype(np.float64)
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    _, analytic = net.loss_and_grad(X, Y)
    worst = 0.0
    scratch = np.empty_like(net.params)
    for i in range(net.params.size):
        keep = net.params[i]
        net.params[i] = keep + eps
        up = mlp_loss_grad(net.params, net.layout, X, Y, scratch)
        net.params[i] = keep - eps
        down = mlp_loss_grad(net.params, net.layout, X, Y, scratch)
        net.params[i] = keep
        numeric = (up - down) / (2 * eps)
        scale = max(abs(numeric), abs(analytic[i]))
        if scale > 1e-7:
            worst = max(worst, abs(numeric - analytic[i]) / scale)
    return worst
