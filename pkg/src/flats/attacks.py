"""L-infinity evasion attacks: FGSM, FFGSM (random-start FGSM) and Square Attack.

All attacks clip their output to the valid pixel range [0, 1] and to the
epsilon ball around the clean input.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ConfigError, InputError


class AttackKind(str, enum.Enum):
    FGSM = "fgsm"
    FFGSM = "ffgsm"
    SQUARE = "square"


@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind
    epsilon: float = 8 / 255
    step_size: float = 10 / 255
    n_queries: int = 2000
    n_restarts: int = 1
    loss: str = "ce"

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", AttackKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown attack kind {self.kind!r}", key="attack") from None
        # epsilon == 0 is accepted as the identity attack
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}", key="epsilon")
        if self.kind is AttackKind.FFGSM and self.step_size < 0:
            raise ConfigError(f"step size must be >= 0, got {self.step_size}", key="step_size")
        if self.kind is AttackKind.SQUARE:
            if self.n_queries < 1:
                raise ConfigError("n_queries must be >= 1", key="n_queries")
            if self.n_restarts < 1:
                raise ConfigError("n_restarts must be >= 1", key="n_restarts")
            if self.loss not in ("ce", "margin"):
                raise ConfigError(f"square loss must be 'ce' or 'margin', got {self.loss!r}", key="square_loss")

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def fgsm(cls, epsilon=8 / 255):
        return cls(AttackKind.FGSM, epsilon)

    @classmethod
    def ffgsm(cls, epsilon=8 / 255, step_size=10 / 255):
        return cls(AttackKind.FFGSM, epsilon, step_size)

    @classmethod
    def square(cls, epsilon=8 / 255, n_queries=2000, n_restarts=1, loss="ce"):
        return cls(AttackKind.SQUARE, epsilon, n_queries=n_queries, n_restarts=n_restarts, loss=loss)


class GradientOracle:
    """Input-gradient access to a bound model (white-box attacker)."""

    def __init__(self, model: nn.Model):
        self.model = model

    def input_gradient(self, x: np.ndarray, y) -> np.ndarray:
        return nn.input_gradient(self.model, x, y)


class PredictionOracle:
    """Logits-only access to a model, counting one query per evaluated sample."""

    def __init__(self, model: nn.Model):
        self.model = model
        self._queries = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._queries

    def logits(self, x: np.ndarray) -> np.ndarray:
        out = nn.forward(self.model, x)
        with self._lock:
            self._queries += out.shape[0]
        return out


def project_linf(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip ``x_adv`` into the epsilon ball around ``x`` and into [0, 1]."""
    eps = np.float32(epsilon)
    delta = np.clip(x_adv - x, -eps, eps)
    return np.clip(x + delta, 0.0, 1.0).astype(np.float32)


def fgsm(oracle: GradientOracle, x: np.ndarray, y, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` that increases the loss."""
    x = np.asarray(x, dtype=np.float32)
    grad = oracle.input_gradient(x, y)
    return np.clip(x + np.float32(epsilon) * np.sign(grad).astype(np.float32), 0.0, 1.0)


def ffgsm(oracle: GradientOracle, x: np.ndarray, y, epsilon: float, step_size: float,
          rng: np.random.Generator) -> np.ndarray:
    """FGSM from a uniformly random start inside the epsilon ball."""
    x = np.asarray(x, dtype=np.float32)
    start = x + rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
    start = np.clip(start, 0.0, 1.0)
    grad = oracle.input_gradient(start, y)
    stepped = start + np.float32(step_size) * np.sign(grad).astype(np.float32)
    return project_linf(stepped, x, epsilon)


# ---------------------------------------------------------------- square attack


class SquareResult(NamedTuple):
    x_adv: np.ndarray
    success: np.ndarray | bool
    queries_used: np.ndarray | int


# patch-size fraction halves once the restart has used these fractions of its budget
_SCHEDULE_POINTS = (0.1, 0.25, 0.5, 0.75)
_P_INIT = 0.3


def _patch_fraction(used: int, n_queries: int) -> float:
    p = _P_INIT
    for point in _SCHEDULE_POINTS:
        if used >= point * n_queries:
            p /= 2
    return p


def _objective(logits: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    """Per-sample quantity the attack maximizes."""
    if kind == "ce":
        return nn.per_sample_cross_entropy(logits, y)
    rows = np.arange(len(y))
    true = logits[rows, y]
    other = logits.copy()
    other[rows, y] = -np.inf
    return other.max(axis=1) - true  # negated margin logit(y) - max_{k != y} logit(k)


def square_attack(oracle: PredictionOracle, x: np.ndarray, y, config: AttackConfig,
                  rng: np.random.Generator, history: list | None = None) -> SquareResult:
    """Score-based random search over square patches of +-epsilon.

    ``x`` is one image (C, H, W) or a batch (N, C, H, W); a batch is attacked
    sample-wise in lockstep, one oracle call per step covering the samples
    still running. Each sample gets ``n_queries`` evaluations per restart, the
    first of which (in the first restart) checks the clean input. A proposal is
    kept only if it strictly increases the loss, and a sample stops as soon as
    it is misclassified.

    If ``history`` is a list, the running best loss of sample 0 is appended
    after every query spent on it.
    """
    if config.kind is not AttackKind.SQUARE:
        raise ConfigError(f"square_attack needs a square config, got {config.kind.value}", key="attack")
    single = np.ndim(x) == 3
    x = np.asarray(x, dtype=np.float32)
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if x.ndim != 4 or y.shape != (x.shape[0],):
        raise InputError(f"square attack got images {x.shape} and labels {y.shape}")
    n, c, h, w = x.shape
    eps = np.float32(config.epsilon)
    budget = config.n_queries

    queries = np.zeros(n, dtype=np.int64)
    logits = oracle.logits(x)
    queries += 1
    best_loss = _objective(logits, y, config.loss)
    best_x = x.copy()
    done = logits.argmax(axis=1) != y
    if history is not None:
        history.append(float(best_loss[0]))

    rows_idx = np.arange(h)
    cols_idx = np.arange(w)
    for restart in range(config.n_restarts):
        used = np.full(n, 1 if restart == 0 else 0, dtype=np.int64)
        active = ~done & (used < budget)
        if not active.any():
            continue
        # vertical stripes of +-eps
        ids = np.flatnonzero(active)
        stripes = rng.choice(np.array([-eps, eps], dtype=np.float32), size=(len(ids), c, 1, w))
        cur_x = np.clip(x[ids] + stripes, 0.0, 1.0)
        lg = oracle.logits(cur_x)
        queries[ids] += 1
        used[ids] += 1
        cur_loss = _objective(lg, y[ids], config.loss)
        # per-restart state for the running samples
        run_x = best_x.copy()
        run_loss = np.full(n, -np.inf)
        run_x[ids] = cur_x
        run_loss[ids] = cur_loss
        fooled = lg.argmax(axis=1) != y[ids]
        _commit(ids, cur_x, cur_loss, fooled, best_x, best_loss, done, force=fooled)
        if history is not None and active[0]:
            history.append(float(best_loss[0]))

        while True:
            active = ~done & (used < budget)
            if not active.any():
                break
            ids = np.flatnonzero(active)
            # lockstep: every running sample has used the same number of queries
            p = _patch_fraction(int(used[ids[0]]), budget)
            side = max(1, min(h, w, int(round(p * min(h, w)))))
            top = rng.integers(0, h - side + 1, size=len(ids))
            left = rng.integers(0, w - side + 1, size=len(ids))
            signs = rng.choice(np.array([-eps, eps], dtype=np.float32), size=(len(ids), c, 1, 1))
            in_rows = (rows_idx[None, :] >= top[:, None]) & (rows_idx[None, :] < top[:, None] + side)
            in_cols = (cols_idx[None, :] >= left[:, None]) & (cols_idx[None, :] < left[:, None] + side)
            mask = in_rows[:, None, :, None] & in_cols[:, None, None, :]
            patched = np.clip(x[ids] + signs, 0.0, 1.0)
            cand = np.where(mask, patched, run_x[ids])
            lg = oracle.logits(cand)
            queries[ids] += 1
            used[ids] += 1
            cand_loss = _objective(lg, y[ids], config.loss)
            improved = cand_loss > run_loss[ids]
            acc_ids = ids[improved]
            run_x[acc_ids] = cand[improved]
            run_loss[acc_ids] = cand_loss[improved]
            fooled = (lg.argmax(axis=1) != y[ids]) & improved
            _commit(acc_ids, cand[improved], cand_loss[improved], fooled[improved],
                    best_x, best_loss, done, force=fooled[improved])
            if history is not None and active[0]:
                history.append(float(best_loss[0]))

    x_adv = project_linf(best_x, x, config.epsilon)
    if single:
        return SquareResult(x_adv[0], bool(done[0]), int(queries[0]))
    return SquareResult(x_adv, done.copy(), queries)


def _commit(ids, cand_x, cand_loss, fooled, best_x, best_loss, done, force):
    """Fold per-restart improvements into the across-restart best candidate."""
    if len(ids) == 0:
        return
    better = (cand_loss > best_loss[ids]) | force
    sel = ids[better]
    best_x[sel] = cand_x[better]
    best_loss[sel] = np.maximum(best_loss[sel], cand_loss[better])
    done[ids[fooled]] = True


# ---------------------------------------------------------------- dispatch

_CHUNK = 256


def perturb_batch(attack: AttackConfig, model: nn.Model, batch: np.ndarray, labels,
                  rng: np.random.Generator) -> np.ndarray:
    """Adversarial version of ``batch`` using gradients or queries from ``model``.

    Pass a surrogate as ``model`` for a transfer (black-box) attack; the result
    is later scored on the defended model.
    """
    batch = np.asarray(batch, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if not isinstance(attack, AttackConfig):
        raise ConfigError(f"unknown attack {attack!r}", key="attack")
    if attack.kind is AttackKind.SQUARE:
        return square_attack(PredictionOracle(model), batch, labels, attack, rng).x_adv
    oracle = GradientOracle(model)
    out = []
    for s in range(0, len(batch), _CHUNK):
        xb, yb = batch[s:s + _CHUNK], labels[s:s + _CHUNK]
        if attack.kind is AttackKind.FGSM:
            out.append(fgsm(oracle, xb, yb, attack.epsilon))
        else:
            out.append(ffgsm(oracle, xb, yb, attack.epsilon, attack.step_size, rng))
    return np.concatenate(out)
