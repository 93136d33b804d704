"""Federated rounds with scheduled adversarial training.

Two schedulers decide which clients train on adversarial batches:

* Method I draws ``n_a`` adversarial trainers from each round's selection,
  so every round contains exactly ``n_a`` of them.
* Method II fixes ``n_a`` adversarial clients once before round 1; a round's
  adversarial trainers are whichever of them happen to be selected.

Randomness flows from one master seed. Each (round, client) pair gets its own
generator, so running clients on several threads gives the same result as
running them one after another.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .attacks import AttackConfig, perturb_batch
from .data import LabeledDataset, PartitionPlan, client_datasets
from .errors import ConfigError, FlatsError, InputError

log = logging.getLogger(__name__)

# stream tags for seed derivation
_SELECT, _FIXED_ADV, _CLIENT, _EVAL, _INIT = 1, 2, 3, 4, 5


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple."""
    return np.random.default_rng([int(seed), *map(int, keys)])


class ScheduleMethod(str, enum.Enum):
    METHOD1 = "method1"
    METHOD2 = "method2"


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 10
    clients: int = 5
    select: int = 4
    adv_clients: int = 0
    abr: float = 0.5
    local_epochs: int = 5
    train_batch: int = 64
    eval_batch: int = 32
    lr: float = 0.05
    method: ScheduleMethod = ScheduleMethod.METHOD1
    attack: AttackConfig = field(default_factory=AttackConfig.ffgsm)
    loss_mix: float = 0.5
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", ScheduleMethod(self.method))
        self.validate()

    def validate(self):
        errors = []
        if self.rounds < 0:
            errors.append(("rounds", "must be >= 0"))
        if self.clients < 1:
            errors.append(("clients", "must be >= 1"))
        if not 1 <= self.select <= self.clients:
            errors.append(("select", f"must lie in [1, clients={self.clients}]"))
        limit = self.select if self.method is ScheduleMethod.METHOD1 else self.clients
        if not 0 <= self.adv_clients <= limit:
            errors.append(("adv_clients", f"must lie in [0, {limit}] for {self.method.value}"))
        if not 0.0 <= self.abr <= 1.0:
            errors.append(("abr", "must lie in [0, 1]"))
        if self.local_epochs < 0:
            errors.append(("epochs", "must be >= 0"))
        if self.train_batch < 1:
            errors.append(("train_batch", "must be >= 1"))
        if self.eval_batch < 1:
            errors.append(("eval_batch", "must be >= 1"))
        if self.lr < 0:
            errors.append(("lr", "must be >= 0"))
        if not 0.0 <= self.loss_mix <= 1.0:
            errors.append(("loss_mix", "must lie in [0, 1]"))
        if self.threads < 1:
            errors.append(("threads", "must be >= 1"))
        if errors:
            key, msg = errors[0]
            detail = "; ".join(f"{k}: {m}" for k, m in errors)
            raise ConfigError(detail, key=key)


# ---------------------------------------------------------------- scheduling


def select_round_clients(rng: np.random.Generator, n_clients: int, n_select: int) -> list[int]:
    """Uniform subset of size ``n_select`` without replacement, sorted."""
    if not 0 <= n_select <= n_clients:
        raise ConfigError(f"cannot select {n_select} of {n_clients} clients", key="select")
    return sorted(int(i) for i in rng.choice(n_clients, size=n_select, replace=False))


def plan_adversaries_method1(rng: np.random.Generator, round_clients: Sequence[int], n_adv: int) -> list[int]:
    if not 0 <= n_adv <= len(round_clients):
        raise ConfigError(f"{n_adv} adversarial clients but only {len(round_clients)} selected", key="adv_clients")
    return sorted(int(i) for i in rng.choice(np.asarray(round_clients), size=n_adv, replace=False))


def plan_adversaries_method2(rng: np.random.Generator, n_clients: int, n_adv: int) -> list[int]:
    if not 0 <= n_adv <= n_clients:
        raise ConfigError(f"{n_adv} adversarial clients but only {n_clients} in total", key="adv_clients")
    return sorted(int(i) for i in rng.choice(n_clients, size=n_adv, replace=False))


def adversarial_batch_count(abr: float, n_batches: int) -> int:
    """``ceil(abr * n_batches)``, robust to float noise such as 0.3 * 10."""
    return min(n_batches, math.ceil(round(abr * n_batches, 9)))


# ---------------------------------------------------------------- local training


@dataclass
class LocalUpdate:
    params: nn.ParameterSet
    n_samples: int
    epoch_losses: list[float] = field(default_factory=list)
    adv_batches: list[int] = field(default_factory=list)

    def __iter__(self):  # unpacks as (params, n_samples)
        return iter((self.params, self.n_samples))


def _train_local(global_params, arch, data: LabeledDataset, epochs, lr, batch_size, rng,
                 abr=0.0, attack: AttackConfig | None = None, loss_mix=0.5) -> LocalUpdate:
    if len(data) == 0:
        raise ConfigError("client has no data")
    params = global_params
    n = len(data)
    n_batches = math.ceil(n / batch_size)
    n_adv = adversarial_batch_count(abr, n_batches) if attack is not None else 0
    result = LocalUpdate(params, n)
    if epochs == 0 or lr == 0:
        return result
    images, labels = data.images, data.labels
    for _ in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            xb, yb = images[idx], labels[idx]
            model = nn.Model(arch, params)
            if b < n_adv:
                x_adv = perturb_batch(attack, model, xb, yb, rng)
                loss, grads = _mixed_step(model, xb, x_adv, yb, loss_mix)
            else:
                loss, grads, _ = nn.loss_and_grads(model, xb, yb, need_input_grad=False)
            params = nn.sgd_step(params, grads, lr)
            losses.append(loss)
        result.epoch_losses.append(float(np.mean(losses)))
        result.adv_batches.append(n_adv)
    result.params = params
    return result


def _mixed_step(model, x_clean, x_adv, y, mix):
    """Loss and gradients of ``mix * J(clean) + (1 - mix) * J(adv)``."""
    if mix == 1.0:
        loss, grads, _ = nn.loss_and_grads(model, x_clean, y, need_input_grad=False)
        return loss, grads
    if mix == 0.0:
        loss, grads, _ = nn.loss_and_grads(model, x_adv, y, need_input_grad=False)
        return loss, grads
    lc, gc, _ = nn.loss_and_grads(model, x_clean, y, weight=mix, need_input_grad=False)
    la, ga, _ = nn.loss_and_grads(model, x_adv, y, weight=1.0 - mix, need_input_grad=False)
    return lc + la, nn.add_grads(gc, ga)


def local_update(global_params, arch, data: LabeledDataset, epochs: int, lr: float,
                 batch_size: int, rng: np.random.Generator) -> LocalUpdate:
    """``epochs`` passes of shuffled mini-batch SGD starting from the global weights."""
    return _train_local(global_params, arch, data, epochs, lr, batch_size, rng)


def adv_local_update(global_params, arch, data: LabeledDataset, epochs: int, lr: float,
                     batch_size: int, abr: float, attack: AttackConfig, loss_mix: float,
                     rng: np.random.Generator) -> LocalUpdate:
    """Local training where the first ``ceil(abr * B)`` shuffled batches of each epoch are attacked.

    Attacks are crafted against the current local weights. Attacked batches
    minimize the mix of clean and adversarial loss; the rest are plain steps.
    """
    if not 0.0 <= abr <= 1.0:
        raise ConfigError(f"abr must lie in [0, 1], got {abr}", key="abr")
    nn.mixed_adversarial_loss(0.0, 0.0, loss_mix)  # validates the mix
    return _train_local(global_params, arch, data, epochs, lr, batch_size, rng, abr, attack, loss_mix)


# ---------------------------------------------------------------- aggregation


def fedavg(updates: Sequence[tuple[nn.ParameterSet, int]]) -> nn.ParameterSet:
    """Sample-count weighted average of client parameters."""
    updates = [tuple(u) for u in updates]
    if not updates:
        raise InputError("fedavg needs at least one update")
    first = updates[0][0]
    for params, count in updates:
        first.check_compatible(params)
        if count < 1:
            raise InputError(f"client sample count must be >= 1, got {count}")
    total = sum(int(c) for _, c in updates)
    coeffs = [int(c) / total for _, c in updates]
    out = []
    for j, name in enumerate(first.names):
        acc = np.zeros(first.arrays[j].shape, dtype=np.float64)
        for (params, _), coef in zip(updates, coeffs):
            acc += coef * params.arrays[j].astype(np.float64)
        out.append((name, acc.astype(first.arrays[j].dtype)))
    return nn.ParameterSet(out)


# ---------------------------------------------------------------- experiment loop


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    adversarial: list[int]
    client_losses: dict[int, float]
    reports: list = field(default_factory=list)  # list[eval.EvalReport]

    @property
    def global_accuracy(self) -> float | None:
        return self.reports[0].clean_accuracy if self.reports else None

    def robust(self, attack: str, test_set: str | None = None, mode: str | None = None) -> float | None:
        for r in self.reports:
            if (test_set is None or r.test_set == test_set) and (mode is None or r.mode == mode):
                return r.robust.get(attack)
        return None


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    params: nn.ParameterSet
    initial_params: nn.ParameterSet
    fixed_adversaries: list[int] | None = None


class ExperimentError(FlatsError):
    def __init__(self, round_index: int, stage: str, cause: Exception):
        self.round = round_index
        self.stage = stage
        super().__init__(f"round {round_index}, {stage}: {cause}")


def run_experiment(config: FedConfig, dataset: LabeledDataset, partition: PartitionPlan,
                   arch: nn.Architecture, evaluate: Callable | None = None,
                   initial_params: nn.ParameterSet | None = None,
                   checkpoint_dir: str | Path | None = None) -> ExperimentResult:
    """Run ``config.rounds`` rounds of FLATS training.

    ``evaluate(model, round_index, rng)`` returns the evaluation reports stored
    in each round's record (see :class:`flats.evaluation.EvalPlan`).
    """
    if partition.n_clients != config.clients:
        raise ConfigError(f"partition has {partition.n_clients} clients, config says {config.clients}", key="clients")
    clients = client_datasets(dataset, partition)
    if initial_params is None:
        initial_params = nn.init_params(arch, int(derive_rng(config.seed, _INIT).integers(2**31)))
    params = initial_params

    select_rng = derive_rng(config.seed, _SELECT)
    fixed = None
    if config.method is ScheduleMethod.METHOD2:
        fixed = plan_adversaries_method2(derive_rng(config.seed, _FIXED_ADV), config.clients, config.adv_clients)

    records = []
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            stage = "scheduling"
            try:
                selected = select_round_clients(select_rng, config.clients, config.select)
                if fixed is None:
                    adversarial = plan_adversaries_method1(select_rng, selected, config.adv_clients)
                else:
                    adversarial = [c for c in selected if c in fixed]

                stage = "local training"

                def work(cid, r=r, adversarial=adversarial, params=params):
                    rng = derive_rng(config.seed, _CLIENT, r, cid)
                    if cid in adversarial:
                        return adv_local_update(params, arch, clients[cid], config.local_epochs, config.lr,
                                                config.train_batch, config.abr, config.attack,
                                                config.loss_mix, rng)
                    return local_update(params, arch, clients[cid], config.local_epochs, config.lr,
                                        config.train_batch, rng)

                updates = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
                stage = "aggregation"
                params = fedavg(updates)
                record = RoundRecord(r, selected, adversarial,
                                     {c: (u.epoch_losses[-1] if u.epoch_losses else float("nan"))
                                      for c, u in zip(selected, updates)})
                if checkpoint_dir is not None:
                    stage = "checkpoint"
                    nn.save_checkpoint(params, Path(checkpoint_dir) / f"round_{r:03d}.ckpt")
                if evaluate is not None:
                    stage = "evaluation"
                    record.reports = evaluate(nn.Model(arch, params), r, derive_rng(config.seed, _EVAL, r))
            except FlatsError as exc:
                raise ExperimentError(r, stage, exc) from exc
            records.append(record)
            log.info("round %d: selected=%s adversarial=%s global_acc=%s", r, selected, adversarial,
                     record.global_accuracy)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(records, params, initial_params, fixed)
