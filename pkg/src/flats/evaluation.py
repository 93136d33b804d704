"""Clean and robust accuracy measurement, surrogate training, and round logs."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attacks import AttackConfig, AttackKind, perturb_batch
from .data import LabeledDataset
from .errors import InputError


class EvalMode(str, enum.Enum):
    WHITEBOX = "white-box"
    SURROGATE = "surrogate"


ATTACK_COLUMNS = ("fgsm", "ffgsm", "square")
CSV_HEADER = ["round", "selected", "adv_clients", "global_acc",
              "robust_fgsm", "robust_ffgsm", "robust_square", "test_set", "mode"]


@dataclass(frozen=True)
class EvalReport:
    test_set: str
    clean_accuracy: float
    robust: dict[str, float | None]
    mode: str = EvalMode.WHITEBOX.value


def _check_dataset(model: nn.Model, dataset: LabeledDataset):
    if dataset.n_classes != model.n_classes:
        raise InputError(f"dataset has {dataset.n_classes} classes, model has {model.n_classes}")
    if dataset.image_shape != model.input_shape:
        raise InputError(f"dataset images {dataset.image_shape} do not fit model input {model.input_shape}")


def accuracy(model: nn.Model, dataset: LabeledDataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    _check_dataset(model, dataset)
    return float(np.mean(nn.predict(model, dataset.images, batch_size) == dataset.labels))


def robust_accuracy(model: nn.Model, dataset: LabeledDataset, attack: AttackConfig,
                    surrogate: nn.Model | None = None, rng: np.random.Generator | None = None,
                    cap: int | None = None, batch_size: int = 32) -> float:
    """Accuracy of ``model`` on ``dataset`` after perturbing every sample.

    Gradients (or queries, for Square) come from ``surrogate`` if given, else
    from ``model`` itself. ``cap`` evaluates a seeded random subset of that size.
    """
    _check_dataset(model, dataset)
    if surrogate is not None:
        _check_dataset(surrogate, dataset)
    rng = rng if rng is not None else np.random.default_rng(0)
    if cap is not None and cap < len(dataset):
        dataset = dataset.subset(np.sort(rng.choice(len(dataset), size=cap, replace=False)))
    source = surrogate if surrogate is not None else model
    if attack.kind is AttackKind.SQUARE:
        # lockstep over the whole set: one batched query per step
        x_adv = perturb_batch(attack, source, dataset.images, dataset.labels, rng)
    else:
        x_adv = np.concatenate([
            perturb_batch(attack, source, dataset.images[s:s + batch_size], dataset.labels[s:s + batch_size], rng)
            for s in range(0, len(dataset), batch_size)
        ])
    return float(np.mean(nn.predict(model, x_adv) == dataset.labels))


def train_surrogate(dataset: LabeledDataset, arch: nn.Architecture, seed: int, epochs: int = 5,
                    lr: float = 0.05, batch_size: int = 64) -> nn.Model:
    """Centrally trained stand-in model used for transfer attacks."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(arch, int(rng.integers(2**31)))
    n = len(dataset)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            _, grads, _ = nn.loss_and_grads(nn.Model(arch, params), dataset.images[idx], dataset.labels[idx],
                                            need_input_grad=False)
            params = nn.sgd_step(params, grads, lr)
    return nn.Model(arch, params)


@dataclass
class EvalPlan:
    """What to measure after each round.

    ``robust_every`` and ``square_every`` space out the gradient attacks and
    Square Attack (the final round always gets both); ``square_cap`` bounds the
    samples Square Attack runs on.
    """

    test_sets: dict[str, LabeledDataset]
    attacks: Sequence[AttackConfig] = field(default_factory=list)
    modes: Sequence[EvalMode] = (EvalMode.WHITEBOX,)
    surrogate: nn.Model | None = None
    batch_size: int = 32
    cap: int | None = None
    square_cap: int | None = 256
    robust_every: int = 1
    square_every: int = 1
    total_rounds: int | None = None

    def _due(self, attack: AttackConfig, round_index: int) -> bool:
        if self.total_rounds is not None and round_index == self.total_rounds:
            return True
        every = self.square_every if attack.kind is AttackKind.SQUARE else self.robust_every
        return round_index % max(1, every) == 0

    def evaluate(self, model: nn.Model, round_index: int, rng: np.random.Generator) -> list[EvalReport]:
        due = [a for a in self.attacks if self._due(a, round_index)]
        reports = []
        for name, ds in self.test_sets.items():
            clean = accuracy(model, ds, batch_size=max(self.batch_size, 256))
            for mode in self.modes:
                mode = EvalMode(mode)
                robust: dict[str, float | None] = {a: None for a in ATTACK_COLUMNS}
                if due:
                    surrogate = self.surrogate if mode is EvalMode.SURROGATE else None
                    if mode is EvalMode.SURROGATE and surrogate is None:
                        raise InputError("surrogate evaluation requested without a surrogate model")
                    for attack in due:
                        cap = self.cap
                        if attack.kind is AttackKind.SQUARE and self.square_cap is not None:
                            cap = self.square_cap if cap is None else min(cap, self.square_cap)
                        robust[attack.name] = robust_accuracy(model, ds, attack, surrogate, rng, cap, self.batch_size)
                reports.append(EvalReport(name, clean, robust, mode.value))
        return reports

    __call__ = evaluate


# ---------------------------------------------------------------- round logs


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def round_rows(records) -> list[list[str]]:
    rows = []
    for rec in records:
        for rep in rec.reports:
            rows.append([
                str(rec.round),
                ";".join(map(str, rec.selected)),
                ";".join(map(str, rec.adversarial)),
                _fmt(rep.clean_accuracy),
                *(_fmt(rep.robust.get(a)) for a in ATTACK_COLUMNS),
                rep.test_set,
                rep.mode,
            ])
    return rows


def write_round_csv(records, path) -> None:
    """One row per (round, test set, mode); accuracies with 4 decimals, id lists joined by ';'."""
    records = list(records)
    if not records:
        raise InputError("no round records to write")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(round_rows(records))


def read_round_csv(path) -> list[dict]:
    """Parse a rounds.csv back into typed dicts."""

    def ids(s):
        return [int(t) for t in s.split(";")] if s else []

    def num(s):
        return float(s) if s else None

    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append({
                "round": int(row["round"]),
                "selected": ids(row["selected"]),
                "adv_clients": ids(row["adv_clients"]),
                "global_acc": num(row["global_acc"]),
                **{f"robust_{a}": num(row[f"robust_{a}"]) for a in ATTACK_COLUMNS},
                "test_set": row["test_set"],
                "mode": row["mode"],
            })
    return out


def write_plot_files(records, out_dir) -> list[Path]:
    """Two-column ``round value`` files (gnuplot style), one per metric, test set and mode."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict[str, list[tuple[int, float]]] = {}
    for rec in records:
        for rep in rec.reports:
            stem = f"{rep.test_set}_{rep.mode}"
            series.setdefault(f"global_acc_{stem}", []).append((rec.round, rep.clean_accuracy))
            for a in ATTACK_COLUMNS:
                v = rep.robust.get(a)
                if v is not None:
                    series.setdefault(f"robust_{a}_{stem}", []).append((rec.round, v))
    paths = []
    for name, points in series.items():
        p = out_dir / f"{name}.dat"
        with open(p, "w") as f:
            f.write(f"# round {name}\n")
            for r, v in points:
                f.write(f"{r} {v:.4f}\n")
        paths.append(p)
    return paths
