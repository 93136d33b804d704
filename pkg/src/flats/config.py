"""Experiment configuration: ``key=value`` files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

from . import nn
from .attacks import AttackConfig, AttackKind
from .data import DARK_BR, BRIGHT_BR, DEFAULT_OCCLUSION_FRACTION, ManipulationKind, ManipulationSpec, TestDataType
from .errors import ConfigError
from .evaluation import EvalMode
from .federated import FedConfig, ScheduleMethod


@dataclass
class ExperimentConfig:
    # federated schedule
    rounds: int = 10
    clients: int = 5
    select: int = 4
    adv_clients: int = 0
    abr: float = 0.5
    epochs: int = 5
    train_batch: int = 64
    eval_batch: int = 32
    lr: float = 0.05
    method: str = "method1"
    loss_mix: float = 0.5
    seed: int = 0
    threads: int = 1
    # training attack
    attack: str = "ffgsm"
    epsilon: float = 8 / 255
    step_size: float = 10 / 255
    n_queries: int = 2000
    n_restarts: int = 1
    square_loss: str = "ce"
    # dataset
    dataset: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    data_seed: int = 7
    synth_classes: int = 10
    synth_per_class: int = 200
    synth_test_per_class: int = 50
    synth_channels: int = 1
    synth_size: int = 32
    # model
    arch: str = "cnn"
    conv_channels: list = dataclasses.field(default_factory=lambda: ["8", "16"])
    hidden: int = 64
    # partition and manipulation
    partition: str = "iid"
    label_concentration: float = 0.5
    size_spread: float = 0.5
    manip_clients: int = 0
    manip_kind: str = "none"
    manip_br: float = DARK_BR
    manip_factor: int = 2
    manip_fraction: float = DEFAULT_OCCLUSION_FRACTION
    # evaluation
    test_sets: list = dataclasses.field(default_factory=lambda: ["clean"])
    br_dark: float = DARK_BR
    br_bright: float = BRIGHT_BR
    eval_modes: list = dataclasses.field(default_factory=lambda: ["white-box"])
    eval_attacks: list = dataclasses.field(default_factory=lambda: ["fgsm", "ffgsm", "square"])
    eval_epsilon: float | None = None
    eval_step_size: float | None = None
    eval_cap: int = 0
    square_cap: int = 256
    robust_every: int = 1
    square_every: int = 5
    surrogate_arch: str = "mlp"
    surrogate_epochs: int = 5
    surrogate_seed: int = 1234
    # outputs
    checkpoints: bool = False
    plots: bool = False
    dump_samples: int = 0
    out: str = "runs/latest"

    # ------------------------------------------------------------ derived objects

    def validate(self) -> "ExperimentConfig":
        """Check every field and cross-field constraint; report all problems at once."""
        problems: list[tuple[str, str]] = []

        def need(cond, key, msg):
            if not cond:
                problems.append((key, msg))

        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.clients >= 1, "clients", "must be >= 1")
        need(1 <= self.select <= self.clients, "select", f"must lie in [1, clients={self.clients}]")
        need(self.method in ("method1", "method2"), "method", "must be method1 or method2")
        limit = self.select if self.method == "method1" else self.clients
        need(0 <= self.adv_clients <= limit, "adv_clients", f"must lie in [0, {limit}] for {self.method}")
        need(0.0 <= self.abr <= 1.0, "abr", "must lie in [0, 1]")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.train_batch >= 1, "train_batch", "must be >= 1")
        need(self.eval_batch >= 1, "eval_batch", "must be >= 1")
        need(self.lr >= 0, "lr", "must be >= 0")
        need(0.0 <= self.loss_mix <= 1.0, "loss_mix", "must lie in [0, 1]")
        need(self.threads >= 1, "threads", "must be >= 1")
        need(self.attack in [k.value for k in AttackKind], "attack", "must be fgsm, ffgsm or square")
        need(0.0 <= self.epsilon <= 1.0, "epsilon", "must lie in [0, 1]")
        need(self.step_size >= 0, "step_size", "must be >= 0")
        need(self.n_queries >= 1, "n_queries", "must be >= 1")
        need(self.n_restarts >= 1, "n_restarts", "must be >= 1")
        need(self.square_loss in ("ce", "margin"), "square_loss", "must be ce or margin")
        need(self.dataset in ("synthetic", "idx"), "dataset", "must be synthetic or idx")
        if self.dataset == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                need(bool(getattr(self, key)), key, "required when dataset=idx")
        else:
            for key in ("synth_classes", "synth_per_class", "synth_test_per_class", "synth_channels", "synth_size"):
                need(getattr(self, key) >= 1, key, "must be >= 1")
        need(self.arch in ("cnn", "mlp"), "arch", "must be cnn or mlp")
        need(self.surrogate_arch in ("cnn", "mlp"), "surrogate_arch", "must be cnn or mlp")
        try:
            need(all(int(c) >= 1 for c in self.conv_channels) and self.conv_channels, "conv_channels",
                 "must be positive integers")
        except ValueError:
            need(False, "conv_channels", "must be positive integers")
        need(self.hidden >= 1, "hidden", "must be >= 1")
        need(self.partition in ("iid", "noniid"), "partition", "must be iid or noniid")
        need(self.label_concentration > 0, "label_concentration", "must be > 0")
        need(self.size_spread > 0, "size_spread", "must be > 0")
        need(self.manip_kind in ("none", *(k.value for k in ManipulationKind)), "manip_kind",
             "must be none, brightness, degrade or occlude")
        need(0 <= self.manip_clients <= self.clients, "manip_clients", f"must lie in [0, clients={self.clients}]")
        need(self.manip_br > 0, "manip_br", "must be > 0")
        need(self.manip_factor >= 2, "manip_factor", "must be an integer >= 2")
        need(0.0 < self.manip_fraction < 1.0, "manip_fraction", "must lie in (0, 1)")
        tdt_values = [t.value for t in TestDataType]
        need(self.test_sets and all(t in tdt_values for t in self.test_sets), "test_sets",
             f"entries must be among {','.join(tdt_values)}")
        need(self.br_dark > 0, "br_dark", "must be > 0")
        need(self.br_bright > 0, "br_bright", "must be > 0")
        mode_values = [m.value for m in EvalMode]
        need(self.eval_modes and all(m in mode_values for m in self.eval_modes), "eval_modes",
             f"entries must be among {','.join(mode_values)}")
        need(all(a in [k.value for k in AttackKind] for a in self.eval_attacks), "eval_attacks",
             "entries must be among fgsm,ffgsm,square")
        need(self.eval_epsilon is None or 0.0 <= self.eval_epsilon <= 1.0, "eval_epsilon", "must lie in [0, 1]")
        need(self.eval_step_size is None or self.eval_step_size >= 0, "eval_step_size", "must be >= 0")
        need(self.eval_cap >= 0, "eval_cap", "must be >= 0 (0 = whole test set)")
        need(self.square_cap >= 0, "square_cap", "must be >= 0 (0 = no cap)")
        need(self.robust_every >= 1, "robust_every", "must be >= 1")
        need(self.square_every >= 1, "square_every", "must be >= 1")
        need(self.surrogate_epochs >= 0, "surrogate_epochs", "must be >= 0")
        need(self.dump_samples >= 0, "dump_samples", "must be >= 0")
        if problems:
            detail = "; ".join(f"{k}: {m}" for k, m in problems)
            raise ConfigError(detail, key=problems[0][0])
        return self

    def training_attack(self) -> AttackConfig:
        return AttackConfig(self.attack, self.epsilon, self.step_size, self.n_queries, self.n_restarts,
                            self.square_loss)

    def eval_attack_configs(self) -> list[AttackConfig]:
        eps = self.epsilon if self.eval_epsilon is None else self.eval_epsilon
        step = self.step_size if self.eval_step_size is None else self.eval_step_size
        return [AttackConfig(a, eps, step, self.n_queries, self.n_restarts, self.square_loss)
                for a in self.eval_attacks]

    def fed_config(self) -> FedConfig:
        return FedConfig(
            rounds=self.rounds, clients=self.clients, select=self.select, adv_clients=self.adv_clients,
            abr=self.abr, local_epochs=self.epochs, train_batch=self.train_batch, eval_batch=self.eval_batch,
            lr=self.lr, method=ScheduleMethod(self.method), attack=self.training_attack(),
            loss_mix=self.loss_mix, seed=self.seed, threads=self.threads,
        )

    def manipulation(self) -> ManipulationSpec | None:
        if self.manip_kind == "none":
            return None
        value = {"brightness": self.manip_br, "degrade": self.manip_factor, "occlude": self.manip_fraction}
        return ManipulationSpec(ManipulationKind(self.manip_kind), value[self.manip_kind])

    def architecture(self, input_shape, n_classes, kind: str | None = None) -> nn.Architecture:
        kind = kind or self.arch
        if kind == "mlp":
            return nn.mlp(input_shape, n_classes, (self.hidden * 2,))
        return nn.small_cnn(input_shape, n_classes, tuple(int(c) for c in self.conv_channels), self.hidden)

    # ------------------------------------------------------------ serialization

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


KEYS = tuple(f.name for f in fields(ExperimentConfig))
_TYPES = typing.get_type_hints(ExperimentConfig)


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(map(str, v))
    return str(v)


def _parse_float(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def coerce(key: str, text: str):
    """Convert the textual value of ``key`` to the field's type."""
    if key not in _TYPES:
        raise ConfigError(f"unknown configuration key {key!r}", key=key)
    tp = _TYPES[key]
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return _parse_float(text)
        if tp == float | None:
            return None if text == "" else _parse_float(text)
        if tp is list:
            return [t.strip() for t in text.split(",") if t.strip()]
        return text
    except (ValueError, ZeroDivisionError):
        name = getattr(tp, "__name__", str(tp))
        raise ConfigError(f"cannot parse {text!r} as {name}", key=key) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(" #", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides`` (already typed or textual); validated."""
    values: dict[str, object] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    for key, v in (overrides or {}).items():
        values[key] = coerce(key, v) if isinstance(v, str) else v
    unknown = [k for k in values if k not in KEYS]
    if unknown:
        raise ConfigError(f"unknown configuration key {unknown[0]!r}", key=unknown[0])
    return ExperimentConfig(**values).validate()
