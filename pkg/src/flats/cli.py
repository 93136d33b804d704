"""Command-line entry point.

    flats run --config exp.cfg --out runs/a --seed 3
    flats attack-demo --config exp.cfg --out runs/a --index 0
    flats partition-inspect --config exp.cfg

Every configuration key is also accepted as ``--key value`` and wins over the
file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import nn
from .attacks import AttackConfig, PredictionOracle, perturb_batch, square_attack
from .config import KEYS, ExperimentConfig, load_config
from .errors import ConfigError, FlatsError
from .evaluation import CSV_HEADER, EvalMode, EvalPlan, train_surrogate, write_plot_files, write_round_csv
from .federated import ExperimentError, derive_rng, run_experiment

log = logging.getLogger("flats")


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")


class _Stage:
    """Context manager tagging any error with the pipeline stage it came from."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (FlatsError, OSError, ValueError)) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------- shared pipeline pieces


def load_datasets(cfg: ExperimentConfig) -> tuple[D.LabeledDataset, D.LabeledDataset]:
    if cfg.dataset == "idx":
        train = D.load_idx(cfg.train_images, cfg.train_labels)
        test = D.load_idx(cfg.test_images, cfg.test_labels, n_classes=train.n_classes)
        return train, test
    return D.synth_split(cfg.data_seed, cfg.synth_per_class, cfg.synth_test_per_class,
                         n_classes=cfg.synth_classes, channels=cfg.synth_channels,
                         height=cfg.synth_size, width=cfg.synth_size)


def build_partition(cfg: ExperimentConfig, train: D.LabeledDataset) -> D.PartitionPlan:
    if cfg.partition == "iid":
        plan = D.partition_iid(train, cfg.clients, cfg.seed)
    else:
        plan = D.partition_noniid(train, cfg.clients, cfg.seed, cfg.label_concentration, cfg.size_spread)
    return D.assign_manipulations(plan, cfg.manip_clients, cfg.manipulation(), cfg.seed + 1)


def build_test_sets(cfg: ExperimentConfig, test: D.LabeledDataset) -> dict[str, D.LabeledDataset]:
    return {t: D.build_test_set(test, D.TestDataType(t), cfg.br_dark, cfg.br_bright) for t in cfg.test_sets}


def _write_config(cfg: ExperimentConfig, out: Path):
    (out / "config.resolved").write_text(cfg.to_text())


def _summary(records) -> str:
    last = records[-1].reports[0] if records and records[-1].reports else None

    def fmt(v):
        return "na" if v is None else f"{v:.4f}"

    if last is None:
        return "global=na robust_fgsm=na robust_ffgsm=na robust_square=na"
    return (f"global={fmt(last.clean_accuracy)} robust_fgsm={fmt(last.robust.get('fgsm'))} "
            f"robust_ffgsm={fmt(last.robust.get('ffgsm'))} robust_square={fmt(last.robust.get('square'))}")


# ---------------------------------------------------------------- commands


def cmd_run(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    with _Stage("output"):
        out.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out)
    with _Stage("data"):
        train, test = load_datasets(cfg)
        plan = build_partition(cfg, train)
        test_sets = build_test_sets(cfg, test)
    with _Stage("model"):
        arch = cfg.architecture(train.image_shape, train.n_classes)
        surrogate = None
        if EvalMode.SURROGATE.value in cfg.eval_modes:
            surrogate = train_surrogate(train, cfg.architecture(train.image_shape, train.n_classes, cfg.surrogate_arch),
                                        cfg.surrogate_seed, cfg.surrogate_epochs, cfg.lr, cfg.train_batch)
    evaluator = EvalPlan(
        test_sets=test_sets,
        attacks=cfg.eval_attack_configs(),
        modes=[EvalMode(m) for m in cfg.eval_modes],
        surrogate=surrogate,
        batch_size=cfg.eval_batch,
        cap=cfg.eval_cap or None,
        square_cap=cfg.square_cap or None,
        robust_every=cfg.robust_every,
        square_every=cfg.square_every,
        total_rounds=cfg.rounds,
    )
    ckpt_dir = None
    if cfg.checkpoints:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
    try:
        result = run_experiment(cfg.fed_config(), train, plan, arch, evaluator, checkpoint_dir=ckpt_dir)
    except ExperimentError as exc:
        raise StageError(f"training (round {exc.round}, {exc.stage})", exc.__cause__ or exc) from exc
    with _Stage("outputs"):
        if result.records:
            write_round_csv(result.records, out / "rounds.csv")
        else:
            (out / "rounds.csv").write_text(",".join(CSV_HEADER) + "\n")
        nn.save_checkpoint(result.params, out / "final.ckpt")
        if cfg.plots and result.records:
            write_plot_files(result.records, out / "plots")
        if cfg.dump_samples:
            _dump_samples(cfg, nn.Model(arch, result.params), test, out / "samples")
    print(_summary(result.records))
    return 0


def _dump_samples(cfg, model, test, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    k = min(cfg.dump_samples, len(test))
    x, y = test.images[:k], test.labels[:k]
    rng = derive_rng(cfg.seed, 99)
    for i in range(k):
        D.write_ppm(out_dir / f"{i:04d}_clean.ppm", x[i])
    for attack in cfg.eval_attack_configs():
        adv = perturb_batch(attack, model, x, y, rng)
        for i in range(k):
            D.write_ppm(out_dir / f"{i:04d}_{attack.name}.ppm", adv[i])


def cmd_attack_demo(cfg: ExperimentConfig, index: int, checkpoint: str | None) -> int:
    out = Path(cfg.out)
    ckpt = Path(checkpoint) if checkpoint else out / "final.ckpt"
    with _Stage("data"):
        _, test = load_datasets(cfg)
        if not 0 <= index < len(test):
            raise ConfigError(f"sample index {index} outside [0, {len(test)})", key="index")
    with _Stage("checkpoint"):
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} not found; run `flats run` first or pass --checkpoint")
        params = nn.load_checkpoint(ckpt)
        model = nn.Model(cfg.architecture(test.image_shape, test.n_classes), params)
    x, y = test.images[index:index + 1], test.labels[index:index + 1]
    eps = cfg.epsilon if cfg.eval_epsilon is None else cfg.eval_epsilon
    step = cfg.step_size if cfg.eval_step_size is None else cfg.eval_step_size
    rng = derive_rng(cfg.seed, 98, index)
    with _Stage("attack"):
        advs = {
            "fgsm": perturb_batch(AttackConfig.fgsm(eps), model, x, y, rng),
            "ffgsm": perturb_batch(AttackConfig.ffgsm(eps, step), model, x, y, rng),
        }
        sq = AttackConfig.square(eps, cfg.n_queries, cfg.n_restarts, cfg.square_loss)
        res = square_attack(PredictionOracle(model), x[0], int(y[0]), sq, rng)
        advs["square"] = res.x_adv[None]
    clean_pred = int(nn.predict(model, x)[0])
    lines = [f"sample={index} label={int(y[0])} clean_pred={clean_pred} epsilon={eps:.6f}"]
    with _Stage("outputs"):
        demo_dir = out / f"attack_demo_{index}"
        demo_dir.mkdir(parents=True, exist_ok=True)
        D.write_ppm(demo_dir / "original.ppm", x[0])
        for name, adv in advs.items():
            D.write_ppm(demo_dir / f"{name}.ppm", adv[0])
            pred = int(nn.predict(model, adv)[0])
            dist = float(np.max(np.abs(adv - x)))
            extra = f" queries={res.queries_used}" if name == "square" else ""
            lines.append(f"{name}: linf={dist:.6f} pred={pred} flipped={'yes' if pred != clean_pred else 'no'}{extra}")
        (demo_dir / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_partition_inspect(cfg: ExperimentConfig) -> int:
    with _Stage("data"):
        train, _ = load_datasets(cfg)
        plan = build_partition(cfg, train)
    print(f"clients={plan.n_clients} samples={len(train)} partition={cfg.partition}")
    print("client,size," + ",".join(f"label{k}" for k in range(train.n_classes)) + ",manipulation")
    for cid in sorted(plan.assignments):
        hist = np.bincount(train.labels[plan.assignments[cid]], minlength=train.n_classes)
        spec = plan.manipulations.get(cid)
        print(f"{cid},{len(plan.assignments[cid])}," + ",".join(map(str, hist)) + f",{spec or 'none'}")
    return 0


# ---------------------------------------------------------------- argument parsing


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value configuration file")
    group = p.add_argument_group("configuration overrides")
    for key in KEYS:
        flag = "--" + key.replace("_", "-")
        aliases = [flag] if "_" not in key else [flag, "--" + key]
        group.add_argument(*aliases, dest=f"cfg_{key}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flats", description="Federated adversarial training simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per round")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a federated experiment")
    _add_config_flags(run)
    demo = sub.add_parser("attack-demo", help="dump clean and adversarial versions of one test sample")
    _add_config_flags(demo)
    demo.add_argument("--index", type=int, default=0, help="test sample index")
    demo.add_argument("--checkpoint", help="parameter checkpoint (default: OUT/final.ckpt)")
    part = sub.add_parser("partition-inspect", help="print per-client sizes and label histograms")
    _add_config_flags(part)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        try:
            cfg = load_config(args.config, overrides)
        except (ConfigError, OSError) as exc:
            raise StageError("configuration", exc) from exc
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "attack-demo":
            return cmd_attack_demo(cfg, args.index, args.checkpoint)
        return cmd_partition_inspect(cfg)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2 if exc.stage == "configuration" else 1


if __name__ == "__main__":
    sys.exit(main())
