"""``antidote`` command line: train, eval, flops, sweep, compare.

Exit codes: 0 ok, 2 usage/config error, 3 missing artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attention import MaskCriterion, RatioError
from .data import AugmentConfig, load_cifar10_split, synth_split
from .flops import dynamic_flops, mask_dynamic_flops, measured_macs, model_dense_flops
from .model import Model, SpecError, atomic_write_text, build_model, load_spec
from .ttd import (
    NumericError,
    PruneConfig,
    accuracy,
    apply_prune_ratios,
    compare_criteria,
    comparison_to_csv,
    curves_to_csv,
    disable_pruning,
    evaluate_pruned,
    sensitivity_sweep,
    ttd_train,
)

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("train", "eval", "flops", "sweep", "compare")



class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


@dataclass
class ExperimentConfig:
    command: str = ""
    model: Optional[str] = None
    data: str = "synthetic"
    data_seed: int = 0
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 0
    out: str = "runs"
    checkpoint: Optional[str] = None
    ratios_ch: Optional[list] = None
    ratios_sp: Optional[list] = None
    criterion: str = "attention"
    epochs: int = 16
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    augment: bool = False
    warmup_ratio: float = 0.1
    ascent_step: float = 0.05
    convergence_window: int = 3
    convergence_eps: float = 1e-3
    min_accuracy: Optional[float] = None
    grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    block: Optional[int] = None
    random_seeds: int = 5
    meter_samples: int = 100


_KEYS = {f.name for f in fields(ExperimentConfig)}


def _ratio_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def read_config_file(path) -> dict:
    """Flatten a TOML file (top level and any sections) into config keys."""
    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingArtifact(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: {e}") from None
    flat = {}
    for key, value in raw.items():
        items = value.items() if isinstance(value, dict) else [(key, value)]
        for k, v in items:
            k = k.replace("-", "_")
            if k not in _KEYS or k == "command":
                raise UsageError(f"{path}: unknown config key {k!r}")
            flat[k] = v
    return flat


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="antidote",
                                description="Attention-based dynamic feature-map pruning toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML config file; flags override it")
    p.add_argument("--model", help="built-in name (toy-vgg, vgg16-cifar, resnet56-cifar, "
                                    "vgg16-imagenet) or JSON spec path")
    p.add_argument("--data", help="'synthetic' or a cifar-10-batches-bin directory")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")
    p.add_argument("--ratios-ch", type=_ratio_list, help="per-block channel PRUNE ratios")
    p.add_argument("--ratios-sp", type=_ratio_list, help="per-block spatial PRUNE ratios")
    p.add_argument("--criterion", choices=("attention", "random", "inverse"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--ascent-step", type=float)
    p.add_argument("--convergence-window", type=int)
    p.add_argument("--convergence-eps", type=float)
    p.add_argument("--min-accuracy", type=float)
    p.add_argument("--grid", type=_ratio_list, help="prune ratios for sweep/compare")
    p.add_argument("--block", type=int, help="block for compare (default: last)")
    p.add_argument("--random-seeds", type=int)
    p.add_argument("--meter-samples", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in _KEYS and value is not None:
            values[key] = value
    if "ratios_ch" in values:
        values["ratios_ch"] = _ratio_list(values["ratios_ch"])
    if "ratios_sp" in values:
        values["ratios_sp"] = _ratio_list(values["ratios_sp"])
    if "grid" in values:
        values["grid"] = _ratio_list(values["grid"])
    return ExperimentConfig(**values)


def _write(path: Path, text: str) -> None:
    atomic_write_text(path, text)
    print(f"wrote {path}")


def _load_data(cfg: ExperimentConfig):
    if cfg.data == "synthetic":
        return synth_split(cfg.n_train, cfg.n_test, seed=cfg.data_seed)
    try:
        return load_cifar10_split(cfg.data, cfg.n_train, cfg.n_test)
    except FileNotFoundError as e:
        raise MissingArtifact(str(e)) from None


def _ratios(cfg: ExperimentConfig, blocks: int) -> tuple:
    ch = cfg.ratios_ch if cfg.ratios_ch is not None else [0.0] * blocks
    sp = cfg.ratios_sp if cfg.ratios_sp is not None else [0.0] * blocks
    if len(ch) != blocks or len(sp) != blocks:
        raise UsageError(f"model has {blocks} blocks; --ratios-ch has {len(ch)} and "
                         f"--ratios-sp has {len(sp)} entries")
    return ch, sp


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint"


def _load_checkpoint(cfg: ExperimentConfig) -> Model:
    path = _checkpoint_dir(cfg)
    if not (path / "manifest.json").is_file() or not (path / "weights.bin").is_file():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return Model.load(path)


def cmd_train(cfg: ExperimentConfig) -> int:
    spec = load_spec(cfg.model)
    model = build_model(spec, seed=cfg.seed)
    ch, sp = _ratios(cfg, model.block_count)
    prune = PruneConfig(ch, sp, cfg.warmup_ratio, cfg.ascent_step, cfg.convergence_window,
                        cfg.convergence_eps, cfg.min_accuracy)
    train, test = _load_data(cfg)
    run = ttd_train(model, train, prune, epochs=cfg.epochs, batch_size=cfg.batch_size,
                    lr0=cfg.lr, momentum=cfg.momentum, seed=cfg.seed,
                    augment_config=AugmentConfig(enabled=cfg.augment))
    out = Path(cfg.out)
    model.save(_checkpoint_dir(cfg))
    _write(out / "history.csv", run.to_csv())
    train_acc = evaluate_pruned(model, train, ch, sp)
    test_acc = evaluate_pruned(model, test, ch, sp)
    summary = {"epochs_run": len(run.history), "train_acc": train_acc, "test_acc": test_acc,
               "test_acc_unpruned": evaluate_pruned(model, test, [0.0] * len(ch), [0.0] * len(sp)),
               "ratios_ch": ch, "ratios_sp": sp}
    _write(out / "train.json", json.dumps(summary, indent=2) + "\n")
    print(f"final train accuracy {train_acc:.4f}  test accuracy {test_acc:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    model = _load_checkpoint(cfg)
    ch, sp = _ratios(cfg, model.block_count)
    _, test = _load_data(cfg)
    crit = MaskCriterion.parse(cfg.criterion, cfg.seed)
    unpruned = accuracy(model, test)
    pruned = evaluate_pruned(model, test, ch, sp, crit)
    batch = test.images[:cfg.meter_samples]
    apply_prune_ratios(model, ch, sp, crit)
    measured = measured_macs(model, batch)
    analytical = mask_dynamic_flops(model, len(batch))
    disable_pruning(model)
    ratio_model = dynamic_flops(model.spec, ch, sp)
    result = {
        "unpruned_acc": unpruned,
        "pruned_acc": pruned,
        "meter_samples": len(batch),
        "measured_macs": measured,
        "analytical_macs": analytical,
        "measured_total": sum(measured.values()),
        "analytical_total": sum(analytical.values()),
        "dense_total": model_dense_flops(model.spec).dense_total * len(batch),
        "ratio_model_reduction_pct": ratio_model.reduction_pct,
    }
    _write(Path(cfg.out) / "eval.json", json.dumps(result, indent=2) + "\n")
    print(f"unpruned accuracy {unpruned:.4f}  pruned accuracy {pruned:.4f}")
    print(f"MACs over {len(batch)} samples: measured {result['measured_total']}  "
          f"analytical {result['analytical_total']}  dense {result['dense_total']}")
    return EXIT_OK


def cmd_flops(cfg: ExperimentConfig) -> int:
    spec = load_spec(cfg.model)
    ch, sp = _ratios(cfg, len(spec.blocks))
    report = dynamic_flops(spec, ch, sp)
    out = Path(cfg.out)
    _write(out / "flops.csv", report.to_csv())
    _write(out / "flops.json", report.to_json())
    print(f"{spec.name}: dense {report.dense_total:.3e}  dynamic {report.dynamic_total:.3e}  "
          f"reduction {report.reduction_pct:.1f}%  (channel {report.channel_attrib_pct:.1f}%, "
          f"spatial {report.spatial_attrib_pct:.1f}%)")
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig) -> int:
    model = _load_checkpoint(cfg)
    _, test = _load_data(cfg)
    crit = MaskCriterion.parse(cfg.criterion, cfg.seed)
    curves = [sensitivity_sweep(model, test, b, cfg.grid, crit) for b in range(model.block_count)]
    _write(Path(cfg.out) / "sweep.csv", curves_to_csv(curves))
    for c in curves:
        print(f"block {c.block}: " + "  ".join(f"{r:g}->{a:.3f}" for r, a in c.points))
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    model = _load_checkpoint(cfg)
    _, test = _load_data(cfg)
    block = model.block_count - 1 if cfg.block is None else cfg.block
    seeds = [cfg.seed + i for i in range(cfg.random_seeds)]
    result = compare_criteria(model, test, block, cfg.grid, seeds)
    _write(Path(cfg.out) / "compare.csv", comparison_to_csv(result))
    for i, r in enumerate(cfg.grid):
        print(f"ratio {r:g}: attention {result['attention'].points[i][1]:.3f}  "
              f"random {result['random'].points[i][1]:.3f}  "
              f"inverse {result['inverse'].points[i][1]:.3f}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "flops": cmd_flops,
            "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.command = args.command
        if cfg.model is None and cfg.command in ("train", "flops"):
            raise UsageError("--model is required")
        return HANDLERS[cfg.command](cfg)
    except (UsageError, RatioError, SpecError, argparse.ArgumentTypeError, TypeError) as e:
        print(f"antidote {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"antidote {args.command}: error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"antidote {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"antidote {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
