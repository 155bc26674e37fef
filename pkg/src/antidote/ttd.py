"""Training with targeted dropout (TTD), ratio ascent and block sensitivity sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import ATTENTION, INVERSE, MaskCriterion, prune_to_keep, random_criterion
from .data import AugmentConfig, Dataset, augment
from .layers import CosineSchedule, cosine_lr, sgd_step
from .model import Model
from .tensor import make_rng

log = logging.getLogger(__name__)

# Column pruning is switched off on maps this small (h * w <= 16).
MIN_SPATIAL_PRUNE_AREA = 17


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def _r(x: float) -> float:
    return round(float(x), 9)


@dataclass
class PruneConfig:
    """Per-block target PRUNE ratios and the dropout-ratio ascent schedule."""

    channel_prune: list
    spatial_prune: list
    warmup_ratio: float = 0.1
    ascent_step: float = 0.05
    convergence_window: int = 3
    convergence_eps: float = 1e-3
    min_accuracy: Optional[float] = None  # "satisfying accuracy"; None means no accuracy gate

    def __post_init__(self):
        if len(self.channel_prune) != len(self.spatial_prune):
            raise ValueError("channel and spatial ratio lists differ in length")
        for r in list(self.channel_prune) + list(self.spatial_prune):
            prune_to_keep(r)
        if self.ascent_step <= 0 or self.convergence_window < 1:
            raise ValueError("ascent_step must be > 0 and convergence_window >= 1")

    @classmethod
    def zeros(cls, blocks: int, **kw) -> "PruneConfig":
        return cls([0.0] * blocks, [0.0] * blocks, **kw)

    @property
    def blocks(self) -> int:
        return len(self.channel_prune)

    def initial(self) -> tuple:
        start = lambda t: _r(min(self.warmup_ratio, t))  # noqa: E731
        return ([start(t) for t in self.channel_prune], [start(t) for t in self.spatial_prune])

    def ascend(self, current: tuple) -> tuple:
        """One ascent step for every block, clamped to its target."""
        ch, sp = current
        up = lambda c, t: _r(min(c + self.ascent_step, t))  # noqa: E731
        return ([up(c, t) for c, t in zip(ch, self.channel_prune)],
                [up(c, t) for c, t in zip(sp, self.spatial_prune)])

    def at_target(self, current: tuple) -> bool:
        ch, sp = current
        return (all(c >= _r(t) for c, t in zip(ch, self.channel_prune))
                and all(c >= _r(t) for c, t in zip(sp, self.spatial_prune)))


@dataclass
class SensitivityCurve:
    block: int
    points: list = field(default_factory=list)  # (prune_ratio, accuracy)
    label: str = "attention"

    @property
    def ratios(self) -> list:
        return [r for r, _ in self.points]

    @property
    def accuracies(self) -> list:
        return [a for _, a in self.points]


@dataclass
class TrainRun:
    seed: int
    epochs: int
    batch_size: int
    lr0: float
    history: list = field(default_factory=list)  # dicts, append-only

    def to_csv(self) -> str:
        if not self.history:
            return ""
        blocks = len(self.history[0]["ch"])
        header = (["epoch", "lr", "loss", "acc", "test_acc"]
                  + [f"ch{b}" for b in range(blocks)] + [f"sp{b}" for b in range(blocks)])
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for h in self.history:
            test = "" if h["test_acc"] is None else repr(h["test_acc"])
            wr.writerow([h["epoch"], repr(h["lr"]), repr(h["loss"]), repr(h["acc"]), test]
                        + [repr(x) for x in h["ch"]] + [repr(x) for x in h["sp"]])
        return buf.getvalue()


def apply_prune_ratios(model: Model, ch_prune: Sequence[float], sp_prune: Sequence[float],
                       criterion: MaskCriterion = ATTENTION) -> None:
    """Configure every dynprune layer from per-block PRUNE ratios.

    Spatial pruning is forced off on feature maps of 4x4 or smaller.
    """
    if len(ch_prune) != model.block_count or len(sp_prune) != model.block_count:
        raise ValueError(f"model has {model.block_count} blocks; got {len(ch_prune)} channel "
                         f"and {len(sp_prune)} spatial ratios")
    for b in range(model.block_count):
        p_ch = prune_to_keep(ch_prune[b])
        p_sp = prune_to_keep(sp_prune[b])
        for layer, (c, h, w) in zip(model.prune_layers(b), model.prune_layer_dims(b)):
            layer.p_ch = p_ch
            layer.p_sp = p_sp if h * w >= MIN_SPATIAL_PRUNE_AREA else 1.0
            layer.criterion = criterion
            layer.enabled = True
            layer.fixed_mask = None
            layer.reset_stream()


def disable_pruning(model: Model) -> None:
    for layer in model.prune_layers():
        layer.enabled = False


def accuracy(model: Model, data: Dataset, batch_size: int = 250) -> float:
    return float((model.predict(data.images, batch_size) == data.labels).mean())


def ttd_train(model: Model, data: Dataset, config: Optional[PruneConfig] = None, *,
              epochs: int = 10, batch_size: int = 64, lr0: float = 0.1, momentum: float = 0.0,
              seed: int = 0, augment_config: AugmentConfig = AugmentConfig(enabled=False),
              test_data: Optional[Dataset] = None) -> TrainRun:
    """Train ``model`` with attention-targeted dropout and ratio ascent.

    Ratios start at the warm-up value (capped at each block's target). Each
    time the training loss stalls over ``convergence_window`` epochs, every
    block ascends by ``ascent_step``. Once all blocks sit at their targets,
    the next stall (and, if set, ``min_accuracy`` on ``test_data``) ends the
    run; otherwise the epoch budget does. ``config=None`` is plain SGD.
    """
    if config is None:
        config = PruneConfig.zeros(model.block_count)
    if config.blocks != model.block_count:
        raise ValueError(f"config has {config.blocks} blocks, model has {model.block_count}")
    n = len(data)
    steps_per_epoch = math.ceil(n / batch_size)
    schedule = CosineSchedule(lr0, epochs * steps_per_epoch)
    run = TrainRun(seed, epochs, batch_size, lr0)
    current = config.initial()
    apply_prune_ratios(model, *current)
    velocity = None
    losses: list = []
    last_change = 0
    step = 0
    for epoch in range(epochs):
        order = make_rng(seed, 1, epoch).permutation(n)
        aug_rng = make_rng(seed, 2, epoch)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = augment(data.images[idx], augment_config, aug_rng)
            y = data.labels[idx]
            loss, logits = model.train_step(x, y)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            params, grads = model.params_and_grads()
            lr = cosine_lr(schedule, step)
            if momentum:
                if velocity is None:
                    velocity = [np.zeros_like(p) for p in params]
                for v, g in zip(velocity, grads):
                    v *= momentum
                    v += g
                grads = velocity
            sgd_step(params, grads, lr)
            step += 1
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        losses.append(total_loss / n)
        test_acc = accuracy(model, test_data) if test_data is not None else None
        run.history.append({"epoch": epoch, "lr": cosine_lr(schedule, step), "loss": losses[-1],
                            "acc": correct / n, "test_acc": test_acc,
                            "ch": list(current[0]), "sp": list(current[1])})
        log.info("epoch %d loss %.4f acc %.3f ratios %s", epoch, losses[-1], correct / n, current)
        if not _stalled(losses, last_change, config):
            continue
        if config.at_target(current):
            good = (config.min_accuracy is None or test_acc is None
                    or test_acc >= config.min_accuracy)
            if good:
                break
        else:
            current = config.ascend(current)
            apply_prune_ratios(model, *current)
            last_change = len(losses)
    return run


def _stalled(losses: list, last_change: int, config: PruneConfig) -> bool:
    """Loss fell by less than ``convergence_eps`` over the last ``convergence_window`` epochs.

    Only epochs trained at the current ratios count, so the reference epoch
    must itself come after the last ascent.
    """
    w = config.convergence_window
    if len(losses) - last_change < w + 1:
        return False
    return losses[-w - 1] - losses[-1] < config.convergence_eps


class _PruneState:
    """Snapshot/restore of every dynprune layer's settings."""

    def __init__(self, model: Model):
        self.saved = [(l, l.p_ch, l.p_sp, l.criterion, l.enabled, l.fixed_mask)
                      for l in model.prune_layers()]

    def restore(self):
        for l, p_ch, p_sp, crit, en, fm in self.saved:
            l.p_ch, l.p_sp, l.criterion, l.enabled, l.fixed_mask = p_ch, p_sp, crit, en, fm
            l.last_mask = None
            l.reset_stream()


def evaluate_pruned(model: Model, data: Dataset, ch_prune: Sequence[float],
                    sp_prune: Sequence[float], criterion: MaskCriterion = ATTENTION) -> float:
    """Test accuracy with dynamic pruning at the given PRUNE ratios; weights untouched."""
    state = _PruneState(model)
    try:
        apply_prune_ratios(model, ch_prune, sp_prune, criterion)
        return accuracy(model, data)
    finally:
        state.restore()


def _block_ratios(model: Model, block: int, ratio: float, axis: str) -> tuple:
    if not 0 <= block < model.block_count:
        raise IndexError(f"block {block} out of range for {model.block_count} blocks")
    ch = [0.0] * model.block_count
    sp = [0.0] * model.block_count
    (ch if axis == "channel" else sp)[block] = ratio
    return ch, sp


def sensitivity_sweep(model: Model, data: Dataset, block: int, ratio_grid: Sequence[float],
                      criterion: MaskCriterion = ATTENTION, axis: str = "channel") -> SensitivityCurve:
    """Accuracy with only ``block`` pruned, at each prune ratio in the grid."""
    grid = [float(r) for r in ratio_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("ratio grid must be strictly increasing")
    curve = SensitivityCurve(block, label=criterion.kind)
    for r in grid:
        ch, sp = _block_ratios(model, block, r, axis)
        curve.points.append((r, evaluate_pruned(model, data, ch, sp, criterion)))
    return curve


def compare_criteria(model: Model, data: Dataset, block: int, ratio_grid: Sequence[float],
                     seeds: Sequence[int] = (0, 1, 2, 3, 4), axis: str = "channel") -> dict:
    """Attention, random (mean over ``seeds``) and inverse-attention curves for one block.

    Returns ``{"attention", "random", "inverse"}`` curves plus ``"random_seeds"``,
    the list of per-seed random curves.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one random seed")
    att = sensitivity_sweep(model, data, block, ratio_grid, ATTENTION, axis)
    inv = sensitivity_sweep(model, data, block, ratio_grid, INVERSE, axis)
    per_seed = [sensitivity_sweep(model, data, block, ratio_grid, random_criterion(s), axis)
                for s in seeds]
    mean = SensitivityCurve(block, label="random")
    for i, r in enumerate(att.ratios):
        mean.points.append((r, float(np.mean([c.points[i][1] for c in per_seed]))))
    return {"attention": att, "random": mean, "inverse": inv, "random_seeds": per_seed}


def curves_to_csv(curves: Sequence[SensitivityCurve]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["block", "ratio", "acc"])
    for c in curves:
        for r, a in c.points:
            wr.writerow([c.block, repr(r), repr(a)])
    return buf.getvalue()


def comparison_to_csv(result: dict) -> str:
    seeds = result["random_seeds"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["block", "ratio", "attention"] + [f"random_s{i}" for i in range(len(seeds))]
                + ["random_mean", "inverse"])
    att = result["attention"]
    for i, (r, a) in enumerate(att.points):
        wr.writerow([att.block, repr(r), repr(a)] + [repr(c.points[i][1]) for c in seeds]
                    + [repr(result["random"].points[i][1]), repr(result["inverse"].points[i][1])])
    return buf.getvalue()
