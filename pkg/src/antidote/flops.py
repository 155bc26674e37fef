"""Dense and dynamic FLOPs accounting (1 FLOP = 1 multiply-accumulate).

A conv layer reading a pruned feature map costs its dense MACs scaled by the
kept channel fraction and the kept spatial-column fraction of that map.
Pooling, ReLU and the attention/top-k work are not counted in the totals;
the attention overhead is reported on its own line.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attention import prune_to_keep
from .model import Model, ModelSpec


@dataclass
class LayerFlops:
    name: str
    dense: int
    dynamic: float


@dataclass
class FlopsReport:
    model: str
    per_layer: list = field(default_factory=list)
    channel_attrib_pct: float = 0.0
    spatial_attrib_pct: float = 0.0
    attention_overhead: int = 0

    @property
    def dense_total(self) -> int:
        return sum(l.dense for l in self.per_layer)

    @property
    def dynamic_total(self) -> float:
        return sum(l.dynamic for l in self.per_layer)

    @property
    def reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.dynamic_total / self.dense_total)

    @property
    def interaction_pct(self) -> float:
        return self.reduction_pct - self.channel_attrib_pct - self.spatial_attrib_pct

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "dense", "dynamic"])
        for l in self.per_layer:
            wr.writerow([l.name, l.dense, _num(l.dynamic)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "per_layer": [asdict(l) for l in self.per_layer],
            "dense_total": self.dense_total,
            "dynamic_total": self.dynamic_total,
            "reduction_pct": self.reduction_pct,
            "channel_attrib_pct": self.channel_attrib_pct,
            "spatial_attrib_pct": self.spatial_attrib_pct,
            "interaction_pct": self.interaction_pct,
            "attention_overhead": self.attention_overhead,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _num(v: float):
    return int(v) if float(v).is_integer() else repr(float(v))


def dense_conv_flops(c_out: int, c_in: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * c_in * k * k * h_out * w_out


def _layer_costs(spec: ModelSpec) -> list:
    """(layer index, name, dense MACs) for every conv and dense layer."""
    dims = spec.validate()
    names = spec.layer_names()
    out = []
    for i, ls in enumerate(spec.layers):
        c_in = spec.input_dims if i == 0 else dims[i - 1]
        if ls.kind == "conv":
            c, h, w = dims[i]
            out.append((i, names[i], dense_conv_flops(c, c_in[0], ls.k, h, w)))
        elif ls.kind == "dense":
            out.append((i, names[i], int(np.prod(c_in)) * ls.out))
    return out


def _feeding_prune(spec: ModelSpec, i: int) -> Optional[int]:
    """Index of the dynprune layer whose mask reaches layer ``i``'s input, if any."""
    for j in range(i - 1, -1, -1):
        kind = spec.layers[j].kind
        if kind == "dynprune":
            return j
        if kind in ("conv", "dense", "globalavgpool"):
            return None
    return None


def model_dense_flops(spec: ModelSpec) -> FlopsReport:
    return FlopsReport(spec.name, [LayerFlops(n, d, d) for _, n, d in _layer_costs(spec)])


def _keep_lists(spec: ModelSpec, ch_prune, sp_prune):
    nb = len(spec.blocks)
    ch_prune = [0.0] * nb if ch_prune is None else list(ch_prune)
    sp_prune = [0.0] * nb if sp_prune is None else list(sp_prune)
    if len(ch_prune) != nb or len(sp_prune) != nb:
        raise ValueError(f"{spec.name} has {nb} blocks; got {len(ch_prune)} channel and "
                         f"{len(sp_prune)} spatial ratios")
    return [prune_to_keep(r) for r in ch_prune], [prune_to_keep(r) for r in sp_prune]


def _dynamic_layers(spec: ModelSpec, ch_keep, sp_keep) -> list:
    layers = []
    for i, name, dense in _layer_costs(spec):
        scale = 1.0
        src = _feeding_prune(spec, i) if spec.layers[i].kind == "conv" else None
        if src is not None:
            b = spec.block_of(src)
            if b is not None:
                scale = ch_keep[b] * sp_keep[b]
        layers.append(LayerFlops(name, dense, dense * scale))
    return layers


def _attention_overhead(spec: ModelSpec, ch_keep, sp_keep) -> int:
    """Additions spent on the pooled attention statistics of active dynprune layers."""
    dims = spec.validate()
    total = 0
    for i, ls in enumerate(spec.layers):
        b = spec.block_of(i)
        if ls.kind != "dynprune" or b is None:
            continue
        c, h, w = dims[i]
        total += (ch_keep[b] < 1.0) * c * h * w + (sp_keep[b] < 1.0) * c * h * w
    return int(total)


def dynamic_flops(spec: ModelSpec, ch_prune=None, sp_prune=None) -> FlopsReport:
    """Analytical FLOPs with per-block channel/spatial PRUNE ratios.

    Attribution: the channel share is the reduction with spatial pruning
    switched off, the spatial share the reduction with channel pruning
    switched off; whatever remains of the total is the interaction term.
    """
    ch_keep, sp_keep = _keep_lists(spec, ch_prune, sp_prune)
    ones = [1.0] * len(ch_keep)
    report = FlopsReport(spec.name, _dynamic_layers(spec, ch_keep, sp_keep))
    dense = report.dense_total
    ch_only = sum(l.dynamic for l in _dynamic_layers(spec, ch_keep, ones))
    sp_only = sum(l.dynamic for l in _dynamic_layers(spec, ones, sp_keep))
    report.channel_attrib_pct = 100.0 * (1.0 - ch_only / dense)
    report.spatial_attrib_pct = 100.0 * (1.0 - sp_only / dense)
    report.attention_overhead = _attention_overhead(spec, ch_keep, sp_keep)
    return report


def redundancy_split(report: FlopsReport) -> tuple:
    return report.channel_attrib_pct, report.spatial_attrib_pct


def measured_macs(model: Model, batch: np.ndarray) -> dict:
    """Per-layer MACs actually executed by the skip-aware kernels on ``batch``."""
    counts: dict = {}
    model.forward(batch, macs=counts)
    return counts


def mask_dynamic_flops(model: Model, n: int) -> dict:
    """Analytical per-layer MACs for the masks cached by the model's last forward.

    Uses only the dense per-sample cost and the kept fractions of each conv's
    input mask, so it is independent of the counting inside the kernels.
    ``n`` is the batch size of that forward.
    """
    spec = model.spec
    costs = {name: dense for _, name, dense in _layer_costs(spec)}
    out = {}
    mask = None
    for name, layer, ls in zip(model.names, model.layers, spec.layers):
        if ls.kind == "conv":
            if mask is None:
                out[name] = costs[name] * n
            else:
                ch, sp = mask
                c, hw = ch.shape[1], sp.shape[1] * sp.shape[2]
                kept = ch.sum(axis=1).astype(np.int64) * sp.reshape(n, -1).sum(axis=1)
                # dense * (kc / C) * (ks / HW) summed over samples, in exact integers
                out[name] = sum(costs[name] * int(k) for k in kept) // (c * hw)
            mask = None
        elif ls.kind == "dense":
            out[name] = costs[name] * n
            mask = None
        elif ls.kind == "dynprune" and layer.last_mask is not None:
            mask = (layer.last_mask.channel_mask, layer.last_mask.spatial_mask)
        elif ls.kind == "maxpool2x2" and mask is not None:
            ch, sp = mask
            m, h, w = sp.shape
            mask = (ch, sp.reshape(m, h // 2, 2, w // 2, 2).any(axis=(2, 4)))
        elif ls.kind == "globalavgpool":
            mask = None
    return out
