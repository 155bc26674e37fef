"""Model specifications, built-in architectures, sequential models and checkpoints."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import ATTENTION, MaskCriterion, PruneMask
from .layers import (
    Conv2d,
    Dense,
    DynamicPrune,
    GlobalAvgPool,
    Layer,
    MaxPool2x2,
    ReLU,
    SoftmaxCrossEntropy,
)
from .tensor import make_rng, read_tensor, write_tensor

LAYER_KINDS = ("conv", "relu", "dynprune", "maxpool2x2", "globalavgpool", "dense", "softmax-xent")


class SpecError(ValueError):
    """Invalid model specification; ``layer`` is the offending layer index (or None)."""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        super().__init__(message if layer is None else f"layer {layer}: {message}")


@dataclass
class LayerSpec:
    kind: str
    out: int = 0  # conv filters / dense units
    k: int = 3
    stride: int = 1

    def to_dict(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "out": self.out, "k": self.k, "stride": self.stride}
        if self.kind == "dense":
            return {"kind": "dense", "out": self.out}
        return {"kind": self.kind}


@dataclass
class ModelSpec:
    """Ordered layer list plus block ranges ``[start, stop)`` over layer indices.

    Blocks group the dynprune layers that share one per-block prune ratio.
    """

    name: str
    input_dims: tuple  # (c, h, w)
    layers: list
    blocks: list = field(default_factory=list)
    flops_only: bool = False

    def validate(self) -> list:
        """Chain-check the dims; returns the (c, h, w) output of every layer."""
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise SpecError(f"bad input dims {self.input_dims}")
        c, h, w = self.input_dims
        dims = []
        flat = False
        for i, ls in enumerate(self.layers):
            if ls.kind not in LAYER_KINDS:
                raise SpecError(f"unknown layer kind {ls.kind!r}", i)
            if ls.kind == "softmax-xent" and i != len(self.layers) - 1:
                raise SpecError("softmax-xent must be the last layer", i)
            if flat and ls.kind not in ("dense", "relu", "softmax-xent"):
                raise SpecError(f"{ls.kind} after a dense layer", i)
            if ls.kind == "conv":
                if ls.out < 1 or ls.k < 1 or ls.stride < 1:
                    raise SpecError("conv needs out >= 1, k >= 1, stride >= 1", i)
                pad = ls.k // 2
                h = (h + 2 * pad - ls.k) // ls.stride + 1
                w = (w + 2 * pad - ls.k) // ls.stride + 1
                c = ls.out
            elif ls.kind == "maxpool2x2":
                if h % 2 or w % 2:
                    raise SpecError(f"maxpool2x2 on odd map {h}x{w}", i)
                h, w = h // 2, w // 2
            elif ls.kind == "globalavgpool":
                h = w = 1
            elif ls.kind == "dense":
                if ls.out < 1:
                    raise SpecError("dense needs out >= 1", i)
                c, h, w = ls.out, 1, 1
                flat = True
            if h < 1 or w < 1:
                raise SpecError("feature map collapsed to zero size", i)
            dims.append((c, h, w))
        prev = 0
        for b, (start, stop) in enumerate(self.blocks):
            if not (prev <= start < stop <= len(self.layers)):
                raise SpecError(f"block {b} range [{start}, {stop}) is invalid or overlapping")
            prev = stop
        return dims

    def input_dims_of(self, i: int) -> tuple:
        return self.input_dims if i == 0 else self.validate()[i - 1]

    def block_of(self, i: int) -> Optional[int]:
        for b, (start, stop) in enumerate(self.blocks):
            if start <= i < stop:
                return b
        return None

    def layer_names(self) -> list:
        counts: dict = {}
        names = []
        for ls in self.layers:
            tag = "fc" if ls.kind == "dense" else ls.kind
            counts[tag] = counts.get(tag, 0) + 1
            names.append(f"{tag}{counts[tag]}")
        return names

    @property
    def conv_count(self) -> int:
        return sum(ls.kind == "conv" for ls in self.layers)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_dims": list(self.input_dims),
                "layers": [ls.to_dict() for ls in self.layers],
                "blocks": [list(b) for b in self.blocks], "flops_only": self.flops_only}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"name", "input_dims", "layers", "blocks", "flops_only"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown model spec keys: {sorted(extra)}")
        try:
            layers = [LayerSpec(**ld) for ld in d["layers"]]
            spec = cls(d.get("name", "custom"), tuple(d["input_dims"]), layers,
                       [tuple(b) for b in d.get("blocks", [])], bool(d.get("flops_only", False)))
        except (KeyError, TypeError) as e:
            raise SpecError(f"malformed model spec: {e}") from None
        spec.validate()
        return spec


def vgg_spec(name: str, widths: list, input_dims: tuple, classes: int,
             prune_last_block: bool = True) -> ModelSpec:
    """VGG-style spec: per block ``conv -> relu -> dynprune`` per layer, then maxpool.

    ``widths`` is a list of blocks, each a list of conv filter counts. The
    classifier is global average pooling followed by one dense layer.
    """
    layers, blocks = [], []
    for b, block in enumerate(widths):
        start = len(layers)
        for width in block:
            layers += [LayerSpec("conv", width), LayerSpec("relu"), LayerSpec("dynprune")]
        layers.append(LayerSpec("maxpool2x2"))
        blocks.append((start, len(layers)))
    layers += [LayerSpec("globalavgpool"), LayerSpec("dense", classes), LayerSpec("softmax-xent")]
    return ModelSpec(name, tuple(input_dims), layers, blocks)


VGG16_WIDTHS = [[64] * 2, [128] * 2, [256] * 3, [512] * 3, [512] * 3]
TOY_WIDTHS = [[16] * 3, [32] * 3]


def resnet_cifar_spec(depth: int = 56, classes: int = 10) -> ModelSpec:
    """Sequential conv chain of a CIFAR ResNet for FLOPs accounting.

    Three groups of ``(depth - 2) / 6`` basic blocks with 16/32/64 filters;
    the first conv of groups 2 and 3 has stride 2. Only the first (odd) conv
    of each basic block is followed by a dynprune layer, since the second
    conv's output must match the identity shortcut. Shortcuts are
    parameter-free and carry no FLOPs.
    """
    n = (depth - 2) // 6
    layers = [LayerSpec("conv", 16), LayerSpec("relu")]
    blocks = []
    for g, width in enumerate((16, 32, 64)):
        start = len(layers)
        for i in range(n):
            stride = 2 if g > 0 and i == 0 else 1
            layers += [LayerSpec("conv", width, stride=stride), LayerSpec("relu"),
                       LayerSpec("dynprune"), LayerSpec("conv", width), LayerSpec("relu")]
        blocks.append((start, len(layers)))
    layers += [LayerSpec("globalavgpool"), LayerSpec("dense", classes), LayerSpec("softmax-xent")]
    return ModelSpec(f"resnet{depth}-cifar", (3, 32, 32), layers, blocks, flops_only=True)


def builtin_spec(name: str) -> ModelSpec:
    if name == "toy-vgg":
        return vgg_spec("toy-vgg", TOY_WIDTHS, (3, 32, 32), 10)
    if name == "vgg16-cifar":
        return vgg_spec("vgg16-cifar", VGG16_WIDTHS, (3, 32, 32), 10)
    if name == "vgg16-imagenet":
        spec = vgg_spec("vgg16-imagenet", VGG16_WIDTHS, (3, 224, 224), 100)
        spec.flops_only = True
        return spec
    if name == "resnet56-cifar":
        return resnet_cifar_spec(56)
    raise KeyError(name)


BUILTIN_SPECS = ("toy-vgg", "vgg16-cifar", "resnet56-cifar", "vgg16-imagenet")


def load_spec(name_or_path: str) -> ModelSpec:
    if name_or_path in BUILTIN_SPECS:
        return builtin_spec(name_or_path)
    path = Path(name_or_path)
    if not path.is_file():
        raise FileNotFoundError(f"model spec not found: {name_or_path}")
    return ModelSpec.from_dict(json.loads(path.read_text()))


class Model:
    """Sequential network built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, layers: list, loss: SoftmaxCrossEntropy):
        self.spec = spec
        self.layers: list[Layer] = layers
        self.loss = loss
        self.names = spec.layer_names()[:len(layers)]

    # -- structure --------------------------------------------------------
    def prune_layers(self, block: Optional[int] = None) -> list:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DynamicPrune) and (block is None or self.spec.block_of(i) == block):
                out.append(layer)
        return out

    def prune_layer_dims(self, block: int) -> list:
        """(c, h, w) of the feature map each dynprune layer in ``block`` sees."""
        dims = self.spec.validate()
        return [dims[i] for i, layer in enumerate(self.layers)
                if isinstance(layer, DynamicPrune) and self.spec.block_of(i) == block]

    @property
    def block_count(self) -> int:
        return len(self.spec.blocks)

    def set_keep_ratios(self, ch_keep: list, sp_keep: list,
                        criterion: MaskCriterion = ATTENTION) -> None:
        if len(ch_keep) != self.block_count or len(sp_keep) != self.block_count:
            raise ValueError(f"expected {self.block_count} per-block ratios, "
                             f"got {len(ch_keep)} channel / {len(sp_keep)} spatial")
        for b in range(self.block_count):
            for layer in self.prune_layers(b):
                layer.p_ch, layer.p_sp = ch_keep[b], sp_keep[b]
                layer.criterion = criterion
                layer.enabled = True
                layer.reset_stream()

    def named_params(self) -> list:
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname in sorted(layer.params):
                out.append((f"{name}.{pname}", layer.params[pname]))
        return out

    def params_and_grads(self):
        ps, gs = [], []
        for layer in self.layers:
            for pname in sorted(layer.params):
                ps.append(layer.params[pname])
                gs.append(layer.grads[pname])
        return ps, gs

    # -- passes -----------------------------------------------------------
    def forward(self, x: np.ndarray, macs: Optional[dict] = None) -> np.ndarray:
        """Logits for batch ``x``.

        With a ``macs`` dict, convolutions whose input carries a prune mask run
        through the skip-aware kernel and every conv/dense layer adds its
        executed multiply-accumulates under its layer name.
        """
        in_mask = None  # (channel (N, C), spatial (N, H, W)) of the current activation
        for name, layer in zip(self.names, self.layers):
            if isinstance(layer, Conv2d):
                if macs is None:
                    x = layer.forward(x)
                else:
                    n, c, h, w = x.shape
                    mask = PruneMask(*in_mask) if in_mask is not None else PruneMask(
                        np.ones((n, c), bool), np.ones((n, h, w), bool))
                    x, count = layer.forward_masked(x, mask)
                    macs[name] = macs.get(name, 0) + count
                in_mask = None
            elif isinstance(layer, DynamicPrune):
                x = layer.forward(x)
                if layer.last_mask is not None:
                    in_mask = (layer.last_mask.channel_mask, layer.last_mask.spatial_mask)
            elif isinstance(layer, MaxPool2x2):
                x = layer.forward(x)
                if in_mask is not None:
                    ch, sp = in_mask
                    n, h, w = sp.shape
                    sp = sp.reshape(n, h // 2, 2, w // 2, 2).any(axis=(2, 4))
                    in_mask = (ch, sp)
            else:
                x = layer.forward(x)
                if isinstance(layer, Dense):
                    if macs is not None:
                        w = layer.params["weight"]
                        macs[name] = macs.get(name, 0) + x.shape[0] * w.shape[0] * w.shape[1]
                    in_mask = None
                elif isinstance(layer, GlobalAvgPool):
                    in_mask = None
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def train_step(self, x, y) -> tuple:
        """Forward + loss + backward; returns (loss, logits). Gradients land on layers."""
        logits = self.forward(x)
        loss = self.loss.forward(logits, y)
        self.backward(self.loss.backward())
        return loss, logits

    def predict(self, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
        preds = [self.forward(x[i:i + batch_size]).argmax(axis=1)
                 for i in range(0, len(x), batch_size)]
        return np.concatenate(preds)

    # -- checkpoints ------------------------------------------------------
    def save(self, directory) -> None:
        """Write ``weights.bin`` (dims-prefixed raw float32 records) and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        named = self.named_params()
        manifest = {"spec": self.spec.to_dict(),
                    "params": [{"name": n, "shape": list(p.shape)} for n, p in named]}
        with tempfile.NamedTemporaryFile("wb", dir=directory, delete=False) as fh:
            for _, p in named:
                write_tensor(fh, p)
        os.replace(fh.name, directory / "weights.bin")
        atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Model":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        model = build_model(ModelSpec.from_dict(manifest["spec"]))
        params = dict(model.named_params())
        with open(directory / "weights.bin", "rb") as fh:
            for entry in manifest["params"]:
                arr = read_tensor(fh).reshape(entry["shape"])
                target = params[entry["name"]]
                if target.shape != arr.shape:
                    raise SpecError(f"checkpoint shape mismatch for {entry['name']}")
                target[...] = arr
        return model


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, newline="") as fh:
        fh.write(text)
    os.replace(fh.name, path)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    dims = spec.validate()
    if spec.flops_only:
        raise SpecError(f"{spec.name} is an accounting-only spec and cannot be built")
    if not spec.layers or spec.layers[-1].kind != "softmax-xent":
        raise SpecError("model must end with softmax-xent")
    layers = []
    for i, ls in enumerate(spec.layers[:-1]):
        c_in = (spec.input_dims if i == 0 else dims[i - 1])
        rng = make_rng(seed, i)
        if ls.kind == "conv":
            if ls.stride != 1:
                raise SpecError("only stride-1 convolutions are trainable", i)
            layers.append(Conv2d(c_in[0], ls.out, ls.k, rng=rng))
        elif ls.kind == "relu":
            layers.append(ReLU())
        elif ls.kind == "dynprune":
            layers.append(DynamicPrune())
        elif ls.kind == "maxpool2x2":
            layers.append(MaxPool2x2())
        elif ls.kind == "globalavgpool":
            layers.append(GlobalAvgPool())
        elif ls.kind == "dense":
            layers.append(Dense(int(np.prod(c_in)), ls.out, rng=rng))
    first_conv = next((l for l in layers if isinstance(l, Conv2d)), None)
    if first_conv is not None and layers.index(first_conv) == 0:
        first_conv.need_dx = False  # nothing upstream needs the input gradient
    return Model(spec, layers, SoftmaxCrossEntropy())
