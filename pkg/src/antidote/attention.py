"""Attention statistics and binary top-k pruning masks.

Channel attention is the spatial mean of each channel; spatial attention is
the channel mean at each location. Masks keep ``k = int(p * n)`` entries
(clamped to [1, n]) where ``p`` is the KEEP ratio. Ties go to the smaller
index (row-major for the spatial plane).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    check_tensor4,
    elementwise_mul_broadcast,
    make_rng,
    mean_over_channels,
    mean_over_spatial,
)


class RatioError(ValueError):
    """Raised for keep/prune ratios outside their valid range."""


@dataclass(frozen=True)
class MaskCriterion:
    """How entries are ranked: ``attention``, ``random`` (seeded) or ``inverse``."""

    kind: str = "attention"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("attention", "random", "inverse"):
            raise ValueError(f"unknown mask criterion {self.kind!r}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "MaskCriterion":
        return cls(text.strip().lower(), seed)


ATTENTION = MaskCriterion("attention")
INVERSE = MaskCriterion("inverse")


def random_criterion(seed: int) -> MaskCriterion:
    return MaskCriterion("random", seed)


@dataclass(frozen=True)
class AttentionStats:
    channel: np.ndarray  # (C,)
    spatial: np.ndarray  # (H, W)
    source_dims: tuple


@dataclass
class PruneMask:
    """Channel + spatial keep masks.

    A single feature map has ``channel_mask`` (C,) and ``spatial_mask`` (H, W);
    a batch carries a leading sample axis on both.
    """

    channel_mask: np.ndarray
    spatial_mask: np.ndarray
    p_ch: float = 1.0
    p_sp: float = 1.0
    k_channel: int = 0
    k_spatial: int = 0

    @property
    def batched(self) -> bool:
        return self.channel_mask.ndim == 2

    def sample(self, i: int) -> "PruneMask":
        if not self.batched:
            return self
        return PruneMask(self.channel_mask[i], self.spatial_mask[i], self.p_ch, self.p_sp,
                         self.k_channel, self.k_spatial)

    def dump(self) -> str:
        """Debug text: ``ch: 1101`` then ``sp:`` and one bit row per spatial row."""
        if self.batched:
            return "\n".join(self.sample(i).dump() for i in range(self.channel_mask.shape[0]))
        bits = lambda row: "".join("1" if b else "0" for b in row)  # noqa: E731
        lines = ["ch: " + bits(self.channel_mask), "sp:"]
        lines += [bits(row) for row in self.spatial_mask]
        return "\n".join(lines)

    @classmethod
    def parse_dump(cls, text: str) -> "PruneMask":
        lines = [ln.strip() for ln in text.strip().splitlines()]
        if not lines or not lines[0].startswith("ch:") or lines[1] != "sp:":
            raise ValueError("not a mask dump")
        ch = np.array([c == "1" for c in lines[0][3:].strip()])
        sp = np.array([[c == "1" for c in row] for row in lines[2:]])
        return cls(ch, sp, k_channel=int(ch.sum()), k_spatial=int(sp.sum()))


def keep_count(p: float, n: int) -> int:
    """k = clamp(int(p * n), 1, n) for a keep ratio p in (0, 1]."""
    if not (0.0 < p <= 1.0):
        raise RatioError(f"keep ratio must be in (0, 1], got {p}")
    return min(max(int(p * n), 1), n)


def prune_to_keep(r: float) -> float:
    """Convert a user-facing prune ratio r in [0, 1) to the keep ratio p = 1 - r."""
    if not (0.0 <= r < 1.0):
        raise RatioError(f"prune ratio must be in [0, 1), got {r}")
    # rounding keeps e.g. 1 - 0.9 from landing a hair under 0.1
    return round(1.0 - r, 12)


def _sample_map(f: np.ndarray, sample: int) -> np.ndarray:
    check_tensor4(f, "feature map")
    if not 0 <= sample < f.shape[0]:
        raise IndexError(f"sample {sample} out of range for batch of {f.shape[0]}")
    return f[sample:sample + 1]


def channel_attention(f: np.ndarray, sample: int = 0) -> np.ndarray:
    return mean_over_spatial(_sample_map(f, sample))[0]


def spatial_attention(f: np.ndarray, sample: int = 0) -> np.ndarray:
    return mean_over_channels(_sample_map(f, sample))[0]


def attention_stats(f: np.ndarray, sample: int = 0) -> AttentionStats:
    return AttentionStats(channel_attention(f, sample), spatial_attention(f, sample),
                          tuple(f.shape[1:]))


def _rank_mask(scores: np.ndarray, k: int, largest: bool = True) -> np.ndarray:
    """Boolean mask over the last axis keeping the k best entries per row.

    A stable sort keeps ties in index order, so the smaller index wins.
    """
    key = -scores if largest else scores
    order = np.argsort(key, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def _random_mask(shape: tuple, k: int, rng: np.random.Generator) -> np.ndarray:
    rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    n = shape[-1]
    keys = rng.random((rows, n))
    order = np.argsort(keys, axis=-1, kind="stable")[:, :k]
    mask = np.zeros((rows, n), dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask.reshape(shape)


def topk_channel_mask(att: np.ndarray, p: float) -> np.ndarray:
    att = np.asarray(att)
    if att.ndim != 1 or att.size < 1:
        raise ShapeError(f"channel attention must be a non-empty vector, got {att.shape}")
    return _rank_mask(att, keep_count(p, att.size))


def topk_spatial_mask(att: np.ndarray, p: float) -> np.ndarray:
    att = np.asarray(att)
    if att.ndim != 2 or att.size < 1:
        raise ShapeError(f"spatial attention must be a non-empty matrix, got {att.shape}")
    flat = _rank_mask(att.reshape(-1), keep_count(p, att.size))
    return flat.reshape(att.shape)


def _axis_mask(scores: np.ndarray, p: float, criterion: MaskCriterion,
               rng: Optional[np.random.Generator]) -> np.ndarray:
    """Mask over the last axis of ``scores`` (shape (N, L)) for one criterion."""
    k = keep_count(p, scores.shape[-1])
    if k == scores.shape[-1]:
        return np.ones(scores.shape, dtype=bool)
    if criterion.kind == "attention":
        return _rank_mask(scores, k, largest=True)
    if criterion.kind == "inverse":
        return _rank_mask(scores, k, largest=False)
    return _random_mask(scores.shape, k, rng)


def make_batch_mask(f: np.ndarray, p_ch: float, p_sp: float,
                    criterion: MaskCriterion = ATTENTION, stream: int = 0) -> PruneMask:
    """Per-sample masks for every element of the batch ``f``.

    ``stream`` selects an independent random stream for the ``random``
    criterion so repeated calls (e.g. successive batches) differ while staying
    reproducible from ``criterion.seed``.
    """
    check_tensor4(f, "feature map")
    n, c, h, w = f.shape
    k_ch, k_sp = keep_count(p_ch, c), keep_count(p_sp, h * w)
    rng = make_rng(criterion.seed, stream) if criterion.kind == "random" else None
    ch_scores = mean_over_spatial(f)
    sp_scores = mean_over_channels(f).reshape(n, h * w)
    ch = _axis_mask(ch_scores, p_ch, criterion, rng)
    sp = _axis_mask(sp_scores, p_sp, criterion, rng).reshape(n, h, w)
    return PruneMask(ch, sp, p_ch, p_sp, k_ch, k_sp)


def make_mask(f: np.ndarray, sample: int, p_ch: float, p_sp: float,
              criterion: MaskCriterion = ATTENTION, stream: int = 0) -> PruneMask:
    return make_batch_mask(_sample_map(f, sample), p_ch, p_sp, criterion, stream).sample(0)


def apply_mask(f: np.ndarray, mask: PruneMask) -> np.ndarray:
    return elementwise_mul_broadcast(f, mask.channel_mask, mask.spatial_mask)
