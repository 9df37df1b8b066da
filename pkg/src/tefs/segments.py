"""Fixed-size network inputs cut from representations, and z-score statistics."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .frontend import Kind, Representation

DEFAULT_SEGMENT_FRAMES = 50
DEFAULT_OVERLAP = 0.5
STD_FLOOR = 1e-8


class NormMode(str, enum.Enum):
    GLOBAL = "global"
    PER_BAND = "per_band"


@dataclass(frozen=True)
class Segment:
    values: np.ndarray  # (K, B)
    speaker_id: str
    label: int
    kind: Kind
    utterance: str = ""
    start: int = 0  # first frame index within the utterance


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # scalar, or (K, 1) per band
    std: np.ndarray
    mode: NormMode
    kind: Kind


def segment_hop(n_frames: int, overlap: float) -> int:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    return max(1, int(round(n_frames * (1.0 - overlap))))


def segment(
    rep: Representation,
    n_frames: int = DEFAULT_SEGMENT_FRAMES,
    overlap: float = DEFAULT_OVERLAP,
    *,
    speaker_id: str = "",
    label: int = 0,
    utterance: str = "",
) -> list[Segment]:
    """Windows of ``n_frames`` columns every ``hop`` columns; a partial tail is dropped."""
    hop = segment_hop(n_frames, overlap)
    k, length = rep.values.shape
    if length < n_frames:
        raise ValueError(
            f"utterance {utterance or '<unnamed>'} has {length} frames, fewer than one {n_frames}-frame segment"
        )
    count = (length - n_frames) // hop + 1
    return [
        Segment(rep.values[:, i * hop : i * hop + n_frames], speaker_id, label, rep.kind, utterance, i * hop)
        for i in range(count)
    ]


def stack(segments: list[Segment], dtype=np.float32) -> np.ndarray:
    """(N, K, B) array of segment values."""
    return np.stack([s.values for s in segments]).astype(dtype, copy=False)


def fit_norm(train_segments: list[Segment], mode: NormMode | str = NormMode.GLOBAL) -> NormStats:
    """Z-score statistics from training segments only."""
    if not train_segments:
        raise ValueError("cannot fit normalisation on an empty training set")
    mode = NormMode(mode)
    kinds = {s.kind for s in train_segments}
    if len(kinds) != 1:
        raise ValueError(f"training segments mix representation kinds: {sorted(k.value for k in kinds)}")
    x = np.stack([s.values for s in train_segments]).astype(np.float64)
    if mode is NormMode.GLOBAL:
        mean, std = np.asarray(x.mean()), np.asarray(x.std())
    else:
        mean = x.mean(axis=(0, 2))[:, None]
        std = x.std(axis=(0, 2))[:, None]
    return NormStats(mean, np.maximum(std, STD_FLOOR), mode, kinds.pop())


def normalize(stats: NormStats, s: Segment) -> Segment:
    if s.kind != stats.kind:
        raise ValueError(f"statistics fitted on {stats.kind.value}, segment is {s.kind.value}")
    values = (s.values - stats.mean) / stats.std
    return Segment(values, s.speaker_id, s.label, s.kind, s.utterance, s.start)


def normalize_array(stats: NormStats, x: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize` over an (N, K, B) stack."""
    return ((x - stats.mean) / stats.std).astype(x.dtype, copy=False)
