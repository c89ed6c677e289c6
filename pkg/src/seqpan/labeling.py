"""Time/index mapping, BIEO region labels and Gumbel noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Fixed class order shared by the labeler, the model head and checkpoints.
O, B, I, E = 0, 1, 2, 3
LABEL_NAMES = ("O", "B", "I", "E")
NUM_LABELS = 4


@dataclass(frozen=True)
class SpanAnnotation:
    t_start: float
    t_end: float
    duration: float
    i_start: int
    i_end: int


@dataclass
class RegionLabels:
    labels: np.ndarray  # (N,) int class ids

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        """(4, N) one-hot matrix."""
        return np.eye(NUM_LABELS, dtype=dtype)[self.labels].T

    def __str__(self) -> str:
        return "".join(LABEL_NAMES[c] for c in self.labels)


def time_to_index(t: float, duration: float, n: int) -> int:
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    i = int(np.floor(t / duration * (n - 1) + 0.5))
    return min(max(i, 0), n - 1)


def index_to_time(i: int, duration: float, n: int) -> float:
    return i / (n - 1) * duration if n > 1 else 0.0


def annotate(t_start: float, t_end: float, duration: float, n: int) -> SpanAnnotation:
    return SpanAnnotation(t_start, t_end, duration,
                          time_to_index(t_start, duration, n), time_to_index(t_end, duration, n))


def _check_span(i_s: int, i_e: int, n: int) -> None:
    if not 0 <= i_s <= i_e <= n - 1:
        raise ValueError(f"invalid span [{i_s}, {i_e}] for sequence length {n}")


def _regions(i_s: int, i_e: int, n: int, eta: float) -> tuple[int, int, int, int]:
    """Inclusive (b_lo, b_hi, e_lo, e_hi) after extension and overlap resolution."""
    ext = math.ceil(eta * (i_e - i_s + 1))
    b_lo, b_hi = max(0, i_s - ext), i_s + ext
    e_lo, e_hi = i_e - ext, min(n - 1, i_e + ext)
    if b_hi >= e_lo:
        # Overlap: frames [e_lo, b_hi] are split at their midpoint, the
        # middle frame (and the later half) going to E.
        lo, hi = e_lo, b_hi
        mid = (lo + hi) // 2 if (hi - lo) % 2 == 0 else (lo + hi + 1) // 2
        b_hi, e_lo = mid - 1, mid
        if b_hi < b_lo:
            # E swallowed the whole B region: pin B to the frame before E.
            if e_lo > 0:
                b_lo = b_hi = e_lo - 1
            else:
                # span starts at frame 0; give B frame 0 and push E right
                b_lo = b_hi = 0
                e_lo = 1
                e_hi = max(e_hi, 1)
    return b_lo, b_hi, e_lo, e_hi


def assign_bieo(i_s: int, i_e: int, n: int, eta: float = 0.25) -> RegionLabels:
    """Label frames O/B/I/E around the span ``[i_s, i_e]``.

    Both boundaries are widened by ``ceil(eta * span_length)`` frames. B is
    centred on ``i_s`` and E on ``i_e``; the frames strictly between them
    are I and everything else is O. Overlapping B/E regions are split at
    the midpoint with the middle frame going to E. A single-frame span
    with no extension puts E on the frame and B on the frame before it.
    """
    _check_span(i_s, i_e, n)
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if n < 2:
        raise ValueError("need at least two frames to place B and E regions")
    b_lo, b_hi, e_lo, e_hi = _regions(i_s, i_e, n, eta)
    labels = np.full(n, O, dtype=np.int64)
    labels[b_lo:b_hi + 1] = B
    labels[b_hi + 1:e_lo] = I
    labels[e_lo:e_hi + 1] = E
    return RegionLabels(labels)


def fb_labels(i_s: int, i_e: int, n: int, eta: float = 0.25) -> np.ndarray:
    """(2, N) one-hot background/foreground; foreground is the extended span."""
    _check_span(i_s, i_e, n)
    fg = assign_bieo(i_s, i_e, n, eta).labels != O
    return np.stack([~fg, fg]).astype(np.float64)


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)
