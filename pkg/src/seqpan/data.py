"""Annotation/feature I/O, length fitting, vocabularies and the synthetic task.

Annotations are JSONL, one object per line::

    {"video_id": "v1", "duration": 30.0, "start": 2.5, "end": 8.0, "query": "person opens door"}

Features use a small binary container: ``b"SQFT"``, u32 version, u64 d_v,
u64 T_raw, then ``d_v * T_raw`` little-endian float32 values, row-major.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .labeling import assign_bieo, index_to_time, time_to_index
from .model import Batch

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"SQFT"
FEATURE_VERSION = 1
PAD, UNK = 0, 1
_TOKEN = re.compile(r"[\w']+")


class AnnotationError(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    video_id: str
    duration: float
    t_start: float
    t_end: float
    query: list[str]

    def to_json(self) -> str:
        return json.dumps({"video_id": self.video_id, "duration": self.duration,
                           "start": self.t_start, "end": self.t_end, "query": " ".join(self.query)})


@dataclass
class FeatureFile:
    video_id: str
    matrix: np.ndarray  # (d_v, T_raw)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _validate(obj: dict) -> AnnotationRecord:
    for key in ("video_id", "duration", "start", "end", "query"):
        if key not in obj:
            raise AnnotationError(f"missing key {key!r}")
    dur, s, e = float(obj["duration"]), float(obj["start"]), float(obj["end"])
    if dur <= 0:
        raise AnnotationError(f"duration {dur} is not positive")
    if s < 0:
        raise AnnotationError(f"start {s} < 0")
    if s > e:
        raise AnnotationError(f"start {s} > end {e}")
    if e > dur:
        raise AnnotationError(f"end {e} > duration {dur}")
    q = obj["query"]
    tokens = tokenize(q) if isinstance(q, str) else [str(t).lower() for t in q]
    if not tokens:
        raise AnnotationError("empty query")
    return AnnotationRecord(str(obj["video_id"]), dur, s, e, tokens)


def load_annotations(path, strict: bool = True) -> list[AnnotationRecord]:
    """Parse and validate a JSONL annotation file.

    Bad lines are collected with their line numbers; in strict mode they
    raise a single :class:`AnnotationError`, otherwise they are logged and
    skipped.
    """
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(_validate(json.loads(line)))
            except (json.JSONDecodeError, AnnotationError, TypeError, ValueError) as exc:
                problems.append(f"line {lineno}: {exc}")
    if problems:
        msg = f"{path}: {len(problems)} rejected line(s)\n  " + "\n  ".join(problems)
        if strict:
            raise AnnotationError(msg)
        logger.warning(msg)
    if not records and not problems:
        logger.warning("%s: no annotations", path)
    return records


def write_annotations(path, records: Sequence[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def write_features(path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FeatureFormatError(f"feature matrix must be 2-D, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQQ", FEATURE_VERSION, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_features(path) -> FeatureFile:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 24:
        raise FeatureFormatError(f"{path}: truncated header")
    version, d_v, t_raw = struct.unpack("<IQQ", raw[4:24])
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = 4 * d_v * t_raw
    if len(raw) - 24 != expected:
        raise FeatureFormatError(f"{path}: payload has {len(raw) - 24} bytes, expected {expected}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=24).reshape(d_v, t_raw).copy()
    return FeatureFile(Path(path).stem, matrix)


def fit_length(features: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniformly downsample or zero-pad ``(d_v, T_raw)`` features to ``n`` columns.

    Returns ``(fitted, mask, index_map)`` where ``index_map[j]`` is the raw
    column behind fitted column ``j`` (valid columns only).
    """
    if n < 2:
        raise ValueError("target length must be at least 2")
    d_v, t_raw = features.shape
    if t_raw > n:
        index_map = np.floor(np.arange(n) * (t_raw - 1) / (n - 1) + 0.5).astype(np.int64)
        return features[:, index_map].copy(), np.ones(n, dtype=bool), index_map
    out = np.zeros((d_v, n), dtype=features.dtype)
    out[:, :t_raw] = features
    mask = np.zeros(n, dtype=bool)
    mask[:t_raw] = True
    return out, mask, np.arange(t_raw, dtype=np.int64)


def remap_index(raw_index: int, index_map: np.ndarray) -> int:
    """Fitted column whose raw index is nearest (earliest on ties)."""
    return int(np.argmin(np.abs(index_map - raw_index)))


# -- vocabulary and word vectors ---------------------------------------

class Vocabulary:
    """Lowercased token -> id; 0 is padding and 1 unknown."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = ["<pad>", "<unk>"]
        self.stoi = {"<pad>": PAD, "<unk>": UNK}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t.lower(), UNK) for t in tokens]

    @classmethod
    def build(cls, records: Sequence[AnnotationRecord]) -> "Vocabulary":
        vocab = cls()
        for r in records:
            for t in r.query:
                vocab.add(t)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        itos = json.loads(Path(path).read_text())
        vocab = cls()
        for t in itos[2:]:
            vocab.add(t)
        return vocab


def load_word_vectors(path, vocab: Vocabulary, rng: np.random.Generator, dim: int | None = None,
                      fallback: bool = True) -> np.ndarray:
    """Frozen ``(d_w, |V|)`` word table.

    Vocabulary hits take the file vector, misses are drawn from
    N(0, 0.1^2), the padding column is zero. With no file and
    ``fallback`` the whole table is random (``dim`` required).
    """
    found: dict[str, np.ndarray] = {}
    if path is not None and os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip().split()
                if len(parts) < 2:
                    continue
                if dim is None:
                    dim = len(parts) - 1
                elif len(parts) - 1 != dim:
                    raise ValueError(f"{path}:{lineno}: {len(parts) - 1} values, expected {dim}")
                if parts[0] in vocab.stoi:
                    found[parts[0]] = np.asarray(parts[1:], dtype=np.float64)
    elif not fallback:
        raise FileNotFoundError(f"word vector file {path!r} not found")
    if dim is None:
        raise ValueError("word vector dimension unknown: pass dim= for the random fallback")
    table = rng.normal(0.0, 0.1, size=(dim, len(vocab)))
    for tok, vec in found.items():
        table[:, vocab.stoi[tok]] = vec
    table[:, PAD] = 0.0
    return table.astype(np.float32)


# -- dataset -----------------------------------------------------------

@dataclass
class GroundingDataset:
    video: np.ndarray          # (n, d_v, N)
    video_mask: np.ndarray     # (n, N)
    query_ids: np.ndarray      # (n, M)
    query_mask: np.ndarray     # (n, M)
    start: np.ndarray          # (n,)
    end: np.ndarray            # (n,)
    bieo: np.ndarray           # (n, N)
    fb: np.ndarray             # (n, N)
    durations: np.ndarray      # (n,)
    gt: np.ndarray             # (n, 2) seconds
    video_ids: list[str]
    index_maps: list[np.ndarray]
    raw_lengths: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.video_ids)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
        """Fixed order without ``rng``, seeded shuffle with it; last batch may be short."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            yield self.batch(idx)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.video[idx], self.video_mask[idx], self.query_ids[idx], self.query_mask[idx],
                     self.start[idx], self.end[idx], self.bieo[idx], self.fb[idx], meta={"index": idx})

    def index_to_time(self, i: int, fitted_index: int) -> float:
        raw = int(self.index_maps[i][fitted_index])
        return index_to_time(raw, float(self.durations[i]), int(self.raw_lengths[i]))

    def gt_times(self, i: int) -> tuple[float, float]:
        return float(self.gt[i, 0]), float(self.gt[i, 1])

    def subset(self, idx) -> "GroundingDataset":
        idx = np.asarray(idx)
        return GroundingDataset(
            self.video[idx], self.video_mask[idx], self.query_ids[idx], self.query_mask[idx],
            self.start[idx], self.end[idx], self.bieo[idx], self.fb[idx], self.durations[idx],
            self.gt[idx], [self.video_ids[i] for i in idx], [self.index_maps[i] for i in idx],
            self.raw_lengths[idx], dict(self.extra))


def build_dataset(records: Sequence[AnnotationRecord], features: Mapping[str, np.ndarray],
                  vocab: Vocabulary, n: int, m: int, eta: float = 0.25) -> GroundingDataset:
    """Pad/downsample every video to ``n`` columns and every query to ``m`` tokens.

    Ground-truth times map to raw indices, then to the fitted column with
    the nearest raw index.
    """
    if not records:
        raise ValueError("no annotation records")
    k = len(records)
    d_v = next(iter(features.values())).shape[0] if features else 0
    video = np.zeros((k, d_v, n), dtype=np.float32)
    v_mask = np.zeros((k, n), dtype=bool)
    q_ids = np.zeros((k, m), dtype=np.int64)
    q_mask = np.zeros((k, m), dtype=bool)
    start = np.zeros(k, dtype=np.int64)
    end = np.zeros(k, dtype=np.int64)
    bieo = np.zeros((k, n), dtype=np.int64)
    fb = np.zeros((k, n), dtype=np.int64)
    index_maps, raw_lengths = [], np.zeros(k, dtype=np.int64)
    for i, r in enumerate(records):
        if r.video_id not in features:
            raise KeyError(f"no features for video {r.video_id!r}")
        feats = features[r.video_id]
        if feats.shape[0] != d_v:
            raise ValueError(f"video {r.video_id!r} has feature dim {feats.shape[0]}, expected {d_v}")
        fitted, mask, imap = fit_length(feats, n)
        t_raw = feats.shape[1]
        video[i], v_mask[i] = fitted, mask
        index_maps.append(imap)
        raw_lengths[i] = t_raw
        if t_raw > 1:
            raw_s = time_to_index(r.t_start, r.duration, t_raw)
            raw_e = time_to_index(r.t_end, r.duration, t_raw)
        else:
            raw_s = raw_e = 0
        start[i], end[i] = remap_index(raw_s, imap), remap_index(raw_e, imap)
        valid = int(mask.sum())
        if valid >= 2:
            labels = assign_bieo(int(start[i]), int(end[i]), valid, eta).labels
        else:
            labels = np.array([3])
        bieo[i, :valid] = labels
        fb[i, :valid] = labels != 0
        ids = vocab.encode(r.query)[:m]
        q_ids[i, :len(ids)] = ids
        q_mask[i, :len(ids)] = True
    return GroundingDataset(video, v_mask, q_ids, q_mask, start, end, bieo, fb,
                            np.array([r.duration for r in records]),
                            np.array([[r.t_start, r.t_end] for r in records]),
                            [r.video_id for r in records], index_maps, raw_lengths)


def load_split(data_dir, split: str, vocab: Vocabulary, n: int, m: int, eta: float = 0.25,
               strict: bool = True) -> GroundingDataset:
    """Read ``<data_dir>/<split>.jsonl`` with features from ``<data_dir>/features/<video_id>.sqft``."""
    data_dir = Path(data_dir)
    records = load_annotations(data_dir / f"{split}.jsonl", strict=strict)
    features = {}
    for r in records:
        if r.video_id not in features:
            features[r.video_id] = load_features(data_dir / "features" / f"{r.video_id}.sqft").matrix
    return build_dataset(records, features, vocab, n, m, eta)


# -- synthetic planted-span task ---------------------------------------

@dataclass
class SyntheticData:
    records: list[AnnotationRecord]
    features: dict[str, np.ndarray]
    classes: np.ndarray
    spans: np.ndarray           # (n, 2) target indices
    directions: np.ndarray      # (n_classes, d_v), norm == signal_scale
    n_classes: int
    signal_scale: float

    def split(self, sizes: Sequence[int]) -> list["SyntheticData"]:
        parts, lo = [], 0
        for size in sizes:
            sl = slice(lo, lo + size)
            recs = self.records[sl]
            parts.append(SyntheticData(recs, {r.video_id: self.features[r.video_id] for r in recs},
                                       self.classes[sl], self.spans[sl], self.directions,
                                       self.n_classes, self.signal_scale))
            lo += size
        return parts


def _span_length(rng: np.random.Generator, n: int) -> int:
    lo = max(1, math.ceil(n / 10))
    hi = max(lo, n // 3)
    return int(rng.integers(lo, hi + 1))


def synth_dataset(n_samples: int, n: int, d_v: int, vocab_size: int, rng: np.random.Generator,
                  n_classes: int = 8, signal_scale: float = 1.0, distractors: bool = True,
                  duration: float = 30.0) -> SyntheticData:
    """Planted-span grounding task.

    Each video is N(0, 1) noise with a class direction (norm
    ``signal_scale``) added over the target span. The query holds one
    class keyword ``w<c>`` among filler tokens. Spans of other classes
    are planted elsewhere so a query-blind model cannot solve the task.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if vocab_size < n_classes + 1:
        raise ValueError(f"vocab_size {vocab_size} leaves no filler tokens for {n_classes} classes")
    dirs = rng.normal(size=(n_classes, d_v))
    dirs *= signal_scale / np.linalg.norm(dirs, axis=1, keepdims=True)
    fillers = np.arange(n_classes, vocab_size)
    records, feats, classes, spans = [], {}, np.zeros(n_samples, dtype=np.int64), np.zeros((n_samples, 2), dtype=np.int64)
    width = len(str(n_samples - 1))
    for k in range(n_samples):
        c = int(rng.integers(n_classes))
        length = _span_length(rng, n)
        s = int(rng.integers(0, n - length + 1))
        e = s + length - 1
        x = rng.normal(size=(d_v, n))
        x[:, s:e + 1] += dirs[c][:, None]
        if distractors:
            occupied = np.zeros(n, dtype=bool)
            occupied[max(0, s - 1):e + 2] = True
            others = [o for o in range(n_classes) if o != c]
            for o in rng.choice(others, size=min(2, len(others)), replace=False):
                dl = _span_length(rng, n)
                free = [a for a in range(n - dl + 1) if not occupied[a:a + dl].any()]
                if not free:
                    continue
                a = int(free[rng.integers(len(free))])
                x[:, a:a + dl] += dirs[o][:, None]
                occupied[max(0, a - 1):a + dl + 1] = True
        q_len = int(rng.integers(3, 9))
        tokens = [f"w{int(t)}" for t in rng.choice(fillers, size=q_len)]
        tokens[int(rng.integers(q_len))] = f"w{c}"
        vid = f"syn{k:0{width}d}"
        records.append(AnnotationRecord(vid, duration, index_to_time(s, duration, n),
                                        index_to_time(e, duration, n), tokens))
        feats[vid] = x.astype(np.float32)
        classes[k] = c
        spans[k] = (s, e)
    return SyntheticData(records, feats, classes, spans, dirs, n_classes, signal_scale)


def write_synthetic(out_dir, data: SyntheticData, splits: Mapping[str, Sequence[int]],
                    meta: dict | None = None) -> None:
    """Write ``<split>.jsonl`` files plus one SQFT file per video."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for name, idx in splits.items():
        write_annotations(out / f"{name}.jsonl", [data.records[i] for i in idx])
    for vid, x in data.features.items():
        write_features(out / "features" / f"{vid}.sqft", x)
    if meta is not None:
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def span_means(data: SyntheticData) -> np.ndarray:
    n = next(iter(data.features.values())).shape[1]
    out = []
    for r, (s, e) in zip(data.records, data.spans):
        out.append(data.features[r.video_id][:, s:e + 1].mean(axis=1))
    return np.asarray(out, dtype=np.float64)


def linear_probe_accuracy(train: SyntheticData, test: SyntheticData) -> float:
    """Least-squares one-vs-all probe on target-span mean features."""
    x_tr = np.hstack([span_means(train), np.ones((len(train.records), 1))])
    y_tr = np.eye(train.n_classes)[train.classes]
    w, *_ = np.linalg.lstsq(x_tr, y_tr, rcond=None)
    x_te = np.hstack([span_means(test), np.ones((len(test.records), 1))])
    return float(np.mean((x_te @ w).argmax(axis=1) == test.classes))


def matched_filter_spans(data: SyntheticData, length_prior: bool = True) -> np.ndarray:
    """Oracle boundaries from the known class direction.

    Projects every frame on the true direction and picks the segment with
    the largest summed log-likelihood ratio, restricted to the lengths the
    generator can draw when ``length_prior`` is set. It knows what no
    model can, so its IoU is a ceiling for the task at this signal scale.
    """
    out = []
    mu = data.signal_scale
    for r, c in zip(data.records, data.classes):
        x = data.features[r.video_id].astype(np.float64)
        n = x.shape[1]
        proj = data.directions[c] @ x / max(mu, 1e-12)
        llr = mu * proj - mu * mu / 2
        csum = np.concatenate([[0.0], np.cumsum(llr)])
        seg = csum[None, 1:] - csum[:-1, None]  # seg[a, b] = sum llr[a..b]
        length = np.arange(n)[None, :] - np.arange(n)[:, None] + 1
        allowed = length >= 1
        if length_prior:
            lo = max(1, math.ceil(n / 10))
            allowed &= (length >= lo) & (length <= max(lo, n // 3))
        seg = np.where(allowed, seg, -np.inf)
        flat = int(np.argmax(seg))
        out.append(divmod(flat, seg.shape[0]))
    return np.asarray(out, dtype=np.int64)
