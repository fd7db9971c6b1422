"""Feature sequences on disk (the FSEQ format) and the windowing that feeds the classifier.

An FSEQ file holds one ``T x D`` matrix::

    b"FSEQ"  u32 version  u32 T  u32 D  T*D little-endian float32, row-major

Labels live beside the files in ``labels.tsv``, one ``source_id<TAB>label``
line per sequence, with labels spelled ``NP``, ``Low`` or ``High``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng

logger = logging.getLogger(__name__)

LABELS = ("NP", "Low", "High")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
FSEQ_MAGIC = b"FSEQ"
FSEQ_VERSION = 1
MANIFEST = "labels.tsv"
_HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path} @ byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class FeatureSequence:
    values: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"feature sequence must be T x D with T, D >= 1, got {self.values.shape}")
        if self.label is not None and self.label not in (0, 1, 2):
            raise ValueError(f"label must be 0, 1 or 2, got {self.label}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowSpec:
    L: int = 16
    stride: int | None = None
    tail_policy: str = "drop"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.L
        if self.L < 1 or self.stride < 1:
            raise ValueError("window length and stride must be >= 1")
        if self.tail_policy not in ("drop", "pad_repeat_last"):
            raise ValueError(f"unknown tail policy {self.tail_policy!r}")


@dataclass
class Dataset:
    sequences: list[FeatureSequence] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        dims = {s.D for s in self.sequences}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature dimension across dataset: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def input_dim(self) -> int | None:
        return self.sequences[0].D if self.sequences else None

    @property
    def histogram(self) -> list[int]:
        counts = Counter(s.label for s in self.sequences if s.label is not None)
        return [counts.get(c, 0) for c in range(len(LABELS))]


# -- FSEQ io --------------------------------------------------------------

def write_fseq(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    t, d = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FSEQ_MAGIC, FSEQ_VERSION, t, d))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_fseq(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(path, len(raw), "truncated header")
    magic, version, t, d = _HEADER.unpack_from(raw, 0)
    if magic != FSEQ_MAGIC:
        raise FeatureFormatError(path, 0, f"bad magic {magic!r}")
    if version != FSEQ_VERSION:
        raise FeatureFormatError(path, 4, f"unsupported version {version}")
    if t == 0:
        raise FeatureFormatError(path, 8, "T must be >= 1")
    if d == 0:
        raise FeatureFormatError(path, 12, "D must be >= 1")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise FeatureFormatError(path, min(len(raw), expected), f"expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float32)


def read_labels(path: Path) -> dict[str, int]:
    labels = {}
    if not path.exists():
        return labels
    offset = 0
    for line in path.read_bytes().splitlines(keepends=True):
        text = line.decode("utf-8").rstrip("\r\n")
        if text and not text.startswith("#"):
            parts = text.split("\t")
            if len(parts) != 2:
                raise FeatureFormatError(path, offset, f"expected 'source_id<TAB>label', got {text!r}")
            source_id, name = parts
            if name not in LABEL_INDEX:
                raise FeatureFormatError(path, offset, f"unknown label {name!r}")
            labels[source_id] = LABEL_INDEX[name]
        offset += len(line)
    return labels


def _worker_count() -> int:
    env = os.environ.get("SEQFORMER_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def load_features(path, split: str = "train") -> Dataset:
    root = Path(path)
    files = sorted(root.glob("*.fseq"))
    labels = read_labels(root / MANIFEST)
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        arrays = list(pool.map(read_fseq, files))
    dims = {}
    seqs = []
    for f, values in zip(files, arrays):
        dims.setdefault(values.shape[1], f)
        if len(dims) > 1:
            first = next(iter(dims.items()))
            raise FeatureFormatError(f, 12, f"D={values.shape[1]} differs from D={first[0]} in {first[1].name}")
        seqs.append(FeatureSequence(values, labels.get(f.stem), f.stem))
    return Dataset(seqs, split=split)


def save_features(dataset: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for seq in dataset:
        write_fseq(root / f"{seq.source_id}.fseq", seq.values)
        if seq.label is not None:
            lines.append(f"{seq.source_id}\t{LABELS[seq.label]}\n")
    (root / MANIFEST).write_text("".join(lines), encoding="utf-8")


def export_csv(seq: FeatureSequence, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(seq.D)])
        for row in seq.values:
            writer.writerow([repr(float(v)) for v in row])


# -- windowing ------------------------------------------------------------

def window_array(values: np.ndarray, spec: WindowSpec) -> list[np.ndarray]:
    """Cut ``values`` along axis 0 into length-``L`` windows, ``stride`` apart."""
    n = values.shape[0]
    L, stride = spec.L, spec.stride
    if spec.tail_policy == "drop":
        if n < L:
            return []
        starts = range(0, n - L + 1, stride)
    else:
        count = 1 if n <= L else math.ceil((n - L) / stride) + 1
        starts = range(0, count * stride, stride)
    out = []
    for s in starts:
        seg = values[s:s + L]
        if seg.shape[0] < L:
            pad = np.repeat(values[-1:], L - seg.shape[0], axis=0)
            seg = np.concatenate([seg, pad], axis=0)
        out.append(seg)
    return out


def window(seq: FeatureSequence, spec: WindowSpec) -> list[FeatureSequence]:
    segments = window_array(seq.values, spec)
    if not segments:
        logger.warning("sequence %r has T=%d < L=%d; no windows under drop policy", seq.source_id, seq.T, spec.L)
    return [FeatureSequence(s, seq.label, seq.source_id) for s in segments]


def window_dataset(dataset: Dataset, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack every window into ``(N, L, D)`` with labels (``-1`` if unlabeled) and source ids."""
    xs, ys, ids = [], [], []
    for seq in dataset:
        for seg in window(seq, spec):
            xs.append(seg.values)
            ys.append(-1 if seg.label is None else seg.label)
            ids.append(seg.source_id)
    if not xs:
        d = dataset.input_dim or 0
        return np.zeros((0, spec.L, d)), np.zeros(0, dtype=np.int64), []
    return np.stack(xs), np.asarray(ys, dtype=np.int64), ids


# -- synthetic data -------------------------------------------------------

_BURST_BANDS = ((2, 4), (6, 8), (10, 12))  # burst start ranges per class, in units of L/16


def synth_classification_set(seed: int, n_per_class: int, L: int = 16, D: int = 8,
                             difficulty: str = "easy", split: str = "train") -> Dataset:
    """Three-class sequences with injected temporal signatures.

    ``easy``: class 0 is flat noise, class 1 adds a low-frequency sinusoid on
    a random channel, class 2 adds a short burst on a random channel.

    ``hard``: every sequence carries the same burst, so content alone does
    not separate the classes; the class is the band in which the burst
    starts (early, middle, late). Bursts keep two frames from either end so
    zero-padded convolutions cannot see them at the boundary.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    if difficulty == "hard" and L < 16:
        raise ValueError("hard sets need L >= 16 to keep burst bands apart")
    rng = Rng.for_stage(seed, f"synth:{difficulty}")
    seqs = []
    scale = L / 16.0
    t = np.arange(L)
    for c in range(3):
        for i in range(n_per_class):
            x = 0.3 * rng.normal(size=(L, D))
            ch = rng.integers(0, D)
            if difficulty == "easy":
                if c == 1:
                    period = rng.uniform(0.6, 1.0) * L
                    phase = rng.uniform(0.0, 2 * np.pi)
                    x[:, ch] += 1.5 * np.sin(2 * np.pi * t / period + phase)
                elif c == 2:
                    start = rng.integers(1, L - 3)
                    x[start:start + 2, ch] += 3.0
            else:
                lo, hi = _BURST_BANDS[c]
                start = rng.integers(int(lo * scale), int(hi * scale) + 1)
                x[start:start + 2, :] += 2.0
            seqs.append(FeatureSequence(x, c, f"synth_{LABELS[c]}_{i:04d}"))
    return Dataset(seqs, split=split)


def video_label_vote(segment_predictions, tie_break: str = "higher") -> int:
    """Majority class over window predictions; ties go to the higher (or lower) class."""
    preds = list(segment_predictions)
    if not preds:
        raise ValueError("cannot vote over an empty prediction list")
    counts = Counter(int(p) for p in preds)
    best = max(counts.values())
    tied = [c for c, n in counts.items() if n == best]
    if tie_break == "higher":
        return max(tied)
    if tie_break == "lower":
        return min(tied)
    raise ValueError(f"unknown tie_break {tie_break!r}")
