"""Session data model, CSV/binary ingestion, and train/val/test splitting.

The on-disk container ("cbrs", little-endian) is:

    magic "CBRS" | u32 version=1 | u64 T | u32 n | u32 m | u8 has_discrete |
    u8[3] reserved | u32 K | zero padding to byte offset 64 |
    f32 signal (T*n, row-major) | f32 continuous context (T*m) |
    i32 discrete context (T, present iff has_discrete)

Contexts are stored as float32 on disk and widened to float64 in memory;
writing quantizes to float32, so the round trip is exact precisely for
float32-representable values (spike counts, typical source recordings).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"CBRS"
_VERSION = 1
_HEADER = 64


class DataError(ValueError):
    pass


@dataclass
class Session:
    """One recording: signal series plus optional continuous/discrete context.

    All series share length T; none may contain NaN or infinities. Discrete
    values must be non-negative ints (densely indexable as [0, K)).
    """

    signal: np.ndarray
    continuous_context: np.ndarray | None = None
    discrete_context: np.ndarray | None = None
    sample_rate_hz: float | None = None
    trial_ids: np.ndarray | None = None

    def __post_init__(self):
        self.signal = np.ascontiguousarray(np.asarray(self.signal, dtype=np.float64))
        if self.signal.ndim != 2:
            raise DataError(f"signal must be 2D (T, n), got shape {self.signal.shape}")
        t = self.signal.shape[0]
        if not np.all(np.isfinite(self.signal)):
            raise DataError("signal contains NaN/Inf")
        if self.continuous_context is not None:
            c = np.ascontiguousarray(np.asarray(self.continuous_context, dtype=np.float64))
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != t:
                raise DataError(f"continuous context length {c.shape[0]} != T={t}")
            if not np.all(np.isfinite(c)):
                raise DataError("continuous context contains NaN/Inf")
            self.continuous_context = c
        if self.discrete_context is not None:
            k = np.ascontiguousarray(np.asarray(self.discrete_context))
            if not np.issubdtype(k.dtype, np.integer):
                kf = np.asarray(k, dtype=np.float64)
                if not np.all(np.isfinite(kf)) or np.any(kf != np.rint(kf)):
                    raise DataError("discrete context must be integral")
                k = kf.astype(np.int64)
            else:
                k = k.astype(np.int64)
            if k.ndim != 1 or k.shape[0] != t:
                raise DataError(f"discrete context must be length-T vector, got {k.shape}")
            if k.size and k.min() < 0:
                raise DataError("discrete context values must be non-negative")
            self.discrete_context = k
        if self.trial_ids is not None:
            self.trial_ids = np.asarray(self.trial_ids, dtype=np.int64)
            if self.trial_ids.shape != (t,):
                raise DataError("trial ids must be a length-T vector")

    @property
    def n_samples(self) -> int:
        return self.signal.shape[0]

    @property
    def n_signals(self) -> int:
        return self.signal.shape[1]

    @property
    def n_context(self) -> int:
        return 0 if self.continuous_context is None else self.continuous_context.shape[1]

    @property
    def n_classes(self) -> int:
        if self.discrete_context is None or self.discrete_context.size == 0:
            return 0
        return int(self.discrete_context.max()) + 1

    def slice(self, start: int, stop: int) -> "Session":
        return Session(
            signal=self.signal[start:stop],
            continuous_context=None if self.continuous_context is None
            else self.continuous_context[start:stop],
            discrete_context=None if self.discrete_context is None
            else self.discrete_context[start:stop],
            sample_rate_hz=self.sample_rate_hz,
            trial_ids=None if self.trial_ids is None else self.trial_ids[start:stop],
        )


@dataclass
class MultiSessionDataset:
    """Ordered sessions sharing the continuous-context dimension m
    (signal dimensions n_i may differ)."""

    sessions: list

    def __post_init__(self):
        if not self.sessions:
            raise DataError("dataset needs at least one session")
        m = self.sessions[0].n_context
        for i, s in enumerate(self.sessions):
            if s.n_context != m:
                raise DataError(
                    f"session {i} has context dimension {s.n_context}, expected {m}")

    def __len__(self):
        return len(self.sessions)

    def __getitem__(self, i):
        return self.sessions[i]


ROLES = ("train", "validation", "test")


@dataclass
class SplitPlan:
    """Contiguous [start, stop) segments assigned to train/validation/test.

    Segments must be disjoint, listed in ascending order, and cover [0, T).
    """

    segments: list  # of (start, stop, role)
    fold: int = 0

    def validate(self, t: int):
        prev = 0
        for start, stop, role in self.segments:
            if role not in ROLES:
                raise DataError(f"unknown split role {role!r}")
            if start != prev:
                if start < prev:
                    raise DataError(f"overlapping split ranges at {start}")
                raise DataError(f"split gap at [{prev}, {start})")
            if stop <= start:
                raise DataError(f"empty split range [{start}, {stop})")
            prev = stop
        if prev != t:
            raise DataError(f"split covers [0, {prev}) but session has T={t}")


def split(session: Session, plan: SplitPlan) -> dict:
    """Cut a session into role -> Session; each split keeps its contexts and
    concatenating the pieces in plan order reproduces the input."""
    plan.validate(session.n_samples)
    parts = {role: [] for role in ROLES}
    for start, stop, role in plan.segments:
        parts[role].append(session.slice(start, stop))
    out = {}
    for role, chunks in parts.items():
        if not chunks:
            continue
        out[role] = _concat_sessions(chunks)
    return out


def _concat_sessions(chunks):
    first = chunks[0]
    return Session(
        signal=np.concatenate([c.signal for c in chunks], axis=0),
        continuous_context=None if first.continuous_context is None
        else np.concatenate([c.continuous_context for c in chunks], axis=0),
        discrete_context=None if first.discrete_context is None
        else np.concatenate([c.discrete_context for c in chunks], axis=0),
        sample_rate_hz=first.sample_rate_hz,
        trial_ids=None if first.trial_ids is None
        else np.concatenate([c.trial_ids for c in chunks], axis=0),
    )


def fraction_plan(t: int, train: float = 0.8, validation: float = 0.2,
                  test: float = 0.0) -> SplitPlan:
    """Contiguous front-to-back split by fractions (ratios normalized)."""
    total = train + validation + test
    n_train = int(round(t * train / total))
    n_val = int(round(t * validation / total)) if test > 0 else t - n_train
    segments = [(0, n_train, "train")]
    if n_val > 0:
        segments.append((n_train, n_train + n_val, "validation"))
    if n_train + n_val < t:
        segments.append((n_train + n_val, t, "test"))
    return SplitPlan(segments)


def kfold_plans(t: int, k: int = 3, trial_ids=None) -> list:
    """Nested cross-validation plans: fold i uses block i as test, block
    i+1 (mod k) as validation, the rest as train. Block boundaries are
    aligned to trial boundaries when trial ids are given, so no trial is
    bisected."""
    if trial_ids is not None:
        trial_ids = np.asarray(trial_ids)
        change = np.flatnonzero(np.diff(trial_ids)) + 1
        bounds = np.concatenate([[0], change, [t]])
    else:
        bounds = np.arange(t + 1)
    cuts = [bounds[int(round(i * (len(bounds) - 1) / k))] for i in range(k + 1)]
    plans = []
    for fold in range(k):
        segments = []
        for i in range(k):
            role = "test" if i == fold else (
                "validation" if i == (fold + 1) % k else "train")
            if cuts[i + 1] > cuts[i]:
                segments.append((int(cuts[i]), int(cuts[i + 1]), role))
        plans.append(SplitPlan(segments, fold=fold))
    return plans


# ---------------------------------------------------------------------------
# cbrs container


def write_session(session: Session, path) -> None:
    """Byte-deterministic binary dump (see module docstring for the layout)."""
    t, n = session.signal.shape
    m = session.n_context
    has_discrete = session.discrete_context is not None
    header = struct.pack(
        "<4sIQIIB3xI", _MAGIC, _VERSION, t, n, m,
        1 if has_discrete else 0, session.n_classes if has_discrete else 0)
    header += b"\x00" * (_HEADER - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(session.signal.astype("<f4").tobytes())
        if m:
            fh.write(session.continuous_context.astype("<f4").tobytes())
        if has_discrete:
            fh.write(session.discrete_context.astype("<i4").tobytes())


def read_cbrs(path) -> Session:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a cbrs file")
    version, t, n, m, has_discrete, _k = struct.unpack("<IQIIB3xI", raw[4:32])
    if version != _VERSION:
        raise DataError(f"{path}: unsupported cbrs version {version}")
    expect = _HEADER + 4 * (t * n + t * m) + (4 * t if has_discrete else 0)
    if len(raw) != expect:
        raise DataError(f"{path}: expected {expect} bytes, found {len(raw)}")
    off = _HEADER
    signal = np.frombuffer(raw, "<f4", t * n, off).reshape(t, n).astype(np.float64)
    off += 4 * t * n
    continuous = None
    if m:
        continuous = np.frombuffer(raw, "<f4", t * m, off).reshape(t, m).astype(np.float64)
        off += 4 * t * m
    discrete = None
    if has_discrete:
        discrete = np.frombuffer(raw, "<i4", t, off).astype(np.int64)
    return Session(signal=signal, continuous_context=continuous, discrete_context=discrete)


# ---------------------------------------------------------------------------
# CSV ingestion: header row names columns s0..s{n-1}, c0..c{m-1}, k, trial


def read_csv(path) -> Session:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    s_cols = [i for i, h in enumerate(header) if h.startswith("s") and h[1:].isdigit()]
    c_cols = [i for i, h in enumerate(header) if h.startswith("c") and h[1:].isdigit()]
    k_col = header.index("k") if "k" in header else None
    trial_col = header.index("trial") if "trial" in header else None
    if not s_cols:
        raise DataError(f"{path}: no signal columns (s0..s{{n-1}}) in header")
    s_cols.sort(key=lambda i: int(header[i][1:]))
    c_cols.sort(key=lambda i: int(header[i][1:]))

    width = len(header)
    values = np.empty((len(rows) - 1, width))
    for r, row in enumerate(rows[1:], start=2):  # 1-based rows, header is row 1
        if len(row) != width:
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {width}")
        for i, cell in enumerate(row):
            try:
                values[r - 2, i] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[i]!r}: "
                                f"non-numeric cell {cell!r}") from None
        if not np.all(np.isfinite(values[r - 2])):
            raise DataError(f"{path}: row {r} contains NaN/Inf")

    return Session(
        signal=values[:, s_cols],
        continuous_context=values[:, c_cols] if c_cols else None,
        discrete_context=values[:, k_col].astype(np.int64) if k_col is not None else None,
        trial_ids=values[:, trial_col].astype(np.int64) if trial_col is not None else None,
    )


def load_session(path, fmt: str | None = None) -> Session:
    """Load a session; format inferred from the extension unless given."""
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "cbrs"
    if fmt == "csv":
        return read_csv(path)
    if fmt == "cbrs":
        return read_cbrs(path)
    raise DataError(f"unknown format {fmt!r}")
