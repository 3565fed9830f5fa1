"""Reference/positive/negative index sampling for every training mode.

Indices are time steps; a window ending at time t is valid when
``t >= receptive_field - 1``. Reference samples are drawn uniformly over
the valid positions of the whole series (never from a pre-drawn
mini-batch). Negatives are drawn with replacement and shared across the
batch. The positive conditional depends on the mode:

* ``time``       -- positive at ``ref + tau`` with tau uniform over the offset set
* ``discrete``   -- uniform over other samples with the same categorical value
* ``continuous`` -- empirical difference set: draw d from
                    ``D = {c(t) - c(t+tau)}``, return the sample whose context
                    is nearest to ``c(ref) - d`` (ties -> smallest index)
* ``mixed``      -- continuous scheme restricted to the reference's category
* ``multisession`` -- continuous scheme with reference/positive/negative
                    sessions spread uniformly across sessions and matching
                    done in the shared context space

A single session is treated as a one-session dataset throughout, without
consuming any session-choice randomness, so single- and multi-session code
paths produce identical streams for one session.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MultiSessionDataset, Session

MODES = ("time", "discrete", "continuous", "mixed", "multisession")
_NO_INDEX = np.iinfo(np.int64).max


class SamplingError(ValueError):
    pass


@dataclass
class SamplerConfig:
    mode: str
    time_offsets: tuple = tuple(range(1, 11))
    uniform_over_discrete: bool = False
    num_negatives: int = 1
    distance: str = "euclidean"
    difference_set_cap: int = 1_000_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise SamplingError(f"unknown sampling mode {self.mode!r}")
        if not self.time_offsets or min(self.time_offsets) < 1:
            raise SamplingError("time offsets must be a non-empty set of positive ints")
        if self.num_negatives < 1:
            raise SamplingError("need at least one negative sample")
        if self.distance != "euclidean":
            raise SamplingError(f"unsupported context distance {self.distance!r}")


@dataclass
class BatchTriplet:
    """Index-resolved batch: (B,) references and positives, (n,) negatives
    shared across the batch. Session arrays are None for single sessions.
    ``pos_time_idx`` carries the second positive set in hybrid training."""

    ref_idx: np.ndarray
    pos_idx: np.ndarray
    neg_idx: np.ndarray
    ref_session: np.ndarray | None = None
    pos_session: np.ndarray | None = None
    neg_session: np.ndarray | None = None
    pos_time_idx: np.ndarray | None = None


def window_start(receptive_field: int) -> int:
    return receptive_field - 1


def reference_range(t: int, receptive_field: int, max_offset: int = 0):
    """Half-open range of valid reference times; ``max_offset`` reserves room
    for time-mode positives."""
    lo = window_start(receptive_field)
    hi = t - max_offset
    if hi <= lo:
        raise SamplingError(
            f"no valid reference positions: T={t}, receptive_field={receptive_field},"
            f" max_offset={max_offset}")
    return lo, hi


def sample_reference(t, receptive_field, batch, rng, max_offset=0):
    """Uniform over valid window positions of the entire series."""
    if batch < 1:
        raise SamplingError("batch must be >= 1")
    lo, hi = reference_range(t, receptive_field, max_offset)
    return rng.integers(lo, hi, size=batch)


def sample_positive_time(ref_idx, offsets, t, receptive_field, rng):
    """Positives at ``ref + tau`` with tau uniform over the offset set.

    References whose drawn offset would run past the series end are
    resampled (uniformly over the time-mode-valid range) together with a
    fresh offset; callers that restrict references up front never hit this.
    Returns (possibly resampled references, positives).
    """
    offsets = np.asarray(sorted(offsets))
    ref = np.array(ref_idx, dtype=np.int64, copy=True)
    lo, hi = reference_range(t, receptive_field, int(offsets.max()))
    if np.any(ref < window_start(receptive_field)) or np.any(ref >= t):
        raise SamplingError("reference index outside the valid window range")
    tau = offsets[rng.integers(0, len(offsets), size=ref.shape[0])]
    for _ in range(64):
        bad = ref + tau >= t
        if not bad.any():
            break
        ref[bad] = rng.integers(lo, hi, size=int(bad.sum()))
        tau[bad] = offsets[rng.integers(0, len(offsets), size=int(bad.sum()))]
    return ref, ref + tau


class _ClassIndex:
    """Per-category member lists over a fixed candidate index range."""

    def __init__(self, k_series, valid_lo):
        k = np.asarray(k_series)
        idx = np.arange(valid_lo, len(k))
        self.members = {}
        for value in np.unique(k[valid_lo:]):
            self.members[int(value)] = idx[k[valid_lo:] == value]

    def draw_excluding(self, value, ref, rng):
        mem = self.members.get(int(value))
        if mem is None or len(mem) < 2:
            raise SamplingError(
                f"discrete class {int(value)} has no partner sample")
        pos_in = int(np.searchsorted(mem, ref))
        j = int(rng.integers(0, len(mem) - 1))
        if j >= pos_in:
            j += 1
        return int(mem[j])


def sample_positive_discrete(ref_idx, k_series, rng, valid_lo=0):
    """Uniform over other valid samples sharing the reference's category."""
    classes = _ClassIndex(k_series, valid_lo)
    k = np.asarray(k_series)
    return np.array([classes.draw_excluding(k[r], r, rng) for r in ref_idx],
                    dtype=np.int64)


class _NearestIndex:
    """Exact nearest-context lookup over a fixed candidate index set.

    Ties resolve to the smallest original index. Scalar contexts use a
    sorted-value pool search (O(log n) per query); higher dimensions fall
    back to chunked brute force with the same tie rule.
    """

    def __init__(self, values, indices):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("candidate context values must be (n, m)")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.scalar = self.values.shape[1] == 1
        if self.scalar:
            v = self.values[:, 0]
            order = np.lexsort((self.indices, v))
            self.sv = v[order]
            self.si = self.indices[order]

    def query(self, targets, exclude=None):
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim != 2:
            raise ValueError("query targets must be (batch, m)")
        if exclude is None:
            exclude = np.full(targets.shape[0], -1, dtype=np.int64)
        if self.scalar:
            out = self._query_scalar(targets[:, 0], exclude)
        else:
            out = self._query_brute(targets, exclude)
        if np.any(out == _NO_INDEX):
            raise SamplingError("no valid candidate for a positive sample")
        return out

    def _query_scalar(self, x, exclude):
        sv, si = self.sv, self.si
        m = len(sv)
        ip = np.searchsorted(sv, x, side="left")
        has_lo = ip > 0
        has_hi = ip < m
        a_val = sv[np.clip(ip - 1, 0, m - 1)]
        rs_a = np.searchsorted(sv, a_val, side="left")
        has_a2 = has_lo & (rs_a > 0)
        a2_val = sv[np.clip(rs_a - 1, 0, m - 1)]
        rs_a2 = np.searchsorted(sv, a2_val, side="left")
        b_val = sv[np.clip(ip, 0, m - 1)]
        re_b = np.searchsorted(sv, b_val, side="right")
        # candidate pool: first/second of the runs flanking the insertion
        # point plus the first entry of the next distinct value on each side;
        # this always contains the optimum even after excluding one index
        pos = np.stack([rs_a, rs_a + 1, rs_a2, ip, ip + 1, re_b], axis=1)
        ok = np.stack([
            has_lo, has_lo & (rs_a + 1 < m), has_a2,
            has_hi, has_hi & (ip + 1 < m), has_hi & (re_b < m)], axis=1)
        pos = np.clip(pos, 0, m - 1)
        vals = sv[pos]
        orig = si[pos]
        ok &= orig != exclude[:, None]
        dist = np.where(ok, np.abs(vals - x[:, None]), np.inf)
        dmin = dist.min(axis=1)
        best = np.where(dist == dmin[:, None], orig, _NO_INDEX)
        out = best.min(axis=1)
        out[~np.isfinite(dmin)] = _NO_INDEX
        return out

    def _query_brute(self, targets, exclude, chunk=256):
        out = np.empty(targets.shape[0], dtype=np.int64)
        for s in range(0, targets.shape[0], chunk):
            tgt = targets[s:s + chunk]
            diff = self.values[None, :, :] - tgt[:, None, :]
            dist = np.sum(diff * diff, axis=2)
            dist[self.indices[None, :] == exclude[s:s + chunk, None]] = np.inf
            rows = np.arange(tgt.shape[0])
            pick = np.argmin(dist, axis=1)  # first occurrence = smallest index
            good = np.isfinite(dist[rows, pick])
            out[s:s + chunk] = np.where(good, self.indices[pick], _NO_INDEX)
        return out


class _DiffSet:
    """Empirical context-difference set D = {c(t) - c(t + tau)}, pooled over
    sessions; materialized fully below the cap, uniformly subsampled above."""

    def __init__(self, contexts, offsets, cap, rng):
        diffs = []
        for c in contexts:
            for tau in sorted(offsets):
                if tau < len(c):
                    diffs.append(c[:-tau] - c[tau:])
        if not diffs:
            raise SamplingError("time offsets leave the difference set empty")
        d = np.concatenate(diffs, axis=0)
        if len(d) > cap:
            d = d[rng.choice(len(d), size=cap, replace=False)]
        self.d = d

    def draw(self, batch, rng):
        return self.d[rng.integers(0, len(self.d), size=batch)]


def sample_positive_continuous(ref_idx, c_series, offsets, rng, valid_lo=0,
                               cap=1_000_000):
    """Difference-set conditional over a single scalar/vector context series."""
    c = np.atleast_2d(np.asarray(c_series, dtype=np.float64))
    if c.shape[0] == 1:
        c = c.T
    dset = _DiffSet([c], offsets, cap, rng)
    near = _NearestIndex(c[valid_lo:], np.arange(valid_lo, len(c)))
    ref = np.asarray(ref_idx, dtype=np.int64)
    d = dset.draw(len(ref), rng)
    return near.query(c[ref] - d, exclude=ref)


def sample_positive_mixed(ref_idx, c_series, k_series, offsets, rng,
                          valid_lo=0, cap=1_000_000):
    """Continuous conditional with candidates restricted to the reference's
    category."""
    c = np.atleast_2d(np.asarray(c_series, dtype=np.float64))
    if c.shape[0] == 1:
        c = c.T
    k = np.asarray(k_series)
    dset = _DiffSet([c], offsets, cap, rng)
    ref = np.asarray(ref_idx, dtype=np.int64)
    d = dset.draw(len(ref), rng)
    targets = c[ref] - d
    idx_all = np.arange(valid_lo, len(c))
    out = np.empty(len(ref), dtype=np.int64)
    for value in np.unique(k[ref]):
        rows = np.flatnonzero(k[ref] == value)
        members = idx_all[k[valid_lo:] == value]
        if len(members) == 0 or (len(members) == 1 and members[0] in ref[rows]):
            raise SamplingError(f"discrete class {int(value)} has no partner sample")
        near = _NearestIndex(c[members], members)
        out[rows] = near.query(targets[rows], exclude=ref[rows])
    return out


def sample_negatives(t, receptive_field, n, rng, k_series=None,
                     uniform_over_discrete=False):
    """n indices with replacement, shared by the whole batch.

    Default: uniform over valid positions. With ``uniform_over_discrete``,
    observed categories are made equiprobable (cumulative-histogram
    inversion) and members are uniform within each category.
    """
    if n < 1:
        raise SamplingError("need at least one negative sample")
    lo, hi = reference_range(t, receptive_field)
    if not uniform_over_discrete:
        return rng.integers(lo, hi, size=n)
    if k_series is None:
        raise SamplingError("uniform_over_discrete requires a discrete context")
    k = np.asarray(k_series)
    classes = np.unique(k[lo:])
    pick = classes[rng.integers(0, len(classes), size=n)]
    idx_all = np.arange(lo, hi)
    out = np.empty(n, dtype=np.int64)
    for value in classes:  # ascending class order keeps draws deterministic
        rows = np.flatnonzero(pick == value)
        if len(rows) == 0:
            continue
        members = idx_all[k[lo:] == value]
        out[rows] = members[rng.integers(0, len(members), size=len(rows))]
    return out


class TripletSampler:
    """Stateful sampler bound to a dataset, mode, and seeded generator.

    One sampler per training run; draw order within a batch is fixed
    (references, positive conditionals, negatives), so identical seeds give
    identical triplet streams.
    """

    def __init__(self, dataset, config: SamplerConfig, receptive_field: int,
                 rng: np.random.Generator, hybrid: bool = False):
        if isinstance(dataset, Session):
            dataset = MultiSessionDataset([dataset])
        self.dataset = dataset
        self.config = config
        self.rf = receptive_field
        self.rng = rng
        self.hybrid = hybrid
        self.n_sessions = len(dataset)
        if config.mode == "multisession" and dataset[0].n_context == 0:
            raise SamplingError("multisession sampling needs a shared continuous context")
        if config.mode != "multisession" and self.n_sessions > 1:
            raise SamplingError(f"mode {config.mode!r} expects a single session")

        max_off = max(config.time_offsets)
        for i, s in enumerate(dataset.sessions):
            if max_off >= s.n_samples - receptive_field:
                raise SamplingError(
                    f"session {i}: max time offset {max_off} must be below "
                    f"T - receptive_field = {s.n_samples - receptive_field}")

        need_continuous = config.mode in ("continuous", "mixed", "multisession")
        need_discrete = config.mode in ("discrete", "mixed") or config.uniform_over_discrete
        for i, s in enumerate(dataset.sessions):
            if need_continuous and s.continuous_context is None:
                raise SamplingError(f"session {i}: mode {config.mode!r} needs "
                                    "a continuous_context")
            if need_discrete and s.discrete_context is None:
                raise SamplingError(f"session {i}: a discrete_context is required")

        lo = window_start(receptive_field)
        reserve = max_off if (config.mode == "time" or hybrid) else 0
        self._ranges = [reference_range(s.n_samples, receptive_field, reserve)
                        for s in dataset.sessions]
        if need_continuous:
            self._diffs = _DiffSet([s.continuous_context for s in dataset.sessions],
                                   config.time_offsets, config.difference_set_cap,
                                   rng)
            self._near = [_NearestIndex(s.continuous_context[lo:],
                                        np.arange(lo, s.n_samples))
                          for s in dataset.sessions]
        if config.mode == "mixed":
            s = dataset[0]
            self._class_near = {}
            idx_all = np.arange(lo, s.n_samples)
            for value in np.unique(s.discrete_context[lo:]):
                members = idx_all[s.discrete_context[lo:] == value]
                self._class_near[int(value)] = _NearestIndex(
                    s.continuous_context[members], members)
        if config.mode == "discrete":
            self._classes = _ClassIndex(dataset[0].discrete_context, lo)

    # -- pieces ------------------------------------------------------------

    def _draw_refs(self, batch):
        """Stratified references: the same number from each session."""
        counts = np.full(self.n_sessions, batch // self.n_sessions)
        counts[: batch % self.n_sessions] += 1
        refs, sessions = [], []
        for s, count in enumerate(counts):
            if count == 0:
                continue
            lo, hi = self._ranges[s]
            refs.append(self.rng.integers(lo, hi, size=count))
            sessions.append(np.full(count, s))
        refs = np.concatenate(refs)
        if self.n_sessions == 1:
            return refs, None
        return refs, np.concatenate(sessions)

    def _continuous_positives(self, refs, ref_sessions):
        if self.n_sessions == 1:
            c = self.dataset[0].continuous_context
            d = self._diffs.draw(len(refs), self.rng)
            return self._near[0].query(c[refs] - d, exclude=refs), None
        pos_sessions = self.rng.integers(0, self.n_sessions, size=len(refs))
        d = self._diffs.draw(len(refs), self.rng)
        targets = np.empty((len(refs), self.dataset[0].n_context))
        for s in range(self.n_sessions):
            rows = np.flatnonzero(ref_sessions == s)
            if len(rows):
                targets[rows] = self.dataset[s].continuous_context[refs[rows]]
        targets -= d
        pos = np.empty(len(refs), dtype=np.int64)
        for s in range(self.n_sessions):
            rows = np.flatnonzero(pos_sessions == s)
            if len(rows) == 0:
                continue
            exclude = np.where(ref_sessions[rows] == s, refs[rows], -1)
            pos[rows] = self._near[s].query(targets[rows], exclude=exclude)
        return pos, pos_sessions

    def _time_positives(self, refs):
        offsets = np.asarray(sorted(self.config.time_offsets))
        tau = offsets[self.rng.integers(0, len(offsets), size=len(refs))]
        return refs + tau

    def _draw_negatives(self, n):
        if self.n_sessions == 1:
            s = self.dataset[0]
            return sample_negatives(
                s.n_samples, self.rf, n, self.rng,
                k_series=s.discrete_context,
                uniform_over_discrete=self.config.uniform_over_discrete), None
        neg_sessions = self.rng.integers(0, self.n_sessions, size=n)
        neg = np.empty(n, dtype=np.int64)
        lo = window_start(self.rf)
        for s in range(self.n_sessions):
            rows = np.flatnonzero(neg_sessions == s)
            if len(rows):
                neg[rows] = self.rng.integers(lo, self.dataset[s].n_samples,
                                              size=len(rows))
        return neg, neg_sessions

    # -- public ------------------------------------------------------------

    def _positives(self, refs, ref_sessions):
        mode = self.config.mode
        if mode == "time":
            return self._time_positives(refs), None
        if mode == "discrete":
            k = self.dataset[0].discrete_context
            return np.array([self._classes.draw_excluding(k[r], r, self.rng)
                             for r in refs], dtype=np.int64), None
        if mode in ("continuous", "multisession"):
            return self._continuous_positives(refs, ref_sessions)
        if mode == "mixed":
            s = self.dataset[0]
            d = self._diffs.draw(len(refs), self.rng)
            targets = s.continuous_context[refs] - d
            pos = np.empty(len(refs), dtype=np.int64)
            for value in np.unique(s.discrete_context[refs]):
                rows = np.flatnonzero(s.discrete_context[refs] == value)
                near = self._class_near.get(int(value))
                if near is None:
                    raise SamplingError(f"discrete class {value} has no members")
                pos[rows] = near.query(targets[rows], exclude=refs[rows])
            return pos, None
        raise SamplingError(mode)  # pragma: no cover

    def draw(self, batch: int) -> BatchTriplet:
        if batch < 1:
            raise SamplingError("batch must be >= 1")
        refs, ref_sessions = self._draw_refs(batch)
        pos, pos_sessions = self._positives(refs, ref_sessions)
        pos_time = self._time_positives(refs) if self.hybrid else None
        neg, neg_sessions = self._draw_negatives(self.config.num_negatives)
        return BatchTriplet(ref_idx=refs, pos_idx=pos, neg_idx=neg,
                            ref_session=ref_sessions, pos_session=pos_sessions,
                            neg_session=neg_sessions, pos_time_idx=pos_time)

    def draw_full(self) -> BatchTriplet:
        """Whole-dataset batch: every valid position is a reference and a
        negative; positives are drawn from the conditional as usual."""
        refs, sessions = [], []
        for s, (lo, hi) in enumerate(self._ranges):
            refs.append(np.arange(lo, hi))
            sessions.append(np.full(hi - lo, s))
        refs = np.concatenate(refs)
        ref_sessions = np.concatenate(sessions) if self.n_sessions > 1 else None
        pos, pos_sessions = self._positives(refs, ref_sessions)
        pos_time = self._time_positives(refs) if self.hybrid else None
        lo_w = window_start(self.rf)
        negs = [np.arange(lo_w, s.n_samples) for s in self.dataset.sessions]
        neg = np.concatenate(negs)
        neg_sessions = None
        if self.n_sessions > 1:
            neg_sessions = np.concatenate(
                [np.full(len(a), s) for s, a in enumerate(negs)])
        return BatchTriplet(ref_idx=refs, pos_idx=pos, neg_idx=neg,
                            ref_session=ref_sessions, pos_session=pos_sessions,
                            neg_session=neg_sessions, pos_time_idx=pos_time)


def sample_multisession(dataset: MultiSessionDataset, config: SamplerConfig,
                        receptive_field: int, batch: int,
                        rng: np.random.Generator) -> BatchTriplet:
    """One multi-session batch; see :class:`TripletSampler` for semantics."""
    cfg = SamplerConfig(mode="multisession", time_offsets=config.time_offsets,
                        uniform_over_discrete=config.uniform_over_discrete,
                        num_negatives=config.num_negatives,
                        difference_set_cap=config.difference_set_cap)
    return TripletSampler(dataset, cfg, receptive_field, rng).draw(batch)
