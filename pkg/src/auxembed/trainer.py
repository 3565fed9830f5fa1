"""Optimization loop: sampler + encoder + criterion, with Adam updates.

Joint multi-session training couples one encoder per session through a
shared loss (references, positives, and negatives are spread across
sessions; the encoders share no weights). Adaptation re-initializes the
input layer for a new session's dimensionality and fine-tunes either that
layer alone or the full model.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import objective
from .data import MultiSessionDataset, Session
from .encoder import ArchSpec, EncoderModel, build_encoder
from .sampling import SamplerConfig, TripletSampler
from .tensorops import GradTape, LayerSpec, init_params

TRAIN_MODES = ("time", "discrete", "continuous", "mixed", "hybrid")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message="loss became non-finite"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "continuous"
    output_dimension: int = 8
    num_hidden_units: int = 32
    batch_size: int = 1024
    learning_rate: float = 3e-4
    max_iterations: int = 1000
    temperature: float = 1.0
    num_negatives: int | None = None  # None -> batch_size
    seed: int = 0
    full_batch: bool = False
    receptive_field: int = 10
    time_offsets: tuple = tuple(range(1, 11))
    uniform_over_discrete: bool = False
    similarity: str = "dot"
    hybrid_split: tuple | None = None  # None -> (ceil(d/2), floor(d/2))
    difference_set_cap: int = 1_000_000

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        for name in ("output_dimension", "num_hidden_units", "batch_size",
                     "learning_rate", "max_iterations", "temperature"):
            if getattr(self, name) < 0 or (getattr(self, name) <= 0 and
                                           name not in ("max_iterations",)):
                raise ValueError(f"{name} must be positive")
        if self.similarity not in ("dot", "neg_mse"):
            raise ValueError(f"unknown similarity {self.similarity!r}")

    @property
    def effective_negatives(self) -> int:
        return self.batch_size if self.num_negatives is None else self.num_negatives

    @property
    def split(self):
        d = self.output_dimension
        if self.hybrid_split is None:
            return ((d + 1) // 2, d // 2)
        return tuple(self.hybrid_split)

    def sampler_config(self, n_sessions: int) -> SamplerConfig:
        mode = self.mode
        if mode == "hybrid":
            mode = "continuous"
        if n_sessions > 1:
            if mode != "continuous":
                raise ValueError(
                    "joint multi-session training requires continuous-context mode")
            mode = "multisession"
        return SamplerConfig(mode=mode, time_offsets=tuple(self.time_offsets),
                             uniform_over_discrete=self.uniform_over_discrete,
                             num_negatives=self.effective_negatives,
                             difference_set_cap=self.difference_set_cap)


@dataclass
class TrainRecord:
    steps: list
    wall_clock: float
    model_id: str

    def totals(self):
        return np.array([r.total for r in self.steps])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "total", "pos_term", "neg_term"])
            for i, r in enumerate(self.steps):
                w.writerow([i, repr(r.total), repr(r.positive_term),
                            repr(r.negative_term)])


def infer_mode(session: Session) -> str:
    """Training mode from available contexts (explicit flags override)."""
    has_c = session.continuous_context is not None
    has_k = session.discrete_context is not None
    if has_c and has_k:
        return "mixed"
    if has_c:
        return "continuous"
    if has_k:
        return "discrete"
    return "time"


def adam_step(params, grads, state, lr, step,
              beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """In-place Adam update with bias correction over one parameter dict."""
    for key, g in grads.items():
        m, v = state[key]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** step)
        vhat = v / (1 - beta2 ** step)
        params[key] -= lr * mhat / (np.sqrt(vhat) + eps)


def _gather_windows(signal, idx, rf):
    if rf == 1:
        return signal[idx][:, :, None]
    offs = np.arange(-(rf - 1), 1)
    return signal[idx[:, None] + offs[None, :]].transpose(0, 2, 1)


class _SessionBatch:
    """Group a triplet's window indices by session, embed them with one tape
    per session, and route gradients back."""

    def __init__(self, models, sessions, trip, hybrid):
        self.models = models
        self.handles = []
        b = len(trip.ref_idx)
        n_neg = len(trip.neg_idx)
        d = models[0].arch.output_dim
        self.ref = np.empty((b, d))
        self.pos = np.empty((b, d))
        self.neg = np.empty((n_neg, d))
        self.pos_time = np.empty((b, d)) if hybrid else None
        rf = models[0].arch.receptive_field

        def rows_of(session_arr, count, s):
            if session_arr is None:
                return np.arange(count) if s == 0 else np.empty(0, dtype=np.int64)
            return np.flatnonzero(session_arr == s)

        for s, (model, sess) in enumerate(zip(models, sessions)):
            r_rows = rows_of(trip.ref_session, b, s)
            p_rows = rows_of(trip.pos_session if trip.pos_session is not None
                             else trip.ref_session, b, s)
            n_rows = rows_of(trip.neg_session, n_neg, s)
            groups = [(self.ref, r_rows, trip.ref_idx[r_rows]),
                      (self.pos, p_rows, trip.pos_idx[p_rows]),
                      (self.neg, n_rows, trip.neg_idx[n_rows])]
            if hybrid:
                groups.append((self.pos_time, r_rows, trip.pos_time_idx[r_rows]))
            idx_all = np.concatenate([g[2] for g in groups])
            if len(idx_all) == 0:
                self.handles.append(None)
                continue
            windows = _gather_windows(sess.signal, idx_all, rf)
            tape = GradTape()
            emb = model.forward_batch(windows, tape)
            off = 0
            for target, rows, idx in groups:
                target[rows] = emb[off:off + len(idx)]
                off += len(idx)
            self.handles.append((tape, [(g[0], g[1]) for g in groups]))

    def backward(self, dref, dpos, dneg, dpos_time=None):
        """Per-session parameter gradients from the loss gradients."""
        out = []
        for s, handle in enumerate(self.handles):
            if handle is None:
                out.append(None)
                continue
            tape, groups = handle
            pieces = []
            dmap = {id(self.ref): dref, id(self.pos): dpos, id(self.neg): dneg}
            if self.pos_time is not None:
                dmap[id(self.pos_time)] = dpos_time
            for target, rows in groups:
                pieces.append(dmap[id(target)][rows])
            out.append(self.models[s].backprop(tape, np.concatenate(pieces)))
        return out


def _loss_and_grads(batch: _SessionBatch, config: TrainConfig):
    if config.mode == "hybrid":
        report, (dref, dpb, dpt, dneg) = objective.hybrid_loss(
            batch.ref, batch.pos, batch.pos_time, batch.neg,
            config.temperature, config.split, kind=config.similarity,
            with_grads=True)
        return report, (dref, dpb, dneg, dpt)
    report, (dref, dpos, dneg) = objective.infonce_loss(
        batch.ref, batch.pos, batch.neg, config.temperature,
        kind=config.similarity, with_grads=True)
    return report, (dref, dpos, dneg, None)


def _normalize_sessions(data):
    if isinstance(data, Session):
        return [data], True
    if isinstance(data, MultiSessionDataset):
        return list(data.sessions), False
    return list(data), False


def _seeds(config, n_sessions):
    state = np.random.SeedSequence(config.seed).generate_state(n_sessions + 1)
    return [int(s) for s in state[:n_sessions]], int(state[n_sessions])


def fit(data, config: TrainConfig):
    """Train encoder(s) on one session or jointly on several.

    Returns ``(model, record)`` for a single session and
    ``(models, record)`` for a list of sessions. Deterministic given
    ``config.seed``; raises TrainingDiverged if the loss becomes NaN.
    """
    sessions, single = _normalize_sessions(data)
    enc_seeds, samp_seed = _seeds(config, len(sessions))
    models = [build_encoder(
        ArchSpec(config.receptive_field, s.n_signals, config.num_hidden_units,
                 config.output_dimension,
                 normalize_output=config.similarity == "dot"), enc_seeds[i])
        for i, s in enumerate(sessions)]
    record = _train_loop(models, sessions, config,
                         np.random.default_rng(samp_seed),
                         trainable=None)
    return (models[0] if single else models), record


def _train_loop(models, sessions, config, rng, trainable=None):
    dataset = MultiSessionDataset(sessions)
    sampler = TripletSampler(dataset, config.sampler_config(len(sessions)),
                             config.receptive_field, rng,
                             hybrid=config.mode == "hybrid")
    if trainable is None:
        trainable = [list(range(len(m.parametric_entries()))) for m in models]
    states = []
    for model in models:
        states.append([{k: (np.zeros_like(v), np.zeros_like(v))
                        for k, v in p.items()}
                       for _, _, p in model.parametric_entries()])
    curve = []
    started = time.perf_counter()
    for step in range(config.max_iterations):
        trip = sampler.draw_full() if config.full_batch \
            else sampler.draw(config.batch_size)
        batch = _SessionBatch(models, sessions, trip, config.mode == "hybrid")
        report, (dref, dpos, dneg, dpt) = _loss_and_grads(batch, config)
        if not math.isfinite(report.total):
            raise TrainingDiverged(step)
        curve.append(report)
        grads_all = batch.backward(dref, dpos, dneg, dpt)
        for model, grads, state, idxs in zip(models, grads_all, states, trainable):
            if grads is None:
                continue
            entries = model.parametric_entries()
            for i in idxs:
                _, _, params = entries[i]
                adam_step(params, grads[i], state[i], config.learning_rate,
                          step + 1)
    wall = time.perf_counter() - started
    model_id = "+".join(m.content_hash()[:16] for m in models)
    return TrainRecord(steps=curve, wall_clock=wall, model_id=model_id)


def adapt(model: EncoderModel, new_session: Session, mode: str,
          config: TrainConfig):
    """Fit a pretrained model to a new session.

    ``input_only`` re-initializes the first layer (resized to the new signal
    dimensionality) and trains it alone; ``full`` resizes the first layer
    and trains everything. Returns (adapted model, record).
    """
    if mode not in ("input_only", "full"):
        raise ValueError(f"unknown adaptation mode {mode!r}")
    if config.receptive_field != model.arch.receptive_field:
        raise ValueError(
            f"receptive-field mismatch: model {model.arch.receptive_field}, "
            f"config {config.receptive_field}")
    adapted = model.clone()
    adapted.arch = replace(model.arch, input_dim=new_session.n_signals)
    first_pos, first_spec, _ = adapted.parametric_entries()[0]
    new_spec = LayerSpec(first_spec.kind, new_session.n_signals,
                         first_spec.out_dim, first_spec.kernel_size,
                         first_spec.stride)
    enc_seeds, samp_seed = _seeds(config, 1)
    adapted.chain[first_pos] = new_spec
    adapted.params[first_pos] = init_params(new_spec,
                                            np.random.default_rng(enc_seeds[0]))
    trainable = [[0] if mode == "input_only"
                 else list(range(len(adapted.parametric_entries())))]
    record = _train_loop([adapted], [new_session], config,
                         np.random.default_rng(samp_seed), trainable=trainable)
    return adapted, record


def evaluate_loss(models, sessions, config: TrainConfig, seed: int,
                  batches: int = 4, batch_size: int | None = None) -> float:
    """Mean criterion value over freshly sampled seeded triplets (no
    gradients); a paired yardstick for comparing models on a dataset."""
    if isinstance(models, EncoderModel):
        models = [models]
    sessions, _ = _normalize_sessions(sessions)
    rng = np.random.default_rng(seed)
    sampler = TripletSampler(MultiSessionDataset(sessions),
                             config.sampler_config(len(sessions)),
                             config.receptive_field, rng,
                             hybrid=config.mode == "hybrid")
    totals = []
    for _ in range(batches):
        trip = sampler.draw(batch_size or config.batch_size)
        batch = _SessionBatch(models, sessions, trip, config.mode == "hybrid")
        report, _ = _loss_and_grads(batch, config)
        totals.append(report.total)
    return float(np.mean(totals))
