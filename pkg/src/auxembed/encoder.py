"""Encoder architectures, window embedding, and whole-session transforms.

Three architectures, keyed by receptive field (the number of consecutive
samples consumed per embedded point):

* 1  -- four dense layers with a half-width bottleneck before the output
* 10 -- five valid convolutions: kernel 2, then three kernel-3 blocks with
        skip connections, then a kernel-3 output layer
* 40 -- a learnable downsample pair (kernel 4 stride 2, then kernel 3
        stride 2, no activation in between; the series is subsampled 4x),
        followed by the same three skip blocks and output layer as above

GELU follows every layer except the last; the output is L2-normalized
unless the similarity is squared-error based. Windows are causal: the
window for time t ends at t.

Training uses batched kernels. Inference (``embed``/``transform_series``)
evaluates strictly per window and contracts the first layer with an
order-independent reduction, so outputs are independent of batch context
and bit-identical under a simultaneous permutation of input channels and
first-layer weights.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T

RECEPTIVE_FIELDS = (1, 10, 40)
_MODEL_MAGIC = b"CBRM"
_MODEL_VERSION = 1


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    receptive_field: int
    input_dim: int
    hidden_dim: int = 32
    output_dim: int = 8
    normalize_output: bool = True

    def __post_init__(self):
        if self.receptive_field not in RECEPTIVE_FIELDS:
            raise EncoderError(
                f"receptive_field must be one of {RECEPTIVE_FIELDS}, "
                f"got {self.receptive_field}")
        if min(self.input_dim, self.hidden_dim, self.output_dim) <= 0:
            raise EncoderError("all dimensions must be positive")
        if self.receptive_field == 1 and self.hidden_dim % 2:
            raise EncoderError(
                f"hidden_dim must be even for the bottleneck, got {self.hidden_dim}")


@dataclass
class Embedding:
    """Encoder outputs aligned to valid time steps: row i embeds the window
    ending at time ``first_index + i``."""

    values: np.ndarray
    first_index: int

    def __len__(self):
        return self.values.shape[0]

    def align(self, series):
        """Slice a length-T series to the rows of this embedding."""
        return np.asarray(series)[self.first_index:self.first_index + len(self)]


def _build_chain(arch: ArchSpec):
    n, h, d = arch.input_dim, arch.hidden_dim, arch.output_dim
    if arch.receptive_field == 1:
        chain = [
            T.LayerSpec("linear", n, h), T.LayerSpec("gelu"),
            T.LayerSpec("linear", h, h), T.LayerSpec("gelu"),
            T.LayerSpec("linear", h, h // 2), T.LayerSpec("gelu"),
            T.LayerSpec("linear", h // 2, d),
        ]
    else:
        if arch.receptive_field == 10:
            chain = [T.LayerSpec("conv1d", n, h, kernel_size=2), T.LayerSpec("gelu")]
        else:
            chain = [
                T.LayerSpec("downsample_conv", n, h, kernel_size=4, stride=2),
                T.LayerSpec("downsample_conv", h, h, kernel_size=3, stride=2),
                T.LayerSpec("gelu"),
            ]
        for _ in range(3):
            chain += [T.LayerSpec("conv1d", h, h, kernel_size=3),
                      T.LayerSpec("gelu"), T.LayerSpec("skip_add")]
        chain.append(T.LayerSpec("conv1d", h, d, kernel_size=3))
    if arch.normalize_output:
        chain.append(T.LayerSpec("l2_normalize"))
    return chain


@dataclass
class EncoderModel:
    arch: ArchSpec
    chain: list
    params: list
    seed: int

    @property
    def is_convolutional(self) -> bool:
        return self.arch.receptive_field > 1

    def parametric_entries(self):
        """(chain position, spec, params) for every layer that owns weights."""
        return [(i, spec, p) for i, (spec, p) in enumerate(zip(self.chain, self.params))
                if spec.kind in T.PARAMETRIC_KINDS]

    def forward_batch(self, windows, tape=None):
        """Embed a batch of windows (B, n, rf) with the batched kernels."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (self.arch.input_dim,
                                                      self.arch.receptive_field):
            raise T.ShapeMismatch(
                f"expected windows (B, {self.arch.input_dim}, "
                f"{self.arch.receptive_field}), got {windows.shape}")
        x = windows[:, :, 0] if not self.is_convolutional else windows
        out = T.run_chain(self.chain, self.params, x, tape)
        return out[:, :, 0] if self.is_convolutional else out

    def backprop(self, tape, grad):
        """Backward pass for forward_batch's (B, d) gradient; returns the
        per-parametric-layer gradient list (aligned with parametric_entries)."""
        g = grad[:, :, None] if self.is_convolutional else grad
        node_grads, _ = tape.backward(g)
        return [g for g in node_grads if g is not None]

    def clone(self):
        return EncoderModel(self.arch, list(self.chain),
                            [{k: v.copy() for k, v in p.items()} for p in self.params],
                            self.seed)

    def content_hash(self) -> str:
        blob = b"".join(p[k].tobytes() for p in self.params for k in sorted(p))
        return hashlib.sha256(blob).hexdigest()


def build_encoder(arch: ArchSpec, seed: int) -> EncoderModel:
    rng = np.random.default_rng(seed)
    chain = _build_chain(arch)
    params = T.init_chain_params(chain, rng)
    if arch.receptive_field > 1:
        # the chain must consume exactly the advertised number of samples
        assert T.min_chain_length(chain) == arch.receptive_field
    return EncoderModel(arch=arch, chain=chain, params=params, seed=seed)


# ---------------------------------------------------------------------------
# inference path: strictly per-window, order-independent first layer


def _infer_window(model: EncoderModel, window: np.ndarray) -> np.ndarray:
    arch = model.arch
    x = window[None, :, 0] if not model.is_convolutional else window[None]
    first_done = False
    block_val = x
    for spec, p in zip(model.chain, model.params):
        if spec.kind == "skip_add":
            y = T.layer_forward(spec, p, x, skip_input=block_val)
        elif spec.kind in T.PARAMETRIC_KINDS:
            block_val = x
            if not first_done:
                y = _orderless_layer(spec, p, x)
                first_done = True
            else:
                y = T.layer_forward(spec, p, x)
        else:
            y = T.layer_forward(spec, p, x)
        x = y
    return x[0, :, 0] if model.is_convolutional else x[0]


def _orderless_layer(spec, p, x):
    """First-layer contraction via an order-independent sum, so permuting
    input channels together with the weights cannot change output bits."""
    w, b = p["weight"], p["bias"]
    if spec.kind == "linear":
        return (T.orderless_sum(w * x[0][None, :], axis=-1) + b)[None, :]
    cols = T.conv_cols(x, spec.kernel_size, spec.stride)[0]  # (L_out, C*K)
    wr = w.reshape(spec.out_dim, -1)
    out = T.orderless_sum(cols[:, None, :] * wr[None, :, :], axis=-1) + b
    return out.T[None]


def embed(model: EncoderModel, window: np.ndarray) -> np.ndarray:
    """Map one window (n, receptive_field) to a point in R^d (unit norm when
    the architecture normalizes)."""
    window = np.asarray(window, dtype=np.float64)
    expect = (model.arch.input_dim, model.arch.receptive_field)
    if window.shape != expect:
        raise T.ShapeMismatch(f"expected window {expect}, got {window.shape}")
    return _infer_window(model, window)


def transform_series(model: EncoderModel, session) -> Embedding:
    """Embed every valid window of a session; row t-(rf-1) is the window
    ending at time t."""
    signal = np.asarray(session.signal, dtype=np.float64)
    rf = model.arch.receptive_field
    if signal.shape[1] != model.arch.input_dim:
        raise T.ShapeMismatch(
            f"session has {signal.shape[1]} signals, model expects "
            f"{model.arch.input_dim}")
    t = signal.shape[0]
    if t < rf:
        raise T.ShapeMismatch(f"series length {t} shorter than receptive field {rf}")
    rows = np.empty((t - rf + 1, model.arch.output_dim))
    for i in range(t - rf + 1):
        rows[i] = _infer_window(model, signal[i:i + rf].T)
    return Embedding(values=rows, first_index=rf - 1)


# ---------------------------------------------------------------------------
# model container: JSON header + float64 little-endian parameter blob


def save_model(model: EncoderModel, path) -> None:
    header = {
        "version": _MODEL_VERSION,
        "seed": model.seed,
        "arch": {
            "receptive_field": model.arch.receptive_field,
            "input_dim": model.arch.input_dim,
            "hidden_dim": model.arch.hidden_dim,
            "output_dim": model.arch.output_dim,
            "normalize_output": model.arch.normalize_output,
        },
        "layers": [
            {"kind": s.kind, "in_dim": s.in_dim, "out_dim": s.out_dim,
             "kernel_size": s.kernel_size, "stride": s.stride}
            for s in model.chain
        ],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", _MODEL_VERSION, len(payload)))
        fh.write(payload)
        for p in model.params:
            for key in ("weight", "bias"):
                if key in p:
                    fh.write(p[key].astype("<f8").tobytes())


def load_model(path) -> EncoderModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MODEL_MAGIC:
        raise EncoderError(f"{path}: not a model file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _MODEL_VERSION:
        raise EncoderError(f"{path}: unsupported model version {version}")
    header = json.loads(raw[12:12 + hlen])
    arch = ArchSpec(**header["arch"])
    model = build_encoder(arch, seed=header["seed"])
    off = 12 + hlen
    for p in model.params:
        for key in ("weight", "bias"):
            if key in p:
                count = p[key].size
                p[key] = np.frombuffer(raw, "<f8", count, off).reshape(
                    p[key].shape).copy()
                off += 8 * count
    if off != len(raw):
        raise EncoderError(f"{path}: parameter blob size mismatch")
    return model
