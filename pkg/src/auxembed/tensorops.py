"""Dense layer kernels with tape-based reverse-mode gradients.

Implements exactly the layer vocabulary the time-series encoders need:
dense maps, valid (unpadded) 1D convolution with optional stride, exact-erf
GELU, skip additions with centre cropping, and per-slice L2 normalization.
Everything is float64. Activations carry a leading batch axis: ``(B, F)``
for dense layers, ``(B, C, L)`` for convolutional ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

LAYER_KINDS = ("linear", "conv1d", "downsample_conv", "gelu", "skip_add", "l2_normalize")
PARAMETRIC_KINDS = ("linear", "conv1d", "downsample_conv")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeMismatch(ValueError):
    """Raised when an activation does not fit a layer, with a dimension report."""


class TapeReuseError(RuntimeError):
    """Raised when a consumed gradient tape is replayed a second time."""


@dataclass(frozen=True)
class LayerSpec:
    """Descriptor of a single primitive layer.

    ``in_dim``/``out_dim`` are channel counts for conv kinds and feature
    counts for ``linear``; they are ignored for parameter-free kinds.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel_size: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.kind in PARAMETRIC_KINDS and (self.in_dim <= 0 or self.out_dim <= 0):
            raise ValueError(
                f"{self.kind} layer needs positive dims, got in={self.in_dim} out={self.out_dim}"
            )

    @property
    def fan_in(self) -> int:
        if self.kind == "linear":
            return self.in_dim
        return self.in_dim * self.kernel_size


def init_params(spec: LayerSpec, rng: np.random.Generator) -> dict:
    """Seeded uniform +-1/sqrt(fan_in) init; weight drawn before bias."""
    if spec.kind not in PARAMETRIC_KINDS:
        return {}
    bound = 1.0 / math.sqrt(spec.fan_in)
    if spec.kind == "linear":
        w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
    else:
        w = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim, spec.kernel_size))
    b = rng.uniform(-bound, bound, size=spec.out_dim)
    return {"weight": w, "bias": b}


class GradTape:
    """Ordered record of executed primitives, replayed once in reverse.

    Nodes form a DAG rooted at a single input (node 0); skip additions may
    reference any earlier node. ``backward`` consumes the tape.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    @property
    def head(self) -> int:
        return len(self._nodes) - 1

    def watch(self, x: np.ndarray) -> int:
        """Register the chain input; must be the first node."""
        if self._nodes:
            raise RuntimeError("tape already has an input node")
        self._nodes.append(_Node("input", (), {"shape": x.shape}, None))
        return 0

    def _record(self, kind, parents, saved, params) -> int:
        self._nodes.append(_Node(kind, parents, saved, params))
        return self.head

    def backward(self, output_grad: np.ndarray):
        """Replay in reverse; returns (per-node param grads, input grad).

        The param-grad list is aligned with recorded nodes (``None`` for
        parameter-free ones). Every node's gradient is accumulated exactly
        once; the tape is consumed afterwards.
        """
        if self._consumed:
            raise TapeReuseError("gradient tape already consumed")
        if not self._nodes or self._nodes[0].kind != "input":
            raise RuntimeError("tape has no watched input")
        self._consumed = True

        grads = {self.head: np.asarray(output_grad, dtype=np.float64)}
        param_grads = [None] * len(self._nodes)
        for nid in range(self.head, 0, -1):
            node = self._nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            in_grads, p_grads = _BACKWARD[node.kind](node, g)
            param_grads[nid] = p_grads
            for pid, ig in zip(node.parents, in_grads):
                if pid in grads:
                    grads[pid] = grads[pid] + ig
                else:
                    grads[pid] = ig
        input_grad = grads.pop(0, None)
        if input_grad is None:
            input_grad = np.zeros(self._nodes[0].saved["shape"])
        return param_grads, input_grad


class _Node:
    __slots__ = ("kind", "parents", "saved", "params")

    def __init__(self, kind, parents, saved, params):
        self.kind = kind
        self.parents = parents
        self.saved = saved
        self.params = params


def gelu_exact(x: np.ndarray) -> np.ndarray:
    """x * Phi(x) with the exact standard-normal CDF (erf form)."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def layer_forward(spec, params, x, tape=None, skip_input=None, skip_src=None):
    """Run one primitive layer; records onto ``tape`` when given.

    ``skip_add`` consumes the block input as ``skip_input``; when recording,
    ``skip_src`` must name the tape node that produced it.
    """
    x = np.asarray(x, dtype=np.float64)
    if tape is not None and tape.head < 0:
        tape.watch(x)
    parent = tape.head if tape is not None else -1

    if spec.kind == "skip_add":
        if skip_input is None:
            raise ValueError("skip_add needs the block input as skip_input")
        y, lo = _skip_add_forward(x, skip_input)
        if tape is not None:
            if skip_src is None:
                raise ValueError("skip_add on a tape needs the skip_src node id")
            tape._record("skip_add", (parent, skip_src),
                         {"lo": lo, "input_shape": skip_input.shape}, None)
        return y
    if skip_input is not None or skip_src is not None:
        raise ValueError(f"skip arguments are only valid for skip_add, not {spec.kind}")

    if spec.kind == "linear":
        y, saved = _linear_forward(spec, params, x)
    elif spec.kind in ("conv1d", "downsample_conv"):
        y, saved = _conv_forward(spec, params, x)
    elif spec.kind == "gelu":
        phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        y, saved = x * phi, {"x": x, "phi": phi}
    elif spec.kind == "l2_normalize":
        y, saved = _l2norm_forward(x)
    else:  # pragma: no cover - guarded by LayerSpec
        raise ValueError(spec.kind)

    if tape is not None:
        tape._record(spec.kind, (parent,), saved, params)
    return y


def layer_backward(tape: GradTape, output_grad: np.ndarray):
    """Reverse-replay a completed tape; see :meth:`GradTape.backward`."""
    return tape.backward(output_grad)


# ---------------------------------------------------------------------------
# forward/backward kernels


def _linear_forward(spec, params, x):
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ShapeMismatch(
            f"linear expects (B, {spec.in_dim}), got {x.shape}")
    w, b = params["weight"], params["bias"]
    return x @ w.T + b, {"x": x}


def _linear_backward(node, g):
    x = node.saved["x"]
    w = node.params["weight"]
    return (g @ w,), {"weight": g.T @ x, "bias": g.sum(axis=0)}


def conv_cols(x, kernel_size, stride):
    """im2col for valid 1D convolution: (B, C, L) -> (B, L_out, C*K) copy."""
    if x.shape[2] < kernel_size:
        raise ShapeMismatch(
            f"conv input length {x.shape[2]} shorter than kernel {kernel_size}")
    win = sliding_window_view(x, kernel_size, axis=2)[:, :, ::stride]  # (B,C,L_out,K)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(
        x.shape[0], -1, x.shape[1] * kernel_size)


def _conv_forward(spec, params, x):
    if x.ndim != 3 or x.shape[1] != spec.in_dim:
        raise ShapeMismatch(
            f"{spec.kind} expects (B, {spec.in_dim}, L), got {x.shape}")
    w, b = params["weight"], params["bias"]
    cols = conv_cols(x, spec.kernel_size, spec.stride)  # (B, L_out, C*K)
    wr = w.reshape(spec.out_dim, -1)
    y = cols @ wr.T + b  # (B, L_out, O)
    return y.transpose(0, 2, 1), {"cols": cols, "x_shape": x.shape, "spec": spec}


def _conv_backward(node, g):
    spec = node.saved["spec"]
    cols = node.saved["cols"]
    b_, c_, l_ = node.saved["x_shape"]
    w = node.params["weight"]
    g2 = g.transpose(0, 2, 1)  # (B, L_out, O)
    l_out = g2.shape[1]
    gflat = g2.reshape(-1, spec.out_dim)
    dw = (gflat.T @ cols.reshape(-1, cols.shape[2])).reshape(w.shape)
    db = gflat.sum(axis=0)
    dcols = (g2 @ w.reshape(spec.out_dim, -1)).reshape(b_, l_out, c_, spec.kernel_size)
    dx = np.zeros((b_, c_, l_))
    for k in range(spec.kernel_size):  # fixed order keeps backward deterministic
        dx[:, :, k:k + spec.stride * l_out:spec.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    return (dx,), {"weight": dw, "bias": db}


def _gelu_backward(node, g):
    x, phi = node.saved["x"], node.saved["phi"]
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (phi + x * pdf),), None


def _l2norm_forward(x):
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"l2_normalize expects 2D or 3D input, got {x.shape}")
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if not np.all(norms > 0.0):
        raise ValueError("l2_normalize of a zero vector (degenerate input)")
    y = x / norms
    return y, {"y": y, "norms": norms}


def _l2norm_backward(node, g):
    y, norms = node.saved["y"], node.saved["norms"]
    return ((g - y * np.sum(y * g, axis=1, keepdims=True)) / norms,), None


def _skip_add_forward(branch, block_input):
    if branch.shape[:2] != block_input.shape[:2] and branch.shape != block_input.shape:
        if branch.ndim != block_input.ndim or branch.shape[0] != block_input.shape[0] \
                or branch.shape[1] != block_input.shape[1]:
            raise ShapeMismatch(
                f"skip_add branch {branch.shape} vs input {block_input.shape}")
    if branch.shape == block_input.shape:
        return branch + block_input, 0
    margin = block_input.shape[2] - branch.shape[2]
    if margin < 0 or margin % 2:
        raise ShapeMismatch(
            f"skip_add cannot centre-crop input {block_input.shape} to {branch.shape}")
    lo = margin // 2
    return branch + block_input[:, :, lo:lo + branch.shape[2]], lo


def _skip_backward(node, g):
    lo = node.saved["lo"]
    in_shape = node.saved["input_shape"]
    if g.shape == in_shape:
        return (g, g), None
    gi = np.zeros(in_shape)
    gi[:, :, lo:lo + g.shape[2]] = g
    return (g, gi), None


_BACKWARD = {
    "linear": _linear_backward,
    "conv1d": _conv_backward,
    "downsample_conv": _conv_backward,
    "gelu": _gelu_backward,
    "l2_normalize": _l2norm_backward,
    "skip_add": _skip_backward,
}


# ---------------------------------------------------------------------------
# chain running and gradient checking


def run_chain(chain, params, x, tape=None):
    """Evaluate a flat chain of LayerSpecs.

    A ``skip_add`` entry adds the input of the nearest preceding parametric
    layer (the block input under the conv+gelu+skip pattern). ``params`` is
    aligned with ``chain`` (empty dicts for parameter-free kinds).
    """
    y = np.asarray(x, dtype=np.float64)
    if tape is not None:
        tape.watch(y)
    block_val, block_node = y, 0  # current block input (value, tape node)
    for spec, p in zip(chain, params):
        if spec.kind == "skip_add":
            y = layer_forward(spec, p, y, tape, skip_input=block_val, skip_src=block_node)
        else:
            if spec.kind in PARAMETRIC_KINDS:
                block_val = y
                if tape is not None:
                    block_node = tape.head
            y = layer_forward(spec, p, y, tape)
    return y


def init_chain_params(chain, rng):
    return [init_params(spec, rng) for spec in chain]


def min_chain_length(chain) -> int:
    """Smallest conv-input length for which every layer in the chain is valid."""
    for length in range(1, 4096):
        cur, ok = length, True
        for spec in chain:
            if spec.kind in ("conv1d", "downsample_conv"):
                if cur < spec.kernel_size:
                    ok = False
                    break
                cur = (cur - spec.kernel_size) // spec.stride + 1
            elif spec.kind == "skip_add":
                pass
        if ok and cur >= 1:
            return length
    raise ValueError("no valid input length below 4096")


def grad_check(chain, seed, params=None, batch=2, step=1e-5):
    """Max relative error between tape gradients and central differences.

    Checked over every parameter entry of the chain; parameter-free chains
    return exactly 0. Relative error uses |a - fd| / (|a| + |fd| + 1e-12).
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_chain_params(chain, rng)
    first = next((s for s in chain if s.kind in PARAMETRIC_KINDS), None)
    if first is None:
        x = rng.standard_normal((batch, 4))
    elif first.kind == "linear":
        x = rng.standard_normal((batch, first.in_dim))
    else:
        x = rng.standard_normal((batch, first.in_dim, min_chain_length(chain)))

    tape = GradTape()
    out = run_chain(chain, params, x, tape)
    u = rng.standard_normal(out.shape)
    param_grads, _ = tape.backward(u)
    analytic = [g for g in param_grads if g is not None]

    def objective():
        return float(np.sum(u * run_chain(chain, params, x)))

    worst = 0.0
    gi = 0
    for p in params:
        if not p:
            continue
        ana = analytic[gi]
        gi += 1
        for name, arr in p.items():
            flat = arr.reshape(-1)
            aflat = ana[name].reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + step
                hi = objective()
                flat[j] = keep - step
                lo = objective()
                flat[j] = keep
                fd = (hi - lo) / (2.0 * step)
                err = abs(aflat[j] - fd) / (abs(aflat[j]) + abs(fd) + 1e-12)
                worst = max(worst, err)
    return worst


def orderless_sum(terms: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum whose result is invariant to permutations along ``axis``.

    Terms are snapped to a per-slot power-of-two quantum so that all partial
    sums are exactly representable integers; the rounded result is then
    independent of accumulation order. Quantization error is below
    ``K^2 * 2**-50`` relative to the largest term, ample for unit-scale
    activations.
    """
    terms = np.moveaxis(np.asarray(terms, dtype=np.float64), axis, -1)
    k = terms.shape[-1]
    if k == 0:
        return np.zeros(terms.shape[:-1])
    m = np.max(np.abs(terms), axis=-1, keepdims=True)
    exp = np.frexp(m)[1].astype(np.float64)  # m <= 2**exp, exact
    shift = 51 - int(math.ceil(math.log2(k))) if k > 1 else 51
    q = np.ldexp(1.0, (exp - shift).astype(np.int64))
    q[m == 0.0] = 1.0
    return np.sum(np.rint(terms / q), axis=-1) * np.squeeze(q, axis=-1)
