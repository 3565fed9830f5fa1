"""Ground-truth synthetic benchmark: latent -> spiking-rate model.

A 1D behavior value c is drawn uniformly from [0, 2*pi] per time bin; the
true 2D latent is Gaussian around mu(c) = (c, 2 sin c) with variances
(0.6 - 0.3|sin c|, 0.3|sin c|). The latent is carried to the neuron space
by a seeded random linear lift, mixed by randomly initialized affine
coupling blocks (invertible, tractable log-determinant), squashed through
softplus into non-negative rates, and Poisson noise maps rates to spike
counts. An 80/20 train/validation plan is attached to the result.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Session, SplitPlan, fraction_plan


@dataclass
class SynthConfig:
    n_samples: int = 15_000
    latent_dim: int = 2
    n_neurons: int = 100
    n_coupling_blocks: int = 4
    seed: int = 0
    coupling_space: str = "lifted"  # blocks act on the lifted space, or "latent"
    subnet_hidden: int = 16
    # mixing strength: input gain drives the subnets into their non-monotone
    # regime; the scale output is tanh-bounded so rates cannot blow up
    subnet_input_gain: float = 8.0
    scale_gain: float = 2.0
    shift_gain: float = 4.0
    rate_bias: float = 1.0

    def __post_init__(self):
        if min(self.n_samples, self.latent_dim, self.n_neurons) < 1:
            raise ValueError("counts must be positive")
        if self.coupling_space not in ("lifted", "latent"):
            raise ValueError(f"unknown coupling_space {self.coupling_space!r}")


@dataclass
class CouplingBlock:
    """Affine coupling: pass-through coordinates (mask True) parametrize
    scale/shift nets applied to the rest; bijective with log-det sum(s).
    The scale is tanh-bounded (|s| < scale_gain) to keep the stack stable."""

    mask: np.ndarray
    s_net: dict
    t_net: dict
    scale_gain: float = 2.0
    shift_gain: float = 4.0


def _mlp_init(n_in, n_hidden, n_out, rng, input_gain=1.0):
    return {
        "w1": rng.normal(0.0, input_gain / np.sqrt(n_in), (n_hidden, n_in)),
        "b1": rng.normal(0.0, 0.5, n_hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(n_hidden), (n_out, n_hidden)),
        "b2": rng.normal(0.0, 0.1, n_out),
    }


def _mlp_apply(net, x):
    return np.tanh(x @ net["w1"].T + net["b1"]) @ net["w2"].T + net["b2"]


def _scale_shift(block, masked):
    s = block.scale_gain * np.tanh(_mlp_apply(block.s_net, masked))
    t = block.shift_gain * _mlp_apply(block.t_net, masked)
    return s, t


def make_coupling_block(dim, index, rng, subnet_hidden=16, input_gain=1.0,
                        scale_gain=2.0, shift_gain=4.0) -> CouplingBlock:
    """Alternating half masks; subnetworks are 2-layer tanh MLPs."""
    mask = (np.arange(dim) % 2 == index % 2)
    if mask.all() or not mask.any():  # dim == 1 cannot be partitioned
        raise ValueError("coupling blocks need at least 2 dimensions")
    n_masked, n_rest = int(mask.sum()), int((~mask).sum())
    return CouplingBlock(
        mask=mask,
        s_net=_mlp_init(n_masked, subnet_hidden, n_rest, rng, input_gain),
        t_net=_mlp_init(n_masked, subnet_hidden, n_rest, rng, input_gain),
        scale_gain=scale_gain,
        shift_gain=shift_gain,
    )


def coupling_forward(block: CouplingBlock, z):
    """(z', log_det); pass-through coordinates unchanged, the rest scaled by
    exp(s) and shifted by t."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    s, t = _scale_shift(block, z[:, block.mask])
    out = z.copy()
    out[:, ~block.mask] = z[:, ~block.mask] * np.exp(s) + t
    return out, s.sum(axis=1)


def coupling_inverse(block: CouplingBlock, y):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    s, t = _scale_shift(block, y[:, block.mask])
    out = y.copy()
    out[:, ~block.mask] = (y[:, ~block.mask] - t) * np.exp(-s)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def poissonize(rates, rng):
    """Independent seeded Poisson draws per entry; rates must be >= 0."""
    rates = np.asarray(rates, dtype=np.float64)
    if np.any(rates < 0):
        raise ValueError("Poisson rates must be non-negative")
    return rng.poisson(rates)


@dataclass
class SynthResult:
    session: Session
    latent: np.ndarray
    behavior: np.ndarray
    split: SplitPlan
    blocks: list
    lift: np.ndarray


def latent_params(c):
    """Mean and standard deviations of the latent conditional at behavior c."""
    c = np.asarray(c, dtype=np.float64)
    mean = np.stack([c, 2.0 * np.sin(c)], axis=-1)
    var = np.stack([0.6 - 0.3 * np.abs(np.sin(c)), 0.3 * np.abs(np.sin(c))],
                   axis=-1)
    return mean, np.sqrt(var)


def generate(config: SynthConfig) -> SynthResult:
    rng = np.random.default_rng(config.seed)
    t = config.n_samples
    c = rng.uniform(0.0, 2.0 * np.pi, t)
    mean, std = latent_params(c)
    z = mean + std * rng.standard_normal((t, 2))

    lift = rng.normal(0.0, 1.0 / np.sqrt(config.latent_dim),
                      (config.n_neurons, config.latent_dim))

    def blocks_for(dim):
        return [make_coupling_block(dim, i, rng, config.subnet_hidden,
                                    config.subnet_input_gain,
                                    config.scale_gain, config.shift_gain)
                for i in range(config.n_coupling_blocks)]

    if config.coupling_space == "lifted":
        x = z @ lift.T
        blocks = blocks_for(config.n_neurons)
        for block in blocks:
            x, _ = coupling_forward(block, x)
    else:
        blocks = blocks_for(config.latent_dim)
        x = z.copy()
        for block in blocks:
            x, _ = coupling_forward(block, x)
        x = x @ lift.T
    rates = softplus(x + config.rate_bias)
    spikes = poissonize(rates, rng)

    session = Session(signal=spikes.astype(np.float64),
                      continuous_context=c[:, None])
    return SynthResult(session=session, latent=z, behavior=c,
                       split=fraction_plan(t, train=0.8, validation=0.2),
                       blocks=blocks, lift=lift)
