"""Batch and instance normalization with private per-stream parameter banks.

The scaling factors held here are the channel-importance signal the whole
exchange mechanism runs on, so gamma and beta are graph parameters while the
running statistics are plain buffers updated by exponential moving average.
Running statistics are maintained the same way in instance mode so inference
is a deterministic per-sample function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, ValidationError
from .exchange import ExchangePlan
from .tensor import Tensor, _accumulate, _result

__all__ = ["NormParams", "NormBank", "norm_forward", "sparsity_penalty"]


@dataclass
class NormParams:
    gamma: Tensor  # (C,) trainable scaling factors
    beta: Tensor  # (C,) trainable offsets
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "batch"  # batch | instance

    @staticmethod
    def create(channels: int, mode: str = "batch", eps: float = 1e-5,
               momentum: float = 0.1, dtype=np.float32) -> "NormParams":
        """gamma=1, beta=0, running mean 0 / variance 1: every channel starts
        above any reasonable threshold, so exchange is inactive until the
        sparsity pressure acts."""
        if mode not in ("batch", "instance"):
            raise ConfigurationError(f"unknown norm mode {mode!r}")
        return NormParams(
            gamma=Tensor.param(np.ones(channels, dtype=dtype)),
            beta=Tensor.param(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
            mode=mode,
        )

    @property
    def channels(self) -> int:
        return self.gamma.values.shape[0]


@dataclass
class NormBank:
    """All private normalization parameters of one (modality, task) pairing,
    ordered by exchange-eligible layer."""

    key: tuple
    layers: list[NormParams] = field(default_factory=list)


def norm_forward(x: Tensor, params: NormParams, training: bool,
                 update_stats: bool | None = None) -> Tensor:
    """gamma * (x - mu) / sqrt(var + eps) + beta over (N, C, H, W).

    Training mode computes mu/var over (N, H, W) per channel in batch mode and
    over (H, W) per sample in instance mode (biased variance), updating the
    running statistics by EMA unless update_stats=False. Inference uses the
    running statistics, so outputs have no batch coupling.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"norm_forward expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if c != params.channels:
        raise DimensionError(
            f"channel axis has {c} channels but norm params carry {params.channels}"
        )
    if update_stats is None:
        update_stats = training

    gamma, beta = params.gamma, params.beta
    g4 = gamma.values.reshape(1, c, 1, 1)

    if not training:
        ivar = 1.0 / np.sqrt(params.running_var + params.eps)
        scale = (gamma.values * ivar).reshape(1, c, 1, 1)
        xhat = (x.values - params.running_mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = xhat * g4 + beta.values.reshape(1, c, 1, 1)

        def bw_eval(g, grads):
            _accumulate(x, g * scale, grads)
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)), grads)
            _accumulate(beta, g.sum(axis=(0, 2, 3)), grads)

        return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw_eval, "norm")

    if params.mode == "batch":
        if n * h * w < 2:
            raise ValidationError(
                f"batch normalization needs at least 2 values per channel, got N*H*W={n * h * w}"
            )
        axes = (0, 2, 3)
    else:
        if h * w < 2:
            raise ValidationError(
                f"instance normalization needs H*W >= 2, got {h}x{w}"
            )
        axes = (2, 3)

    mu = x.values.mean(axis=axes, keepdims=True)
    var = x.values.var(axis=axes, keepdims=True)
    ivar = 1.0 / np.sqrt(var + params.eps)
    xhat = (x.values - mu) * ivar
    out = xhat * g4 + beta.values.reshape(1, c, 1, 1)

    if update_stats:
        m = params.momentum
        if params.mode == "batch":
            new_mean, new_var = mu.reshape(c), var.reshape(c)
        else:
            new_mean, new_var = mu.mean(axis=0).reshape(c), var.mean(axis=0).reshape(c)
        params.running_mean[:] = (1.0 - m) * params.running_mean + m * new_mean
        params.running_var[:] = (1.0 - m) * params.running_var + m * new_var

    r = float(np.prod([x.shape[a] for a in axes]))

    def bw_train(g, grads):
        _accumulate(beta, g.sum(axis=(0, 2, 3)), grads)
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)), grads)
        dxhat = g * g4
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        _accumulate(x, (ivar / r) * (r * dxhat - s1 - xhat * s2), grads)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw_train, "norm")


def sparsity_penalty(banks: list[NormBank], plan: ExchangePlan, lam: float) -> Tensor:
    """lam * sum of |gamma| over each bank's own channel region, all layers.

    Bank order corresponds to stream order in the plan. The subgradient of
    |gamma| at zero is taken as 0, and channels outside a bank's region
    receive exactly zero gradient from this term.
    """
    if lam < 0:
        raise ValidationError(f"sparsity weight must be >= 0, got lam={lam}")
    if len(banks) != plan.num_streams:
        raise ConfigurationError(f"{len(banks)} banks for {plan.num_streams} streams")

    total = 0.0
    contributions: list[tuple[Tensor, np.ndarray]] = []
    for m, bank in enumerate(banks):
        for params in bank.layers:
            region = plan.regions_for(params.channels)[m]
            idx = np.asarray(region, dtype=int)
            if idx.size and (idx.min() < 0 or idx.max() >= params.channels):
                raise ValidationError(
                    f"region out of channel bounds for bank {bank.key}: C={params.channels}"
                )
            total += float(np.abs(params.gamma.values[idx]).sum())
            contributions.append((params.gamma, idx))

    dtype = banks[0].layers[0].gamma.dtype if banks and banks[0].layers else np.float64
    out = np.asarray(lam * total, dtype=dtype)

    def bw(g, grads):
        gs = float(g) * lam
        for gamma, idx in contributions:
            d = np.zeros_like(gamma.values)
            if idx.size:
                d[idx] = gs * np.sign(gamma.values[idx])
            _accumulate(gamma, d, grads)

    parents = tuple(gamma for gamma, _ in contributions)
    return _result(out, parents, bw, "sparsity_penalty")
