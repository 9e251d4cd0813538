"""Threshold-gated channel replacement across streams.

The operation at the heart of the package: after normalization and before the
nonlinearity, a stream's channel whose scaling factor has been driven below a
threshold is replaced by the mean of the other streams' values at that
channel. Replacement eligibility is confined to the stream's own sub-part of
the channel axis, so the process is directed: stream m can only ever lose
channels inside its own region, and donates everywhere else.

Gradient contract (load-bearing, verified by finite differences in tests):
for a replaced (stream m, channel c), downstream loss of stream m sends zero
gradient into stream m's own pre-exchange activation at c, and gradient of
weight 1/(M-1) into every donor stream's activation at c. Donor values are
always the raw normalized activations, never post-exchange ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prng
from .errors import ConfigurationError, DimensionError, ValidationError
from .tensor import Tensor, _accumulate, _result

__all__ = [
    "ExchangePlan",
    "ExchangeMask",
    "ExchangeVariant",
    "compute_exchange_mask",
    "channel_exchange",
    "zero_out",
    "exchange_variant",
]


@dataclass(frozen=True)
class ExchangePlan:
    """Where exchange (and the matching sparsity constraint) may act.

    For the default sub-part mode, stream m owns the contiguous channel block
    [m*C/M, (m+1)*C/M); C must divide evenly by the stream count. With
    all_channel=True every stream is eligible at every channel (the
    "no sub-part division" ablation). Explicit regions may be supplied for a
    single known channel width, mainly for tests.

    signed_rule=False (default) replaces when |gamma| <= theta; True applies
    the literal signed keep-condition gamma > theta instead.
    """

    num_streams: int
    theta: float
    regions: tuple[tuple[int, ...], ...] | None = None
    all_channel: bool = False
    signed_rule: bool = False
    enabled_layers: frozenset[int] | None = None  # None means every eligible layer

    def __post_init__(self):
        if self.num_streams < 1:
            raise ConfigurationError(f"need at least one stream, got {self.num_streams}")
        if self.theta < 0:
            raise ValidationError(f"theta must be >= 0, got {self.theta}")
        if self.regions is not None:
            if self.all_channel:
                raise ConfigurationError("explicit regions cannot be combined with all_channel")
            if len(self.regions) != self.num_streams:
                raise ConfigurationError(
                    f"{len(self.regions)} regions for {self.num_streams} streams"
                )
            flat = [c for r in self.regions for c in r]
            width = len(flat)
            if sorted(flat) != list(range(width)):
                raise ValidationError("regions must be disjoint and cover 0..C-1 exactly")
            sizes = {len(r) for r in self.regions}
            if len(sizes) != 1:
                raise ConfigurationError("regions must have equal sizes")

    def layer_enabled(self, layer_index: int) -> bool:
        return self.enabled_layers is None or layer_index in self.enabled_layers

    def regions_for(self, channels: int) -> tuple[tuple[int, ...], ...]:
        """Per-stream eligible channel indices for a layer of this width."""
        if self.all_channel:
            return tuple(tuple(range(channels)) for _ in range(self.num_streams))
        if self.regions is not None:
            width = sum(len(r) for r in self.regions)
            if width != channels:
                raise ValidationError(
                    f"plan regions describe {width} channels, layer has {channels}"
                )
            for r in self.regions:
                for c in r:
                    if not 0 <= c < channels:
                        raise ValidationError(f"region channel {c} out of bounds for C={channels}")
            return self.regions
        if channels % self.num_streams != 0:
            raise ConfigurationError(
                f"{channels} channels do not divide evenly into {self.num_streams} sub-parts"
            )
        block = channels // self.num_streams
        return tuple(
            tuple(range(m * block, (m + 1) * block)) for m in range(self.num_streams)
        )


@dataclass(frozen=True)
class ExchangeMask:
    """Per (stream, channel) replaced flags plus the layer's replaced share."""

    replaced: np.ndarray  # bool, shape (M, C)
    exchanged_fraction: float

    @property
    def any(self) -> bool:
        return bool(self.replaced.any())


@dataclass(frozen=True)
class ExchangeVariant:
    """Which replacement policy a forward pass uses.

    kind:
      exchange        threshold rule, cross-stream mean (the default)
      none            no replacement at all
      zero_out        threshold rule, but write zeros instead of donor means
      fixed_fraction  the `fraction` share of smallest-|gamma| region channels
      random_fraction a seeded uniform region subset of the same size
      no_divide       threshold rule with every stream eligible at all channels
    """

    kind: str = "exchange"
    fraction: float = 0.3
    seed: int = 0

    KINDS = ("exchange", "none", "zero_out", "fixed_fraction", "random_fraction", "no_divide")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(
                f"unknown exchange variant {self.kind!r}; expected one of {', '.join(self.KINDS)}"
            )
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError(f"variant fraction must be in [0, 1], got {self.fraction}")


def _gamma_values(gammas) -> list[np.ndarray]:
    out = []
    for g in gammas:
        arr = g.values if isinstance(g, Tensor) else np.asarray(g)
        if arr.ndim != 1:
            raise DimensionError(f"scaling factors must be 1-d per stream, got shape {arr.shape}")
        out.append(arr)
    widths = {a.shape[0] for a in out}
    if len(widths) != 1:
        raise DimensionError(f"streams disagree on channel count: {sorted(widths)}")
    return out


def _mask_from(replaced: np.ndarray, regions) -> ExchangeMask:
    eligible = sum(len(r) for r in regions)
    frac = float(replaced.sum()) / eligible if eligible else 0.0
    return ExchangeMask(replaced=replaced, exchanged_fraction=frac)


def compute_exchange_mask(gammas, plan: ExchangePlan) -> ExchangeMask:
    """Threshold rule: stream m replaces channel c iff c is in its region and
    |gamma_{m,c}| <= theta (or gamma_{m,c} <= theta under the signed rule).

    Recomputed from the current scaling factors at every call; there is no
    hysteresis.
    """
    vals = _gamma_values(gammas)
    if len(vals) != plan.num_streams:
        raise ConfigurationError(f"{len(vals)} gamma vectors for {plan.num_streams} streams")
    c = vals[0].shape[0]
    regions = plan.regions_for(c)
    replaced = np.zeros((plan.num_streams, c), dtype=bool)
    for m, region in enumerate(regions):
        idx = np.asarray(region, dtype=int)
        if idx.size == 0:
            continue
        gm = vals[m][idx]
        small = (gm <= plan.theta) if plan.signed_rule else (np.abs(gm) <= plan.theta)
        replaced[m, idx[small]] = True
    return _mask_from(replaced, regions)


def _check_streams(streams) -> tuple[int, tuple]:
    if len(streams) < 2:
        raise ConfigurationError(f"channel exchange needs at least 2 streams, got {len(streams)}")
    shape = streams[0].shape
    for i, s in enumerate(streams):
        if s.values.ndim != 4:
            raise DimensionError(f"stream {i} must be (N, C, H, W), got {s.shape}")
        if s.shape != shape:
            raise DimensionError(f"stream {i} shape {s.shape} differs from stream 0 {shape}")
    return len(streams), shape


def channel_exchange(streams: list[Tensor], mask: ExchangeMask) -> list[Tensor]:
    """Replace each flagged (stream, channel) with the donors' mean.

    Donors are the raw inputs of the other streams, accumulated in ascending
    stream order and divided by M-1 once, so results are bit-reproducible.
    Unflagged channels pass through unchanged.
    """
    m_count, shape = _check_streams(streams)
    if mask.replaced.shape != (m_count, shape[1]):
        raise DimensionError(
            f"mask shape {mask.replaced.shape} does not match {m_count} streams x {shape[1]} channels"
        )

    outs = []
    for m, stream in enumerate(streams):
        cols = np.nonzero(mask.replaced[m])[0]
        if cols.size == 0:
            out_vals = stream.values
        else:
            out_vals = stream.values.copy()
            acc = np.zeros_like(out_vals[:, cols])
            for mp in range(m_count):
                if mp != m:
                    acc += streams[mp].values[:, cols]
            out_vals[:, cols] = acc / (m_count - 1)

        def bw(g, grads, m=m, cols=cols):
            own = g
            if cols.size:
                own = g.copy()
                own[:, cols] = 0.0
            _accumulate(streams[m], own, grads)
            if cols.size:
                share = g[:, cols] / (m_count - 1)
                for mp in range(m_count):
                    if mp == m:
                        continue
                    donor = np.zeros(shape, dtype=g.dtype)
                    donor[:, cols] = share
                    _accumulate(streams[mp], donor, grads)

        outs.append(_result(out_vals, tuple(streams), bw, "channel_exchange"))
    return outs


def zero_out(streams: list[Tensor], mask: ExchangeMask) -> list[Tensor]:
    """Ablation: write zeros into flagged channels instead of donor means."""
    m_count, shape = _check_streams(streams)
    outs = []
    for m, stream in enumerate(streams):
        cols = np.nonzero(mask.replaced[m])[0]
        if cols.size == 0:
            out_vals = stream.values
        else:
            out_vals = stream.values.copy()
            out_vals[:, cols] = 0.0

        def bw(g, grads, m=m, cols=cols):
            own = g
            if cols.size:
                own = g.copy()
                own[:, cols] = 0.0
            _accumulate(streams[m], own, grads)

        outs.append(_result(out_vals, (stream,), bw, "zero_out"))
    return outs


def variant_mask(gammas, plan: ExchangePlan, variant: ExchangeVariant) -> ExchangeMask:
    """The replaced-flag pattern a given policy produces for current gammas."""
    vals = _gamma_values(gammas)
    c = vals[0].shape[0]

    if variant.kind in ("exchange", "zero_out"):
        return compute_exchange_mask(gammas, plan)
    if variant.kind == "none":
        regions = plan.regions_for(c)
        return _mask_from(np.zeros((plan.num_streams, c), dtype=bool), regions)
    if variant.kind == "no_divide":
        widened = ExchangePlan(
            num_streams=plan.num_streams,
            theta=plan.theta,
            all_channel=True,
            signed_rule=plan.signed_rule,
            enabled_layers=plan.enabled_layers,
        )
        return compute_exchange_mask(gammas, widened)

    regions = plan.regions_for(c)
    replaced = np.zeros((plan.num_streams, c), dtype=bool)
    for m, region in enumerate(regions):
        idx = np.asarray(region, dtype=int)
        k = int(round(variant.fraction * idx.size))
        if k == 0:
            continue
        if variant.kind == "fixed_fraction":
            order = np.argsort(np.abs(vals[m][idx]), kind="stable")
            chosen = idx[order[:k]]
        else:  # random_fraction
            sub_seed = prng.derive(variant.seed, m)
            chosen = idx[prng.sample_without_replacement(idx.size, k, sub_seed)]
        replaced[m, chosen] = True
    return _mask_from(replaced, regions)


def exchange_variant(
    streams: list[Tensor], gammas, plan: ExchangePlan, variant: ExchangeVariant
) -> tuple[list[Tensor], ExchangeMask]:
    """Apply a replacement policy; returns the new streams and the mask used."""
    mask = variant_mask(gammas, plan, variant)
    if variant.kind == "none" or not mask.any:
        return list(streams), mask
    if variant.kind == "zero_out":
        return zero_out(streams, mask), mask
    return channel_exchange(streams, mask), mask
