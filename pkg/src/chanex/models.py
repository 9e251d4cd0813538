"""Encoder-decoder assemblies for the four fusion/multitask topologies.

Wiring summary:
  multimodal  M1 input streams, one task: shared encoder convolutions,
              private per-modality norm banks, exchange between encoder
              streams, one fully shared decoder (including its norms),
              softmax decision scores ensembling the per-stream predictions.
  cycle       3 modalities, 3 generation flows (each flow maps two modalities
              to the third): one encoder and one decoder shared across all
              flows, one norm bank per (modality, flow) pair (6 total),
              exchange between the two active encoder streams.
  multitask   one input, M2 tasks: one shared encoder with a single norm set,
              private per-task decoders, exchange between decoder streams.
  mm_mt       M1 inputs, M2 tasks: per (input, task) path with its own norm
              bank (M1*M2 total), exchange across inputs in the encoder and
              across tasks in the decoder, per-task decision scores.

Convolution weights live once in shared stores; every stream referencing a
shared layer sees the same tensors, so their gradients accumulate into the
single storage cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import prng
from .errors import ConfigurationError, ValidationError
from .exchange import ExchangeMask, ExchangePlan, ExchangeVariant, exchange_variant
from .norm import NormBank, NormParams, norm_forward
from .tensor import Tensor, concat_batch, conv2d, relu, split_batch, upsample_nearest

__all__ = [
    "NetSpec",
    "ConvLayer",
    "SharedParamStore",
    "DecisionScores",
    "TaskOutput",
    "ModelAssembly",
    "build_model",
    "forward",
    "run_all_tasks",
    "update_decision_scores",
    "count_parameters",
    "count_norm_sets",
]

TOPOLOGIES = ("multimodal", "cycle", "multitask", "mm_mt")


@dataclass(frozen=True)
class NetSpec:
    """Stage lists: encoder entries are (out_channels, kernel, stride), decoder
    entries are (out_channels, kernel, upsample factor); the decoder finishes
    with a bare head convolution per task."""

    encoder: tuple = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    decoder: tuple = ((16, 3, 2), (8, 3, 2), (8, 3, 2))
    norm_mode: str = "batch"
    exchange_on: str = "encoder"  # encoder | decoder | both | none

    def __post_init__(self):
        if self.exchange_on not in ("encoder", "decoder", "both", "none"):
            raise ConfigurationError(f"unknown exchange_on {self.exchange_on!r}")
        if self.norm_mode not in ("batch", "instance"):
            raise ConfigurationError(f"unknown norm_mode {self.norm_mode!r}")


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class SharedParamStore:
    """Convolution parameters stored once and referenced by every stream."""

    def __init__(self, name: str):
        self.name = name
        self.layers: dict[str, ConvLayer] = {}

    def add(self, key: str, cin: int, cout: int, kernel: int, stride: int,
            seed: int, dtype) -> ConvLayer:
        fan_in = cin * kernel * kernel
        w = prng.gaussians(seed, 0, cout * fan_in).reshape(cout, cin, kernel, kernel)
        w = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
        layer = ConvLayer(
            name=f"{self.name}.{key}",
            weight=Tensor.param(w),
            bias=Tensor.param(np.zeros(cout, dtype=dtype)),
            stride=stride,
            padding=kernel // 2,
        )
        self.layers[key] = layer
        return layer

    def __getitem__(self, key: str) -> ConvLayer:
        return self.layers[key]


@dataclass
class DecisionScores:
    """Per-task softmax weights over streams; logits are the trainables."""

    logits: list[Tensor]  # one (M,) tensor per task

    def alphas(self, task: int) -> np.ndarray:
        z = self.logits[task].values.astype(np.float64)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


@dataclass
class TaskOutput:
    preds: list[Tensor]
    ensemble: Tensor | None
    masks: dict[str, ExchangeMask] = field(default_factory=dict)


class ModelAssembly:
    def __init__(self, topology, spec, m1, m2, theta, variant, dtype,
                 share_convs, share_norms, cycle_shared_decoder,
                 in_channels, out_channels):
        self.topology = topology
        self.spec = spec
        self.m1 = m1
        self.m2 = m2
        self.theta = theta
        self.variant = variant
        self.dtype = dtype
        self.share_convs = share_convs
        self.share_norms = share_norms
        self.cycle_shared_decoder = cycle_shared_decoder
        self.in_channels = in_channels
        self.out_channels = out_channels  # tuple, one entry per task

        self.enc_stores: list[SharedParamStore] = []
        self.dec_stores: list[SharedParamStore] = []
        self.heads: list[ConvLayer] = []
        self.banks: dict[tuple, NormBank] = {}
        self.enc_shared_norms: list[NormParams] = []  # multitask encoder
        self.dec_shared_norms: list[NormParams] = []  # multimodal / shared-decoder cycle
        self.dec_private_norms: list[list[NormParams]] = []  # cycle with dec x3
        self.scores: DecisionScores | None = None
        self.plan_enc: ExchangePlan | None = None
        self.plan_dec: ExchangePlan | None = None

    # -- parameter iteration -------------------------------------------------

    def named_parameters(self):
        """(name, tensor, kind, side) with kind in {conv_weight, conv_bias,
        gamma, beta, decision}; deduplicated, deterministic order."""
        out, seen = [], set()

        def emit(name, tensor, kind, side):
            if id(tensor) not in seen:
                seen.add(id(tensor))
                out.append((name, tensor, kind, side))

        for store, side in [(s, "encoder") for s in self.enc_stores] + [
            (s, "decoder") for s in self.dec_stores
        ]:
            for key in sorted(store.layers):
                layer = store.layers[key]
                emit(f"{layer.name}.w", layer.weight, "conv_weight", side)
                emit(f"{layer.name}.b", layer.bias, "conv_bias", side)
        for i, head in enumerate(self.heads):
            emit(f"{head.name}.w", head.weight, "conv_weight", "decoder")
            emit(f"{head.name}.b", head.bias, "conv_bias", "decoder")
        for key in sorted(self.banks):
            bank = self.banks[key]
            for li, params in enumerate(bank.layers):
                side = "encoder" if self._bank_layer_is_encoder(li) else "decoder"
                base = f"bank.m{key[0]}.t{key[1]}.l{li}"
                emit(f"{base}.gamma", params.gamma, "gamma", side)
                emit(f"{base}.beta", params.beta, "beta", side)
        for li, params in enumerate(self.enc_shared_norms):
            emit(f"encnorm.l{li}.gamma", params.gamma, "gamma", "encoder")
            emit(f"encnorm.l{li}.beta", params.beta, "beta", "encoder")
        for li, params in enumerate(self.dec_shared_norms):
            emit(f"decnorm.l{li}.gamma", params.gamma, "gamma", "decoder")
            emit(f"decnorm.l{li}.beta", params.beta, "beta", "decoder")
        for t, norms in enumerate(self.dec_private_norms):
            for li, params in enumerate(norms):
                emit(f"decnorm.t{t}.l{li}.gamma", params.gamma, "gamma", "decoder")
                emit(f"decnorm.t{t}.l{li}.beta", params.beta, "beta", "decoder")
        if self.scores is not None:
            for t, logit in enumerate(self.scores.logits):
                emit(f"score.t{t}", logit, "decision", "decoder")
        return out

    def _bank_layer_is_encoder(self, li: int) -> bool:
        if self.topology in ("multimodal", "cycle"):
            return True
        if self.topology == "multitask":
            return False
        return li < len(self.spec.encoder)  # mm_mt banks hold enc then dec

    def named_buffers(self):
        out = []
        for key in sorted(self.banks):
            for li, params in enumerate(self.banks[key].layers):
                base = f"bank.m{key[0]}.t{key[1]}.l{li}"
                out.append((f"{base}.rmean", params.running_mean))
                out.append((f"{base}.rvar", params.running_var))
        for prefix, norms in (("encnorm", self.enc_shared_norms),
                              ("decnorm", self.dec_shared_norms)):
            for li, params in enumerate(norms):
                out.append((f"{prefix}.l{li}.rmean", params.running_mean))
                out.append((f"{prefix}.l{li}.rvar", params.running_var))
        for t, norms in enumerate(self.dec_private_norms):
            for li, params in enumerate(norms):
                out.append((f"decnorm.t{t}.l{li}.rmean", params.running_mean))
                out.append((f"decnorm.t{t}.l{li}.rvar", params.running_var))
        return out

    # -- structural queries -----------------------------------------------------

    def exchange_sites(self):
        """(side, layer index, channel count) of every layer where exchange
        may act for this topology."""
        sites = []
        ex = self.spec.exchange_on
        if self.topology == "multimodal":
            enc_m, dec_m = self.m1, 0
        elif self.topology == "cycle":
            enc_m, dec_m = 2, 0
        elif self.topology == "multitask":
            enc_m, dec_m = 0, self.m2
        else:
            enc_m, dec_m = self.m1, self.m2
        if ex in ("encoder", "both") and enc_m >= 2:
            for li, (cout, _, _) in enumerate(self.spec.encoder):
                sites.append(("encoder", li, cout))
        if ex in ("decoder", "both") and dec_m >= 2:
            for li, (cout, _, _) in enumerate(self.spec.decoder):
                sites.append(("decoder", li, cout))
        return sites

    def _sparsity_plan(self, plan: ExchangePlan) -> ExchangePlan:
        # the no-divide ablation widens both eligibility and the L1 region
        if self.variant.kind == "no_divide":
            return ExchangePlan(num_streams=plan.num_streams, theta=plan.theta,
                                all_channel=True, signed_rule=plan.signed_rule)
        return plan

    def sparsity_streams(self):
        """(banks in stream order, plan) per exchange side, feeding the L1
        term; empty when the topology/config has no exchange side."""
        out = []
        ex = self.spec.exchange_on
        if self.topology == "multimodal" and ex in ("encoder", "both") and self.m1 >= 2:
            banks = [self.banks[(m, 0)] for m in range(self.m1)]
            out.append((banks, self._sparsity_plan(self.plan_enc)))
        elif self.topology == "cycle" and ex in ("encoder", "both"):
            for j in range(3):
                active = [m for m in range(3) if m != j]
                out.append(([self.banks[(m, j)] for m in active],
                            self._sparsity_plan(self.plan_enc)))
        elif self.topology == "multitask" and ex in ("decoder", "both") and self.m2 >= 2:
            out.append(([self.banks[(0, t)] for t in range(self.m2)],
                        self._sparsity_plan(self.plan_dec)))
        elif self.topology == "mm_mt":
            n_enc = len(self.spec.encoder)
            if ex in ("encoder", "both") and self.m1 >= 2:
                for t in range(self.m2):
                    banks = [
                        NormBank(key=(m, t), layers=self.banks[(m, t)].layers[:n_enc])
                        for m in range(self.m1)
                    ]
                    out.append((banks, self._sparsity_plan(self.plan_enc)))
            if ex in ("decoder", "both") and self.m2 >= 2:
                for m in range(self.m1):
                    banks = [
                        NormBank(key=(m, t), layers=self.banks[(m, t)].layers[n_enc:])
                        for t in range(self.m2)
                    ]
                    out.append((banks, self._sparsity_plan(self.plan_dec)))
        return out


def _check_divisibility(spec: NetSpec, enc_m: int, dec_m: int):
    if spec.exchange_on in ("encoder", "both") and enc_m >= 2:
        for cout, _, _ in spec.encoder:
            if cout % enc_m:
                raise ConfigurationError(
                    f"encoder stage with {cout} channels not divisible by {enc_m} streams"
                )
    if spec.exchange_on in ("decoder", "both") and dec_m >= 2:
        for cout, _, _ in spec.decoder:
            if cout % dec_m:
                raise ConfigurationError(
                    f"decoder stage with {cout} channels not divisible by {dec_m} streams"
                )


def build_model(spec: NetSpec, topology: str, m1: int, m2: int = 1, *,
                theta: float = 1e-2, variant: ExchangeVariant | None = None,
                seed: int = 0, dtype=np.float32, share_convs: bool = True,
                share_norms: bool = False, cycle_shared_decoder: bool = True,
                in_channels: int = 1, out_channels: tuple = (1,)) -> ModelAssembly:
    if topology not in TOPOLOGIES:
        raise ConfigurationError(f"unknown topology {topology!r}")
    if topology == "multimodal":
        if m1 < 1 or m2 != 1:
            raise ConfigurationError("multimodal needs M1 >= 1 and M2 = 1")
    elif topology == "cycle":
        if (m1, m2) != (3, 3):
            raise ConfigurationError("cycle fusion is implemented for exactly 3 modalities")
    elif topology == "multitask":
        if m1 != 1 or m2 < 2:
            raise ConfigurationError("multitask needs M1 = 1 and M2 >= 2")
    else:
        if m1 < 2 or m2 < 2:
            raise ConfigurationError("mm_mt needs M1 >= 2 and M2 >= 2")
    if len(out_channels) != (m2 if topology != "multimodal" else 1):
        raise ConfigurationError(
            f"out_channels needs one entry per task, got {out_channels}"
        )
    variant = variant or ExchangeVariant()

    enc_m = {"multimodal": m1, "cycle": 2, "multitask": 0, "mm_mt": m1}[topology]
    dec_m = {"multimodal": 0, "cycle": 0, "multitask": m2, "mm_mt": m2}[topology]
    _check_divisibility(spec, enc_m, dec_m)

    asm = ModelAssembly(topology, spec, m1, m2, theta, variant, dtype,
                        share_convs, share_norms, cycle_shared_decoder,
                        in_channels, out_channels)
    if enc_m >= 2:
        asm.plan_enc = ExchangePlan(num_streams=enc_m, theta=theta)
    if dec_m >= 2:
        asm.plan_dec = ExchangePlan(num_streams=dec_m, theta=theta)

    counter = [0]

    def sub_seed():
        counter[0] += 1
        return prng.derive(seed, counter[0])

    def make_encoder(store: SharedParamStore):
        cin = in_channels
        for li, (cout, k, stride) in enumerate(spec.encoder):
            store.add(f"c{li}", cin, cout, k, stride, sub_seed(), dtype)
            cin = cout
        return cin

    def make_decoder(store: SharedParamStore):
        cin = spec.encoder[-1][0]
        for li, (cout, k, _) in enumerate(spec.decoder):
            store.add(f"c{li}", cin, cout, k, 1, sub_seed(), dtype)
            cin = cout
        return cin

    def make_norms(side_stages):
        return [
            NormParams.create(cout, mode=spec.norm_mode, dtype=dtype)
            for cout, _, _ in side_stages
        ]

    def make_head(name, cin, cout):
        store = SharedParamStore(name)
        layer = store.add("head", cin, cout, 3, 1, sub_seed(), dtype)
        return layer

    if topology == "multimodal":
        n_enc_stores = 1 if share_convs else m1
        for s in range(n_enc_stores):
            st = SharedParamStore(f"enc{'' if share_convs else f'.s{s}'}")
            make_encoder(st)
            asm.enc_stores.append(st)
        dec = SharedParamStore("dec")
        dec_out = make_decoder(dec)
        asm.dec_stores.append(dec)
        n_banks = 1 if share_norms else m1
        for m in range(n_banks):
            asm.banks[(m, 0)] = NormBank(key=(m, 0), layers=make_norms(spec.encoder))
        asm.dec_shared_norms = make_norms(spec.decoder)
        asm.heads.append(make_head("head", dec_out, out_channels[0]))
        asm.scores = DecisionScores(
            logits=[Tensor.param(np.zeros(m1, dtype=dtype))]
        )

    elif topology == "cycle":
        st = SharedParamStore("enc")
        make_encoder(st)
        asm.enc_stores.append(st)
        for j in range(3):
            for m in range(3):
                if m != j:
                    asm.banks[(m, j)] = NormBank(key=(m, j), layers=make_norms(spec.encoder))
        if cycle_shared_decoder:
            dec = SharedParamStore("dec")
            dec_out = make_decoder(dec)
            asm.dec_stores.append(dec)
            asm.dec_shared_norms = make_norms(spec.decoder)
            asm.heads.append(make_head("head", dec_out, out_channels[0]))
        else:
            for j in range(3):
                dec = SharedParamStore(f"dec.t{j}")
                dec_out = make_decoder(dec)
                asm.dec_stores.append(dec)
                asm.heads.append(make_head(f"head.t{j}", dec_out, out_channels[j]))
            asm.dec_private_norms = [make_norms(spec.decoder) for _ in range(3)]
        asm.scores = DecisionScores(
            logits=[Tensor.param(np.zeros(2, dtype=dtype)) for _ in range(3)]
        )

    elif topology == "multitask":
        st = SharedParamStore("enc")
        make_encoder(st)
        asm.enc_stores.append(st)
        asm.enc_shared_norms = make_norms(spec.encoder)
        for t in range(m2):
            dec = SharedParamStore(f"dec.t{t}")
            dec_out = make_decoder(dec)
            asm.dec_stores.append(dec)
            asm.banks[(0, t)] = NormBank(key=(0, t), layers=make_norms(spec.decoder))
            asm.heads.append(make_head(f"head.t{t}", dec_out, out_channels[t]))

    else:  # mm_mt
        st = SharedParamStore("enc")
        make_encoder(st)
        asm.enc_stores.append(st)
        for t in range(m2):
            dec = SharedParamStore(f"dec.t{t}")
            dec_out = make_decoder(dec)
            asm.dec_stores.append(dec)
            asm.heads.append(make_head(f"head.t{t}", dec_out, out_channels[t]))
        for m in range(m1):
            for t in range(m2):
                asm.banks[(m, t)] = NormBank(
                    key=(m, t), layers=make_norms(spec.encoder) + make_norms(spec.decoder)
                )
        asm.scores = DecisionScores(
            logits=[Tensor.param(np.zeros(m1, dtype=dtype)) for _ in range(m2)]
        )

    return asm


# -- forward -----------------------------------------------------------------------


def _apply_exchange(asm, streams, norms_per_stream, plan, side, li, masks):
    gammas = [p.gamma.values for p in norms_per_stream]
    outs, mask = exchange_variant(streams, gammas, plan, asm.variant)
    masks[f"{side}{li}"] = mask
    return outs


def _shared_conv(layer: ConvLayer, streams: list[Tensor]) -> list[Tensor]:
    """One convolution call for all streams sharing the layer's weights."""
    if len(streams) == 1:
        return [layer(streams[0])]
    return split_batch(layer(concat_batch(streams)), len(streams))


def _encode_streams(asm, xs, banks, training, masks, exchange_active):
    """Run the encoder over parallel streams with per-stream norms."""
    unshared = len(asm.enc_stores) > 1  # unshared-convolutions ablation
    hs = list(xs)
    for li in range(len(asm.spec.encoder)):
        if unshared:
            hs = [asm.enc_stores[m][f"c{li}"](h) for m, h in enumerate(hs)]
        else:
            hs = _shared_conv(asm.enc_stores[0][f"c{li}"], hs)
        norms = [banks[m].layers[li] for m in range(len(hs))]
        hs = [norm_forward(h, p, training) for h, p in zip(hs, norms)]
        if exchange_active and len(hs) >= 2 and asm.plan_enc is not None \
                and asm.plan_enc.layer_enabled(li):
            hs = _apply_exchange(asm, hs, norms, asm.plan_enc, "enc", li, masks)
        hs = [relu(h) for h in hs]
    return hs


def _decode_streams_shared(asm, hs, norms, store, training):
    """Decode parallel streams through one shared decoder; norms are the
    shared parameter set, applied per stream so statistics stay per-stream."""
    for li, (_, _, up) in enumerate(asm.spec.decoder):
        hs = [upsample_nearest(h, up) for h in hs]
        hs = _shared_conv(store[f"c{li}"], hs)
        hs = [norm_forward(h, norms[li], training) for h in hs]
        hs = [relu(h) for h in hs]
    return hs


def _decode_stream(asm, h, norms, store, training):
    return _decode_streams_shared(asm, [h], norms, store, training)[0]


def _ensemble(asm, preds, task):
    alphas = asm.scores.alphas(task)
    acc = np.zeros_like(preds[0].values)
    for a, p in zip(alphas, preds):
        acc = acc + a * p.values
    return Tensor.const(acc)


def _as_tensors(inputs, dtype):
    return [
        x if isinstance(x, Tensor) else Tensor.const(np.asarray(x, dtype=dtype))
        for x in inputs
    ]


def run_all_tasks(asm: ModelAssembly, inputs, training: bool) -> list[TaskOutput]:
    """One full pass producing every task's outputs (exchange couples tasks in
    the decoder-exchanging topologies, so they must run together)."""
    xs = _as_tensors(inputs, asm.dtype)
    masks: dict[str, ExchangeMask] = {}
    ex_on = asm.spec.exchange_on

    if asm.topology == "multimodal":
        if len(xs) != asm.m1:
            raise ValidationError(f"expected {asm.m1} input streams, got {len(xs)}")
        n_banks = 1 if asm.share_norms else asm.m1
        banks = [asm.banks[(m % n_banks, 0)] for m in range(asm.m1)]
        hs = _encode_streams(asm, xs, banks, training, masks,
                             exchange_active=ex_on in ("encoder", "both"))
        hs = _decode_streams_shared(asm, hs, asm.dec_shared_norms, asm.dec_stores[0],
                                    training)
        preds = _shared_conv(asm.heads[0], hs)
        ens = _ensemble(asm, preds, 0) if asm.m1 >= 1 else None
        return [TaskOutput(preds=preds, ensemble=ens, masks=masks)]

    if asm.topology == "multitask":
        if len(xs) != 1:
            raise ValidationError(f"multitask takes a single input, got {len(xs)}")
        h = xs[0]
        store = asm.enc_stores[0]
        for li in range(len(asm.spec.encoder)):
            h = store[f"c{li}"](h)
            h = norm_forward(h, asm.enc_shared_norms[li], training)
            h = relu(h)
        streams = [h for _ in range(asm.m2)]
        dec_norms = [asm.banks[(0, t)].layers for t in range(asm.m2)]
        for li, (_, _, up) in enumerate(asm.spec.decoder):
            streams = [upsample_nearest(s, up) for s in streams]
            streams = [asm.dec_stores[t][f"c{li}"](s) for t, s in enumerate(streams)]
            norms = [dec_norms[t][li] for t in range(asm.m2)]
            streams = [norm_forward(s, p, training) for s, p in zip(streams, norms)]
            if ex_on in ("decoder", "both") and asm.plan_dec.layer_enabled(li):
                streams = _apply_exchange(asm, streams, norms, asm.plan_dec, "dec", li, masks)
            streams = [relu(s) for s in streams]
        preds = [asm.heads[t](s) for t, s in enumerate(streams)]
        return [
            TaskOutput(preds=[preds[t]], ensemble=None, masks=masks if t == 0 else {})
            for t in range(asm.m2)
        ]

    if asm.topology == "mm_mt":
        if len(xs) != asm.m1:
            raise ValidationError(f"expected {asm.m1} input streams, got {len(xs)}")
        n_enc = len(asm.spec.encoder)
        # encoder: exchange across modalities within each task
        encoded = {}
        for t in range(asm.m2):
            banks = [
                NormBank(key=(m, t), layers=asm.banks[(m, t)].layers[:n_enc])
                for m in range(asm.m1)
            ]
            hs = _encode_streams(asm, xs, banks, training, masks,
                                 exchange_active=ex_on in ("encoder", "both"))
            for m in range(asm.m1):
                encoded[(m, t)] = hs[m]
        # decoder: exchange across tasks for each modality stream
        decoded = dict(encoded)
        for li, (_, _, up) in enumerate(asm.spec.decoder):
            for m in range(asm.m1):
                streams = [decoded[(m, t)] for t in range(asm.m2)]
                streams = [upsample_nearest(s, up) for s in streams]
                streams = [asm.dec_stores[t][f"c{li}"](s) for t, s in enumerate(streams)]
                norms = [asm.banks[(m, t)].layers[n_enc + li] for t in range(asm.m2)]
                streams = [norm_forward(s, p, training) for s, p in zip(streams, norms)]
                if ex_on in ("decoder", "both") and asm.plan_dec.layer_enabled(li):
                    streams = _apply_exchange(
                        asm, streams, norms, asm.plan_dec, f"dec.m{m}.", li, masks
                    )
                streams = [relu(s) for s in streams]
                for t in range(asm.m2):
                    decoded[(m, t)] = streams[t]
        outs = []
        for t in range(asm.m2):
            preds = [asm.heads[t](decoded[(m, t)]) for m in range(asm.m1)]
            outs.append(
                TaskOutput(preds=preds, ensemble=_ensemble(asm, preds, t),
                           masks=masks if t == 0 else {})
            )
        return outs

    raise ConfigurationError(
        "cycle flows take per-flow inputs; call forward(asm, inputs, task=j)"
    )


def forward(asm: ModelAssembly, inputs, task: int = 0, training: bool = False) -> TaskOutput:
    """Predictions of every stream for one task plus their score-weighted
    ensemble. For the cycle topology, inputs are the two active modalities of
    flow `task` in ascending modality order."""
    n_tasks = 3 if asm.topology == "cycle" else (1 if asm.topology == "multimodal" else asm.m2)
    if not 0 <= task < n_tasks:
        raise ValidationError(f"task index {task} out of range [0, {n_tasks})")

    if asm.topology != "cycle":
        return run_all_tasks(asm, inputs, training)[task]

    xs = _as_tensors(inputs, asm.dtype)
    if len(xs) != 2:
        raise ValidationError(f"cycle flow takes 2 active inputs, got {len(xs)}")
    masks: dict[str, ExchangeMask] = {}
    active = [m for m in range(3) if m != task]
    banks = [asm.banks[(m, task)] for m in active]
    hs = _encode_streams(asm, xs, banks, training, masks,
                         exchange_active=asm.spec.exchange_on in ("encoder", "both"))
    if asm.cycle_shared_decoder:
        hs = _decode_streams_shared(asm, hs, asm.dec_shared_norms, asm.dec_stores[0],
                                    training)
        preds = _shared_conv(asm.heads[0], hs)
    else:
        hs = _decode_streams_shared(asm, hs, asm.dec_private_norms[task],
                                    asm.dec_stores[task], training)
        preds = _shared_conv(asm.heads[task], hs)
    return TaskOutput(preds=preds, ensemble=_ensemble(asm, preds, task), masks=masks)


# -- decision scores ------------------------------------------------------------------


def update_decision_scores(asm: ModelAssembly, batch, learning_rate: float,
                           preds_per_task=None) -> None:
    """One gradient step on the decision-score logits per task, comparing the
    ensembled prediction against the label with every per-stream prediction
    treated as a constant; subnetwork parameters are untouched.

    batch: (inputs, targets) with targets per task. The training loop passes
    its own step's predictions via preds_per_task; called standalone, a fresh
    inference-mode pass supplies them so running statistics stay untouched.
    """
    if asm.scores is None:
        return
    inputs, targets = batch
    if asm.topology == "cycle":
        # each flow has its own inputs: expect per-task (inputs, target) pairs
        for j, (flow_inputs, target) in enumerate(zip(inputs, targets)):
            preds = (preds_per_task[j] if preds_per_task is not None
                     else forward(asm, flow_inputs, task=j, training=False).preds)
            _score_step(asm, j, preds, target, learning_rate)
        return
    if preds_per_task is None:
        preds_per_task = [o.preds for o in run_all_tasks(asm, inputs, training=False)]
    for t, preds in enumerate(preds_per_task):
        if len(asm.scores.logits) <= t:
            continue
        _score_step(asm, t, preds, targets[t], learning_rate)


def _score_step(asm, task, preds, target, lr):
    from .tensor import backward, cross_entropy_pixelwise, mse_loss

    alphas = asm.scores.alphas(task)
    pvals = [p.values.astype(np.float64) for p in preds]
    ens = sum(a * p for a, p in zip(alphas, pvals))
    ens_t = Tensor.param(ens)
    target = np.asarray(target)
    if target.dtype.kind in "iu":
        loss = cross_entropy_pixelwise(ens_t, target)
    else:
        loss = mse_loss(ens_t, Tensor.const(target.astype(np.float64)))
    backward(loss)
    g_ens = ens_t.grad
    g_alpha = np.array([float((g_ens * p).sum()) for p in pvals])
    # softmax chain rule: dL/dz_k = a_k * (g_k - sum_j a_j g_j)
    g_logit = alphas * (g_alpha - float((alphas * g_alpha).sum()))
    logits = asm.scores.logits[task]
    logits.values[:] = logits.values - np.asarray(lr * g_logit, dtype=logits.dtype)


# -- structural counts -------------------------------------------------------------


def count_parameters(asm: ModelAssembly) -> dict:
    totals = {"conv": 0, "norm": 0, "decision": 0}
    for name, tensor, kind, _ in asm.named_parameters():
        size = tensor.values.size
        if kind in ("conv_weight", "conv_bias"):
            totals["conv"] += size
        elif kind == "decision":
            totals["decision"] += size
        else:
            totals["norm"] += size
    totals["total"] = sum(totals.values())
    return totals


def count_norm_sets(asm: ModelAssembly) -> int:
    """Number of private (modality, task) normalization banks."""
    return len(asm.banks)
