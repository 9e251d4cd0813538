"""Training loop, evaluation metrics, channel tracing, and checkpoints.

The per-step objective is the sum over streams (and, for the multi-flow
topologies, over tasks) of each stream's own task loss, plus the L1 penalty
on the exchange-eligible scaling factors. The ensemble never drives
subnetwork gradients; decision scores get their own detached step after the
main parameter update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import prng
from .errors import ConfigurationError, FormatError, NumericError, ValidationError
from .exchange import ExchangeVariant, variant_mask
from .models import (
    ModelAssembly,
    NetSpec,
    build_model,
    forward,
    run_all_tasks,
    update_decision_scores,
)
from .norm import sparsity_penalty
from .synthdata import Dataset
from .tensor import Tensor, add, backward, cross_entropy_pixelwise, mse_loss

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TraceRow",
    "SGD",
    "INPUT_MODES",
    "build_for_task",
    "prepare_inputs",
    "train_step",
    "train",
    "evaluate",
    "record_trace",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics_csv",
    "write_trace_csvs",
]


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 0.05
    lr_decoder: float = 0.05
    lr_scores: float = 0.05  # matches the decoder rate by default
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 1e-3
    theta: float = 1e-2
    batch_size: int = 8
    epochs: int = 60
    seed: int = 0
    trace_every: int = 50
    dtype: str = "float32"
    variant: ExchangeVariant = ExchangeVariant()
    cycle_random_flow: bool = False

    def __post_init__(self):
        for name in ("lr_encoder", "lr_decoder", "lr_scores", "momentum",
                     "weight_decay", "lam", "theta"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.trace_every < 1:
            raise ValidationError("trace_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    stream_losses: dict  # "t{j}s{m}" -> float
    ensemble_losses: dict  # "t{j}" -> float
    sparsity: float
    total: float
    miou: float | None = None


@dataclass
class TraceRow:
    step: int
    layer: str
    stream: str
    gammas: np.ndarray
    replaced: np.ndarray
    exchanged_fraction: float
    region: tuple
    categories: tuple | None = None  # (a, b, c, both_small) for two streams


class SGD:
    """Momentum SGD; weight decay applies to convolution weights only, never
    to scaling factors or offsets."""

    def __init__(self, assembly: ModelAssembly, config: TrainConfig):
        self.config = config
        self.slots = [
            (name, tensor, kind, side)
            for name, tensor, kind, side in assembly.named_parameters()
            if kind != "decision"
        ]
        self.buffers = {
            name: np.zeros_like(tensor.values) for name, tensor, _, _ in self.slots
        }

    def zero_grad(self):
        for _, tensor, _, _ in self.slots:
            tensor.grad = None

    def step(self, lr_scale: float = 1.0):
        cfg = self.config
        for name, tensor, kind, side in self.slots:
            if tensor.grad is None:
                continue
            g = tensor.grad
            if kind == "conv_weight" and cfg.weight_decay:
                g = g + cfg.weight_decay * tensor.values
            buf = self.buffers[name]
            buf *= cfg.momentum
            buf += g
            lr = (cfg.lr_encoder if side == "encoder" else cfg.lr_decoder) * lr_scale
            tensor.values[:] = tensor.values - lr * buf


# -- experiment wiring ----------------------------------------------------------

INPUT_MODES = ("streams", "unimodal0", "unimodal1", "concat", "average")

_TASK_TOPOLOGY = {
    "fusion_regression": ("multimodal", 2, 1, (1,), "encoder"),
    "fusion_segmentation": ("multimodal", 2, 1, (4,), "encoder"),
    "cycle_triplet": ("cycle", 3, 3, (1, 1, 1), "encoder"),
    "multitask_pair": ("multitask", 1, 2, (1, 1), "decoder"),
    "mm_mt_quad": ("mm_mt", 2, 2, (1, 4), "both"),
}


def build_for_task(task_kind: str, config: TrainConfig, *, input_mode: str = "streams",
                   spec: NetSpec | None = None, share_convs: bool = True,
                   share_norms: bool = False, norm_mode: str = "batch",
                   exchange_on: str | None = None,
                   cycle_shared_decoder: bool = True) -> ModelAssembly:
    """The assembly matching a synthetic task, honoring baseline input modes
    (single-stream unimodal, early concatenation, early averaging)."""
    if task_kind not in _TASK_TOPOLOGY:
        raise ConfigurationError(f"unknown task kind {task_kind!r}")
    if input_mode not in INPUT_MODES:
        raise ConfigurationError(
            f"unknown input mode {input_mode!r}; expected one of {', '.join(INPUT_MODES)}"
        )
    topology, m1, m2, out_channels, default_ex = _TASK_TOPOLOGY[task_kind]
    if input_mode != "streams" and topology != "multimodal":
        raise ConfigurationError(f"input mode {input_mode!r} applies to fusion tasks only")

    in_channels = 1
    if input_mode != "streams":
        n_mod = m1
        m1 = 1
        in_channels = n_mod if input_mode == "concat" else 1
    if spec is None:
        spec = NetSpec(norm_mode=norm_mode, exchange_on=exchange_on or default_ex)
    else:
        spec = replace(spec, norm_mode=norm_mode,
                       exchange_on=exchange_on or spec.exchange_on)
    return build_model(
        spec, topology, m1, m2,
        theta=config.theta, variant=config.variant, seed=config.seed,
        dtype=config.np_dtype, share_convs=share_convs, share_norms=share_norms,
        cycle_shared_decoder=cycle_shared_decoder,
        in_channels=in_channels, out_channels=out_channels,
    )


def prepare_inputs(input_mode: str, arrays: list[np.ndarray]) -> list[np.ndarray]:
    if input_mode == "streams":
        return list(arrays)
    if input_mode == "unimodal0":
        return [arrays[0]]
    if input_mode == "unimodal1":
        return [arrays[1]]
    if input_mode == "concat":
        return [np.concatenate(arrays, axis=1)]
    if input_mode == "average":
        return [np.mean(np.stack(arrays), axis=0)]
    raise ConfigurationError(f"unknown input mode {input_mode!r}")


def _task_loss(pred: Tensor, target: np.ndarray, dtype) -> Tensor:
    target = np.asarray(target)
    if target.dtype.kind in "iu":
        return cross_entropy_pixelwise(pred, target)
    return mse_loss(pred, Tensor.const(target.astype(dtype)))


def _ensemble_metric(ensemble: Tensor | None, target: np.ndarray) -> float | None:
    if ensemble is None:
        return None
    target = np.asarray(target)
    ev = ensemble.values.astype(np.float64)
    if target.dtype.kind in "iu":
        z = ev - ev.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        n, _, h, w = ev.shape
        ng, hg, wg = np.ogrid[:n, :h, :w]
        return float(-np.log(np.maximum(p[ng, target, hg, wg], 1e-300)).mean())
    return float(np.mean((ev - target.astype(np.float64)) ** 2))


def _batch_miou(ensemble: Tensor | None, target: np.ndarray, num_classes: int) -> float | None:
    if ensemble is None or np.asarray(target).dtype.kind not in "iu":
        return None
    pred = ensemble.values.argmax(axis=1)
    return mean_iou(pred, np.asarray(target), num_classes)


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean over classes of |pred AND gt| / |pred OR gt|, skipping classes
    with an empty union."""
    vals = []
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union:
            vals.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(vals)) if vals else 0.0


def _first_nonfinite_parameter(assembly: ModelAssembly) -> str:
    for name, tensor, _, _ in assembly.named_parameters():
        if not np.all(np.isfinite(tensor.values)):
            return name
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            return name + ".grad"
    return "<loss only>"


def _flow_batches(assembly, inputs, targets):
    """Per-task (task, inputs, target) triples; cycle flows pair two active
    views against the held-out one."""
    if assembly.topology == "cycle":
        out = []
        for j in range(3):
            out.append((j, [inputs[m] for m in range(3) if m != j], targets[j]))
        return out
    n_tasks = 1 if assembly.topology == "multimodal" else assembly.m2
    return [(t, inputs, targets[t]) for t in range(n_tasks)]


def train_step(assembly: ModelAssembly, batch, config: TrainConfig,
               optimizer: SGD, step: int, epoch: int = 0,
               lr_scale: float = 1.0) -> MetricsRecord:
    """Forward all flows, one SGD step on subnetwork parameters, then the
    detached decision-score update."""
    inputs, targets = batch
    optimizer.zero_grad()

    stream_losses: dict[str, float] = {}
    ensemble_losses: dict[str, float] = {}
    miou = None
    loss_terms: list[Tensor] = []

    step_preds = {}
    if assembly.topology == "cycle":
        flows = _flow_batches(assembly, inputs, targets)
        if config.cycle_random_flow:
            pick = prng.derive(config.seed, 777, step) % 3
            flows = [flows[pick]]
        for j, flow_inputs, target in flows:
            out = forward(assembly, flow_inputs, task=j, training=True)
            step_preds[j] = out.preds
            for m, pred in enumerate(out.preds):
                term = _task_loss(pred, target, assembly.dtype)
                stream_losses[f"t{j}s{m}"] = term.item()
                loss_terms.append(term)
            ensemble_losses[f"t{j}"] = _ensemble_metric(out.ensemble, target)
    else:
        outs = run_all_tasks(assembly, inputs, training=True)
        for t, out in enumerate(outs):
            target = targets[t]
            step_preds[t] = out.preds
            for m, pred in enumerate(out.preds):
                term = _task_loss(pred, target, assembly.dtype)
                stream_losses[f"t{t}s{m}"] = term.item()
                loss_terms.append(term)
            ens_loss = _ensemble_metric(out.ensemble, target)
            if ens_loss is not None:
                ensemble_losses[f"t{t}"] = ens_loss
            if miou is None:
                miou = _batch_miou(out.ensemble, target, assembly.out_channels[t])

    sparsity_value = 0.0
    for banks, plan in assembly.sparsity_streams():
        term = sparsity_penalty(banks, plan, config.lam)
        sparsity_value += term.item()
        loss_terms.append(term)

    total = loss_terms[0]
    for term in loss_terms[1:]:
        total = add(total, term)
    backward(total)

    total_value = total.item()
    if not np.isfinite(total_value):
        raise NumericError(
            f"non-finite loss at step {step}; first non-finite parameter: "
            f"{_first_nonfinite_parameter(assembly)}"
        )
    optimizer.step(lr_scale)

    if assembly.scores is not None:
        if assembly.topology == "cycle":
            flows = _flow_batches(assembly, inputs, targets)
            score_batch = ([f[1] for f in flows], [f[2] for f in flows])
            preds = [step_preds.get(j) for j in range(3)]
            if any(p is None for p in preds):  # random-flow ablation: recompute
                preds = None
        else:
            score_batch = (inputs, targets)
            preds = [step_preds[t] for t in sorted(step_preds)]
        update_decision_scores(assembly, score_batch, config.lr_scores * lr_scale,
                               preds_per_task=preds)

    return MetricsRecord(step=step, epoch=epoch, stream_losses=stream_losses,
                         ensemble_losses=ensemble_losses, sparsity=sparsity_value,
                         total=total_value, miou=miou)


# -- tracing ------------------------------------------------------------------------


def _site_streams(assembly):
    """Per exchange site: (layer label, [(stream label, gamma vector)], plan)."""
    sites = []
    for side, li, _c in assembly.exchange_sites():
        plan = assembly.plan_enc if side == "encoder" else assembly.plan_dec
        label = f"{'enc' if side == 'encoder' else 'dec'}{li}"
        if assembly.topology == "multimodal":
            n_banks = 1 if assembly.share_norms else assembly.m1
            entries = [
                (f"m{m}", assembly.banks[(m % n_banks, 0)].layers[li].gamma.values)
                for m in range(assembly.m1)
            ]
            sites.append((label, entries, plan))
        elif assembly.topology == "cycle":
            for j in range(3):
                active = [m for m in range(3) if m != j]
                entries = [
                    (f"m{m}.t{j}", assembly.banks[(m, j)].layers[li].gamma.values)
                    for m in active
                ]
                sites.append((f"{label}.t{j}", entries, plan))
        elif assembly.topology == "multitask":
            entries = [
                (f"t{t}", assembly.banks[(0, t)].layers[li].gamma.values)
                for t in range(assembly.m2)
            ]
            sites.append((label, entries, plan))
        else:  # mm_mt
            n_enc = len(assembly.spec.encoder)
            if side == "encoder":
                for t in range(assembly.m2):
                    entries = [
                        (f"m{m}.t{t}", assembly.banks[(m, t)].layers[li].gamma.values)
                        for m in range(assembly.m1)
                    ]
                    sites.append((f"{label}.t{t}", entries, plan))
            else:
                for m in range(assembly.m1):
                    entries = [
                        (f"m{m}.t{t}",
                         assembly.banks[(m, t)].layers[n_enc + li].gamma.values)
                        for t in range(assembly.m2)
                    ]
                    sites.append((f"{label}.m{m}", entries, plan))
    return sites


def record_trace(assembly: ModelAssembly, step: int, theta: float | None = None,
                 variant: ExchangeVariant | None = None) -> list[TraceRow]:
    """Gamma snapshots and replaced flags for every exchange-enabled layer."""
    rows = []
    variant = variant or assembly.variant
    for label, entries, plan in _site_streams(assembly):
        gammas = [g for _, g in entries]
        mask = variant_mask(gammas, plan, variant)
        regions = plan.regions_for(len(gammas[0]))
        for m, (stream, gamma) in enumerate(entries):
            cats = None
            if len(entries) == 2:
                th = plan.theta if theta is None else theta
                own = np.abs(gamma[np.asarray(regions[m], dtype=int)])
                other = np.abs(gammas[1 - m][np.asarray(regions[m], dtype=int)])
                a = int(((own <= th) & (other > th)).sum())
                b = int(((own > th) & (other <= th)).sum())
                c = int(((own > th) & (other > th)).sum())
                d = int(((own <= th) & (other <= th)).sum())
                cats = (a, b, c, d)
            rows.append(TraceRow(
                step=step, layer=label, stream=stream, gammas=gamma.copy(),
                replaced=mask.replaced[m].copy(),
                exchanged_fraction=mask.exchanged_fraction,
                region=regions[m], categories=cats,
            ))
    return rows


# -- full loop -----------------------------------------------------------------------


def _dataset_batches(dataset: Dataset, split: str, batch_size: int, perm=None):
    inputs, targets = dataset.split(split)
    n = inputs[0].shape[0]
    order = perm if perm is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield [arr[idx] for arr in inputs], [arr[idx] for arr in targets]


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    traces: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1].total if self.records else float("nan")


def train(assembly: ModelAssembly, dataset: Dataset, config: TrainConfig,
          input_mode: str = "streams", optimizer: SGD | None = None,
          start_step: int = 0, epochs: int | None = None) -> TrainHistory:
    """Epoch loop with per-epoch shuffling from the counter PRNG and the
    learning rate halved at the midpoint epoch."""
    optimizer = optimizer or SGD(assembly, config)
    history = TrainHistory()
    total_epochs = config.epochs if epochs is None else epochs
    step = 0
    for epoch in range(total_epochs):
        lr_scale = 0.5 if epoch >= config.epochs // 2 else 1.0
        perm = prng.permutation(dataset.n_train, prng.derive(config.seed, 1000, epoch))
        for raw_inputs, targets in _dataset_batches(dataset, "train", config.batch_size, perm):
            if step < start_step:  # resuming: replay the schedule, skip the work
                step += 1
                continue
            batch = (prepare_inputs(input_mode, raw_inputs), targets)
            if config.trace_every and step % config.trace_every == 0:
                history.traces.extend(record_trace(assembly, step))
            rec = train_step(assembly, batch, config, optimizer, step, epoch, lr_scale)
            history.records.append(rec)
            step += 1
    history.traces.extend(record_trace(assembly, step))
    return history


def evaluate(assembly: ModelAssembly, dataset: Dataset, split: str = "val",
             batch_size: int = 32, input_mode: str = "streams") -> dict:
    """Per-stream and ensemble MSE/MAE, plus mean IoU for label targets.
    Deterministic: batches reduce in index order."""
    inputs_all, targets_all = dataset.split(split)
    n_tasks = len(targets_all)
    acc = [
        {"sq": None, "ab": None, "ens_sq": 0.0, "ens_ab": 0.0,
         "inter": None, "union": None, "count": 0}
        for _ in range(n_tasks)
    ]

    for raw_inputs, targets in _dataset_batches(dataset, split, batch_size):
        streams = prepare_inputs(input_mode, raw_inputs)
        if assembly.topology == "cycle":
            flow_outs = [
                forward(assembly, [streams[m] for m in range(3) if m != j], task=j,
                        training=False)
                for j in range(3)
            ]
        else:
            flow_outs = run_all_tasks(assembly, streams, training=False)
        for t, out in enumerate(flow_outs):
            target = np.asarray(targets[t])
            a = acc[t]
            npix = target.size
            a["count"] += npix
            if target.dtype.kind in "iu":
                ncls = assembly.out_channels[t]
                if a["inter"] is None:
                    a["inter"] = np.zeros((len(out.preds) + 1, ncls), dtype=np.int64)
                    a["union"] = np.zeros((len(out.preds) + 1, ncls), dtype=np.int64)
                preds = [p.values.argmax(axis=1) for p in out.preds]
                if out.ensemble is not None:
                    preds.append(out.ensemble.values.argmax(axis=1))
                for s, pmap in enumerate(preds):
                    for c in range(ncls):
                        pc = pmap == c
                        gc = target == c
                        a["inter"][s, c] += np.logical_and(pc, gc).sum()
                        a["union"][s, c] += np.logical_or(pc, gc).sum()
            else:
                tgt = target.astype(np.float64)
                if a["sq"] is None:
                    a["sq"] = np.zeros(len(out.preds))
                    a["ab"] = np.zeros(len(out.preds))
                for m, p in enumerate(out.preds):
                    d = p.values.astype(np.float64) - tgt
                    a["sq"][m] += (d * d).sum()
                    a["ab"][m] += np.abs(d).sum()
                if out.ensemble is not None:
                    d = out.ensemble.values.astype(np.float64) - tgt
                    a["ens_sq"] += (d * d).sum()
                    a["ens_ab"] += np.abs(d).sum()

    results = {}
    for t, a in enumerate(acc):
        entry = {}
        if a["sq"] is not None:
            entry["stream_mse"] = [float(v / a["count"]) for v in a["sq"]]
            entry["stream_mae"] = [float(v / a["count"]) for v in a["ab"]]
            if assembly.topology != "multitask" and assembly.scores is not None:
                entry["ensemble_mse"] = float(a["ens_sq"] / a["count"])
                entry["ensemble_mae"] = float(a["ens_ab"] / a["count"])
        if a["inter"] is not None:
            ious = []
            for s in range(a["inter"].shape[0]):
                vals = [
                    a["inter"][s, c] / a["union"][s, c]
                    for c in range(a["inter"].shape[1])
                    if a["union"][s, c]
                ]
                ious.append(float(np.mean(vals)) if vals else 0.0)
            entry["stream_miou"] = ious[:-1] if len(ious) > 1 else ious
            if assembly.scores is not None:
                entry["ensemble_miou"] = ious[-1]
        results[f"task{t}"] = entry
    return results


# -- delimited outputs -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records: list[MetricsRecord], path):
    if not records:
        raise ValidationError("no metrics records to write")
    stream_keys = sorted(records[0].stream_losses)
    ens_keys = sorted(records[0].ensemble_losses)
    header = (
        ["step", "epoch"]
        + [f"loss_{k}" for k in stream_keys]
        + [f"ensemble_loss_{k}" for k in ens_keys]
        + ["miou", "sparsity", "total"]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in records:
            row = [r.step, r.epoch]
            row += [r.stream_losses[k] for k in stream_keys]
            row += [r.ensemble_losses.get(k) for k in ens_keys]
            row += [r.miou, r.sparsity, r.total]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_trace_csvs(traces: list[TraceRow], trace_path, summary_path):
    with open(trace_path, "w") as fh:
        fh.write("step,layer,stream,channel,gamma,replaced_flag\n")
        for row in traces:
            for c in range(len(row.gammas)):
                fh.write(
                    f"{row.step},{row.layer},{row.stream},{c},"
                    f"{_fmt(float(row.gammas[c]))},{int(row.replaced[c])}\n"
                )
    with open(summary_path, "w") as fh:
        fh.write(
            "step,layer,stream,exchanged_fraction,region_replaced_fraction,"
            "cat_a,cat_b,cat_c,cat_both_small\n"
        )
        for row in traces:
            region = np.asarray(row.region, dtype=int)
            own_frac = (
                float(row.replaced[region].sum()) / len(region) if len(region) else 0.0
            )
            cats = row.categories or ("", "", "", "")
            fh.write(
                f"{row.step},{row.layer},{row.stream},{_fmt(row.exchanged_fraction)},"
                f"{_fmt(own_frac)},{cats[0]},{cats[1]},{cats[2]},{cats[3]}\n"
            )


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"CENCKPT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _checkpoint_entries(assembly: ModelAssembly, optimizer: SGD | None):
    entries = [(name, t.values) for name, t, _, _ in assembly.named_parameters()]
    entries += list(assembly.named_buffers())
    if optimizer is not None:
        entries += [(f"mom.{name}", buf) for name, buf in sorted(optimizer.buffers.items())]
    return entries


def save_checkpoint(assembly: ModelAssembly, optimizer: SGD | None,
                    config: TrainConfig, step: int, path):
    config_blob = repr(config).encode()
    entries = _checkpoint_entries(assembly, optimizer)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", step))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            code = _DTYPE_CODES[np.dtype(arr.dtype)]
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(_CODE_DTYPES[code]).tobytes())


def load_checkpoint(assembly: ModelAssembly, optimizer: SGD | None, path) -> int:
    """Restore parameters, running statistics, and momentum in place; returns
    the stored step counter."""
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic in {path}")
        (step,) = struct.unpack("<I", fh.read(4))
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        fh.read(cfg_len)
        (n_entries,) = struct.unpack("<I", fh.read(4))
        loaded = {}
        for _ in range(n_entries):
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError("truncated checkpoint: missing entry header")
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            if code not in _CODE_DTYPES:
                raise FormatError(f"unknown dtype code {code} for entry {name}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * _CODE_DTYPES[code].itemsize)
            if len(payload) != count * _CODE_DTYPES[code].itemsize:
                raise FormatError(f"truncated checkpoint payload for entry {name}")
            loaded[name] = np.frombuffer(payload, dtype=_CODE_DTYPES[code]).reshape(shape)

    for name, arr in _checkpoint_entries(assembly, optimizer):
        if name not in loaded:
            raise FormatError(f"checkpoint is missing entry {name!r}")
        src = loaded.pop(name)
        if src.shape != arr.shape:
            raise FormatError(
                f"checkpoint entry {name!r} has shape {src.shape}, expected {arr.shape}"
            )
        arr[:] = src.astype(arr.dtype)
    if optimizer is None:  # evaluation-only restore skips momentum state
        loaded = {k: v for k, v in loaded.items() if not k.startswith("mom.")}
    if loaded:
        raise FormatError(f"checkpoint has unexpected entries: {sorted(loaded)[:3]}")
    return step
