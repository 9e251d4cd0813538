"""Deterministic synthetic multimodal dense-prediction tasks.

A smooth latent field stands in for the scene; derived views keep
complementary parts of it (a blurred view keeps values but destroys
boundaries, a gradient-magnitude view keeps boundaries but destroys absolute
level), so a fusion model has verifiable headroom over any single view.
All randomness flows through the counter PRNG in chanex.prng, making datasets
bit-reproducible for a given seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import prng
from .errors import ConfigurationError, FormatError, ValidationError

__all__ = [
    "LatentField",
    "ModalityView",
    "Dataset",
    "bump_field",
    "gen_latent",
    "derive_modality",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "complementarity_gap",
    "TASK_KINDS",
]

# Latent-field shape constants. Narrow bumps relative to the 5x5 blur window
# are what give the blurred view a real value gap that the gradient view can
# partly close; widths are in pixels. These values maximize the measured
# complementarity gap of the two derived views.
DEFAULT_K = 6
WIDTH_MIN = 1.15
WIDTH_MAX = 1.55
AMP_MIN = 0.25
AMP_MAX = 1.0

NOISE_COARSE = 0.05
NOISE_EDGE = 0.05
NOISE_HEAVY = 0.25

QUANT_CLASSES = 4

TASK_KINDS = (
    "fusion_regression",
    "fusion_segmentation",
    "cycle_triplet",
    "multitask_pair",
    "mm_mt_quad",
)

MAGIC = b"CENDATA1"


@dataclass(frozen=True)
class LatentField:
    z: np.ndarray  # (1, H, W), values in [0, 1]

    @property
    def plane(self) -> np.ndarray:
        return self.z[0]


@dataclass(frozen=True)
class ModalityView:
    kind: str  # coarse | edge | noisy | quantized
    data: np.ndarray  # (1, H, W); label indices stored as floats for quantized
    noise_sigma: float


def bump_field(h: int, w: int, centers, widths, amplitudes) -> np.ndarray:
    """Sum of isotropic Gaussian bumps evaluated on the (h, w) pixel grid."""
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((h, w), dtype=np.float64)
    for (cy, cx), sigma, amp in zip(centers, widths, amplitudes):
        d2 = (ys - cy) ** 2 + (xs - cx) ** 2
        out += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def gen_latent(seed: int, h: int = 32, w: int = 32, k: int = DEFAULT_K) -> LatentField:
    """A smooth random field, rescaled to span [0, 1] exactly."""
    if h < 8 or w < 8:
        raise ValidationError(f"latent field needs H, W >= 8, got {h}x{w}")
    if k < 1:
        raise ValidationError(f"need at least one bump, got K={k}")
    u = prng.uniforms(seed, 0, 4 * k).reshape(k, 4)
    centers = np.stack([u[:, 0] * h, u[:, 1] * w], axis=1)
    widths = WIDTH_MIN + u[:, 2] * (WIDTH_MAX - WIDTH_MIN)
    amps = AMP_MIN + u[:, 3] * (AMP_MAX - AMP_MIN)
    z = bump_field(h, w, centers, widths, amps)
    lo, hi = z.min(), z.max()
    if hi - lo < 1e-12:
        z = np.zeros_like(z)
    else:
        z = (z - lo) / (hi - lo)
    return LatentField(z=z[None])


def _box_blur5(plane: np.ndarray) -> np.ndarray:
    padded = np.pad(plane, 2, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (5, 5))
    return win.mean(axis=(2, 3))


def _sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    padded = np.pad(plane, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = (win * kx).sum(axis=(2, 3))
    gy = (win * ky).sum(axis=(2, 3))
    return np.sqrt(gx * gx + gy * gy)


def _noise(seed: int, h: int, w: int) -> np.ndarray:
    return prng.gaussians(seed, 0, h * w).reshape(h, w)


def derive_modality(z: LatentField, kind: str, seed: int, noise_sigma: float,
                    num_classes: int = QUANT_CLASSES) -> ModalityView:
    """A deterministic view of the latent field.

    coarse destroys boundaries (5x5 box blur), edge destroys absolute level
    (max-normalized Sobel magnitude), noisy keeps both under heavy noise, and
    quantized bins the field into equal-width classes.
    """
    plane = z.plane
    h, w = plane.shape
    if kind == "coarse":
        data = _box_blur5(plane)
    elif kind == "edge":
        mag = _sobel_magnitude(plane)
        peak = mag.max()
        data = mag / peak if peak > 1e-12 else mag
    elif kind == "noisy":
        data = plane.copy()
    elif kind == "quantized":
        labels = np.minimum((plane * num_classes).astype(np.int64), num_classes - 1)
        return ModalityView(kind=kind, data=labels.astype(np.float64)[None], noise_sigma=0.0)
    else:
        raise ConfigurationError(f"unknown modality kind {kind!r}")
    if noise_sigma:
        data = data + noise_sigma * _noise(seed, h, w)
    return ModalityView(kind=kind, data=data[None], noise_sigma=noise_sigma)


# sub-seed tags so each sample and view gets an independent counter stream
_TAG_LATENT = 0
_TAG_VIEW = {"coarse": 1, "edge": 2, "noisy": 3}
_SPLIT_TRAIN, _SPLIT_VAL = 0, 1


@dataclass
class Dataset:
    """Arrays grouped per modality and per target, train/val split.

    Inputs are float32 (n, 1, H, W); real-valued targets likewise; label
    targets are int64 (n, H, W).
    """

    task_kind: str
    seed: int
    inputs_train: list[np.ndarray] = field(default_factory=list)
    inputs_val: list[np.ndarray] = field(default_factory=list)
    targets_train: list[np.ndarray] = field(default_factory=list)
    targets_val: list[np.ndarray] = field(default_factory=list)
    target_kinds: tuple[str, ...] = ()

    @property
    def n_train(self) -> int:
        return self.inputs_train[0].shape[0]

    @property
    def n_val(self) -> int:
        return self.inputs_val[0].shape[0]

    @property
    def height(self) -> int:
        return self.inputs_train[0].shape[2]

    @property
    def width(self) -> int:
        return self.inputs_train[0].shape[3]

    def split(self, name: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
        if name == "train":
            return self.inputs_train, self.targets_train
        if name == "val":
            return self.inputs_val, self.targets_val
        raise ConfigurationError(f"unknown split {name!r}")

    def equals(self, other: "Dataset") -> bool:
        if (self.task_kind, self.seed, self.target_kinds) != (
            other.task_kind, other.seed, other.target_kinds
        ):
            return False
        mine = self.inputs_train + self.inputs_val + self.targets_train + self.targets_val
        theirs = (
            other.inputs_train + other.inputs_val + other.targets_train + other.targets_val
        )
        if len(mine) != len(theirs):
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


def _sample(task_kind: str, sample_seed: int, h: int, w: int, k: int):
    """(input views, targets) for one sample; targets may be label maps."""
    z = gen_latent(prng.derive(sample_seed, _TAG_LATENT), h, w, k)
    view = lambda kind, sigma: derive_modality(
        z, kind, prng.derive(sample_seed, _TAG_VIEW.get(kind, 9)), sigma
    ).data

    if task_kind == "fusion_regression":
        return [view("coarse", NOISE_COARSE), view("edge", NOISE_EDGE)], [z.z.copy()]
    if task_kind == "fusion_segmentation":
        labels = derive_modality(z, "quantized", 0, 0.0).data.astype(np.int64)
        return [view("coarse", NOISE_COARSE), view("edge", NOISE_EDGE)], [labels]
    if task_kind == "cycle_triplet":
        views = [
            view("coarse", NOISE_COARSE),
            view("edge", NOISE_EDGE),
            view("noisy", NOISE_HEAVY),
        ]
        return views, [v.copy() for v in views]
    if task_kind == "multitask_pair":
        clean_edge = derive_modality(z, "edge", 0, 0.0).data
        return [view("noisy", NOISE_HEAVY)], [z.z.copy(), clean_edge]
    if task_kind == "mm_mt_quad":
        labels = derive_modality(z, "quantized", 0, 0.0).data.astype(np.int64)
        return [view("coarse", NOISE_COARSE), view("edge", NOISE_EDGE)], [z.z.copy(), labels]
    raise ConfigurationError(f"unknown task kind {task_kind!r}")


_TARGET_KINDS = {
    "fusion_regression": ("real",),
    "fusion_segmentation": ("labels",),
    "cycle_triplet": ("real", "real", "real"),
    "multitask_pair": ("real", "real"),
    "mm_mt_quad": ("real", "labels"),
}


def make_dataset(task_kind: str, n_train: int, n_val: int, seed: int,
                 h: int = 32, w: int = 32, k: int = DEFAULT_K) -> Dataset:
    if task_kind not in TASK_KINDS:
        raise ConfigurationError(
            f"unknown task kind {task_kind!r}; expected one of {', '.join(TASK_KINDS)}"
        )
    if n_train < 1 or n_val < 1:
        raise ValidationError(f"need n_train, n_val >= 1, got {n_train}, {n_val}")

    target_kinds = _TARGET_KINDS[task_kind]
    splits = {}
    for split_id, n in ((_SPLIT_TRAIN, n_train), (_SPLIT_VAL, n_val)):
        inputs = None
        targets = None
        for i in range(n):
            views, targs = _sample(task_kind, prng.derive(seed, split_id, i), h, w, k)
            if inputs is None:
                inputs = [np.empty((n, 1, h, w), dtype=np.float32) for _ in views]
                targets = [
                    np.empty((n, h, w), dtype=np.int64)
                    if kind == "labels"
                    else np.empty((n, 1, h, w), dtype=np.float32)
                    for kind in target_kinds
                ]
            for s, v in zip(inputs, views):
                s[i] = v.astype(np.float32)
            for s, t, kind in zip(targets, targs, target_kinds):
                s[i] = t[0] if kind == "labels" else t.astype(np.float32)
        splits[split_id] = (inputs, targets)

    return Dataset(
        task_kind=task_kind,
        seed=seed,
        inputs_train=splits[_SPLIT_TRAIN][0],
        inputs_val=splits[_SPLIT_VAL][0],
        targets_train=splits[_SPLIT_TRAIN][1],
        targets_val=splits[_SPLIT_VAL][1],
        target_kinds=target_kinds,
    )


# -- persistence (format documented in FORMATS.md) ------------------------------


def _write_array(fh, arr: np.ndarray):
    kinds = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}
    code = kinds.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported array dtype {arr.dtype}")
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype("<f4" if code == 0 else "<i8").tobytes())


def _read_array(fh) -> np.ndarray:
    head = fh.read(2)
    if len(head) != 2:
        raise FormatError("truncated dataset file: missing array header")
    code, ndim = struct.unpack("<BB", head)
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = "<f4" if code == 0 else "<i8"
    count = int(np.prod(shape))
    raw = fh.read(count * np.dtype(dtype).itemsize)
    if len(raw) != count * np.dtype(dtype).itemsize:
        raise FormatError("truncated dataset file: short array payload")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return arr.astype(np.float32) if code == 0 else arr.astype(np.int64)


def save_dataset(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", TASK_KINDS.index(ds.task_kind)))
        fh.write(struct.pack("<Q", ds.seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(
            struct.pack(
                "<4I", len(ds.inputs_train), len(ds.targets_train), ds.n_train, ds.n_val
            )
        )
        for group in (ds.inputs_train, ds.inputs_val, ds.targets_train, ds.targets_val):
            for arr in group:
                _write_array(fh, arr)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}")
        (kind_idx,) = struct.unpack("<I", fh.read(4))
        if kind_idx >= len(TASK_KINDS):
            raise FormatError(f"unknown task kind index {kind_idx}")
        task_kind = TASK_KINDS[kind_idx]
        (seed,) = struct.unpack("<Q", fh.read(8))
        n_mod, n_tgt, n_train, n_val = struct.unpack("<4I", fh.read(16))
        inputs_train = [_read_array(fh) for _ in range(n_mod)]
        inputs_val = [_read_array(fh) for _ in range(n_mod)]
        targets_train = [_read_array(fh) for _ in range(n_tgt)]
        targets_val = [_read_array(fh) for _ in range(n_tgt)]
        trailing = fh.read(1)
    if trailing:
        raise FormatError("dataset file has trailing bytes")
    ds = Dataset(
        task_kind=task_kind,
        seed=int(seed),
        inputs_train=inputs_train,
        inputs_val=inputs_val,
        targets_train=targets_train,
        targets_val=targets_val,
        target_kinds=_TARGET_KINDS[task_kind],
    )
    if ds.n_train != n_train or ds.n_val != n_val:
        raise FormatError("dataset header counts disagree with array shapes")
    return ds


# -- complementarity certificate --------------------------------------------------


def _ridge(x_train, y_train, x_eval, alpha=1e-6):
    xt = np.concatenate([x_train, np.ones((x_train.shape[0], 1))], axis=1)
    xe = np.concatenate([x_eval, np.ones((x_eval.shape[0], 1))], axis=1)
    coef = np.linalg.solve(xt.T @ xt + alpha * np.eye(xt.shape[1]), xt.T @ y_train)
    return xe @ coef


def complementarity_gap(ds: Dataset) -> dict:
    """Validation MSE of a pixel-wise linear ridge fit per single modality and
    on both modalities jointly; the fusion task is only meaningful when each
    single-modality error clearly exceeds the joint one."""
    if len(ds.inputs_train) < 2:
        raise ConfigurationError("complementarity gap needs at least two modalities")
    if ds.target_kinds[0] != "real":
        raise ConfigurationError("complementarity gap is defined for real-valued targets")

    def flatten(arrs):
        return np.stack([a.reshape(-1).astype(np.float64) for a in arrs], axis=1)

    y_tr = ds.targets_train[0].reshape(-1).astype(np.float64)
    y_va = ds.targets_val[0].reshape(-1).astype(np.float64)
    singles = {}
    for i, name in enumerate(("modality0", "modality1")):
        xtr = flatten([ds.inputs_train[i]])
        xva = flatten([ds.inputs_val[i]])
        pred = _ridge(xtr, y_tr, xva)
        singles[name] = float(np.mean((pred - y_va) ** 2))
    xtr = flatten(ds.inputs_train[:2])
    xva = flatten(ds.inputs_val[:2])
    pred = _ridge(xtr, y_tr, xva)
    both = float(np.mean((pred - y_va) ** 2))
    return {
        "mse_single": singles,
        "mse_both": both,
        "min_single_over_both": min(singles.values()) / both,
    }
