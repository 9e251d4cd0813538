"""Dense tensors with reverse-mode automatic differentiation.

Small on purpose: just enough operations for convolutional encoder-decoders
(cross-correlation, per-channel affines, nearest upsampling, two losses) plus
a finite-difference checker that every backward rule is verified against.

Conventions:
  * values are numpy arrays, float64 for verification work and float32 for
    training; an operation's output dtype follows its inputs.
  * broadcasting is restricted to scalars and per-channel vectors (a shape
    (C,) operand against an (N, C, H, W) one); anything else must match
    exactly so the backward rules stay auditable.
  * a Tensor created with requires_grad=False and no parents is a constant:
    it never receives a gradient and its grad slot stays None.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ValidationError

__all__ = [
    "Tensor",
    "add",
    "mul",
    "relu",
    "scale_shift",
    "mean_all",
    "concat_batch",
    "split_batch",
    "upsample_nearest",
    "conv2d",
    "mse_loss",
    "cross_entropy_pixelwise",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """An n-d array that may participate in a computation graph.

    Graph nodes are the tensors themselves: an op result keeps references to
    its parent tensors and a closure that maps the output gradient to parent
    gradient contributions. Leaves created by the user carry no parents.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(values, dtype=None) -> "Tensor":
        """A trainable leaf."""
        return Tensor(values, requires_grad=True, dtype=dtype)

    @staticmethod
    def const(values, dtype=None) -> "Tensor":
        """A constant leaf, detached from any graph."""
        return Tensor(values, requires_grad=False, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor.const(self.values)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.values.shape}")
        return float(self.values.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = self.op or ("param" if self.requires_grad else "const")
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, {tag})"


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op result; drop the graph edge when no parent needs gradients."""
    out = Tensor(values)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray, grads: dict):
    key = id(tensor)
    if key in grads:
        grads[key] = grads[key] + grad
    else:
        grads[key] = grad


# -- broadcasting (scalar and per-channel only) --------------------------------


def _broadcast_kind(a_shape, b_shape) -> str:
    """Classify how b combines with a: 'equal', 'scalar', or 'channel'."""
    if a_shape == b_shape:
        return "equal"
    if int(np.prod(b_shape)) == 1:
        return "scalar"
    if len(a_shape) == 4 and b_shape == (a_shape[1],):
        return "channel"
    raise DimensionError(
        f"cannot combine shapes {a_shape} and {b_shape}: only equal shapes, "
        "scalars, and per-channel (C,) vectors against (N, C, H, W) are allowed"
    )


def _expand(b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return b.reshape(1, -1, 1, 1)
    return b


def _reduce_to(grad: np.ndarray, shape, kind: str) -> np.ndarray:
    if kind == "equal":
        return grad
    if kind == "scalar":
        return grad.sum().reshape(shape)
    return grad.sum(axis=(0, 2, 3)).reshape(shape)  # channel


# -- elementwise suite ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out = a.values + _expand(b.values, kind)

    def bw(g, grads):
        _accumulate(a, g, grads)
        _accumulate(b, _reduce_to(g, b.shape, kind), grads)

    return _result(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    bx = _expand(b.values, kind)
    out = a.values * bx

    def bw(g, grads):
        _accumulate(a, g * bx, grads)
        _accumulate(b, _reduce_to(g * a.values, b.shape, kind), grads)

    return _result(out, (a, b), bw, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0  # gradient at exactly 0 is 0
    out = np.where(mask, a.values, a.values.dtype.type(0))

    def bw(g, grads):
        _accumulate(a, g * mask, grads)

    return _result(out, (a,), bw, "relu")


def scale_shift(a: Tensor, s: Tensor, t: Tensor) -> Tensor:
    """Per-channel affine a * s + t with s, t scalars or (C,) vectors."""
    ks = _broadcast_kind(a.shape, s.shape)
    kt = _broadcast_kind(a.shape, t.shape)
    sx = _expand(s.values, ks)
    out = a.values * sx + _expand(t.values, kt)

    def bw(g, grads):
        _accumulate(a, g * sx, grads)
        _accumulate(s, _reduce_to(g * a.values, s.shape, ks), grads)
        _accumulate(t, _reduce_to(g, t.shape, kt), grads)

    return _result(out, (a, s, t), bw, "scale_shift")


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = np.asarray(a.values.mean(), dtype=a.dtype)

    def bw(g, grads):
        _accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False), grads)

    return _result(out, (a,), bw, "mean_all")


def concat_batch(parts: list[Tensor]) -> Tensor:
    """Stack tensors along the batch axis; used to push parallel streams
    through a shared convolution in one call."""
    sizes = [p.shape[0] for p in parts]
    for i, p in enumerate(parts[1:], 1):
        if p.shape[1:] != parts[0].shape[1:]:
            raise DimensionError(
                f"concat_batch: part {i} shape {p.shape} does not match {parts[0].shape}"
            )
    out = np.concatenate([p.values for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def bw(g, grads):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[a:b], grads)

    return _result(out, tuple(parts), bw, "concat_batch")


def split_batch(a: Tensor, parts: int) -> list[Tensor]:
    """Inverse of concat_batch for equal part sizes."""
    n = a.shape[0]
    if n % parts:
        raise DimensionError(f"split_batch: {n} rows do not split into {parts} parts")
    size = n // parts
    outs = []
    for i in range(parts):
        lo = i * size

        def bw(g, grads, lo=lo):
            full = np.zeros_like(a.values)
            full[lo : lo + size] = g
            _accumulate(a, full, grads)

        outs.append(_result(a.values[lo : lo + size].copy(), (a,), bw, "split_batch"))
    return outs


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    if a.values.ndim != 4:
        raise DimensionError(f"upsample_nearest expects (N, C, H, W), got {a.shape}")
    if factor < 1:
        raise ValidationError(f"upsample factor must be >= 1, got {factor}")
    out = a.values.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g, grads):
        n, c, hf, wf = g.shape
        blocks = g.reshape(n, c, hf // factor, factor, wf // factor, factor)
        _accumulate(a, blocks.sum(axis=(3, 5)), grads)

    return _result(out, (a,), bw, "upsample_nearest")


# -- convolution ------------------------------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input extent {size + 2 * padding} on axis {axis}"
        )
    out = span // stride + 1
    if out < 1:
        raise DimensionError(f"conv2d: empty output on axis {axis}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input to (C*kh*kw, N*ho*wo) patch columns, laid
    out so the whole convolution is a single matrix product."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, ho, wo, kh, kw)
    n, c = xp.shape[:2]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw) plus bias.

    Output spatial extent is (H + 2*padding - kh) // stride + 1; input rows
    beyond the last full window are unused. The backward produces gradients
    for the input, the weight, and the bias.
    """
    if x.values.ndim != 4:
        raise DimensionError(f"conv2d: input must be (N, Cin, H, W), got {x.shape}")
    if weight.values.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d: input channel axis has {cin} channels but weight expects {cin_w}"
        )
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    if stride < 1:
        raise ValidationError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValidationError(f"conv2d: padding must be non-negative, got {padding}")

    ho = _conv_out_size(h, kh, stride, padding, "H")
    wo = _conv_out_size(w, kw, stride, padding, "W")

    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, weight, bias, n, cin, cout, h, w)

    if padding:
        xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (Cin*kh*kw, N*L)
    wmat = weight.values.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + bias.values.reshape(1, cout, 1, 1)

    def bw(g, grads):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        _accumulate(bias, g.sum(axis=(0, 2, 3)), grads)
        _accumulate(weight, (gm @ cols.T).reshape(weight.shape), grads)
        # input gradient as a transposed convolution: dilate g by the stride,
        # pad, and cross-correlate with the flipped kernel (gather + GEMM
        # rather than a strided scatter)
        if stride > 1:
            gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                          dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        # floor-division output sizes leave a remainder of unvisited rows/cols
        rem_h = h + 2 * padding - kh - (ho - 1) * stride
        rem_w = w + 2 * padding - kw - (wo - 1) * stride
        gp = np.pad(
            gd, ((0, 0), (0, 0), (kh - 1, kh - 1 + rem_h), (kw - 1, kw - 1 + rem_w))
        )
        hp, wp = h + 2 * padding, w + 2 * padding
        gcols = _im2col(gp, kh, kw, 1, hp, wp)  # (Cout*kh*kw, N*Hp*Wp)
        wflip = weight.values[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        dx = (wflip @ gcols).reshape(cin, n, hp, wp).transpose(1, 0, 2, 3)
        if padding:
            dx = dx[:, :, padding : padding + h, padding : padding + w]
        _accumulate(x, np.ascontiguousarray(dx), grads)

    return _result(out, (x, weight, bias), bw, "conv2d")


# -- losses -------------------------------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bw(g, grads):
        d = (2.0 / n) * diff * g
        _accumulate(pred, d, grads)
        _accumulate(target, -d, grads)

    return _result(out, (pred, target), bw, "mse_loss")


def cross_entropy_pixelwise(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel softmax + mean negative log-likelihood.

    logits: (N, C, H, W); labels: integer array (N, H, W) with values in [0, C).
    """
    if logits.values.ndim != 4:
        raise DimensionError(f"cross_entropy: logits must be (N, C, H, W), got {logits.shape}")
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match (N, H, W)=({n}, {h}, {w})"
        )
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        ni, hi, wi = (int(v[0]) for v in np.nonzero(bad))
        raise ValidationError(
            f"cross_entropy: label {int(labels[ni, hi, wi])} out of range [0, {c}) "
            f"at pixel (n={ni}, h={hi}, w={wi})"
        )

    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    ngrid, hgrid, wgrid = np.ogrid[:n, :h, :w]
    picked = p[ngrid, labels, hgrid, wgrid]
    npix = n * h * w
    out = np.asarray(-np.log(picked).mean(), dtype=logits.dtype)

    def bw(g, grads):
        d = p.copy()
        d[ngrid, labels, hgrid, wgrid] -= 1.0
        _accumulate(logits, d * (g / npix), grads)

    return _result(out, (logits,), bw, "cross_entropy")


# -- reverse pass ---------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate grad on every parameter reachable from a scalar loss.

    Repeated calls without resetting grads accumulate; the training harness
    clears them each step. Constant leaves are never touched.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return  # all inputs constant: nothing to do

    # iterative topological order over the requires_grad subgraph
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:  # leaf: retain the gradient
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
        else:
            node._backward(g, grads)


# -- verification ----------------------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a pure scalar-valued function of one tensor. The relative error
    denominator is max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if eps <= 0:
        raise ValidationError(f"finite_diff_check: eps must be positive, got {eps}")
    probe = Tensor.param(x.values.copy())
    out = f(probe)
    if out.values.size != 1:
        raise ContractError("finite_diff_check: f must return a scalar")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.values)

    flat = x.values.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor.const(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        fm = f(Tensor.const(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
        if not np.isfinite(numeric[i]):
            raise NumericError(f"finite_diff_check: non-finite difference at coordinate {i}")

    a = analytic.reshape(-1)
    if not np.all(np.isfinite(a)):
        bad = int(np.nonzero(~np.isfinite(a))[0][0])
        raise NumericError(f"finite_diff_check: non-finite analytic gradient at coordinate {bad}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom))
