"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the primitives needed by the detector networks are provided: 2-D and
1-D convolution with zero "same" padding, 2x2 max pooling, x2 bilinear
upsampling, ReLU, sigmoid, channel concatenation, affine layers and the two
training losses. Every primitive accepts an optional leading batch axis.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class Tensor:
    """An n-dimensional array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        # interior gradients are transient; leaves keep accumulating
        interior = {id(n): None for n in order if n._backward is not None}
        interior[id(self)] = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None:
                continue
            g = interior.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                else:
                    prev = interior.get(id(parent))
                    interior[id(parent)] = pg if prev is None else prev + pg


class Param(Tensor):
    """A learned tensor with its SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no backward graph inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data, parents, backward):
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (),
                  _backward=backward if requires else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- convolution

def _check_kernel(k):
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero padding that preserves the spatial extents.

    ``x`` is [C_in, H, W] or [B, C_in, H, W]; ``weight`` is [C_out, C_in, k, k].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects [B,C,H,W] input and 4-d weights, got {x.shape} and {weight.shape}")
    c_out, c_in, k, k2 = weight.data.shape
    if k != k2:
        raise ValueError("conv2d supports square kernels only")
    _check_kernel(k)
    B, C, H, W = xd.shape
    if C != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, weights expect {c_in}")
    if bias is not None and as_tensor(bias).data.shape != (c_out,):
        raise ValueError(f"conv2d bias must have shape ({c_out},)")
    p = k // 2
    wmat = weight.data.reshape(c_out, c_in * k * k)
    # column buffer laid out [C, k, k, B, H, W] so every offset slice is contiguous
    xt = xd.transpose(1, 0, 2, 3)
    if k == 1:
        cols = np.ascontiguousarray(xt).reshape(C, B * H * W)
    else:
        xp = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((C, k, k, B, H, W), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + H, j:j + W]
        cols = cols.reshape(C * k * k, B * H * W)
    out = wmat @ cols
    if bias is not None:
        out += as_tensor(bias).data[:, None]
    out = out.reshape(c_out, B, H, W).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, B * H * W)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        if x.requires_grad:
            gcols = wmat.T @ gm
            if k == 1:
                gxt = gcols.reshape(C, B, H, W)
            else:
                gcols = gcols.reshape(C, k, k, B, H, W)
                gxp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + H, j:j + W] += gcols[:, i, j]
                gxt = gxp[:, :, p:p + H, p:p + W]
            gx = gxt.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx[0] if squeeze else gx)
        return gx, gw, gb

    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    return _node(out, parents, backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1-D analogue of :func:`conv2d` over [C_in, L] or [B, C_in, L] input."""
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or weight.data.ndim != 3:
        raise ValueError(f"conv1d expects [B,C,L] input and 3-d weights, got {x.shape} and {weight.shape}")
    c_out, c_in, k = weight.data.shape
    _check_kernel(k)
    B, C, L = xd.shape
    if C != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {C} channels, weights expect {c_in}")
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p)))
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(B * L, C * k)
    wmat = weight.data.reshape(c_out, c_in * k)
    out = cols @ wmat.T
    if bias is not None:
        out += as_tensor(bias).data
    out = out.reshape(B, L, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        g3 = g[None] if squeeze else g
        gm = g3.transpose(0, 2, 1).reshape(B * L, c_out)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(B, L, C, k)
            gxp = np.zeros((B, C, L + 2 * p), dtype=xd.dtype)
            for i in range(k):
                gxp[:, :, i:i + L] += gcols[:, :, :, i].transpose(0, 2, 1)
            gx = gxp[:, :, p:p + L]
            gx = gx[0] if squeeze else gx
        return gx, gw, gb

    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    return _node(out, parents, backward)


# ----------------------------------------------------------- resampling ops

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first cell in row-major order."""
    x = as_tensor(x)
    *lead, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    blocks = x.data.reshape(*lead, H // 2, 2, W // 2, 2)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
    flat = blocks.transpose(perm).reshape(*lead, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gb = gflat.reshape(*lead, H // 2, W // 2, 2, 2).transpose(inv)
        return (gb.reshape(x.data.shape),)

    return _node(out, [x], backward)


def _bilinear_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] interpolation matrix, sampling at output pixel centres."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (align_corners=False)."""
    x = as_tensor(x)
    H, W = x.data.shape[-2:]
    uh = _bilinear_matrix(H, x.data.dtype)
    uw = _bilinear_matrix(W, x.data.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return _node(out, [x], backward)


# ------------------------------------------------------------ elementwise ops

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _node(out, [x], lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, [a, b], lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * factor, [x], lambda g: (g * factor,))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.data.shape
    return _node(x.data.reshape(shape), [x], lambda g: (g.reshape(src),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis -3: [C,H,W] or [B,C,H,W])."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ValueError(f"concat_channels extent mismatch: {t.shape} vs {ref}")
    sizes = [t.shape[-3] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=-3)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(tensors)))

    return _node(out, tensors, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x [N] or [B,N], weight [M,N] -> [M] or [B,M]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense size mismatch: input {x.shape[-1]}, weights expect {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + as_tensor(bias).data

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    return _node(out, parents, backward)


# --------------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target) -> Tensor:
    """Sum (not mean) of squared differences over every element."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = np.asarray(np.sum(diff * diff), dtype=pred.dtype)
    return _node(out, [pred], lambda g: (2.0 * g * diff,))


def bce_loss(pred: Tensor, label) -> Tensor:
    """Binary cross-entropy, summed over elements; ``pred`` is clamped to [eps, 1-eps]."""
    pred = as_tensor(pred)
    y = np.asarray(label, dtype=pred.dtype).reshape(pred.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss labels must be 0 or 1")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    out = np.asarray(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)), dtype=pred.dtype)
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def backward(g):
        return (g * inside * (-(y / p) + (1.0 - y) / (1.0 - p)),)

    return _node(out, [pred], backward)


# ------------------------------------------------------------------ optimizer

@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def sgd_step(params: Iterable[Param], config: SgdConfig) -> None:
    """buffer <- momentum*buffer + grad; w <- w - lr*buffer; grads are then cleared."""
    params = list(params)
    for prm in params:
        if prm.grad is None:
            raise ValueError(f"parameter {prm.name or '<unnamed>'} has no gradient")
    for prm in params:
        prm.momentum_buffer *= config.momentum
        prm.momentum_buffer += prm.grad
        prm.data -= config.learning_rate * prm.momentum_buffer
        prm.grad = None


# ------------------------------------------------------------ gradient checks

def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` rebuilds a scalar from ``tensors`` on each call. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) per entry. With
    ``max_entries`` only that many randomly chosen entries per tensor are checked.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors")
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        af = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-6)
            worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst


# ---------------------------------------------------------------- weight file

WEIGHTS_MAGIC = b"RGW1"


def save_weights(path, params: Sequence[Param], header: dict | None = None) -> None:
    """Write ``params`` as little-endian float32 records behind a text header.

    Layout: b"RGW1", u32 header length, UTF-8 ``key=value`` lines, u32 record
    count, then per record: u32 name length, name, u32 rank, rank x u32 extents,
    float32 payload.
    """
    lines = "".join(f"{k}={header[k]}\n" for k in sorted(header or {}))
    hb = lines.encode("utf-8")
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(hb)), hb, struct.pack("<I", len(params))]
    for prm in params:
        nb = prm.name.encode("utf-8")
        shape = prm.data.shape
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        chunks.append(np.ascontiguousarray(prm.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weights(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, {name: float32 array}) from an RGW1 file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not an RGW1 weights file")
    pos = 4
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = {}
    for line in buf[pos:pos + hlen].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return header, arrays
