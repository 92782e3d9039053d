"""A minimal reverse-mode automatic differentiation engine on float64 numpy arrays.

Only the operators the corrector needs are provided: elementwise arithmetic with
broadcasting, reductions, reshapes and slicing, the usual activations, batched matmul,
3D convolution with per-axis zero/circular padding, average pooling with ceiling
windows, nearest-neighbour upsampling to explicit extents, channel concatenation and a
single-layer LSTM built from these primitives. ``backward`` is single-shot per graph.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from . import container

WEIGHTS_MAGIC = b"MJOW"


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op
        self._consumed = False

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)

    def backward(self, retain_intermediate: bool = False):
        backward(self, retain_intermediate)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    out = Tensor(data, True, parents, op)
    out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        raise GraphError(f"gradient shape {g.shape} != tensor shape {t.data.shape} ({t.op})")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor, retain_intermediate: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad.

    Intermediate nodes are released afterwards, so a second call on the same graph
    raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already called on this graph; rebuild it first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            if not retain_intermediate:
                node.grad = None
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), "div", bw)


def power(a, p: float):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1))
    return _make(a.data ** p, (a,), "pow", bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / out)
    return _make(out, (a,), "sqrt", bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)
    return _make(out, (a,), "exp", bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)
    return _make(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        _accum(a, g * out * (1.0 - out))
    return _make(out, (a,), "sigmoid", bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))
    return _make(out, (a,), "tanh", bw)


# ---------------------------------------------------------------- reductions & shapes

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(ax % ndim for ax in axes))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))
    return _make(a.data.transpose(axes), (a,), "transpose", bw)


def getitem(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)
    return _make(a.data[idx], (a,), "getitem", bw)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat extent mismatch: {ref} vs {t.shape} along axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, "concat", bw)


def concat_channels(a, b):
    """Concatenate (N, C, ...) tensors along the channel axis."""
    return concat([a, b], axis=1)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)

    def bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=ax))
    return _make(np.stack([t.data for t in ts], axis=ax), ts, "stack", bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))
    return _make(a.data @ b.data, (a, b), "matmul", bw)


# ---------------------------------------------------------------- convolution

PADDING_MODES = ("zero", "circular")
DEFAULT_PADDING = ("zero", "zero", "circular")  # lead, lat, lon


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple  # (k_t, k_h, k_w)
    padding: tuple = DEFAULT_PADDING
    stride: tuple = (1, 1, 1)

    def __post_init__(self):
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel extents must be odd and positive, got {self.kernel}")
        if tuple(self.stride) != (1, 1, 1):
            raise ValueError("only unit stride is supported")
        if any(p not in PADDING_MODES for p in self.padding):
            raise ValueError(f"padding modes must be in {PADDING_MODES}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    @property
    def n_params(self) -> int:
        return math.prod(self.weight_shape) + self.out_channels


@functools.lru_cache(maxsize=64)
def _fft_geometry(extents, kernel, padding):
    """Transform sizes and per-axis DFT matrices restricted to the kernel support.

    A kernel tap at offset i - p sits at index (p - i) mod L of the periodic domain, so its
    transform is a sum of complex exponentials; taps that wrap past a short circular axis fold.
    """
    sizes, mats = [], []
    for ax, (n, k, mode) in enumerate(zip(extents, kernel, padding)):
        p = k // 2
        L = n if mode == "circular" else sfft.next_fast_len(max(n + p, k), real=True)
        idx = (p - np.arange(k)) % L
        nf = L // 2 + 1 if ax == 2 else L
        sizes.append(L)
        mats.append(np.exp(-2j * np.pi * np.outer(idx, np.arange(nf)) / L))
    # inverse of the half spectrum on the last axis counts interior bins twice
    L = sizes[2]
    wts = np.full(L // 2 + 1, 2.0)
    wts[0] = 1.0
    if L % 2 == 0:
        wts[-1] = 1.0
    return tuple(sizes), tuple(mats), wts / math.prod(sizes)


def _conv1x1(x, weight, bias):
    w = weight.data[:, :, 0, 0, 0]
    y = np.einsum("nc...,oc->no...", x.data, w)
    if bias is not None:
        y += bias.data[None, :, None, None, None]

    def bw(g):
        if x.requires_grad:
            _accum(x, np.einsum("no...,oc->nc...", g, w))
        if weight.requires_grad:
            dw = np.tensordot(g, x.data, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            _accum(weight, dw[:, :, None, None, None])
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, "conv3d", bw)


def _freq_major(spec):
    """(N, C, *freq) spectrum -> contiguous (F, N, C)."""
    n, c = spec.shape[:2]
    return np.ascontiguousarray(spec.reshape(n, c, -1).transpose(2, 0, 1))


def _channel_major(spec, fshape):
    """(F, N, C) -> contiguous (N, C, *fshape)."""
    return np.ascontiguousarray(spec.transpose(1, 2, 0)).reshape(spec.shape[1:] + tuple(fshape))


def conv3d(x, weight, bias=None, padding=DEFAULT_PADDING):
    """Same-size 3D cross-correlation of (N, C, T, H, W) with (O, C, kt, kh, kw).

    Padding is chosen per axis: zeros outside the domain, or periodic wrap. Evaluated
    with real FFTs over a domain large enough that zero-padded axes do not alias; the
    channel mixing is a batched matmul per frequency.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5-D input and weight")
    N, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = weight.shape
    if Cw != C:
        raise ValueError(f"input has {C} channels, weight expects {Cw}")
    if any(k % 2 == 0 for k in (kt, kh, kw)):
        raise ValueError("kernel extents must be odd")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"bias shape {bias.shape} != ({O},)")
    padding = tuple(padding)
    if any(p not in PADDING_MODES for p in padding):
        raise ValueError(f"padding modes must be in {PADDING_MODES}")
    if (kt, kh, kw) == (1, 1, 1):
        return _conv1x1(x, weight, bias)
    sizes, (Et, Eh, Ew), wts = _fft_geometry((T, H, W), (kt, kh, kw), padding)
    axes = (2, 3, 4)
    fshape = (sizes[0], sizes[1], sizes[2] // 2 + 1)

    # frequency-major layouts (F, N, C) and (F, C, O) keep the per-frequency matmuls contiguous
    KF = np.einsum("ocabd,at,bh,dw->thwco", weight.data, Et, Eh, Ew, optimize=True)
    KF = np.ascontiguousarray(KF.reshape(-1, C, O))
    XF = _freq_major(sfft.rfftn(x.data, s=sizes, axes=axes))
    y = sfft.irfftn(_channel_major(np.matmul(XF, KF), fshape), s=sizes, axes=axes)[:, :, :T, :H, :W]
    if bias is not None:
        y = y + bias.data[None, :, None, None, None]

    def bw(g):
        GF = _freq_major(sfft.rfftn(g, s=sizes, axes=axes))
        if x.requires_grad:
            DX = np.matmul(GF, np.ascontiguousarray(KF.conj().transpose(0, 2, 1)))
            _accum(x, sfft.irfftn(_channel_major(DX, fshape), s=sizes, axes=axes)[:, :, :T, :H, :W])
        if weight.requires_grad:
            XH = np.ascontiguousarray(XF.transpose(0, 2, 1))
            np.conjugate(XH, out=XH)
            DK = np.matmul(XH, GF).reshape(fshape + (C, O))
            DK *= wts[None, None, :, None, None]
            dK = np.einsum("thwco,at,bh,dw->ocabd", DK, Et.conj(), Eh.conj(), Ew.conj(),
                           optimize=True).real
            _accum(weight, dK)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(y), parents, "conv3d", bw)


# ---------------------------------------------------------------- pooling / upsampling

def pooled_extents(extents, factors):
    return tuple(-(-n // f) for n, f in zip(extents, factors))


def pool_avg(x, factors):
    """Average pooling over the last three axes with ceiling windows.

    The last window along an axis may be partial; it averages only the cells it covers.
    """
    x = as_tensor(x)
    factors = tuple(int(f) for f in factors)
    if any(f < 1 for f in factors):
        raise ValueError(f"pool factors must be >= 1, got {factors}")
    lead = x.shape[:-3]
    ext = x.shape[-3:]
    out_ext = pooled_extents(ext, factors)
    padded = np.zeros(lead + tuple(o * f for o, f in zip(out_ext, factors)))
    padded[..., :ext[0], :ext[1], :ext[2]] = x.data
    shp = lead + (out_ext[0], factors[0], out_ext[1], factors[1], out_ext[2], factors[2])
    k = len(lead)
    sums = padded.reshape(shp).sum(axis=(k + 1, k + 3, k + 5))
    counts = [np.minimum(f, n - f * np.arange(o)) for n, f, o in zip(ext, factors, out_ext)]
    cnt = counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]

    def bw(g):
        gg = g / cnt
        for ax, f in zip(range(k, k + 3), factors):
            gg = np.repeat(gg, f, axis=ax)
        _accum(x, gg[..., :ext[0], :ext[1], :ext[2]])
    return _make(sums / cnt, (x,), "pool_avg", bw)


def pool_max(x, factors):
    """Max pooling with the same ceiling windows as :func:`pool_avg`; ties go to the first cell."""
    x = as_tensor(x)
    factors = tuple(int(f) for f in factors)
    if any(f < 1 for f in factors):
        raise ValueError(f"pool factors must be >= 1, got {factors}")
    lead = x.shape[:-3]
    ext = x.shape[-3:]
    out_ext = pooled_extents(ext, factors)
    k = len(lead)
    padded = np.full(lead + tuple(o * f for o, f in zip(out_ext, factors)), -np.inf)
    padded[..., :ext[0], :ext[1], :ext[2]] = x.data
    blocks = padded.reshape(lead + (out_ext[0], factors[0], out_ext[1], factors[1], out_ext[2], factors[2]))
    order = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3, k + 5)
    blocks = blocks.transpose(order).reshape(lead + out_ext + (-1,))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(lead + out_ext + factors)
        inv = tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2, k + 5)
        gb = gb.transpose(inv).reshape(padded.shape)
        _accum(x, gb[..., :ext[0], :ext[1], :ext[2]])
    return _make(out, (x,), "pool_max", bw)


def _upsample_index(n_in, n_out, factor=None):
    f = factor if factor is not None else -(-n_out // n_in)
    return np.minimum(np.arange(n_out) // f, n_in - 1)


def upsample_nn(x, extents, factors=None):
    """Nearest-neighbour upsampling of the last three axes to exactly ``extents``."""
    x = as_tensor(x)
    ext_in = x.shape[-3:]
    factors = factors or (None, None, None)
    k = x.ndim - 3
    idx = [_upsample_index(n, m, f) for n, m, f in zip(ext_in, extents, factors)]
    out = x.data
    for ax, ix in zip(range(k, k + 3), idx):
        out = np.take(out, ix, axis=ax)

    def bw(g):
        gg = g
        for ax, ix, n in zip(range(k, k + 3), idx, ext_in):
            starts = np.searchsorted(ix, np.arange(n))
            gg = np.add.reduceat(gg, starts, axis=ax)
        _accum(x, gg)
    return _make(out, (x,), "upsample_nn", bw)


# ---------------------------------------------------------------- LSTM

@dataclass(frozen=True)
class LstmSpec:
    input_size: int = 2
    hidden_size: int = 32
    output_size: int = 2

    def __post_init__(self):
        if min(self.input_size, self.hidden_size, self.output_size) < 1:
            raise ValueError("LSTM sizes must be positive")

    @property
    def n_params(self) -> int:
        i, h, o = self.input_size, self.hidden_size, self.output_size
        return 4 * (h * i + h * h + h) + (h * o + o)


def init_lstm(spec: LstmSpec, rng: np.random.Generator) -> dict:
    h = spec.hidden_size
    return {
        "w_ih": Tensor(glorot(rng, (spec.input_size, 4 * h), spec.input_size, h), True),
        "w_hh": Tensor(glorot(rng, (h, 4 * h), h, h), True),
        "b": Tensor(np.zeros(4 * h), True),
        "w_out": Tensor(glorot(rng, (h, spec.output_size), h, spec.output_size), True),
        "b_out": Tensor(np.zeros(spec.output_size), True),
    }


def lstm_forward(seq, params: dict, spec: LstmSpec):
    """Single-layer LSTM (gates i, f, g, o), zero initial state, linear read-out per step."""
    seq = as_tensor(seq)
    if seq.ndim != 3 or seq.shape[2] != spec.input_size:
        raise ValueError(f"sequence shape {seq.shape} incompatible with input size {spec.input_size}")
    N, L, _ = seq.shape
    H = spec.hidden_size
    w_ih, w_hh, b = params["w_ih"], params["w_hh"], params["b"]
    # input contributions for all steps in one matmul
    xg = seq @ w_ih + b
    h = Tensor(np.zeros((N, H)))
    c = Tensor(np.zeros((N, H)))
    outs = []
    for t in range(L):
        z = xg[:, t, :] + h @ w_hh
        i = sigmoid(z[:, 0:H])
        f = sigmoid(z[:, H:2 * H])
        g = tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:4 * H])
        c = f * c + i * g
        h = o * tanh(c)
        outs.append(h)
    hs = stack(outs, axis=1)
    return hs @ params["w_out"] + params["b_out"]


# ---------------------------------------------------------------- parameters & optimizer

def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params`` (arrays); returns ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Adam over a fixed, ordered list of leaf tensors."""

    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, scale: float = 1.0):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad * scale for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


def gradcheck(fn, inputs, h: float = 1e-5):
    """Analytic vs central-difference gradients of scalar ``fn(*tensors)``.

    Returns the worst relative error ``|a - n| / max(|a|, |n|)`` over all inputs, measured
    as vector norms per input.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), True) for x in inputs]
    out = fn(*tensors)
    backward(out)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*[Tensor(s.data) for s in tensors]).item()
            flat[j] = orig - h
            fm = fn(*[Tensor(s.data) for s in tensors]).item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-300)
        worst = max(worst, np.linalg.norm(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------- checkpoints

def save_weights(path, params: dict, state: AdamState | None = None, manifest: str = "") -> None:
    entries = {"manifest": manifest}
    names = sorted(params)
    for name in names:
        entries[f"param/{name}"] = np.asarray(params[name].data if isinstance(params[name], Tensor)
                                              else params[name], dtype=np.float64)
    if state is not None:
        entries["adam/hyper"] = np.array([state.learning_rate, state.beta1, state.beta2, state.eps])
        entries["adam/step"] = np.array([state.step], dtype=np.int64)
        for name, m, v in zip(names, state.m, state.v):
            entries[f"adam/m/{name}"] = m
            entries[f"adam/v/{name}"] = v
    container.save(path, WEIGHTS_MAGIC, entries)


def load_weights(path):
    d = container.load(path, WEIGHTS_MAGIC)
    params = {k[len("param/"):]: v for k, v in d.items() if k.startswith("param/")}
    state = None
    if "adam/step" in d:
        lr, b1, b2, eps = d["adam/hyper"]
        names = sorted(params)
        state = AdamState(float(lr), float(b1), float(b2), float(eps), int(d["adam/step"][0]),
                          [d[f"adam/m/{n}"] for n in names], [d[f"adam/v/{n}"] for n in names])
    return params, state, d.get("manifest", "")
