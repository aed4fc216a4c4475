"""Dense tensors with reverse-mode automatic differentiation.

Deliberately minimal: exactly the operator set the denoiser, the losses and
the latent optimization need, on top of numpy. Graphs are built per forward
pass and freed when ``backward`` runs; there is no persistent tape.

Float32 is the working precision. ``high_precision()`` switches newly created
tensors to float64, which gradient checking requires (central differences are
too noisy in float32).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, freed graph, ...)."""


class PrecisionError(RuntimeError):
    """An operation requires the float64 compute mode."""


class _ThreadState(threading.local):
    """Per-thread compute mode, so concurrent jobs cannot leak modes."""

    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True


_STATE = _ThreadState()


def default_dtype() -> np.dtype:
    return np.dtype(_STATE.dtype)


@contextlib.contextmanager
def high_precision():
    """Run the enclosed code in float64 (for gradient checking)."""
    prev = _STATE.dtype
    _STATE.dtype = np.float64
    try:
        yield
    finally:
        _STATE.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (sampling, metric passes, probes)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_STATE.dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._freed = False

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self._op:
            flags.append(self._op)
        tag = f" [{','.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.shape}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor(data)
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        # copy views so .grad never aliases graph internals
        t.grad = np.array(g) if g.base is not None else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}") from None


# -- elementwise and scalar ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _node(a.data * np.asarray(c, dtype=a.data.dtype), (a,), bw, "scalar_mul")


def square(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            _accum(a, 2.0 * g * a.data)

    return _node(a.data * a.data, (a,), bw, "square")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (0.5 / out_data))

    return _node(out_data, (a,), bw, "sqrt")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _node(a.data * sig, (a,), bw, "silu")


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if not np.isfinite(a.data).all():
        raise ValueError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(a, (g - dot) * out_data)

    return _node(out_data, (a,), bw, "softmax")


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

    return _node(out_data, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.size // out_data.size

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g / n, a.shape))

    return _node(out_data, (a,), bw, "mean")


def masked_sum(a: Tensor, mask) -> Tensor:
    """Sum of the entries selected by a 0/1 mask (mask is not differentiated)."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    try:
        np.broadcast_shapes(a.shape, m.shape)
    except ValueError:
        raise ShapeError(f"masked_sum: incompatible shapes {a.shape} vs {m.shape}") from None
    m = m.astype(a.data.dtype)
    out_data = (a.data * m).sum()

    def bw(g):
        if a.requires_grad:
            _accum(a, g * np.broadcast_to(m, a.shape))

    return _node(out_data, (a,), bw, "masked_sum")


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(out_data, (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    axis = axis % tensors[0].ndim
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _node(out_data, tuple(tensors), bw, "concat")


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (int/slice/ellipsis) indexing with scatter-add backward."""
    out_data = a.data[key]

    def bw(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=a.data.dtype)
            full[key] += g
            _accum(a, full)

    return _node(out_data, (a,), bw, "slice")


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds into rows."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding: ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: id out of range [0, {table.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )
    out_data = table.data[idx]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros(table.shape, dtype=table.data.dtype)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, gt)

    return _node(out_data, (table,), bw, "embedding")


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)

    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.transpose(0, 2, 1))
            if b.requires_grad:
                _accum(b, a.data.transpose(0, 2, 1) @ g)

    elif a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))

    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def bmm_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched a @ b^T for (B, n, k) x (B, m, k) -> (B, n, m)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"bmm_nt: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data)
        if b.requires_grad:
            _accum(b, g.transpose(0, 2, 1) @ a.data)

    return _node(a.data @ b.data.transpose(0, 2, 1), (a, b), bw, "bmm_nt")


# -- spatial ops (B, H, W, C layout) ----------------------------------------------


def _require_4d(a: Tensor, op: str) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{op}: expected (B, H, W, C), got {a.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int | None = None) -> Tensor:
    """2-D convolution, stride 1, zero padding (default: same for odd kernels).

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,) or None.
    """
    _require_4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, Cin, Cout), got {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: even kernel {w.shape[:2]} needs explicit padding")
        padding = (kh - 1) // 2
    B, H, W, _ = x.shape
    ph = pw = int(padding)
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} too large for input {x.shape}")

    if ph or pw:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    else:
        xp = x.data
    # (B, Ho, Wo, C, kh, kw) view -> (B*Ho*Wo, kh*kw*C) patch matrix
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = patches @ wmat
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
        out = out + b.data
    out_data = out.reshape(B, Ho, Wo, cout)

    def bw(g):
        gm = g.reshape(B * Ho * Wo, cout)
        if w.requires_grad:
            _accum(w, (patches.T @ gm).reshape(kh, kw, cin, cout))
        if b is not None and b.requires_grad:
            _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            qh, qw = kh - 1 - ph, kw - 1 - pw
            if qh >= 0 and qw >= 0:
                # transposed conv: correlate padded grad with the flipped kernel
                gmp = g if not (qh or qw) else np.pad(g, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
                gwin = np.lib.stride_tricks.sliding_window_view(gmp, (kh, kw), axis=(1, 2))
                gpat = np.ascontiguousarray(gwin.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * W, kh * kw * cout)
                wf = w.data[::-1, ::-1, :, :].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                _accum(x, (gpat @ np.ascontiguousarray(wf)).reshape(B, H, W, cin))
            else:
                gp = (gm @ wmat.T).reshape(B, Ho, Wo, kh, kw, cin)
                gxp = np.zeros((B, H + 2 * ph, W + 2 * pw, cin), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i : i + Ho, j : j + Wo, :] += gp[:, :, :, i, j, :]
                if ph or pw:
                    gxp = gxp[:, ph : ph + H, pw : pw + W, :]
                _accum(x, gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, bw, "conv2d")


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, over (B, H, W, C)."""
    _require_4d(x, "avgpool2x")
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x: spatial dims must be even, got {x.shape}")
    out_data = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                g[:, :, None, :, None, :] * np.asarray(0.25, dtype=g.dtype),
                (B, H // 2, 2, W // 2, 2, C),
            )
            _accum(x, gx.reshape(B, H, W, C))

    return _node(out_data, (x,), bw, "avgpool2x")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling over (B, H, W, C)."""
    _require_4d(x, "upsample_nearest2x")
    B, H, W, C = x.shape
    out_data = np.broadcast_to(
        x.data[:, :, None, :, None, :], (B, H, 2, W, 2, C)
    ).reshape(B, 2 * H, 2 * W, C)

    def bw(g):
        if x.requires_grad:
            _accum(x, g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)))

    return _node(out_data, (x,), bw, "upsample_nearest2x")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (B, H, W, C) with per-channel affine.

    Fused single node: the backward uses the closed-form normalization
    gradient instead of a chain of elementwise nodes.
    """
    _require_4d(x, "group_norm")
    B, H, W, C = x.shape
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape}, expected ({C},)")
    cs = C // num_groups
    xg = x.data.reshape(B, H, W, num_groups, cs)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (xc * inv).reshape(B, H, W, C)
    out_data = xhat * gamma.data + beta.data

    def bw(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 1, 2)))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dxh = (g * gamma.data).reshape(B, H, W, num_groups, cs)
            xh = xhat.reshape(B, H, W, num_groups, cs)
            m1 = dxh.mean(axis=(1, 2, 4), keepdims=True)
            m2 = (dxh * xh).mean(axis=(1, 2, 4), keepdims=True)
            _accum(x, ((dxh - m1 - xh * m2) * inv).reshape(B, H, W, C))

    return _node(out_data, (x, gamma, beta), bw, "group_norm")


# -- graph traversal -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; frees the graph afterwards.

    Leaf ``grad`` buffers accumulate across calls (on freshly built graphs);
    callers reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward: graph already freed by a previous backward()")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._freed = True


# -- op catalog and gradient checking -------------------------------------------


def op_set() -> dict[str, Callable]:
    """Catalog of every differentiable operation the engine provides."""
    return {
        "add": add,
        "sub": sub,
        "mul": mul,
        "scalar_mul": scalar_mul,
        "div": div,
        "matmul": matmul,
        "bmm_nt": bmm_nt,
        "conv2d": conv2d,
        "upsample_nearest2x": upsample_nearest2x,
        "avgpool2x": avgpool2x,
        "group_norm": group_norm,
        "silu": silu,
        "softmax": softmax,
        "square": square,
        "sqrt": sqrt,
        "masked_sum": masked_sum,
        "sum": tsum,
        "mean": tmean,
        "reshape": reshape,
        "concat": concat,
        "slice": take_slice,
        "embedding": embedding,
    }


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    tolerance: float = 1e-4,
    name: str = "",
) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central finite differences. Requires the float64 compute mode."""
    if default_dtype() != np.float64:
        raise PrecisionError("grad_check requires the high_precision() compute mode")

    xv = Tensor(np.asarray(x.data, dtype=np.float64).copy(), requires_grad=True)
    out = f(xv)
    if out.data.size != 1:
        raise GraphError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = xv.grad if xv.grad is not None else np.zeros_like(xv.data)

    flat = xv.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(xv.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(xv.data)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(op_name=name or getattr(f, "__name__", "fn"), max_rel_error=max_rel, tolerance=tolerance)


# -- small constructors ----------------------------------------------------------


def _norm_shape(shape: tuple) -> tuple[int, ...]:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        return tuple(shape[0])
    return shape


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_norm_shape(shape), dtype=_STATE.dtype), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_norm_shape(shape), dtype=_STATE.dtype), requires_grad=requires_grad)


def randn(gen: np.random.Generator, shape: Iterable[int], scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    data = gen.standard_normal(tuple(shape), dtype=np.float64) * scale
    return Tensor(data.astype(_STATE.dtype), requires_grad=requires_grad)
