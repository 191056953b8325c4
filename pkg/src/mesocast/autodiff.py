"""Dense float64 tensors with a reverse-mode tape.

Every operation records its inputs and a vector-Jacobian closure on the
output tensor; ``backward`` replays the recorded graph once in reverse
topological order.  All arithmetic is 64-bit and evaluation order is fixed,
so repeated passes over the same graph are bitwise identical.

The op set is the minimum needed by the forecasting stack: matrix products
(plain and batched with shared right-hand weights), row softmax, the usual
elementwise gate functions, and the shape algebra used by window assembly
and the band-pass pyramid (concat / slice / pad / 2x up-down sampling).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "abs_",
    "matmul",
    "softmax_rows",
    "concat",
    "add_bias",
    "narrow",
    "transpose",
    "reshape",
    "pad_last",
    "broadcast_rows",
    "downsample2",
    "upsample2",
    "sum_all",
    "mean_all",
    "sigmoid_array",
]


def sigmoid_array(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Logistic function as 0.5*(1+tanh(x/2)); float64 tanh is far faster
    than exp on this code path and agrees with 1/(1+exp(-x)) to ~1 ulp."""
    out = np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


class Tensor:
    """A float64 array plus optional tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Constant (non-trainable) tensor."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents, vjp) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _node(a.data * k, (a,), lambda g: (g * k,))


def sigmoid(a: Tensor) -> Tensor:
    y = sigmoid_array(a.data)
    return _node(y, (a,), lambda g: (g * (y * (1.0 - y)),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,))


# ---------------------------------------------------------------------------
# matrix products and softmax
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands, batched when ``a`` is 3-D.

    Supported shapes: (m,k)@(k,n); (B,m,k)@(B,k,n); (B,m,k)@(k,n) where the
    right operand is a shared weight matrix applied to every batch entry.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner extents disagree, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return g @ bd.T, ad.T @ g

        return _node(ad @ bd, (a, b), vjp)
    if ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ValueError(f"matmul: batch shapes disagree, {ad.shape} @ {bd.shape}")

        def vjp(g):
            return g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g

        return _node(ad @ bd, (a, b), vjp)
    if ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ValueError(f"matmul: inner extents disagree, {ad.shape} @ {bd.shape}")
        B, m, k = ad.shape
        n = bd.shape[1]

        def vjp(g):
            da = g @ bd.T
            db = ad.reshape(B * m, k).T @ g.reshape(B * m, n)
            return da, db

        return _node(ad @ bd, (a, b), vjp)
    raise ValueError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat: no inputs")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        gm = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(gm[offsets[i]:offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return _node(out, parts, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    extent = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ValueError(
            f"narrow: slice [{start}:{start + length}) out of range for extent {extent}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _node(a.data[idx].copy(), (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ValueError(f"transpose: needs ndim >= 2, got shape {a.data.shape}")
    return _node(a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (np.ascontiguousarray(g).reshape(orig),))


def pad_last(a: Tensor, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad the last axis; ``zero`` drops pad gradient, ``replicate`` folds it
    onto the edge samples."""
    if left < 0 or right < 0:
        raise ValueError(f"pad_last: negative pad ({left}, {right})")
    if mode not in ("zero", "replicate"):
        raise ValueError(f"pad_last: unknown mode {mode!r}")
    x = a.data
    n = x.shape[-1]
    if mode == "replicate" and n == 0:
        raise ValueError("pad_last: cannot replicate an empty axis")
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x, width, mode="constant" if mode == "zero" else "edge")

    def vjp(g):
        core = g[..., left:left + n].copy()
        if mode == "replicate":
            if left:
                core[..., 0] += g[..., :left].sum(axis=-1)
            if right:
                core[..., -1] += g[..., left + n:].sum(axis=-1)
        return (core,)

    return _node(out, (a,), vjp)


def broadcast_rows(a: Tensor, rows: int) -> Tensor:
    """Tile a (n,) or (1, n) tensor into (rows, n); gradient sums the rows."""
    v = a.data.reshape(-1)
    orig = a.data.shape
    out = np.broadcast_to(v, (rows, v.size)).copy()

    def vjp(g):
        return (g.sum(axis=0).reshape(orig),)

    return _node(out, (a,), vjp)


def add_bias(mat: Tensor, vec: Tensor) -> Tensor:
    """mat + row-broadcast vec without materialising the tiled rows; the
    hot path for per-gate bias terms."""
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.data.shape[1] != vec.data.shape[0]:
        raise ValueError(f"add_bias: shape mismatch {mat.data.shape} vs {vec.data.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _node(mat.data + vec.data, (mat, vec), vjp)


def downsample2(a: Tensor) -> Tensor:
    """Keep even-indexed entries of the last axis."""
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., ::2] = g
        return (full,)

    return _node(a.data[..., ::2].copy(), (a,), vjp)


def upsample2(a: Tensor) -> Tensor:
    """Zero-stuff the last axis: out[..., 2i] = in[..., i], odd slots 0."""
    x = a.data
    out = np.zeros(x.shape[:-1] + (2 * x.shape[-1],))
    out[..., ::2] = x
    return _node(out, (a,), lambda g: (g[..., ::2].copy(),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _node(a.data.sum(), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    inv = 1.0 / a.data.size

    def vjp(g):
        return (np.full(shape, float(g) * inv),)

    return _node(a.data.mean(), (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``root``.

    ``root`` must be scalar.  Accumulation is out-of-place and follows one
    fixed reverse-topological order, so two passes over the same graph give
    bitwise-identical gradients.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    acc: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = np.array(g)  # leaf; own the buffer
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = acc.get(id(p))
            # out-of-place: stored buffers are never mutated, aliasing is safe
            acc[id(p)] = pg if prev is None else prev + pg
