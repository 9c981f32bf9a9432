"""Dense float64 tensors with reverse-mode autodiff.

Just enough machinery for a small decoder-only transformer: matmul, add,
mul, softmax, layer norm, GELU, dropout, embedding gather, cross entropy,
plus the shape plumbing (reshape / transpose / concat / slice) needed to
compose attention. Every primitive validates that its output is finite.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Additive mask value for disallowed attention positions.  Large enough that
# exp(x - max) underflows to exactly 0, small enough to stay finite.
MASK_VALUE = -1e30


class NonFiniteError(FloatingPointError):
    """A primitive produced (or was given) a NaN or Inf."""


class UnsupportedOpError(ValueError):
    """Backward pass hit a node with no registered gradient rule."""


def _check(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value in tensor")
    return arr


class Tensor:
    """Immutable nd-array node in the autodiff graph."""

    __slots__ = ("data", "parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, name=""):
        arr = np.asarray(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = _check(arr)
        self.parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, name="") -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), name=name)


def const(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return Tensor(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.data, a.shape))
        acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def backward(g, acc):
        at = np.swapaxes(a.data, -1, -2)
        bt = np.swapaxes(b.data, -1, -2)
        acc(a, _unbroadcast(g @ bt, a.shape))
        acc(b, _unbroadcast(at @ g, b.shape))

    return Tensor(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g, acc):
        acc(x, g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, acc):
        acc(x, g.transpose(inv))

    return Tensor(x.data.transpose(axes), (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            acc(t, piece)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g, acc):
        full = np.zeros_like(x.data)
        full[idx] = g
        acc(x, full)

    return Tensor(x.data[idx], (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g, acc):
        acc(x, np.full(x.shape, g))

    return Tensor(x.data.sum(), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g, acc):
        inner = (g * s).sum(axis=axis, keepdims=True)
        acc(x, s * (g - inner))

    return Tensor(s, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def backward(g, acc):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        acc(x, g * (phi + x.data * pdf))

    return Tensor(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; gain/bias have that axis's length."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def backward(g, acc):
        n = x.shape[-1]
        gg = g * gain.data
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        acc(x, dx)
        red = tuple(range(g.ndim - 1))
        acc(gain, (g * xhat).sum(axis=red))
        acc(bias, g.sum(axis=red))

    return Tensor(out, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; rate 0 (or rng None) is exactly the identity."""
    if rate < 0 or rate >= 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g, acc):
        acc(x, g * mask)

    return Tensor(x.data * mask, (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def backward(g, acc):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        acc(table, full)

    return Tensor(table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError("need one target per logit row")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target index out of vocabulary range")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), targets].mean()

    def backward(g, acc):
        probs = np.exp(logp)
        probs[np.arange(n), targets] -= 1.0
        acc(logits, g * probs / n)

    return Tensor(loss, (logits,), backward)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, causal_from: int = 0) -> Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v with an optional causal mask.

    q: (..., n, d_k), k: (..., m, d_k), v: (..., m, d_v).  Query row i sits at
    absolute position causal_from + i and may attend to key rows < causal_from
    plus in-block rows ≤ its own.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query/key width mismatch")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("key/value row count mismatch")
    n, m = q.shape[-2], k.shape[-2]
    scores = matmul(q, transpose(k, (*range(k.data.ndim - 2), k.data.ndim - 1,
                                     k.data.ndim - 2)))
    scores = mul(scores, const(1.0 / np.sqrt(q.shape[-1])))
    mask = np.zeros((n, m))
    cols = np.arange(m)[None, :]
    rows = np.arange(n)[:, None]
    mask[cols > causal_from + rows] = MASK_VALUE
    scores = add(scores, const(mask))
    return matmul(softmax(scores, axis=-1), v)


class Tape:
    """Reverse-mode replay over the graph reachable from one scalar output.

    Gradients accumulate keyed by tensor identity; each node's backward rule
    runs exactly once, in reverse topological order.
    """

    def __init__(self, output: Tensor):
        if output.data.ndim != 0:
            raise ValueError("backward pass needs a scalar output")
        self.output = output
        self._order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self._order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))

    def gradients(self) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.output): np.asarray(1.0)}

        def acc(t: Tensor, g: np.ndarray):
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64)

        for node in reversed(self._order):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                if node.parents:
                    raise UnsupportedOpError(
                        f"no backward rule for node {node.name!r}")
                continue
            node._backward(np.asarray(g, dtype=np.float64), acc)
        return grads


def gradient_of(output: Tensor, inputs) -> list[np.ndarray]:
    """Gradients of a scalar `output` w.r.t. `inputs` (zeros if unused)."""
    grads = Tape(output).gradients()
    return [grads.get(id(t), np.zeros(t.shape)) for t in inputs]


# ---------------------------------------------------------------------------
# Checkpoint file: little-endian, magic "ARDM", version, then named float32
# tensors.

CHECKPOINT_MAGIC = b"ARDM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            out[name] = arr.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") \
            from exc
    return out
