"""Reverse-mode automatic differentiation over dense float64 arrays.

A deliberately small engine: ``Tensor`` wraps a numpy array plus a gradient
accumulator, every operation records its parents and a backward closure on an
implicit tape, and ``Tensor.backward()`` walks the tape once in reverse
topological order.  Everything runs in double precision; any op that produces
a non-finite value raises ``NumericError`` naming the op, so NaNs cannot
propagate silently into a training run.

Only the primitives the point-cloud networks actually need are provided.
Broadcasting is limited to trailing-shape bias addition; there is no view
aliasing (every op materialises its output).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, InvariantViolation, NumericError

_MAX_NDIM = 4

# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A float64 array with an optional gradient accumulator.

    Leaf tensors created with ``requires_grad=True`` get a zero-initialised
    ``grad`` of the same shape immediately.  Interior nodes allocate their
    gradient lazily during backward.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > _MAX_NDIM:
            raise InvalidArgument(f"tensors are limited to {_MAX_NDIM} dimensions, got {arr.ndim}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "detach"
        return out

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable parent.

        ``seed`` defaults to ones (the usual scalar-loss case).  Multiple uses
        of a tensor sum their contributions; calling backward twice without
        zeroing grads keeps accumulating, which the optimizer relies on not
        happening (it zeroes after each step).
        """
        if not self.requires_grad:
            raise InvalidArgument("backward() on a tensor that does not require grad")
        if seed is None:
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.values.shape:
                raise InvalidArgument(f"seed shape {seed.shape} != value shape {self.values.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        _accum(self, seed)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.values.shape}, op={self._op}, grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(op: str, values: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[Tensor], None] | None) -> Tensor:
    """Create an interior tape node, checking finiteness of the forward value."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim > _MAX_NDIM:
        raise InvalidArgument(f"op '{op}' produced a {values.ndim}-d tensor (max {_MAX_NDIM})")
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._op = op
    if out.requires_grad and backward is not None:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast against ``a`` (bias rows etc.)."""
    a, b = _as_tensor(a), _as_tensor(b)
    values = a.values + b.values

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, _sum_to_shape(out.grad, a.values.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(out.grad, b.values.shape))

    return _node("add", values, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad * s)

    return _node("scale", a.values * s, (a,), backward)


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (masks, one-hot rows)."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.values.shape:
        raise InvalidArgument(f"mul_const shape mismatch: {a.values.shape} vs {c.shape}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad * c)

    return _node("mul_const", a.values * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  ``a`` may be 2-d or 3-d; ``b`` must be 2-d."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim not in (2, 3) or b.values.ndim != 2:
        raise InvalidArgument(
            f"matmul supports (2|3)-d @ 2-d, got {a.values.ndim}-d @ {b.values.ndim}-d")
    if a.values.shape[-1] != b.values.shape[0]:
        raise InvalidArgument(f"matmul inner dims differ: {a.values.shape} @ {b.values.shape}")
    values = a.values @ b.values

    def backward(out: Tensor) -> None:
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ b.values.T)
        if b.requires_grad:
            n = a.values.shape[-1]
            p = b.values.shape[1]
            _accum(b, a.values.reshape(-1, n).T @ g.reshape(-1, p))

    return _node("matmul", values, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.values.ndim < 2:
        raise InvalidArgument("transpose needs at least 2 dimensions")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, np.swapaxes(out.grad, -1, -2))

    return _node("transpose", np.swapaxes(a.values, -1, -2), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad.reshape(old))

    return _node("reshape", a.values.reshape(shape), (a,), backward)


def concat_last_dim(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InvalidArgument("concat_last_dim of zero tensors")
    widths = [p.values.shape[-1] for p in parts]
    values = np.concatenate([p.values for p in parts], axis=-1)

    def backward(out: Tensor) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, out.grad[..., offset:offset + w])
            offset += w

    return _node("concat_last_dim", values, parts, backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along the first axis (token-sequence assembly)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise InvalidArgument("concat_rows of zero tensors")
    counts = [p.values.shape[0] for p in parts]
    values = np.concatenate([p.values for p in parts], axis=0)

    def backward(out: Tensor) -> None:
        offset = 0
        for p, n in zip(parts, counts):
            if p.requires_grad:
                _accum(p, out.grad[offset:offset + n])
            offset += n

    return _node("concat_rows", values, parts, backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.values.shape[0]
    if not (0 <= start <= stop <= n):
        raise InvalidArgument(f"slice_rows[{start}:{stop}] out of range for {n} rows")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.values)
            g[start:stop] = out.grad
            _accum(a, g)

    return _node("slice_rows", a.values[start:stop].copy(), (a,), backward)


def slice_last_dim(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.values.shape[-1]
    if not (0 <= start <= stop <= n):
        raise InvalidArgument(f"slice_last_dim[{start}:{stop}] out of range for width {n}")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.values)
            g[..., start:stop] = out.grad
            _accum(a, g)

    return _node("slice_last_dim", a.values[..., start:stop].copy(), (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by integer index; duplicate indices sum their gradients."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise InvalidArgument("gather_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.values.shape[0]):
        raise InvalidArgument("gather_rows index out of range")

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.values)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    return _node("gather_rows", a.values[idx].copy(), (a,), backward)


def repeat_rows(a: Tensor, count: int) -> Tensor:
    """Tile a single row (1, C) or (C,) into (count, C)."""
    a = _as_tensor(a)
    row = a.values.reshape(1, -1)
    if a.values.ndim > 2 or (a.values.ndim == 2 and a.values.shape[0] != 1):
        raise InvalidArgument(f"repeat_rows expects one row, got shape {a.values.shape}")
    values = np.repeat(row, count, axis=0)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad.sum(axis=0).reshape(a.values.shape))

    return _node("repeat_rows", values, (a,), backward)


def repeat_middle(a: Tensor, count: int) -> Tensor:
    """Tile (G, C) into (G, count, C); the per-patch pooled-feature broadcast."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise InvalidArgument("repeat_middle expects a 2-d tensor")
    values = np.repeat(a.values[:, None, :], count, axis=1)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad.sum(axis=1))

    return _node("repeat_middle", values, (a,), backward)


def max_over_rows(a: Tensor) -> Tensor:
    """Max-reduce the second-to-last axis; gradient goes to the first argmax."""
    a = _as_tensor(a)
    if a.values.ndim < 2:
        raise InvalidArgument("max_over_rows needs at least 2 dimensions")
    idx = np.argmax(a.values, axis=-2)
    values = np.take_along_axis(a.values, np.expand_dims(idx, -2), axis=-2).squeeze(-2)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.values)
            np.put_along_axis(g, np.expand_dims(idx, -2), np.expand_dims(out.grad, -2), axis=-2)
            _accum(a, g)

    return _node("max_over_rows", values, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, np.full_like(a.values, out.grad / n))

    return _node("mean_all", np.mean(a.values), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, np.full_like(a.values, out.grad))

    return _node("sum_all", np.sum(a.values), (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            y = out.values
            g = out.grad
            _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out = _node("softmax_rows", values, (a,), backward)
    return out


def logsumexp_rows(a: Tensor) -> Tensor:
    """log(sum(exp)) over the last axis, max-shifted for stability."""
    a = _as_tensor(a)
    m = a.values.max(axis=-1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=-1, keepdims=True)
    values = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, soft * np.expand_dims(out.grad, -1))

    return _node("logsumexp_rows", values, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            _accum(a, out.grad * mask)

    return _node("relu", np.where(mask, a.values, 0.0), (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.values
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    values = 0.5 * x * (1.0 + t)

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            _accum(a, out.grad * local)

    return _node("gelu", values, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    c = x.values.shape[-1]
    if gain.values.shape != (c,) or bias.values.shape != (c,):
        raise InvalidArgument(f"layer_norm gain/bias must have shape ({c},)")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    values = xhat * gain.values + bias.values

    def backward(out: Tensor) -> None:
        g = out.grad
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.values
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)

    return _node("layer_norm", values, (x, gain, bias), backward)


def l2_normalize_rows(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; norms below ``floor`` divide by ``floor``."""
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise InvalidArgument("l2_normalize_rows expects a 2-d tensor")
    norms = np.linalg.norm(a.values, axis=1, keepdims=True)
    denom = np.maximum(norms, floor)
    values = a.values / denom

    def backward(out: Tensor) -> None:
        if a.requires_grad:
            g = out.grad
            live = norms > floor
            y = out.values
            proj = (g - y * (y * g).sum(axis=1, keepdims=True)) / denom
            clipped = g / floor
            _accum(a, np.where(live, proj, clipped))

    return _node("l2_normalize_rows", values, (a,), backward)


# ---------------------------------------------------------------------------
# Set distances
# ---------------------------------------------------------------------------


def _chamfer_parts(a: np.ndarray, b: np.ndarray):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    ia = np.argmin(d, axis=1)
    ib = np.argmin(d, axis=0)
    value = d[np.arange(a.shape[0]), ia].mean() + d[ib, np.arange(b.shape[0])].mean()
    return value, ia, ib


def chamfer(a: Tensor, b: Tensor) -> Tensor:
    """Symmetric squared-L2 chamfer distance between two point sets.

    Each direction is averaged over its own set; the two directions are
    summed.  Differentiable with respect to both sets wherever the nearest
    neighbours are unique.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    pa, pb = a.values, b.values
    if pa.ndim != 2 or pb.ndim != 2 or pa.shape[1] != pb.shape[1]:
        raise InvalidArgument(f"chamfer expects (M,D) and (L,D), got {pa.shape} and {pb.shape}")
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidArgument("chamfer of an empty point set")
    value, ia, ib = _chamfer_parts(pa, pb)
    m, l = pa.shape[0], pb.shape[0]

    def backward(out: Tensor) -> None:
        g = float(out.grad)
        if a.requires_grad:
            ga = (2.0 / m) * (pa - pb[ia])
            np.add.at(ga, ib, (2.0 / l) * (pa[ib] - pb))
            _accum(a, g * ga)
        if b.requires_grad:
            gb = (2.0 / l) * (pb - pa[ib])
            np.add.at(gb, ia, (2.0 / m) * (pb[ia] - pa))
            _accum(b, g * gb)

    return _node("chamfer", value, (a, b), backward)


def chamfer_batch(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over batch entries of chamfer(pred[i], target[i]).

    ``pred`` is (B, M, D) on the tape; ``target`` is a constant (B, L, D)
    array.  Used for per-patch reconstruction losses.
    """
    pred = _as_tensor(pred)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.values.ndim != 3 or tgt.ndim != 3 or pred.values.shape[0] != tgt.shape[0]:
        raise InvalidArgument(
            f"chamfer_batch expects (B,M,D) and (B,L,D), got {pred.values.shape} and {tgt.shape}")
    bsz = pred.values.shape[0]
    if bsz == 0:
        raise InvalidArgument("chamfer_batch over an empty batch")
    total = 0.0
    pairs = []
    for i in range(bsz):
        value, ia, ib = _chamfer_parts(pred.values[i], tgt[i])
        total += value
        pairs.append((ia, ib))
    value = total / bsz
    m, l = pred.values.shape[1], tgt.shape[1]

    def backward(out: Tensor) -> None:
        if pred.requires_grad:
            g = float(out.grad) / bsz
            gp = np.zeros_like(pred.values)
            for i, (ia, ib) in enumerate(pairs):
                gi = (2.0 / m) * (pred.values[i] - tgt[i][ia])
                np.add.at(gi, ib, (2.0 / l) * (pred.values[i][ib] - tgt[i]))
                gp[i] = g * gi
            _accum(pred, gp)

    return _node("chamfer_batch", value, (pred,), backward)


# ---------------------------------------------------------------------------
# Composite layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         out_proj: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``q`` is (a, C) and ``k``/``v`` are (b, C); C must divide evenly by
    ``heads``.  Per head h: Softmax(Q_h K_h^T / sqrt(C/heads)) V_h.  Heads are
    concatenated and, if ``out_proj`` is given, projected by it.  With a
    single head and no projection this is exactly the prototype-update
    attention form.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    c = q.values.shape[-1]
    if k.values.shape[-1] != c or v.values.shape[-1] != c:
        raise InvalidArgument("q/k/v widths differ")
    if k.values.shape[0] != v.values.shape[0]:
        raise InvalidArgument("k and v must have the same number of rows")
    if heads < 1 or c % heads != 0:
        raise InvalidArgument(f"width {c} not divisible by {heads} heads")
    dh = c // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_last_dim(q, lo, hi)
        kh = slice_last_dim(k, lo, hi)
        vh = slice_last_dim(v, lo, hi)
        attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt))
        outs.append(matmul(attn, vh))
    merged = outs[0] if heads == 1 else concat_last_dim(outs)
    if out_proj is not None:
        merged = matmul(merged, out_proj)
    return merged


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits row)."""
    logits = _as_tensor(logits)
    row = reshape(logits, (1, logits.values.size))
    n = row.values.shape[1]
    if not 0 <= target < n:
        raise InvalidArgument(f"target {target} out of range for {n} classes")
    onehot = np.zeros((1, n))
    onehot[0, target] = 1.0
    lse = sum_all(logsumexp_rows(row))
    picked = sum_all(mul_const(row, onehot))
    return add(lse, scale(picked, -1.0))


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...],
                     std: float = 0.02) -> np.ndarray:
    """N(0, std^2) samples with |x| > 2*std redrawn until inside the band."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ParamStore:
    """Named map of trainable tensors with deterministic creation order.

    Iteration is always lexicographic by name so the optimiser update order
    (and therefore every downstream float) is reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, shape: tuple[int, ...], init: str = "trunc_normal") -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"parameter '{name}' already exists")
        if init == "trunc_normal":
            values = truncated_normal(self.rng, shape)
        elif init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            raise InvalidArgument(f"unknown init '{init}'")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise InvalidArgument(f"unknown parameter '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def frozen(self) -> dict[str, Tensor]:
        """Constant views of every parameter (stop-gradient forward passes)."""
        return {name: t.detach() for name, t in self._params.items()}

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise InvalidArgument(f"cannot load unknown parameter '{name}'")
            t = self._params[name]
            if t.values.shape != arr.shape:
                raise InvalidArgument(
                    f"tensor '{name}': stored shape {arr.shape} != expected {t.values.shape}")
            t.values[...] = arr

    def drop_prefix(self, prefix: str) -> None:
        for name in [n for n in self._params if n.startswith(prefix)]:
            del self._params[name]


class AdamW:
    """Decoupled-weight-decay Adam over a ParamStore.

    Parameters are visited in lexicographic name order; gradients are zeroed
    after each step.  A parameter whose gradient accumulator is missing is an
    invariant violation (a backward pass never ran for it).

    ``overrides`` maps a parameter name to its own (lr, weight_decay) pair;
    everything else uses the shared values.  The dict is consulted live on
    every step, so a schedule can mutate an entry between steps.
    """

    def __init__(self, store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 overrides: dict[str, tuple[float, float]] | None = None):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.overrides = dict(overrides or {})
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                raise InvariantViolation(f"parameter '{name}' has no gradient accumulator")
            if p.grad.shape != p.values.shape:
                raise InvariantViolation(f"parameter '{name}' gradient shape mismatch")
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self._m.setdefault(name, np.zeros_like(p.values))
            v = self._v.setdefault(name, np.zeros_like(p.values))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            lr, wd = self.overrides.get(name, (self.lr, self.weight_decay))
            p.values -= lr * (update + wd * p.values)
            g[...] = 0.0
