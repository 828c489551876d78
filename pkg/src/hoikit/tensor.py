"""Dense f64 tensors with a reverse-mode gradient tape.

Covers exactly the primitives the detection pipeline needs: linear maps,
row-wise softmax / log-softmax / layer norm / l2 normalization, elementwise
arithmetic, relu, a fused binary-cross-entropy-with-logits, reductions,
indexing, concatenation and clipping. Every primitive carries a hand-written
backward; tests/test_tensor.py verifies each against central finite
differences.
"""

from __future__ import annotations

import numpy as np

from .config import LAYER_NORM_EPS
from .errors import ContractError, NonFiniteError, ShapeError

_FINITE_CHECKS = True
_GRAD_ENABLED = True
DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Select the array dtype for new tensors: float64 (tests, oracles) or
    float32 (training speed)."""
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    DTYPE = dtype


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-primitive NaN/Inf detection; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class no_grad:
    """Context manager that stops tape recording (inference passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the module-level primitives.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """Trainable tensor with a persistent gradient buffer and a name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _from_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    # A finite sum implies every element is finite (inf/nan propagate through
    # the reduction); one reduction is far cheaper than an isfinite scan.
    if _FINITE_CHECKS and not np.isfinite(data.sum()):
        raise NonFiniteError("primitive produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # Copy: g may alias an upstream gradient buffer shared with another
        # parent (e.g. both operands of an add receive the same array).
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g, out):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def backward(g, out):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g, out):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g, out):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, out):
        _accum(a, -g)

    return _from_op(-a.data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g, out):
        _accum(a, g * np.sign(a.data))

    return _from_op(out_data, (a,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g, out):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g, out):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _from_op(out_data, (a, b), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside the range."""
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g, out):
        _accum(a, g * inside)

    return _from_op(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g, out):
        _accum(a, g * mask)

    return _from_op(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out_data[~pos] = e / (1.0 + e)

    def backward(g, out):
        _accum(a, g * out.data * (1.0 - out.data))

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g, out):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _from_op(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g, out):
        _accum(a, g.T)

    return _from_op(a.data.T, (a,), backward)


def linear_apply(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Rows of x mapped through weight, plus optional bias: x @ weight (+ bias)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear_apply {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} for weight {weight.shape}")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data

    if bias is None:
        def backward(g, out):
            _accum(x, g @ weight.data.T)
            _accum(weight, x.data.T @ g)

        return _from_op(out_data, (x, weight), backward)

    def backward(g, out):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    return _from_op(out_data, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# row-wise normalizations
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g, out):
        y = out.data
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _from_op(out_data, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse

    def backward(g, out):
        soft = np.exp(out.data)
        _accum(x, g - soft * g.sum(axis=1, keepdims=True))

    return _from_op(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardization (population variance) with learned gain/shift."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got {x.shape}")
    m = x.shape[1]
    if m < 2:
        raise ShapeError("layer_norm needs at least 2 features per row")
    if gain.shape != (m,) or shift.shape != (m,):
        raise ShapeError(f"gain/shift must have shape ({m},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + shift.data

    def backward(g, out):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, term * inv)
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(shift, g.sum(axis=0))

    return _from_op(out_data, (x, gain, shift), backward)


def add_layer_norm(a: Tensor, b: Tensor, gain: Tensor, shift: Tensor,
                   eps: float = LAYER_NORM_EPS) -> Tensor:
    """layer_norm(a + b) fused into one node (the residual+norm pattern)."""
    if a.shape != b.shape:
        raise ShapeError(f"add_layer_norm {a.shape} vs {b.shape}")
    x = a.data + b.data
    m = x.shape[1]
    if m < 2:
        raise ShapeError("add_layer_norm needs at least 2 features per row")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + shift.data

    def backward(g, out):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = term * inv
        _accum(a, dx)
        _accum(b, dx)
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(shift, g.sum(axis=0))

    return _from_op(out_data, (a, b, gain, shift), backward)


def mlp_relu(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """relu(x @ w1 + b1) @ w2 + b2 fused into one node."""
    if x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise ShapeError(f"mlp_relu {x.shape} through {w1.shape}, {w2.shape}")
    pre = x.data @ w1.data + b1.data
    hidden = np.maximum(pre, 0.0)
    out_data = hidden @ w2.data + b2.data

    def backward(g, out):
        _accum(w2, hidden.T @ g)
        _accum(b2, g.sum(axis=0))
        d_hidden = (g @ w2.data.T) * (pre > 0)
        _accum(x, d_hidden @ w1.data.T)
        _accum(w1, x.data.T @ d_hidden)
        _accum(b1, d_hidden.sum(axis=0))

    return _from_op(out_data, (x, w1, b1, w2, b2), backward)


def corner_boxes(sig: Tensor, min_extent: float) -> Tensor:
    """Convert per-row (cx, cy, w, h) in (0,1) to corner boxes clipped into
    [0,1]^2 with a guaranteed minimum extent; fused node."""
    if sig.ndim != 2 or sig.shape[1] != 4:
        raise ShapeError(f"corner_boxes expects n x 4, got {sig.shape}")
    s = sig.data
    lo_raw = s[:, 0:2] - 0.5 * s[:, 2:4]
    hi_raw = s[:, 0:2] + 0.5 * s[:, 2:4]
    lo = np.clip(lo_raw, 0.0, 1.0 - min_extent)
    hi_c = np.clip(hi_raw, 0.0, 1.0)
    floor = lo + min_extent
    take_hi = hi_c >= floor
    hi = np.where(take_hi, hi_c, floor)
    out_data = np.concatenate([lo, hi], axis=1)

    def backward(g, out):
        g_lo = g[:, 0:2].copy()
        g_hi = g[:, 2:4]
        lo_inside = (lo_raw > 0.0) & (lo_raw < 1.0 - min_extent)
        hi_inside = (hi_raw > 0.0) & (hi_raw < 1.0)
        # hi = max(clip(hi_raw), lo + min_extent): losing side passes to lo
        g_lo += g_hi * ~take_hi
        d_hi_raw = g_hi * take_hi * hi_inside
        d_lo_raw = g_lo * lo_inside
        grad = np.empty_like(s)
        grad[:, 0:2] = d_lo_raw + d_hi_raw
        grad[:, 2:4] = 0.5 * (d_hi_raw - d_lo_raw)
        _accum(sig, grad)

    return _from_op(out_data, (sig,), backward)


def l2_normalize_rows(x: Tensor, tiny: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; a zero row becomes the uniform 1/sqrt(m) row
    (constant, no gradient) by convention."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    m = x.shape[1]
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    degenerate = norms < tiny
    safe = np.where(degenerate, 1.0, norms)
    out_data = np.where(degenerate, 1.0 / np.sqrt(m), x.data / safe)

    def backward(g, out):
        inv = 1.0 / safe
        dot = (g * x.data).sum(axis=1, keepdims=True)
        gx = g * inv - x.data * dot * inv**3
        _accum(x, np.where(degenerate, 0.0, gx))

    return _from_op(out_data, (x,), backward)


def residual_enhance(base: Tensor, aux: Tensor, weight: float) -> Tensor:
    """base + weight * aux, exactly; the shared enhancement form."""
    base, aux = _wrap(base), _wrap(aux)
    if base.shape != aux.shape:
        raise ShapeError(f"residual_enhance {base.shape} vs {aux.shape}")
    w = float(weight)
    out_data = base.data + w * aux.data

    def backward(g, out):
        _accum(base, g)
        _accum(aux, w * g)

    return _from_op(out_data, (base, aux), backward)


# ---------------------------------------------------------------------------
# reductions, indexing, concatenation
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g, out):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _from_op(out_data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.mean())

    def backward(g, out):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _from_op(out_data, (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows of a matrix, kept as a 1-row matrix."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got {a.shape}")
    n = a.shape[0]
    out_data = a.data.mean(axis=0, keepdims=True)

    def backward(g, out):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _from_op(out_data, (a,), backward)


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis
               for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)
    basic = _basic_index(idx)

    def backward(g, out):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        if basic:
            # Basic indices address each element at most once.
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)
        _accum(a, buf)

    return _from_op(out_data, (a,), backward)


def repeat_rows(row: Tensor, n: int) -> Tensor:
    """Tile a 1-row matrix into n identical rows."""
    if row.ndim != 2 or row.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects a 1-row matrix, got {row.shape}")
    out_data = np.repeat(row.data, n, axis=0)

    def backward(g, out):
        _accum(row, g.sum(axis=0, keepdims=True))

    return _from_op(out_data, (row,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g, out):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _from_op(out_data, tuple(tensors), backward)


def rows(a: Tensor, index) -> Tensor:
    """Select rows of a matrix by an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]
    unique = np.unique(index).size == index.size

    def backward(g, out):
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        if unique:
            buf[index] += g
        else:
            np.add.at(buf, index, g)
        _accum(a, buf)

    return _from_op(out_data, (a,), backward)


def single_head_attention(x_q: Tensor, memory: Tensor,
                          wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                          wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
                          q_pos=None, k_pos=None,
                          score_bias: Tensor | None = None) -> Tensor:
    """Fused scaled dot-product attention with input/output projections,
    taped as one node to keep the graph small. Optional position codes
    (arrays or tensors) are added to the query/key projection inputs only
    (values read the raw memory), so location information survives depth;
    an optional learnable per-(query, key) bias adds to the logits (a spatial
    attention prior, the convergence shortcut for content attention)."""
    if x_q.ndim != 2 or memory.ndim != 2 or x_q.shape[1] != wq.shape[0] \
            or memory.shape[1] != wk.shape[0]:
        raise ShapeError(f"attention {x_q.shape} over {memory.shape}")
    xq_d, m_d = x_q.data, memory.data
    qp = q_pos.data if isinstance(q_pos, Tensor) else (
        None if q_pos is None else np.asarray(q_pos, dtype=xq_d.dtype))
    kp = k_pos.data if isinstance(k_pos, Tensor) else (
        None if k_pos is None else np.asarray(k_pos, dtype=xq_d.dtype))
    q_in = xq_d if qp is None else xq_d + qp
    k_in = m_d if kp is None else m_d + kp
    q = q_in @ wq.data + bq.data
    k = k_in @ wk.data + bk.data
    v = m_d @ wv.data + bv.data
    scale = 1.0 / np.sqrt(q.shape[1])
    scores = q @ k.T * scale
    if score_bias is not None:
        scores = scores + score_bias.data
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=1, keepdims=True)
    mix = attn @ v
    out_data = mix @ wo.data + bo.data

    def backward(g, out):
        d_mix = g @ wo.data.T
        _accum(wo, mix.T @ g)
        _accum(bo, g.sum(axis=0))
        d_attn = d_mix @ v.T
        d_v = attn.T @ d_mix
        d_logits = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
        if score_bias is not None:
            _accum(score_bias, d_logits)
        d_scores = d_logits * scale
        d_q = d_scores @ k
        d_k = d_scores.T @ q
        d_q_in = d_q @ wq.data.T
        _accum(x_q, d_q_in)
        if isinstance(q_pos, Tensor):
            _accum(q_pos, d_q_in)
        _accum(wq, q_in.T @ d_q)
        _accum(bq, d_q.sum(axis=0))
        d_k_in = d_k @ wk.data.T
        _accum(memory, d_k_in + d_v @ wv.data.T)
        if isinstance(k_pos, Tensor):
            _accum(k_pos, d_k_in)
        _accum(wk, k_in.T @ d_k)
        _accum(bk, d_k.sum(axis=0))
        _accum(wv, m_d.T @ d_v)
        _accum(bv, d_v.sum(axis=0))

    parents = [x_q, memory, wq, bq, wk, bk, wv, bv, wo, bo]
    if isinstance(q_pos, Tensor):
        parents.append(q_pos)
    if isinstance(k_pos, Tensor):
        parents.append(k_pos)
    if score_bias is not None:
        parents.append(score_bias)
    return _from_op(out_data, tuple(parents), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_with_logits_mean(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy against {0,1} targets, in the stable
    softplus form: mean(softplus(x) - x*y)."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray((softplus - x * y).mean())
    n = x.size

    def backward(g, out):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        sig[~pos] = e / (1.0 + e)
        _accum(logits, g * (sig - y) / n)

    return _from_op(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable tensor with
    requires_grad. Parameters keep their buffers across calls (zero_grad
    resets them); call backward once per recorded graph."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad, node)
