"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a tape: every differentiable operation creates a new Tensor
node carrying a monotonically increasing sequence id, references to its
parent nodes, and a closure computing the local vector-Jacobian products.
``backward`` walks the reachable nodes in reverse creation order, which is
a valid reverse topological order because inputs are always created before
outputs. Each node is visited exactly once; gradient contributions from
multiple consumers are summed before the visit.

All compute is float64. Forward operations are pure: the same inputs give
bit-identical outputs.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

_seq_counter = itertools.count()


class ShapeError(ValueError):
    """Dimension mismatch, with the offending axis named in the message."""


class DegenerateEmbeddingError(ValueError):
    """Cosine similarity requested on a (near-)zero-norm vector."""


class Tensor:
    """N-dimensional float64 value with an optional gradient slot.

    ``requires_grad=True`` on construction marks a leaf (parameter): its
    ``grad`` array is allocated eagerly and accumulates across backward
    passes until explicitly zeroed. Tensors produced by operations track
    their parents internally and receive gradients transiently during
    ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_seq", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._seq = next(_seq_counter)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; python scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Create an operation-output node. ``backward_fn(g)`` yields (parent, grad) pairs."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of all reachable leaves from a scalar loss.

    Contributions accumulate additively when a tensor feeds several
    consumers. Leaves keep their accumulated ``grad`` until zeroed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if not t.requires_grad or t._seq in reachable:
            continue
        reachable[t._seq] = t
        stack.extend(t._parents)

    # pending maps seq -> [grad array, owned]; un-owned arrays may alias a
    # closure's output and are replaced (not mutated) on the next accumulation
    pending: dict[int, list] = {loss._seq: [np.ones_like(loss.data), True]}
    for seq in sorted(reachable, reverse=True):
        slot = pending.pop(seq, None)
        if slot is None:
            continue  # reachable upward but no gradient flowed here
        g = slot[0]
        t = reachable[seq]
        if t._backward is None:
            t.grad += g
            continue
        for parent, pg in t._backward(g):
            if not parent.requires_grad:
                continue
            prev = pending.get(parent._seq)
            if prev is None:
                pending[parent._seq] = [pg, False]
            elif prev[1]:
                prev[0] += pg
            else:
                prev[0] = prev[0] + pg
                prev[1] = True


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded, back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _node(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return _node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: ((a, -g),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(orig)),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inverse)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at the corner
    return _node(a.data * mask, (a,), lambda g: ((a, g * mask),))


def gelu(a: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * (x + _GELU_CUBIC * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + x * sech2 * (0.5 * _SQRT_2_OVER_PI) * (1.0 + 3.0 * _GELU_CUBIC * x2)
        return ((a, g * d),)

    return _node(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _node(np.sum(a.data), (a,), lambda g: ((a, np.broadcast_to(g, shape)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _node(np.sum(a.data) / n, (a,), lambda g: ((a, np.broadcast_to(g / n, shape)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules (2D and stacked 3D operands)."""
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (
            (a, _unbroadcast(ga, a.data.shape)),
            (b, _unbroadcast(gb, b.data.shape)),
        )

    return _node(out, (a, b), bw)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((a, y * (g - dot)),)

    return _node(y, (a,), bw)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: ``x @ weight.T + bias`` for x (N, Din), weight (Dout, Din)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input axis 1 = {x.data.shape[1]} but weight axis 1 = {weight.data.shape[1]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.data.shape} != ({weight.data.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        return (
            (x, g @ weight.data),
            (weight, g.T @ x.data),
            (bias, g.sum(axis=0)),
        )

    return _node(out, (x, weight, bias), bw)


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather (N, C, kh, kw, oh, ow) patch view-copies from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, p, q] = xp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input against OIHW weight."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride={stride}, padding={padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input (NCHW) and weight (OIHW)")
    n, c, h, w = x.data.shape
    o, i, kh, kw = weight.data.shape
    if c != i:
        raise ShapeError(f"conv2d: input channel axis 1 = {c} but weight axis 1 = {i}")
    if bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({o},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for spatial axes {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_cols(xp, kh, kw, stride, oh, ow).reshape(n, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(n, o, oh, ow) + bias.data.reshape(1, o, 1, 1)

    def bw(g):
        gmat = g.reshape(n, o, oh * ow)
        gw = np.einsum("nop,ncp->oc", gmat, cols).reshape(o, c, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (wmat.T @ gmat).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for p in range(kh):
            for q in range(kw):
                gxp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride] += gcols[:, :, p, q]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return ((x, gx), (weight, gw), (bias, gb))

    return _node(out, (x, weight, bias), bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution (stride 1), weight (C, 1, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("depthwise_conv2d expects 4-D input and weight")
    n, c, h, w = x.data.shape
    wc, one, kh, kw = weight.data.shape
    if wc != c:
        raise ShapeError(f"depthwise_conv2d: weight axis 0 = {wc} but input channel axis 1 = {c}")
    if one != 1:
        raise ShapeError(f"depthwise_conv2d: weight axis 1 = {one}, expected 1")
    if bias.data.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.data.shape} != ({c},)")
    oh = h + 2 * padding - kh + 1
    ow = w + 2 * padding - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"depthwise_conv2d: kernel {kh}x{kw} too large for spatial axes {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wk_flat = weight.data[:, 0]  # (C, kh, kw)
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    out[:] = bias.data.reshape(1, c, 1, 1)
    for p in range(kh):
        for q in range(kw):
            out += xp[:, :, p : p + oh, q : q + ow] * wk_flat[:, p, q].reshape(1, c, 1, 1)

    def bw(g):
        gw = np.empty((c, 1, kh, kw), dtype=np.float64)
        gxp = np.zeros_like(xp)
        for p in range(kh):
            for q in range(kw):
                patch = xp[:, :, p : p + oh, q : q + ow]
                gw[:, 0, p, q] = np.einsum("ncij,ncij->c", g, patch)
                gxp[:, :, p : p + oh, q : q + ow] += g * wk_flat[:, p, q].reshape(1, c, 1, 1)
        gb = g.sum(axis=(0, 2, 3))
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return ((x, gx), (weight, gw), (bias, gb))

    return _node(out, (x, weight, bias), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance, then scale/shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: last axis = {d} but gamma/beta shapes are "
            f"{gamma.data.shape}/{beta.data.shape}"
        )
    if epsilon < 0:
        raise ValueError(f"layer_norm: epsilon={epsilon}")
    shape = x.data.shape
    x2 = x.data.reshape(-1, d)
    mu = (np.einsum("md->m", x2) / d)[:, None]
    xc = x2 - mu
    var = np.einsum("md,md->m", xc, xc) / d
    inv = (1.0 / np.sqrt(var + epsilon))[:, None]
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(shape)

    def bw(g):
        g2 = g.reshape(-1, d)
        ggamma = np.einsum("md,md->d", g2, xhat)
        gbeta = np.einsum("md->d", g2)
        gh = g2 * gamma.data
        mean_gh = (np.einsum("md->m", gh) / d)[:, None]
        mean_ghx = (np.einsum("md,md->m", gh, xhat) / d)[:, None]
        gx = inv * (gh - mean_gh - xhat * mean_ghx)
        return ((x, gx.reshape(shape)), (gamma, ggamma), (beta, gbeta))

    return _node(out, (x, gamma, beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return ((x, np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), (n, c, h, w))),)

    return _node(out, (x,), bw)


def attention(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over (N, T, D) tokens.

    Rows of the attention matrix sum to 1 by construction of the softmax.
    """
    if tokens.data.ndim != 3:
        raise ShapeError(f"attention expects (N, T, D) tokens, got shape {tokens.data.shape}")
    d = tokens.data.shape[-1]
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if m.data.shape != (d, d):
            raise ShapeError(f"attention: {name} shape {m.data.shape} != ({d}, {d})")
    q = matmul(tokens, wq)
    k = matmul(tokens, wk)
    v = matmul(tokens, wv)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), _wrap(1.0 / math.sqrt(d)))
    weights = softmax_last(scores)
    return matmul(matmul(weights, v), wo)


def attention_weights(tokens: np.ndarray, wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Forward-only attention matrix, for inspection and row-sum checks."""
    q = tokens @ wq
    k = tokens @ wk
    scores = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(tokens.shape[-1])
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (N, D) tensors -> (N,).

    The backward formula is arranged as ``(b - (s/qa) * a) / (na * nb)`` so
    that when the two inputs are bit-identical the gradient is exactly zero
    (``s/qa`` evaluates to exactly 1.0), not merely small. Training relies
    on this for the teacher == student no-op invariant.
    """
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_pairs: shapes {a.data.shape} and {b.data.shape} must match (N, D)")
    qa = np.einsum("nd,nd->n", a.data, a.data)
    qb = np.einsum("nd,nd->n", b.data, b.data)
    s = np.einsum("nd,nd->n", a.data, b.data)
    if np.min(qa) <= 1e-24 or np.min(qb) <= 1e-24:
        raise DegenerateEmbeddingError("cosine on (near-)zero-norm embedding")
    # sqrt(qa*qb) rather than sqrt(qa)*sqrt(qb): IEEE sqrt of the rounded
    # product makes cos(a, a) evaluate to exactly 1.0
    denom = np.sqrt(qa * qb)
    c = np.clip(s / denom, -1.0, 1.0)

    def bw(g):
        coef = (g / denom)[:, None]
        ga = coef * (b.data - (s / qa)[:, None] * a.data)
        gb = coef * (a.data - (s / qb)[:, None] * b.data)
        return ((a, ga), (b, gb))

    return _node(c, (a, b), bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f, params, step: float = 1e-4) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` is a deterministic zero-argument callable returning a scalar
    Tensor built from ``params``. The relative error denominator is
    ``max(|analytic|, |numeric|, 1e-8)`` per coordinate.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_check: step={step}")
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f().item()
            flat[idx] = orig - step
            fm = f().item()
            flat[idx] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(num - ana_flat[idx]) / max(abs(num), abs(ana_flat[idx]), 1e-8)
            worst = max(worst, err)
    return worst
