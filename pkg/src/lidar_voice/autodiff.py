"""Minimal reverse-mode differentiation over numpy arrays.

Only the operators the fused classifier needs are provided. Every tensor
holds float64 values; a tensor produced from at least one tensor with
``requires_grad`` records a backward closure and its parents. Calling
``backward`` on a scalar visits the recorded nodes in reverse execution
order, each exactly once, and accumulates gradients into ``.grad``.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)

        # Collect the reachable graph, then replay in reverse creation order.
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        ordered = sorted(nodes.values(), key=lambda t: t._order, reverse=True)

        for node in ordered:
            if node._backward is not None:
                node.grad = None
        _accumulate(self, np.asarray(grad, dtype=np.float64))
        for node in ordered:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar for the few combinations the model and tests use.
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, scalar: float) -> Tensor:
        return scale(self, scalar)

    __rmul__ = __mul__


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._backward is None:
        t.grad += g  # leaves own their buffer
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# structural and elementwise helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), backward)


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    widths = [p.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=-1)):
            _accumulate(p, gp)

    return _result(np.concatenate([p.data for p in parts], axis=-1), parts, backward)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """[B,N,K] @ [B,K,M] -> [B,N,M]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.transpose(0, 2, 1))
        _accumulate(b, a.data.transpose(0, 2, 1) @ g)

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# network operators


def matmul_bias(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape [B, in]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"matmul_bias: x{x.shape} w{w.shape} b{b.shape}")

    def backward(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _result(x.data @ w.data + b.data, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _result(out, (x,), backward)


def shared_point_dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply one affine map to every point's feature vector; x is [B, N, cin]."""
    if x.data.ndim != 3 or w.data.ndim != 2 or x.shape[2] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"shared_point_dense: x{x.shape} w{w.shape} b{b.shape}")
    bsz, n, cin = x.shape
    flat = x.data.reshape(bsz * n, cin)

    def backward(g):
        g2 = g.reshape(bsz * n, -1)
        _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        _accumulate(w, flat.T @ g2)
        _accumulate(b, g2.sum(axis=0))

    out = (flat @ w.data + b.data).reshape(bsz, n, w.shape[1])
    return _result(out, (x, w, b), backward)


def _windows3x3(a: np.ndarray) -> np.ndarray:
    """[B,H,W,C] zero-padded by one -> [B,H,W,3,3,C] view."""
    padded = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return sliding_window_view(padded, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; x is NHWC, k is [3,3,cin,cout]."""
    if x.data.ndim != 4 or k.shape[:2] != (3, 3) or k.shape[2] != x.shape[3] or b.shape != (k.shape[3],):
        raise ShapeError(f"conv2d: x{x.shape} k{k.shape} b{b.shape}")
    bsz, h, w, cin = x.shape
    cout = k.shape[3]
    cols = _windows3x3(x.data).reshape(bsz * h * w, 9 * cin)
    kmat = k.data.reshape(9 * cin, cout)
    out = (cols @ kmat + b.data).reshape(bsz, h, w, cout)

    def backward(g):
        g2 = g.reshape(bsz * h * w, cout)
        if k.requires_grad:
            _accumulate(k, (cols.T @ g2).reshape(k.shape))
        _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            flipped = k.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gcols = _windows3x3(g).reshape(bsz * h * w, 9 * cout)
            _accumulate(x, (gcols @ flipped).reshape(x.shape))

    return _result(out, (x, k, b), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over NHWC input.

    Odd spatial sizes are padded by replicating the last row/column. The
    gradient goes to the first maximum in row-major window order.
    """
    h, w = x.shape[1], x.shape[2]
    data = x.data
    ph, pw = h % 2, w % 2
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    quads = [data[:, di::2, dj::2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        gfull = np.zeros(data.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gfull[:, di::2, dj::2] = np.where(hit, g, 0.0)
        if pw:
            gfull[:, :, w - 1] += gfull[:, :, w]
        if ph:
            gfull[:, h - 1] += gfull[:, h]
        _accumulate(x, gfull[:, :h, :w])

    return _result(out, (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel max over the point axis of [B, N, C]; ties go to the lowest index."""
    if x.data.ndim != 3 or x.shape[1] < 1:
        raise ShapeError(f"global_max_pool: {x.shape}")
    arg = x.data.argmax(axis=1)
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, seed: int | np.random.Generator = 0) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_ce(logits: Tensor, targets, weights: Sequence[float] | None) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    n_cls = logits.shape[1]
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"targets {targets.shape} for logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise ValueError(f"class ids must lie in 0..{n_cls - 1}")

    bsz = logits.shape[0]
    rows = np.arange(bsz)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[rows, targets]
    if weights is None:
        sample_w = np.ones(bsz)
        loss = np.asarray(nll.sum() / bsz)
    else:
        wvec = np.asarray(weights, dtype=np.float64)
        if wvec.shape != (n_cls,):
            raise ShapeError(f"need {n_cls} class weights, got {wvec.shape}")
        sample_w = wvec[targets]
        loss = np.asarray((sample_w * nll).sum() / bsz)

    def backward(g):
        probs = np.exp(z - log_norm[:, None])
        probs[rows, targets] -= 1.0
        _accumulate(logits, probs * (sample_w[:, None] * (g / bsz)))

    return _result(loss, (logits,), backward)


def weighted_softmax_ce(logits: Tensor, targets, weights: Sequence[float]) -> Tensor:
    """Batch mean of ``weights[t] * -log softmax(logits)[t]``."""
    return _softmax_ce(logits, targets, weights)


def softmax_ce(logits: Tensor, targets) -> Tensor:
    """Unweighted batch-mean cross-entropy."""
    return _softmax_ce(logits, targets, None)


def orthogonality_penalty(a: Tensor) -> Tensor:
    """``||I - A A^T||_F^2`` for a square matrix; a leading batch axis is averaged."""
    if a.data.ndim not in (2, 3) or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"orthogonality_penalty needs square matrices, got {a.shape}")
    mats = a.data if a.data.ndim == 3 else a.data[None]
    eye = np.eye(mats.shape[-1])
    resid = eye - mats @ mats.transpose(0, 2, 1)
    count = mats.shape[0]
    value = np.asarray((resid**2).sum() / count)

    def backward(g):
        # d/dA ||I - A A^T||^2 = -4 (I - A A^T) A, using symmetry of the residual.
        ga = -4.0 * resid @ mats * (g / count)
        _accumulate(a, ga.reshape(a.shape))

    return _result(value, (a,), backward)


# ---------------------------------------------------------------------------
# verification harness


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar tensor. With ``max_coords`` only a random
    subset of coordinates is perturbed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not x.requires_grad:
        x.requires_grad = True
    x.zero_grad()
    f(x).backward()
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
