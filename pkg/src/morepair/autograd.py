"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The design favors auditability over generality: explicit shapes, row-major
storage, no implicit broadcasting except scalar-tensor ops. Operations record
a backward rule onto the active :class:`Tape`; ``backward(loss)`` replays the
rules in reverse recording order exactly once.

Everything is float64. Quantization effects are modeled explicitly in the
quant module, never by low-precision arithmetic here.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, EmptyLossError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "mul_scalar",
    "matmul",
    "transpose",
    "narrow",
    "concat_cols",
    "select_batch",
    "stack_rows",
    "embedding_lookup",
    "layer_norm",
    "gelu",
    "causal_attention",
    "softmax",
    "cross_entropy",
    "backward",
]


class Tensor:
    """A dense n-dimensional array of float64 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # True for requires_grad leaves and for any op output derived from one
        # while a tape is active.
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # Copy: g may alias another tensor's gradient buffer.
            self.grad = np.array(g)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward pass; only one tape may be
    active at a time and a tape plus its tensors must not be shared across
    concurrent executions.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise ValidationError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None

    def _record(self, out: Tensor, rule: Callable[[np.ndarray], None],
                leaves: Sequence[Tensor]) -> None:
        out._tracked = True
        self._records.append((out, rule))
        for leaf in leaves:
            if leaf.requires_grad:
                self._leaves.append(leaf)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Unreachable requires_grad tensors that appeared on the tape end up
        with an all-zero grad.
        """
        if loss.data.size != 1:
            raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss._tracked:
            # Constant loss: nothing flows, but leaves still get zero grads.
            for leaf in self._leaves:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
            return
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, rule in reversed(self._records):
            if out.grad is None:
                continue
            rule(out.grad)
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _maybe_record(out: Tensor, rule: Callable[[np.ndarray], None],
                  inputs: Sequence[Tensor]) -> Tensor:
    tape = Tape._active
    if tape is not None and any(t._tracked for t in inputs):
        tape._record(out, rule, inputs)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g)
        if b._tracked:
            b.accumulate_grad(g)

    return _maybe_record(out, rule, (a, b))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a Python scalar."""
    c = float(c)
    out = Tensor(a.data * c)

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g * c)

    return _maybe_record(out, rule, (a,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g @ b.data.T)
        if b._tracked:
            b.accumulate_grad(a.data.T @ g)

    return _maybe_record(out, rule, (a, b))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            a.accumulate_grad(g.T)

    return _maybe_record(out, rule, (a,))


def narrow(a: Tensor, start: int, size: int) -> Tensor:
    """Slice `size` columns of a 2-D tensor starting at `start`."""
    if a.data.ndim != 2:
        raise DimensionError(f"narrow needs a 2-D tensor, got {a.shape}")
    if start < 0 or start + size > a.shape[1]:
        raise DimensionError(f"narrow [{start}:{start + size}] out of range for {a.shape}")
    out = Tensor(a.data[:, start:start + size].copy())

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            full = np.zeros_like(a.data)
            full[:, start:start + size] = g
            a.accumulate_grad(full)

    return _maybe_record(out, rule, (a,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns (inverse of narrow)."""
    if not parts:
        raise ValidationError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise DimensionError("concat_cols parts must be 2-D with equal row counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def rule(g: np.ndarray) -> None:
        off = 0
        for p, w in zip(parts, widths):
            if p._tracked:
                p.accumulate_grad(g[:, off:off + w])
            off += w

    return _maybe_record(out, rule, tuple(parts))


def select_batch(a: Tensor, index: int) -> Tensor:
    """Take slice `index` along the leading axis of a >=2-D tensor."""
    if a.data.ndim < 2:
        raise DimensionError(f"select_batch needs >=2-D, got {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise DimensionError(f"index {index} out of range for leading dim {a.shape[0]}")
    out = Tensor(a.data[index].copy())

    def rule(g: np.ndarray) -> None:
        if a._tracked:
            full = np.zeros_like(a.data)
            full[index] = g
            a.accumulate_grad(full)

    return _maybe_record(out, rule, (a,))


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not parts:
        raise ValidationError("stack_rows needs at least one tensor")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError("stack_rows parts must share a shape")
    out = Tensor(np.stack([p.data for p in parts], axis=0))

    def rule(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            if p._tracked:
                p.accumulate_grad(g[i])

    return _maybe_record(out, rule, tuple(parts))


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of `table` [V x d] at `ids`; backward scatter-adds."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValidationError(f"id out of range for vocabulary of {table.shape[0]}")
    out = Tensor(table.data[idx])

    def rule(g: np.ndarray) -> None:
        if table._tracked:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate_grad(full)

    return _maybe_record(out, rule, (table,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization of a [T x d] tensor with learned gain/bias."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm needs a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm gain/bias must match the feature dimension")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def rule(g: np.ndarray) -> None:
        if gain._tracked:
            gain.accumulate_grad((g * xhat).sum(axis=0))
        if bias._tracked:
            bias.accumulate_grad(g.sum(axis=0))
        if x._tracked:
            gx = g * gain.data
            # d/dx of (x - mu) * inv with mu, inv functions of the row
            term = gx - gx.mean(axis=1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=1, keepdims=True)
            x.accumulate_grad(term * inv)

    return _maybe_record(out, rule, (x, gain, bias))


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t_len: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t_len)
    if mask is None:
        mask = np.triu(np.full((t_len, t_len), -1e30), k=1)
        _MASK_CACHE[t_len] = mask
    return mask


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU with its exact analytic derivative."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def rule(g: np.ndarray) -> None:
        if x._tracked:
            du = _GELU_C * (1.0 + 0.134145 * x2)
            local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x.accumulate_grad(g * local)

    return _maybe_record(out, rule, (x,))


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention over [T x d] projections.

    Splits columns into n_heads, scales scores by 1/sqrt(head_dim), masks
    positions after the query, softmaxes rows, and re-merges heads. Fused
    into one tape record for speed; the backward is the standard chain
    through softmax(QK^T)V per head.
    """
    t_len, d = q.shape
    if k.shape != (t_len, d) or v.shape != (t_len, d):
        raise DimensionError("attention projections must share [T x d]")
    if d % n_heads:
        raise DimensionError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)

    def split(arr: np.ndarray) -> np.ndarray:
        return arr.reshape(t_len, n_heads, hd).transpose(1, 0, 2)  # [H x T x hd]

    q3, k3, v3 = split(q.data), split(k.data), split(v.data)
    scores = q3 @ k3.transpose(0, 2, 1) * scale
    scores += _causal_mask(t_len)
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=2, keepdims=True)
    out3 = attn @ v3
    out = Tensor(out3.transpose(1, 0, 2).reshape(t_len, d))

    def rule(g: np.ndarray) -> None:
        g3 = split(g)
        if v._tracked:
            dv3 = attn.transpose(0, 2, 1) @ g3
            v.accumulate_grad(dv3.transpose(1, 0, 2).reshape(t_len, d))
        if q._tracked or k._tracked:
            dattn = g3 @ v3.transpose(0, 2, 1)
            dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
            dscores *= scale
            if q._tracked:
                dq3 = dscores @ k3
                q.accumulate_grad(dq3.transpose(1, 0, 2).reshape(t_len, d))
            if k._tracked:
                dk3 = dscores.transpose(0, 2, 1) @ q3
                k.accumulate_grad(dk3.transpose(1, 0, 2).reshape(t_len, d))

    return _maybe_record(out, rule, (q, k, v))


def _stable_softmax(arr: np.ndarray, axis: int) -> np.ndarray:
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    ndim = logits.data.ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} invalid for shape {logits.shape}")
    y = _stable_softmax(logits.data, axis)
    out = Tensor(y)

    def rule(g: np.ndarray) -> None:
        if logits._tracked:
            dot = (g * y).sum(axis=axis, keepdims=True)
            logits.accumulate_grad(y * (g - dot))

    return _maybe_record(out, rule, (logits,))


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool],
                  reduction: str = "mean") -> Tensor:
    """Cross-entropy of target token ids under softmax(logits), masked.

    `logits` is [T x V]; positions where `mask` is False contribute nothing.
    Returns a scalar tensor: the mean (default) or sum of -log p(target_t)
    over unmasked positions.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy needs [T x V] logits, got {logits.shape}")
    t_len, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    if tgt.shape != (t_len,) or msk.shape != (t_len,):
        raise DimensionError(
            f"targets/mask must have length {t_len}, got {tgt.shape} and {msk.shape}")
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    active = np.flatnonzero(msk)
    if active.size == 0:
        raise EmptyLossError("all positions masked: empty loss")
    bad = tgt[active][(tgt[active] < 0) | (tgt[active] >= vocab)]
    if bad.size:
        raise ValidationError(f"target id {int(bad[0])} outside vocabulary of {vocab}")

    probs = _stable_softmax(logits.data, axis=1)
    picked = probs[active, tgt[active]]
    nll = -np.log(picked)
    denom = float(active.size) if reduction == "mean" else 1.0
    out = Tensor(np.asarray(nll.sum() / denom))

    def rule(g: np.ndarray) -> None:
        if logits._tracked:
            scale = float(g.reshape(())) / denom
            grad = probs.copy()
            grad[active, tgt[active]] -= 1.0
            grad[~msk, :] = 0.0
            logits.accumulate_grad(grad * scale)

    return _maybe_record(out, rule, (logits,))
