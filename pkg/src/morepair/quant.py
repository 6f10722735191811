"""Blockwise NF4 weight coding with double-quantized absmax constants.

A weight matrix is flattened row-major and cut into first-level blocks of
``block_size_1`` elements. Each block stores one absmax constant and a 4-bit
code per element into a 16-entry normal-quantile codebook. The absmax
constants are themselves quantized: groups of ``block_size_2`` consecutive
blocks share an affine 8-bit coding (one scale + one offset per group), which
keeps reconstructed absmaxes nonnegative.

``dequantize`` restores full-precision weights; ``quantized_linear_forward``
is the inference-time linear layer: the input times the restored base matrix
plus the input times the low-rank adapter pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, ValidationError

__all__ = [
    "Nf4Codebook",
    "QuantizedTensor",
    "LoraAdapter",
    "build_nf4_codebook",
    "quantize_nf4",
    "double_dequant",
    "quantized_linear_forward",
    "DEFAULT_BLOCK_SIZE_1",
    "DEFAULT_BLOCK_SIZE_2",
]

DEFAULT_BLOCK_SIZE_1 = 64
DEFAULT_BLOCK_SIZE_2 = 256


@dataclass(frozen=True)
class Nf4Codebook:
    """16 strictly increasing values in [-1, 1] with exact endpoints and a zero."""

    values: tuple[float, ...]

    def __post_init__(self):
        v = self.values
        if len(v) != 16:
            raise ValidationError(f"codebook must have 16 values, got {len(v)}")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValidationError("codebook values must be strictly ascending")
        if v[0] != -1.0 or v[15] != 1.0:
            raise ValidationError("codebook endpoints must be exactly -1 and 1")
        if v.count(0.0) != 1:
            raise ValidationError("codebook must contain exactly one zero")

    @property
    def zero_index(self) -> int:
        return self.values.index(0.0)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def build_nf4_codebook() -> Nf4Codebook:
    """16 normal-quantile levels: 8 positive, 7 negative, one exact zero.

    Quantiles are taken at evenly spaced probabilities on each sign side,
    from ``1 - (1/32 + 1/30)/2`` down toward 0.5, then the whole set is
    normalized so both extremes land exactly on +-1.
    """
    inv = NormalDist().inv_cdf
    offset = 1.0 - (1.0 / 32 + 1.0 / 30) / 2.0
    pos = [inv(offset + (0.5 - offset) * i / 8) for i in range(8)]
    neg = [-inv(offset + (0.5 - offset) * i / 7) for i in range(7)]
    raw = sorted(neg + [0.0] + pos)
    top = max(abs(x) for x in raw)
    values = tuple(x / top for x in raw)
    return Nf4Codebook(values=values)


_CODEBOOK: Optional[Nf4Codebook] = None


def _default_codebook() -> Nf4Codebook:
    global _CODEBOOK
    if _CODEBOOK is None:
        _CODEBOOK = build_nf4_codebook()
    return _CODEBOOK


@dataclass
class QuantizedTensor:
    """NF4-coded matrix with two-level quantization constants.

    ``codes`` packs one 4-bit index per element, two per byte (even element
    in the low nibble). ``c2_codes`` holds one 8-bit code per first-level
    block; ``c1`` holds one (scale, offset) pair per second-level group.
    """

    shape: tuple[int, ...]
    codes: np.ndarray          # uint8, ceil(n/2) packed nibbles
    block_size_1: int
    c2_codes: np.ndarray       # uint8, one per block
    block_size_2: int
    c1: np.ndarray             # float64 [n_groups x 2], columns (scale, offset)
    codebook: Nf4Codebook = field(default_factory=_default_codebook)
    _dense_cache: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.shape))

    @property
    def num_blocks(self) -> int:
        return -(-self.num_elements // self.block_size_1)

    @property
    def num_groups(self) -> int:
        return -(-self.num_blocks // self.block_size_2)

    def validate(self) -> None:
        n = self.num_elements
        if self.codes.dtype != np.uint8 or self.codes.size != (n + 1) // 2:
            raise ValidationError("packed code array has the wrong size or dtype")
        if self.c2_codes.size != self.num_blocks:
            raise ValidationError("one c2 code per block expected")
        if self.c1.shape != (self.num_groups, 2):
            raise ValidationError("one (scale, offset) pair per group expected")

    def unpacked_codes(self) -> np.ndarray:
        """Flat uint8 array of 4-bit indices, length num_elements."""
        lo = self.codes & 0x0F
        hi = self.codes >> 4
        out = np.empty(self.codes.size * 2, dtype=np.uint8)
        out[0::2] = lo
        out[1::2] = hi
        return out[: self.num_elements]

    def absmaxes(self) -> np.ndarray:
        """Reconstructed first-level absmax constants, one per block."""
        groups = np.arange(self.num_blocks) // self.block_size_2
        scale = self.c1[groups, 0]
        offs = self.c1[groups, 1]
        return offs + self.c2_codes.astype(np.float64) * scale

    def dense(self) -> np.ndarray:
        """Cached full-precision reconstruction (pure, immutable input)."""
        if self._dense_cache is None:
            self._dense_cache = double_dequant(self).data
        return self._dense_cache


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def quantize_nf4(w: Tensor | np.ndarray,
                 block_size_1: int = DEFAULT_BLOCK_SIZE_1,
                 block_size_2: int = DEFAULT_BLOCK_SIZE_2,
                 codebook: Optional[Nf4Codebook] = None) -> QuantizedTensor:
    """Code a weight tensor to NF4 with double-quantized absmax constants.

    Per block: normalize by the block absmax and pick the nearest codebook
    entry (ties toward the lower index). Blocks with absmax 0 code every
    element to the zero entry. Absmax constants are then affine-coded to
    8 bits per second-level group.
    """
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("cannot quantize non-finite values")
    if block_size_1 <= 0 or block_size_2 <= 0:
        raise ValidationError("block sizes must be positive")
    book = codebook or _default_codebook()
    values = book.as_array()
    midpoints = (values[:-1] + values[1:]) / 2.0

    flat = arr.reshape(-1)
    n = flat.size
    n_blocks = -(-n // block_size_1)
    padded = np.zeros(n_blocks * block_size_1)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size_1)

    absmax = np.abs(blocks).max(axis=1)
    safe = np.where(absmax > 0, absmax, 1.0)
    normalized = blocks / safe[:, None]
    # side="left" sends exact midpoints to the lower code
    codes = np.searchsorted(midpoints, normalized, side="left").astype(np.uint8)
    codes[absmax == 0, :] = book.zero_index

    n_groups = -(-n_blocks // block_size_2)
    c2_codes = np.zeros(n_blocks, dtype=np.uint8)
    c1 = np.zeros((n_groups, 2))
    for g in range(n_groups):
        sl = slice(g * block_size_2, min((g + 1) * block_size_2, n_blocks))
        lo = float(absmax[sl].min())
        hi = float(absmax[sl].max())
        scale = (hi - lo) / 255.0
        if scale > 0:
            q = np.rint((absmax[sl] - lo) / scale)
            c2_codes[sl] = np.clip(q, 0, 255).astype(np.uint8)
        c1[g] = (scale, lo)

    qt = QuantizedTensor(
        shape=tuple(arr.shape),
        codes=_pack_nibbles(codes.reshape(-1)[:n].copy()),
        block_size_1=block_size_1,
        c2_codes=c2_codes,
        block_size_2=block_size_2,
        c1=c1,
        codebook=book,
    )
    qt.validate()
    return qt


def double_dequant(q: QuantizedTensor) -> Tensor:
    """Restore the full-precision weight matrix from codes and both constant levels."""
    q.validate()
    idx = q.unpacked_codes()
    if idx.size and idx.max() >= 16:
        raise ValidationError("corrupt code index >= 16")
    values = q.codebook.as_array()
    per_block_scale = np.repeat(q.absmaxes(), q.block_size_1)[: q.num_elements]
    flat = values[idx] * per_block_scale
    return Tensor(flat.reshape(q.shape))


@dataclass
class LoraAdapter:
    """Trainable low-rank factor pair added to a frozen base matrix.

    ``delta = down @ up * (alpha / rank)``; ``up`` starts at zero so a fresh
    adapter leaves the base model untouched.
    """

    down: Tensor               # [d_in x rank]
    up: Tensor                 # [rank x d_out]
    rank: int
    alpha: float

    def __post_init__(self):
        d_in, r1 = self.down.shape
        r2, d_out = self.up.shape
        if r1 != self.rank or r2 != self.rank:
            raise ValidationError("adapter factor shapes disagree with rank")
        if self.rank < 1 or self.rank > min(d_in, d_out):
            raise ValidationError(f"rank {self.rank} invalid for {d_in}x{d_out}")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def initialize(cls, d_in: int, d_out: int, rank: int, alpha: float,
                   rng: np.random.Generator) -> "LoraAdapter":
        bound = 1.0 / np.sqrt(d_in)
        down = Tensor(rng.uniform(-bound, bound, size=(d_in, rank)), requires_grad=True)
        up = Tensor(np.zeros((rank, d_out)), requires_grad=True)
        return cls(down=down, up=up, rank=rank, alpha=alpha)

    def delta(self) -> np.ndarray:
        return self.down.data @ self.up.data * self.scaling

    def num_parameters(self) -> int:
        return self.down.size + self.up.size


def quantized_linear_forward(x: Tensor, q: QuantizedTensor,
                             adapter: Optional[LoraAdapter]) -> Tensor:
    """x @ dequant(base) + x @ down @ up * scaling.

    The base product uses the restored matrix as a constant: gradients reach
    only the adapter factors (and the input). Accepts [L x d_in] or
    [B x L x d_in] input.
    """
    if len(q.shape) != 2:
        raise DimensionError(f"quantized base must be a matrix, got {q.shape}")
    d_in, _ = q.shape
    if x.data.ndim == 3:
        rows = [quantized_linear_forward(ag.select_batch(x, b), q, adapter)
                for b in range(x.shape[0])]
        return ag.stack_rows(rows)
    if x.data.ndim != 2 or x.shape[1] != d_in:
        raise DimensionError(f"input {x.shape} does not match base {q.shape}")
    base = Tensor(q.dense())
    out = ag.matmul(x, base)
    if adapter is not None:
        low = ag.matmul(ag.matmul(x, adapter.down), adapter.up)
        out = ag.add(out, ag.mul_scalar(low, adapter.scaling))
    return out
