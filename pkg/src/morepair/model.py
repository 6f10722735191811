"""Toy decoder-only transformer with low-rank adapters on frozen base weights.

Pre-norm residual blocks, learned absolute positional embeddings, GELU
feed-forward, causal multi-head attention. Base projection matrices can be
dense tensors or NF4-quantized; adapters attach to the projections named in
the config. Training-time forwards add uniform embedding noise scaled by
``alpha / sqrt(L * d)``; inference forwards never touch an rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ValidationError
from .quant import LoraAdapter, QuantizedTensor, quantize_nf4, quantized_linear_forward

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "ModelWeights",
    "TrainForward",
    "InferForward",
    "init_weights",
    "quantize_base",
    "apply_neftune",
    "forward_sequence",
    "forward_logits",
    "trainable_fraction",
    "parameter_counts",
    "trainable_parameters",
]

ADAPTER_TARGET_NAMES = ("q", "k", "v", "o", "ff1", "ff2")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 512
    adapter_targets: tuple[str, ...] = ("q", "v", "ff1", "ff2")
    adapter_rank: int = 8
    adapter_alpha: Optional[float] = None  # None -> 2 * rank

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValidationError("max_seq_len must be at least 2")
        if self.adapter_rank > self.d_model:
            raise ValidationError("adapter rank exceeds d_model")
        for t in self.adapter_targets:
            if t not in ADAPTER_TARGET_NAMES:
                raise ValidationError(f"unknown adapter target {t!r}")
        if len(set(self.adapter_targets)) != len(self.adapter_targets):
            raise ValidationError("duplicate adapter target")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def alpha(self) -> float:
        return 2.0 * self.adapter_rank if self.adapter_alpha is None else self.adapter_alpha

    def target_dims(self, target: str) -> tuple[int, int]:
        if target == "ff1":
            return self.d_model, self.d_ff
        if target == "ff2":
            return self.d_ff, self.d_model
        return self.d_model, self.d_model


BaseWeight = Union[Tensor, QuantizedTensor]


@dataclass
class LayerWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: BaseWeight
    wk: BaseWeight
    wv: BaseWeight
    wo: BaseWeight
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff1: BaseWeight
    ff2: BaseWeight

    def projection(self, target: str) -> BaseWeight:
        return {"q": self.wq, "k": self.wk, "v": self.wv, "o": self.wo,
                "ff1": self.ff1, "ff2": self.ff2}[target]


@dataclass
class ModelWeights:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerWeights]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    head: Tensor
    adapters: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)
    train_embeddings: bool = False

    def adapter_for(self, layer: int, target: str) -> Optional[LoraAdapter]:
        return self.adapters.get((layer, target))

    def set_embeddings_trainable(self, trainable: bool) -> None:
        self.train_embeddings = trainable
        for t in (self.tok_emb, self.pos_emb, self.head):
            t.requires_grad = trainable
            t._tracked = trainable


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic base + adapter initialization from (config, seed).

    The frozen base is a pure function of its arguments, so checkpoints only
    need to carry trainable parameters.
    """
    rng = np.random.default_rng(seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def dense(rows: int, cols: int, std: float) -> Tensor:
        return Tensor(rng.normal(0.0, std, size=(rows, cols)))

    tok = dense(v, d, 0.02)
    pos = dense(config.max_seq_len, d, 0.02)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_gain=Tensor(np.ones(d)), ln1_bias=Tensor(np.zeros(d)),
            wq=dense(d, d, 1.0 / math.sqrt(d)),
            wk=dense(d, d, 1.0 / math.sqrt(d)),
            wv=dense(d, d, 1.0 / math.sqrt(d)),
            wo=dense(d, d, 1.0 / math.sqrt(d)),
            ln2_gain=Tensor(np.ones(d)), ln2_bias=Tensor(np.zeros(d)),
            ff1=dense(d, dff, 1.0 / math.sqrt(d)),
            ff2=dense(dff, d, 1.0 / math.sqrt(dff)),
        ))
    ln_f_gain = Tensor(np.ones(d))
    ln_f_bias = Tensor(np.zeros(d))
    head = dense(d, v, 1.0 / math.sqrt(d))

    adapters: dict[tuple[int, str], LoraAdapter] = {}
    for i in range(config.n_layers):
        for target in config.adapter_targets:
            d_in, d_out = config.target_dims(target)
            adapters[(i, target)] = LoraAdapter.initialize(
                d_in, d_out, config.adapter_rank, config.alpha, rng)

    return ModelWeights(
        config=config, tok_emb=tok, pos_emb=pos, layers=layers,
        ln_f_gain=ln_f_gain, ln_f_bias=ln_f_bias, head=head, adapters=adapters)


def quantize_base(weights: ModelWeights, block_size_1: int = 64,
                  block_size_2: int = 256) -> ModelWeights:
    """Replace every dense projection matrix with its NF4-coded form in place."""
    for layer in weights.layers:
        for name in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
            w = getattr(layer, name)
            if isinstance(w, Tensor):
                setattr(layer, name, quantize_nf4(w, block_size_1, block_size_2))
    return weights


@dataclass(frozen=True)
class TrainForward:
    neftune_alpha: float
    rng: np.random.Generator

    def __post_init__(self):
        if self.neftune_alpha < 0:
            raise ValidationError("neftune alpha must be nonnegative")


@dataclass(frozen=True)
class InferForward:
    pass


ForwardMode = Union[TrainForward, InferForward]


def apply_neftune(emb: Tensor, alpha: float, rng: np.random.Generator) -> Tensor:
    """emb + (alpha / sqrt(L*d)) * eps with eps ~ Uniform(-1, 1).

    L and d are the last two axes of the actual input. alpha = 0 returns the
    input untouched without consuming the rng.
    """
    if alpha < 0:
        raise ValidationError("neftune alpha must be nonnegative")
    if alpha == 0.0:
        return emb
    if emb.data.ndim < 2:
        raise ValidationError(f"embeddings must be at least 2-D, got {emb.shape}")
    seq_len, d = emb.shape[-2], emb.shape[-1]
    scale = alpha / math.sqrt(seq_len * d)
    noise = rng.uniform(-1.0, 1.0, size=emb.shape) * scale
    return ag.add(emb, Tensor(noise))


def _project(x: Tensor, w: BaseWeight, adapter: Optional[LoraAdapter]) -> Tensor:
    if isinstance(w, QuantizedTensor):
        return quantized_linear_forward(x, w, adapter)
    out = ag.matmul(x, w)
    if adapter is not None:
        low = ag.matmul(ag.matmul(x, adapter.down), adapter.up)
        out = ag.add(out, ag.mul_scalar(low, adapter.scaling))
    return out


def forward_sequence(tokens, weights: ModelWeights,
                     mode: ForwardMode = InferForward()) -> Tensor:
    """Causal logits [T x V] for one token sequence."""
    cfg = weights.config
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise ValidationError("forward_sequence expects one flat sequence")
    t = ids.size
    if t == 0:
        raise ValidationError("empty sequence")
    if t > cfg.max_seq_len:
        raise ValidationError(f"sequence length {t} exceeds max {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValidationError("token id out of range")

    x = ag.add(ag.embedding_lookup(weights.tok_emb, ids),
               ag.embedding_lookup(weights.pos_emb, np.arange(t)))
    if isinstance(mode, TrainForward):
        x = apply_neftune(x, mode.neftune_alpha, mode.rng)

    for i, layer in enumerate(weights.layers):
        h = ag.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = _project(h, layer.wq, weights.adapter_for(i, "q"))
        k = _project(h, layer.wk, weights.adapter_for(i, "k"))
        v = _project(h, layer.wv, weights.adapter_for(i, "v"))
        merged = ag.causal_attention(q, k, v, cfg.n_heads)
        x = ag.add(x, _project(merged, layer.wo, weights.adapter_for(i, "o")))

        h2 = ag.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        f = ag.gelu(_project(h2, layer.ff1, weights.adapter_for(i, "ff1")))
        f = _project(f, layer.ff2, weights.adapter_for(i, "ff2"))
        x = ag.add(x, f)

    x = ag.layer_norm(x, weights.ln_f_gain, weights.ln_f_bias)
    return ag.matmul(x, weights.head)


def forward_logits(tokens, weights: ModelWeights,
                   mode: ForwardMode = InferForward()) -> Tensor:
    """Causal logits [B x T x V] for a batch of equal-length sequences."""
    batch = np.asarray(tokens, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2:
        raise ValidationError(f"expected [B x T] token ids, got shape {batch.shape}")
    rows = [forward_sequence(batch[b], weights, mode) for b in range(batch.shape[0])]
    return ag.stack_rows(rows)


def parameter_counts(config: ModelConfig) -> tuple[int, int]:
    """(adapter parameter count, base parameter count), exact integers."""
    d, dff, v, L = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    r = config.adapter_rank
    adapter = 0
    for target in config.adapter_targets:
        d_in, d_out = config.target_dims(target)
        adapter += (d_in * r + r * d_out) * config.n_layers
    per_layer = 4 * d + 4 * d * d + 2 * d * dff
    base = v * d + L * d + config.n_layers * per_layer + 2 * d + d * v
    return adapter, base


def _element_count(w: BaseWeight) -> int:
    return w.num_elements if isinstance(w, QuantizedTensor) else w.size


def trainable_fraction(weights: ModelWeights) -> float:
    """Adapter parameters over all parameters, from exact integer counts.

    Counts the live weight structure, so it stays honest for hand-built or
    degenerate models; `parameter_counts` is the closed-form companion.
    """
    adapter = sum(a.num_parameters() for a in weights.adapters.values())
    base = weights.tok_emb.size + weights.pos_emb.size + weights.head.size
    base += weights.ln_f_gain.size + weights.ln_f_bias.size
    for layer in weights.layers:
        base += layer.ln1_gain.size + layer.ln1_bias.size
        base += layer.ln2_gain.size + layer.ln2_bias.size
        for name in ("wq", "wk", "wv", "wo", "ff1", "ff2"):
            base += _element_count(getattr(layer, name))
    if adapter + base == 0:
        return 0.0
    return adapter / (adapter + base)


def trainable_parameters(weights: ModelWeights) -> list[tuple[str, Tensor]]:
    """Named trainable tensors in a stable order: adapters, then embeddings/head."""
    out: list[tuple[str, Tensor]] = []
    for i in range(weights.config.n_layers):
        for target in weights.config.adapter_targets:
            a = weights.adapters[(i, target)]
            out.append((f"layer{i}.{target}.down", a.down))
            out.append((f"layer{i}.{target}.up", a.up))
    if weights.train_embeddings:
        out.append(("tok_emb", weights.tok_emb))
        out.append(("pos_emb", weights.pos_emb))
        out.append(("head", weights.head))
    return out
