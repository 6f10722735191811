"""Multi-objective fine-tuning: code-only and guidance+code losses combined.

Three modes share one loop. ``standard`` trains on the repaired code alone;
``morepair`` adds a weighted second loss whose target prepends the guidance
text; ``cot`` folds the guidance into the code target and trains on the
concatenation as a single objective. Only adapter factors (plus embeddings
and head when enabled) receive optimizer updates; base weights stay frozen.

Checkpoints carry the trainable state and enough metadata to rebuild the
frozen base deterministically, so resume is bit-identical to an
uninterrupted run.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .dataprep import RenderedPair, RepairExample, render_training_pair
from .errors import CorruptCheckpointError, ValidationError
from .model import (ModelConfig, ModelWeights, TrainForward, forward_sequence,
                    init_weights, quantize_base, trainable_parameters)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "AdamState",
    "Trainer",
    "compute_loss1",
    "compute_loss2",
    "combined_loss",
    "train_step",
    "cot_transform",
    "save_checkpoint",
    "load_checkpoint",
    "load_weights",
    "config_hash",
]

MODES = ("standard", "morepair", "cot")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "morepair"
    lambda_weight: float = 1.0
    neftune_alpha: float = 5.0
    learning_rate: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    loss_reduction: str = "mean"
    objective_schedule: str = "paired"
    strict: bool = True
    train_embeddings: bool = False
    warmup_steps: int = 0
    include_description: bool = True
    guidance_position: str = "before"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lambda_weight < 0:
            raise ValidationError("lambda must be nonnegative")
        if self.neftune_alpha < 0:
            raise ValidationError("neftune alpha must be nonnegative")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValidationError("loss_reduction must be mean|sum")
        if self.objective_schedule not in ("paired", "alternating"):
            raise ValidationError("objective_schedule must be paired|alternating")
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("batch_size must be >= 1 and steps >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    loss1: float
    loss2: Optional[float]
    combined: float


def _masked_lm_loss(pair: RenderedPair, weights: ModelWeights, cfg: TrainConfig,
                    rng: np.random.Generator) -> Tensor:
    if not pair.target_tokens:
        raise ValidationError("rendered pair has an empty target")
    seq = pair.full_sequence
    mode = TrainForward(neftune_alpha=cfg.neftune_alpha, rng=rng)
    logits = forward_sequence(seq[:-1], weights, mode)
    return ag.cross_entropy(logits, seq[1:], pair.loss_mask,
                            reduction=cfg.loss_reduction)


def compute_loss1(pair: RenderedPair, weights: ModelWeights, cfg: TrainConfig,
                  rng: np.random.Generator) -> Tensor:
    """Masked causal cross-entropy over the code-only target."""
    if pair.objective != 1:
        raise ValidationError("compute_loss1 expects an objective-1 pair")
    return _masked_lm_loss(pair, weights, cfg, rng)


def compute_loss2(pair: RenderedPair, weights: ModelWeights, cfg: TrainConfig,
                  rng: np.random.Generator) -> Tensor:
    """Same machinery over the guidance-extended target."""
    if pair.objective != 2:
        raise ValidationError("compute_loss2 expects an objective-2 pair")
    return _masked_lm_loss(pair, weights, cfg, rng)


def combined_loss(l1: Tensor, l2: Optional[Tensor],
                  cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
    """The differentiable composite plus its scalar breakdown.

    morepair: combined = loss1 + lambda * loss2 (loss2 may be omitted only
    when lambda is zero, where its forward is short-circuited entirely).
    standard/cot carry a single loss.
    """
    if cfg.mode == "morepair":
        if l2 is None:
            if cfg.lambda_weight != 0.0:
                raise ValidationError("morepair mode requires a second loss")
            total = l1
            breakdown = LossBreakdown(l1.item(), None, l1.item())
        else:
            total = ag.add(l1, ag.mul_scalar(l2, cfg.lambda_weight))
            breakdown = LossBreakdown(l1.item(), l2.item(), total.item())
    else:
        if l2 is not None:
            raise ValidationError(f"{cfg.mode} mode takes a single loss")
        total = l1
        breakdown = LossBreakdown(l1.item(), None, l1.item())
    return total, breakdown


def cot_transform(ex: RepairExample) -> RepairExample:
    """Fold guidance into the code target: the single-objective baseline."""
    if ex.guidance is None:
        raise ValidationError(f"example {ex.id}: cot mode requires guidance")
    return replace(ex, fixed_code=ex.guidance + "\n" + ex.fixed_code, guidance=None)


@dataclass
class AdamState:
    """Decoupled-weight-decay adaptive-moment state per trainable parameter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: list[tuple[str, Tensor]], cfg: TrainConfig) -> None:
        self.step += 1
        lr = cfg.learning_rate
        if cfg.warmup_steps > 0:
            lr *= min(1.0, self.step / cfg.warmup_steps)
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        for name, p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.step)
            v_hat = v / (1 - b2 ** self.step)
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                                    + cfg.weight_decay * p.data)


def _render_for_mode(ex: RepairExample, cfg: TrainConfig) -> tuple[RenderedPair,
                                                                   Optional[RenderedPair]]:
    kwargs = dict(include_description=cfg.include_description,
                  guidance_position=cfg.guidance_position)
    if cfg.mode == "standard":
        return render_training_pair(ex, 1, **kwargs), None
    if cfg.mode == "cot":
        return render_training_pair(cot_transform(ex), 1, **kwargs), None
    pair1 = render_training_pair(ex, 1, **kwargs)
    pair2 = render_training_pair(ex, 2, **kwargs)
    return pair1, pair2


def _mean(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = ag.add(total, item)
    if len(losses) > 1:
        total = ag.mul_scalar(total, 1.0 / len(losses))
    return total


def train_step(batch: list[RepairExample], weights: ModelWeights,
               opt: AdamState, cfg: TrainConfig,
               rng: np.random.Generator) -> LossBreakdown:
    """Render the batch per mode, backpropagate, update trainable parameters."""
    usable: list[RepairExample] = []
    for ex in batch:
        if cfg.mode in ("morepair", "cot") and ex.guidance is None:
            if cfg.strict:
                raise ValidationError(
                    f"example {ex.id} lacks guidance required by {cfg.mode} mode")
            log.warning("skipping example %s: no guidance", ex.id)
            continue
        usable.append(ex)
    if not usable:
        raise ValidationError("no usable examples in batch")

    second_objective = cfg.mode == "morepair" and cfg.lambda_weight != 0.0
    if cfg.objective_schedule == "alternating" and second_objective:
        # Alternate between the two objectives across steps instead of
        # summing them within one step.
        use_second = opt.step % 2 == 1
    else:
        use_second = second_objective

    params = trainable_parameters(weights)
    with Tape() as tape:
        l1_terms: list[Tensor] = []
        l2_terms: list[Tensor] = []
        for ex in usable:
            pair1, pair2 = _render_for_mode(ex, cfg)
            if cfg.objective_schedule == "alternating" and second_objective:
                if use_second:
                    l2_terms.append(compute_loss2(pair2, weights, cfg, rng))
                else:
                    l1_terms.append(compute_loss1(pair1, weights, cfg, rng))
            else:
                l1_terms.append(compute_loss1(pair1, weights, cfg, rng))
                if use_second:
                    l2_terms.append(compute_loss2(pair2, weights, cfg, rng))

        if cfg.objective_schedule == "alternating" and second_objective and use_second:
            l2_mean = _mean(l2_terms)
            total = ag.mul_scalar(l2_mean, cfg.lambda_weight)
            breakdown = LossBreakdown(0.0, l2_mean.item(), total.item())
        else:
            l1_mean = _mean(l1_terms)
            l2_mean = _mean(l2_terms) if l2_terms else None
            total, breakdown = combined_loss(l1_mean, l2_mean, cfg)
        tape.backward(total)

    opt.update(params, cfg)
    for _, p in params:
        p.zero_grad()
    return breakdown


class Trainer:
    """Owns the weights, optimizer state, and the deterministic rng stream."""

    def __init__(self, examples: list[RepairExample], weights: ModelWeights,
                 cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
                 opt: Optional[AdamState] = None):
        if not examples:
            raise ValidationError("training needs at least one example")
        self.examples = examples
        self.weights = weights
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng([cfg.seed, 1])
        self.opt = opt if opt is not None else AdamState()
        weights.set_embeddings_trainable(cfg.train_embeddings)

    @property
    def step(self) -> int:
        return self.opt.step

    def next_batch(self) -> list[RepairExample]:
        idx = self.rng.integers(0, len(self.examples), size=self.cfg.batch_size)
        return [self.examples[int(i)] for i in idx]

    def run_step(self) -> LossBreakdown:
        return train_step(self.next_batch(), self.weights, self.opt,
                          self.cfg, self.rng)

    def run(self, steps: int,
            on_step: Optional[Callable[[int, LossBreakdown], None]] = None
            ) -> list[LossBreakdown]:
        history = []
        for _ in range(steps):
            breakdown = self.run_step()
            history.append(breakdown)
            if on_step is not None:
                on_step(self.opt.step, breakdown)
        return history


MAGIC = b"MOR1"
FORMAT_VERSION = 1


def config_hash(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
    return digest.hexdigest()


def _model_config_json(cfg: ModelConfig) -> str:
    payload = {
        "vocab_size": cfg.vocab_size, "d_model": cfg.d_model,
        "n_layers": cfg.n_layers, "n_heads": cfg.n_heads, "d_ff": cfg.d_ff,
        "max_seq_len": cfg.max_seq_len,
        "adapter_targets": list(cfg.adapter_targets),
        "adapter_rank": cfg.adapter_rank, "adapter_alpha": cfg.adapter_alpha,
    }
    return json.dumps(payload, sort_keys=True)


def _parse_model_config(text: str) -> ModelConfig:
    raw = json.loads(text)
    raw["adapter_targets"] = tuple(raw["adapter_targets"])
    return ModelConfig(**raw)


def save_checkpoint(path, trainer: Trainer, model_seed: int,
                    quantized: Optional[tuple[int, int]] = None,
                    extra_hash: str = "") -> None:
    """Write magic, version, a text header, then float64 arrays in header order.

    The frozen base is not stored: it is re-derived from (model config,
    model_seed, quantization choice), which `init_weights` guarantees is
    deterministic.
    """
    weights = trainer.weights
    header_lines = [
        f"model_config: {_model_config_json(weights.config)}",
        f"model_seed: {model_seed}",
        f"step: {trainer.opt.step}",
        f"train_embeddings: {json.dumps(trainer.cfg.train_embeddings)}",
        f"quantized: {json.dumps(list(quantized) if quantized else None)}",
        f"config_hash: {extra_hash}",
        f"rng_state: {json.dumps(_rng_state(trainer.rng))}",
    ]
    arrays: list[np.ndarray] = []

    def declare(name: str, arr: np.ndarray) -> None:
        dims = "x".join(str(d) for d in arr.shape)
        header_lines.append(f"array: {name} {dims}")
        arrays.append(np.ascontiguousarray(arr, dtype=np.float64))

    for name, p in trainable_parameters(weights):
        declare(f"param.{name}", p.data)
    for name, _ in trainable_parameters(weights):
        if name in trainer.opt.m:
            declare(f"adam_m.{name}", trainer.opt.m[name])
            declare(f"adam_v.{name}", trainer.opt.v[name])

    header = "\n".join(header_lines).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(np.uint32(FORMAT_VERSION).tobytes())
    buf.write(np.uint32(len(header)).tobytes())
    buf.write(header)
    for arr in arrays:
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _parse_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    header_len = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    header = blob[12:12 + header_len].decode("utf-8")
    payload = blob[12 + header_len:]

    fields: dict[str, str] = {}
    declared: list[tuple[str, tuple[int, ...]]] = []
    for line in header.splitlines():
        key, _, value = line.partition(": ")
        if key == "array":
            name, dims = value.rsplit(" ", 1)
            shape = tuple(int(d) for d in dims.split("x")) if dims else ()
            declared.append((name, shape))
        else:
            fields[key] = value

    expected_bytes = sum(int(np.prod(s)) * 8 for _, s in declared)
    if len(payload) != expected_bytes:
        raise CorruptCheckpointError(
            f"payload is {len(payload)} bytes, header declares {expected_bytes}")

    offset = 0
    loaded: dict[str, np.ndarray] = {}
    for name, shape in declared:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        loaded[name] = arr.reshape(shape).copy()
        offset += n * 8
    return fields, loaded


def load_weights(path, expected_model_config: Optional[ModelConfig] = None,
                 expected_hash: Optional[str] = None
                 ) -> tuple[ModelWeights, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint: derived base + stored trainables."""
    fields, loaded = _parse_checkpoint(path)
    model_config = _parse_model_config(fields["model_config"])
    if expected_model_config is not None and model_config != expected_model_config:
        raise ValidationError("checkpoint model config differs from the requested one")
    stored_hash = fields.get("config_hash", "")
    if expected_hash is not None and stored_hash and stored_hash != expected_hash:
        raise CorruptCheckpointError("config hash mismatch")

    weights = init_weights(model_config, int(fields["model_seed"]))
    quantized = json.loads(fields["quantized"])
    if quantized:
        quantize_base(weights, *quantized)
    weights.set_embeddings_trainable(json.loads(fields["train_embeddings"]))

    params = dict(trainable_parameters(weights))
    for name, arr in loaded.items():
        kind, _, pname = name.partition(".")
        if pname not in params:
            raise CorruptCheckpointError(f"checkpoint names unknown parameter {pname}")
        if kind == "param":
            if params[pname].shape != arr.shape:
                raise CorruptCheckpointError(f"shape mismatch for {pname}")
            params[pname].data = arr
        elif kind not in ("adam_m", "adam_v"):
            raise CorruptCheckpointError(f"unknown array kind {kind}")
    return weights, fields, loaded


def load_checkpoint(path, examples: list[RepairExample], cfg: TrainConfig,
                    expected_model_config: Optional[ModelConfig] = None,
                    expected_hash: Optional[str] = None) -> Trainer:
    """Rebuild a Trainer whose next step matches the uninterrupted run exactly."""
    weights, fields, loaded = load_weights(path, expected_model_config, expected_hash)
    opt = AdamState(step=int(fields["step"]))
    for name, arr in loaded.items():
        kind, _, pname = name.partition(".")
        if kind == "adam_m":
            opt.m[pname] = arr
        elif kind == "adam_v":
            opt.v[pname] = arr
    rng = np.random.default_rng()
    _set_rng_state(rng, json.loads(fields["rng_state"]))
    return Trainer(examples, weights, cfg, rng=rng, opt=opt)


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    if state["bit_generator"] != rng.bit_generator.state["bit_generator"]:
        raise CorruptCheckpointError("rng kind mismatch")
    rng.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": state["state"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
