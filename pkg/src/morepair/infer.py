"""Candidate patch generation: nucleus sampling and code-fence extraction.

Each candidate draws from its own generator seeded ``seed XOR index`` so the
first five candidates of a ten-candidate run are exactly the five-candidate
run. Inference forwards never add embedding noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataprep import EOS, decode
from .errors import ValidationError
from .model import InferForward, ModelWeights, forward_sequence

__all__ = [
    "SamplingConfig",
    "GenerationResult",
    "sample_next",
    "generate",
    "extract_patch",
    "write_candidate_dump",
    "load_candidate_dump",
]


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    do_sample: bool = True
    max_new_tokens: int = 256
    seed: int = 0
    num_candidates: int = 10

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1 or self.num_candidates < 1:
            raise ValidationError("max_new_tokens and num_candidates must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    extracted_patch: str
    candidate_index: int
    tokens_generated: int
    finish_reason: str  # "eos" | "length"


def sample_next(logits, cfg: SamplingConfig, rng: np.random.Generator) -> int:
    """One token id from a logits row under temperature + nucleus filtering.

    The nucleus is the smallest probability-sorted prefix reaching top_p
    cumulative mass (probability ties broken by ascending token id); it is
    renormalized before sampling and always contains the top token.
    do_sample=False is plain argmax with ties to the lowest id.
    """
    arr = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("logits must be finite")
    if not cfg.do_sample:
        return int(np.argmax(arr))

    z = arr / cfg.temperature
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()

    # Primary key: probability descending; secondary: token id ascending.
    order = np.lexsort((np.arange(arr.size), -probs))
    sorted_probs = probs[order]
    csum = np.cumsum(sorted_probs)
    cutoff = int(np.searchsorted(csum, cfg.top_p, side="left"))
    cutoff = min(cutoff, arr.size - 1)
    kept = sorted_probs[: cutoff + 1]
    kept = kept / kept.sum()
    u = rng.random()
    pick = int(np.searchsorted(np.cumsum(kept), u, side="right"))
    pick = min(pick, cutoff)
    return int(order[pick])


def generate(weights: ModelWeights, prompt_tokens: list[int],
             cfg: SamplingConfig) -> list[GenerationResult]:
    """num_candidates independent completions of the prompt."""
    max_len = weights.config.max_seq_len
    if len(prompt_tokens) >= max_len:
        raise ValidationError(
            f"prompt of {len(prompt_tokens)} tokens leaves no room in {max_len}")
    results = []
    for index in range(cfg.num_candidates):
        rng = np.random.default_rng(cfg.seed ^ index)
        tokens = list(prompt_tokens)
        emitted: list[int] = []
        finish = "length"
        while len(emitted) < cfg.max_new_tokens and len(tokens) < max_len:
            logits = forward_sequence(tokens, weights, InferForward())
            token = sample_next(logits.data[-1], cfg, rng)
            emitted.append(token)
            if token == EOS:
                finish = "eos"
                break
            tokens.append(token)
        raw = decode(emitted)
        results.append(GenerationResult(
            raw_text=raw,
            extracted_patch=extract_patch(raw),
            candidate_index=index,
            tokens_generated=len(emitted),
            finish_reason=finish,
        ))
    return results


def extract_patch(raw_text: str) -> str:
    """Contents of the first code fence; falls back to the trimmed whole text.

    The fence line's language tag is dropped. Without a closing fence,
    everything after the opening fence line is returned.
    """
    open_idx = raw_text.find("```")
    if open_idx == -1:
        return raw_text.strip()
    line_end = raw_text.find("\n", open_idx)
    if line_end == -1:
        return ""
    start = line_end + 1
    close_idx = raw_text.find("```", start)
    if close_idx == -1:
        return raw_text[start:]
    return raw_text[start:close_idx]


def write_candidate_dump(dump_dir, problem_id: str,
                         results: list[GenerationResult]) -> Path:
    """One file per problem: a line-oriented record per candidate."""
    out = Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{problem_id}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "candidate_index": r.candidate_index,
                "raw_text": r.raw_text,
                "extracted_patch": r.extracted_patch,
            }, ensure_ascii=False) + "\n")
    return path


def load_candidate_dump(dump_dir, problem_id: str) -> list[str]:
    """Extracted patches for one problem, ordered by candidate index."""
    path = Path(dump_dir) / f"{problem_id}.jsonl"
    if not path.exists():
        raise ValidationError(f"no candidate dump for problem {problem_id!r}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    records.sort(key=lambda r: r["candidate_index"])
    return [r["extracted_patch"] for r in records]
