"""Dataset ingestion, byte-level tokenization, guidance acquisition, rendering.

Training records are buggy/fixed code pairs with an optional natural-language
guidance field. A pluggable teacher client fills in missing guidance: the
mock client derives a deterministic explanation from the line diff, the HTTP
client posts the guidance prompt to a configured endpoint. Rendering turns a
record into token sequences for one of two objectives: the repaired code
alone, or guidance plus the repaired code.
"""

from __future__ import annotations

import difflib
import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Protocol

from .errors import EnvironmentFailure, ValidationError

__all__ = [
    "BOS", "EOS", "PAD", "SEP", "VOCAB_SIZE",
    "RepairExample", "RenderedPair",
    "encode", "decode", "decode_bytes",
    "render_fenced_code",
    "build_prompt_tokens",
    "build_guidance_prompt",
    "TeacherClient", "MockTeacherClient", "HttpTeacherClient",
    "acquire_guidance", "acquire_guidance_batch",
    "render_training_pair",
    "load_dataset", "save_dataset",
]

# Byte-level vocabulary: ids 0..255 are raw bytes, then four specials.
BOS = 256
EOS = 257
PAD = 258
SEP = 259
VOCAB_SIZE = 260
_SPECIALS = frozenset((BOS, EOS, PAD, SEP))

TEACHER_KEY_ENV = "MOREPAIR_TEACHER_KEY"

INSTRUCTION_PREAMBLE = "Fix the following buggy program."

GUIDANCE_PROMPT_TEMPLATE = (
    "This is a programming task description along with a buggy code:\n"
    "{description}\n"
    "{buggy_code}\n"
    "This is a repaired code:\n"
    "{repaired_code}\n"
    "Please think step by step and tell me how to fix the buggy code."
)


def encode(text: str | bytes) -> list[int]:
    """Byte ids for a string (UTF-8) or raw byte string; never emits specials."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def decode_bytes(ids: Iterable[int]) -> bytes:
    """Exact inverse of encode on the byte level; special ids render as nothing."""
    out = bytearray()
    for i in ids:
        if i in _SPECIALS:
            continue
        if not 0 <= i < 256:
            raise ValidationError(f"token id {i} outside vocabulary")
        out.append(i)
    return bytes(out)


def decode(ids: Iterable[int]) -> str:
    return decode_bytes(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class RepairExample:
    """One buggy -> fixed training record."""

    id: str
    task_description: str
    buggy_code: str
    fixed_code: str
    guidance: Optional[str] = None
    language_tag: str = "python"

    def __post_init__(self):
        if not self.id:
            raise ValidationError("example id must be nonempty")
        if self.buggy_code == self.fixed_code:
            raise ValidationError(f"example {self.id}: buggy and fixed code are identical")


@dataclass(frozen=True)
class RenderedPair:
    """Token-level view of one example for one training objective."""

    input_tokens: list[int]
    target_tokens: list[int]
    loss_mask: list[bool]      # over label positions of input+target
    objective: int             # 1 = code only, 2 = guidance + code
    guidance_token_count: int  # n; 0 for objective 1

    @property
    def full_sequence(self) -> list[int]:
        return self.input_tokens + self.target_tokens


def render_fenced_code(code: str, language_tag: str) -> str:
    """Wrap code in a single markdown fence, normalizing a trailing newline."""
    body = code if code.endswith("\n") else code + "\n"
    return f"```{language_tag}\n{body}```"


def build_guidance_prompt(ex: RepairExample) -> str:
    """The teacher prompt, with the three record fields substituted verbatim."""
    if not ex.fixed_code:
        raise ValidationError(f"example {ex.id}: fixed_code required for guidance prompt")
    return GUIDANCE_PROMPT_TEMPLATE.format(
        description=ex.task_description,
        buggy_code=ex.buggy_code,
        repaired_code=ex.fixed_code,
    )


class TeacherClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class MockTeacherClient:
    """Offline teacher: a deterministic explanation templated from the line diff."""

    def complete(self, prompt: str) -> str:
        # The prompt carries buggy then repaired code between fixed marker
        # lines; recover them for the diff. The buggy section still has the
        # task description in front, which aligns as a pure deletion, so only
        # line replacements are reported.
        buggy, fixed = _split_prompt_sections(prompt)
        a, b = buggy.splitlines(), fixed.splitlines()
        matcher = difflib.SequenceMatcher(a=a, b=b, autojunk=False)
        lines = ["Step-by-step fix:"]
        step = 1
        for tag, i1, i2, j1, j2 in matcher.get_opcodes():
            if tag == "replace":
                old = " / ".join(s.strip() for s in a[i1:i2])
                new = " / ".join(s.strip() for s in b[j1:j2])
                lines.append(f"{step}. Replace `{old}` with `{new}`.")
                step += 1
            elif tag == "insert":
                new = " / ".join(s.strip() for s in b[j1:j2])
                lines.append(f"{step}. Insert `{new}`.")
                step += 1
        if step == 1:
            lines.append("1. Align the code with the repaired version shown.")
        lines.append("That yields the repaired code.")
        return "\n".join(lines)


def _split_prompt_sections(prompt: str) -> tuple[str, str]:
    head, _, tail = prompt.partition("This is a repaired code:\n")
    repaired = tail.rsplit("\nPlease think step by step", 1)[0]
    buggy = head.split(":\n", 1)[1] if ":\n" in head else head
    return buggy.strip("\n"), repaired.strip("\n")


class HttpTeacherClient:
    """POSTs {prompt, model_name, temperature} to a URL and reads back {text}."""

    def __init__(self, url: str, model_name: str = "gpt-4-1106-preview",
                 temperature: float = 1.0, timeout: float = 60.0):
        self.url = url
        self.model_name = model_name
        self.temperature = temperature
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        payload = json.dumps({
            "prompt": prompt,
            "model_name": self.model_name,
            "temperature": self.temperature,
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(TEACHER_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        req = urllib.request.Request(self.url, data=payload, headers=headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise EnvironmentFailure(f"teacher request failed: {exc}") from exc
        if "text" not in body:
            raise EnvironmentFailure("teacher response missing 'text' field")
        return str(body["text"])


def acquire_guidance(ex: RepairExample, client: TeacherClient,
                     retries: int = 2, retry_wait: float = 0.0) -> RepairExample:
    """Fill in the guidance field via the teacher; no-op when already present."""
    if ex.guidance is not None:
        return ex
    prompt = build_guidance_prompt(ex)
    last: Optional[Exception] = None
    for attempt in range(retries + 1):
        try:
            return replace(ex, guidance=client.complete(prompt))
        except EnvironmentFailure as exc:
            last = exc
            if attempt < retries and retry_wait:
                time.sleep(retry_wait)
    raise EnvironmentFailure(
        f"teacher failed for example {ex.id} after {retries + 1} attempts: {last}")


def acquire_guidance_batch(
        examples: list[RepairExample], client: TeacherClient,
        retries: int = 2) -> tuple[list[RepairExample], list[tuple[str, str]]]:
    """Guidance for a whole dataset; per-example failures are recorded, not fatal."""
    guided: list[RepairExample] = []
    failures: list[tuple[str, str]] = []
    for ex in examples:
        try:
            guided.append(acquire_guidance(ex, client, retries=retries))
        except EnvironmentFailure as exc:
            failures.append((ex.id, str(exc)))
            guided.append(ex)
    return guided, failures


def build_prompt_tokens(task_description: str, buggy_code: str, language_tag: str,
                        include_description: bool = True) -> list[int]:
    """The repair prompt: BOS + preamble (+ description) + fenced code + SEP."""
    prompt_text = INSTRUCTION_PREAMBLE
    if include_description and task_description:
        prompt_text += "\n" + task_description
    prompt_text += "\n" + render_fenced_code(buggy_code, language_tag) + "\n"
    return [BOS] + encode(prompt_text) + [SEP]


def render_training_pair(ex: RepairExample, objective: int,
                         include_description: bool = True,
                         guidance_position: str = "before") -> RenderedPair:
    """Token sequences for one objective.

    Input: BOS + instruction preamble (+ description) + fenced buggy code + SEP.
    Objective-1 target: fenced fixed code + EOS. Objective-2 target inserts
    the guidance text (and one separator) on the configured side of the code.
    """
    if objective not in (1, 2):
        raise ValidationError(f"objective must be 1 or 2, got {objective}")
    if guidance_position not in ("before", "after"):
        raise ValidationError("guidance_position must be before|after")
    if objective == 2 and ex.guidance is None:
        raise ValidationError(f"example {ex.id}: objective 2 requires guidance")

    input_tokens = build_prompt_tokens(ex.task_description, ex.buggy_code,
                                       ex.language_tag, include_description)

    code_tokens = encode(render_fenced_code(ex.fixed_code, ex.language_tag))
    if objective == 1:
        target = code_tokens + [EOS]
        n = 0
    else:
        guidance_tokens = encode(ex.guidance)
        n = len(guidance_tokens)
        if guidance_position == "before":
            target = guidance_tokens + [SEP] + code_tokens + [EOS]
        else:
            target = code_tokens + [SEP] + guidance_tokens + [EOS]

    mask = [False] * (len(input_tokens) - 1) + [True] * len(target)
    return RenderedPair(
        input_tokens=input_tokens,
        target_tokens=target,
        loss_mask=mask,
        objective=objective,
        guidance_token_count=n,
    )


_DATASET_FIELDS = ("id", "task_description", "buggy_code", "fixed_code",
                   "guidance", "language_tag")


def load_dataset(path) -> list[RepairExample]:
    """Read an examples file: one JSON object per line, exact field set."""
    examples: list[RepairExample] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(record, dict) or set(record) != set(_DATASET_FIELDS):
                raise ValidationError(
                    f"{path}:{lineno}: record fields must be exactly {_DATASET_FIELDS}")
            if record["id"] in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate id {record['id']!r}")
            seen.add(record["id"])
            try:
                examples.append(RepairExample(**record))
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return examples


def save_dataset(examples: list[RepairExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {name: getattr(ex, name) for name in _DATASET_FIELDS}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
