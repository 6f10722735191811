"""Synthetic stand-in training corpus: tiny programs with single-token faults.

Each template is a one-function Python program, its buggy twin (one token
changed), and a small test table. The same templates can be materialized as
an evaluation benchmark directory, so a model trained on the corpus can be
scored with the real harness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataprep import RepairExample

__all__ = ["SyntheticProblem", "TEMPLATES", "generate_examples", "write_benchmark"]


@dataclass(frozen=True)
class SyntheticProblem:
    name: str
    description: str
    fixed_body: str
    buggy_body: str
    checks: tuple[tuple[tuple, object], ...]  # (args, expected result)


def _src(body: str) -> str:
    return f"def solve(a, b=None):\n    {body}\n"


TEMPLATES: tuple[SyntheticProblem, ...] = (
    SyntheticProblem("sum", "Return the sum of two integers.",
                     "return a + b", "return a - b",
                     (((2, 3), 5), ((-1, 4), 3), ((0, 0), 0))),
    SyntheticProblem("diff", "Return the first integer minus the second.",
                     "return a - b", "return a + b",
                     (((7, 2), 5), ((3, 9), -6), ((0, 5), -5))),
    SyntheticProblem("prod", "Return the product of two integers.",
                     "return a * b", "return a + b",
                     (((2, 3), 6), ((4, 0), 0), ((-2, 5), -10))),
    SyntheticProblem("twice", "Return twice the integer.",
                     "return 2 * a", "return 3 * a",
                     (((4,), 8), ((0,), 0), ((-3,), -6))),
    SyntheticProblem("square", "Return the square of the integer.",
                     "return a * a", "return a + a",
                     (((3,), 9), ((0,), 0), ((-4,), 16))),
    SyntheticProblem("negate", "Return the negation of the integer.",
                     "return -a", "return a",
                     (((5,), -5), ((0,), 0), ((-2,), 2))),
    SyntheticProblem("succ", "Return the integer plus one.",
                     "return a + 1", "return a - 1",
                     (((1,), 2), ((-1,), 0), ((9,), 10))),
    SyntheticProblem("pred", "Return the integer minus one.",
                     "return a - 1", "return a + 1",
                     (((1,), 0), ((0,), -1), ((10,), 9))),
    SyntheticProblem("larger", "Return the larger of two integers.",
                     "return a if a > b else b", "return a if a < b else b",
                     (((2, 5), 5), ((7, 1), 7), ((3, 3), 3))),
    SyntheticProblem("smaller", "Return the smaller of two integers.",
                     "return a if a < b else b", "return a if a > b else b",
                     (((2, 5), 2), ((7, 1), 1), ((4, 4), 4))),
    SyntheticProblem("is_even", "Return True when the integer is even.",
                     "return a % 2 == 0", "return a % 2 == 1",
                     (((4,), True), ((3,), False), ((0,), True))),
    SyntheticProblem("magnitude", "Return the absolute value of the integer.",
                     "return a if a >= 0 else -a", "return a if a <= 0 else -a",
                     (((5,), 5), ((-5,), 5), ((0,), 0))),
    SyntheticProblem("first_char", "Return the first character of the string.",
                     "return a[0]", "return a[1]",
                     ((("hat",), "h"), (("zebra",), "z"))),
    SyntheticProblem("last_char", "Return the last character of the string.",
                     "return a[-1]", "return a[0]",
                     ((("hat",), "t"), (("zebra",), "a"))),
    SyntheticProblem("shout", "Return the string in upper case.",
                     "return a.upper()", "return a.lower()",
                     ((("hat",), "HAT"), (("Zebra",), "ZEBRA"))),
    SyntheticProblem("mirror", "Return the reversed string.",
                     "return a[::-1]", "return a[::2]",
                     ((("hat",), "tah"), (("ab",), "ba"))),
    SyntheticProblem("width", "Return the length of the string.",
                     "return len(a)", "return len(a) + 1",
                     ((("hat",), 3), (("",), 0))),
    SyntheticProblem("join_two", "Concatenate two strings in order.",
                     "return a + b", "return b + a",
                     ((("ab", "cd"), "abcd"), (("x", "y"), "xy"))),
    SyntheticProblem("echo", "Repeat the string twice.",
                     "return a * 2", "return a * 3",
                     ((("ab",), "abab"), (("z",), "zz"))),
    SyntheticProblem("halve", "Return the integer divided by two, rounded down.",
                     "return a // 2", "return a // 3",
                     (((8,), 4), ((7,), 3), ((0,), 0))),
)


def generate_examples(count: int, seed: int) -> list[RepairExample]:
    """A shuffled, deterministic corpus of `count` buggy/fixed pairs."""
    if count > len(TEMPLATES):
        raise ValueError(f"at most {len(TEMPLATES)} distinct templates available")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(TEMPLATES))[:count]
    examples = []
    for rank, idx in enumerate(order):
        t = TEMPLATES[int(idx)]
        examples.append(RepairExample(
            id=f"synth-{rank:03d}-{t.name}",
            task_description=t.description,
            buggy_code=_src(t.buggy_body),
            fixed_code=_src(t.fixed_body),
            guidance=None,
            language_tag="python",
        ))
    return examples


_TEST_RUNNER = '''\
import importlib.util
import json
import sys

spec = importlib.util.spec_from_file_location("candidate", "solution.py")
mod = importlib.util.module_from_spec(spec)
spec.loader.exec_module(mod)

with open("tests/cases.json") as fh:
    cases = json.load(fh)

for args, want in cases:
    got = mod.solve(*args)
    if got != want:
        print(f"FAIL solve{tuple(args)!r} -> {got!r}, expected {want!r}")
        sys.exit(1)
print(f"ok ({len(cases)} cases)")
'''


def write_benchmark(examples: list[RepairExample], out_dir,
                    name: str = "synthetic-train") -> Path:
    """Materialize the corpus as an evaluation benchmark directory."""
    by_name = {t.name: t for t in TEMPLATES}
    out = Path(out_dir)
    problems_dir = out / "problems"
    problems_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for ex in examples:
        template = by_name[ex.id.rsplit("-", 1)[-1]]
        pdir = problems_dir / ex.id
        (pdir / "tests").mkdir(parents=True, exist_ok=True)
        (pdir / "buggy.py").write_text(ex.buggy_code, encoding="utf-8")
        (pdir / "tests" / "run_tests.py").write_text(_TEST_RUNNER, encoding="utf-8")
        cases = [[list(args), want] for args, want in template.checks]
        (pdir / "tests" / "cases.json").write_text(json.dumps(cases), encoding="utf-8")
        (pdir / "meta.json").write_text(json.dumps({
            "source_filename": "solution.py",
            "test_count": len(template.checks),
            "task_description": ex.task_description,
            "language_tag": ex.language_tag,
        }), encoding="utf-8")
        ids.append(ex.id)
    (out / "manifest.json").write_text(json.dumps({
        "name": name,
        "toolchain_profile": "python",
        "problems": ids,
    }, indent=2), encoding="utf-8")
    return out
