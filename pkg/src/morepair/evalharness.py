"""Benchmark loading, sandboxed candidate execution, and TOP-k scoring.

A benchmark directory holds a manifest plus one subdirectory per problem
(buggy source, test harness, metadata). A candidate patch is judged by
writing it into a scratch directory, running the profile's compile and test
commands under per-phase timeouts, and comparing the test exit code against
the profile's expected-success code. TOP-k is the percentage of problems
where any of the first k candidates passes.
"""

from __future__ import annotations

import json
import re
import shutil
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .errors import EnvironmentFailure, ValidationError

__all__ = [
    "ToolchainProfile",
    "BenchmarkProblem",
    "CandidateOutcome",
    "EvalReport",
    "BUILTIN_PROFILES",
    "load_benchmark",
    "run_candidate",
    "top_k",
    "evaluate",
]

_PLACEHOLDERS = ("{src}", "{bin}", "{dir}")
_ENV_DENYLIST = re.compile(r"KEY|TOKEN|SECRET|PASSWORD|CREDENTIAL", re.IGNORECASE)
_OUTPUT_LIMIT = 4096


@dataclass(frozen=True)
class ToolchainProfile:
    """Command templates with {src}, {bin}, {dir} placeholders."""

    name: str
    compile_cmd: str           # empty string skips the compile phase
    run_cmd: str
    compile_timeout: float = 60.0
    run_timeout: float = 120.0
    expected_exit: int = 0

    def __post_init__(self):
        if self.compile_timeout <= 0 or self.run_timeout <= 0:
            raise ValidationError("timeouts must be positive")
        if not self.run_cmd:
            raise ValidationError("run command template required")
        for cmd in (self.compile_cmd, self.run_cmd):
            for match in re.findall(r"\{(\w+)\}", cmd):
                if "{" + match + "}" not in _PLACEHOLDERS:
                    raise ValidationError(f"unknown template placeholder {{{match}}}")


BUILTIN_PROFILES: dict[str, ToolchainProfile] = {
    "python": ToolchainProfile(
        name="python",
        compile_cmd="python3 -m py_compile {src}",
        run_cmd="python3 tests/run_tests.py",
        compile_timeout=60.0,
        run_timeout=120.0,
    ),
    "cpp": ToolchainProfile(
        name="cpp",
        compile_cmd="g++ -std=c++17 -O0 -I {dir} -o {bin} tests/test_main.cpp",
        run_cmd="{bin}",
        compile_timeout=60.0,
        run_timeout=120.0,
    ),
}


_EXT_LANGUAGE = {".py": "python", ".cpp": "cpp", ".cc": "cpp", ".java": "java",
                 ".js": "javascript", ".go": "go", ".rs": "rust", ".c": "c"}


@dataclass(frozen=True)
class BenchmarkProblem:
    id: str
    buggy_source: str
    source_filename: str
    profile_name: str
    tests_dir: Path
    test_count: int
    profile_overrides: dict = field(default_factory=dict)
    task_description: str = ""
    language_tag: str = "python"


@dataclass(frozen=True)
class CandidateOutcome:
    problem_id: str
    candidate_index: int
    status: str  # pass | compile_error | test_fail | timeout | runtime_error
    wall_time: float
    output: str

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass
class EvalReport:
    benchmark_name: str
    problem_ids: list[str]
    matrix: list[list[bool]]          # [problems x candidates]
    statuses: list[list[str]]
    top_k_values: dict[int, float]
    config_snapshot: str
    started: str
    finished: str


def load_benchmark(bench_dir, strict: bool = True) -> list[BenchmarkProblem]:
    """Parse a benchmark directory; malformed problems skip or abort per strict."""
    root = Path(bench_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    for key in ("name", "toolchain_profile", "problems"):
        if key not in manifest:
            raise ValidationError(f"manifest missing key {key!r}")
    ids = manifest["problems"]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate problem id in manifest")

    problems = []
    for pid in ids:
        pdir = root / "problems" / pid
        try:
            problems.append(_load_problem(pdir, pid, manifest["toolchain_profile"]))
        except ValidationError as exc:
            if strict:
                raise
            import logging
            logging.getLogger(__name__).warning("skipping problem %s: %s", pid, exc)
    return problems


def _load_problem(pdir: Path, pid: str, default_profile: str) -> BenchmarkProblem:
    meta_path = pdir / "meta.json"
    if not meta_path.exists():
        raise ValidationError(f"problem {pid}: missing meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    source_filename = meta.get("source_filename")
    if not source_filename:
        raise ValidationError(f"problem {pid}: meta.json lacks source_filename")
    test_count = int(meta.get("test_count", 0))
    if test_count < 1:
        raise ValidationError(f"problem {pid}: declared test count must be >= 1")
    buggy_candidates = sorted(pdir.glob("buggy.*"))
    if not buggy_candidates:
        raise ValidationError(f"problem {pid}: no buggy.<ext> source")
    tests_dir = pdir / "tests"
    if not tests_dir.is_dir():
        raise ValidationError(f"problem {pid}: no tests/ directory")
    buggy_path = buggy_candidates[0]
    language = meta.get("language_tag") or _EXT_LANGUAGE.get(buggy_path.suffix, "text")
    return BenchmarkProblem(
        id=pid,
        buggy_source=buggy_path.read_text(encoding="utf-8"),
        source_filename=source_filename,
        profile_name=meta.get("profile", default_profile),
        tests_dir=tests_dir,
        test_count=test_count,
        profile_overrides=meta.get("profile_overrides", {}),
        task_description=meta.get("task_description", ""),
        language_tag=language,
    )


def resolve_profile(problem: BenchmarkProblem,
                    profiles: dict[str, ToolchainProfile]) -> ToolchainProfile:
    if problem.profile_name not in profiles:
        raise ValidationError(f"unknown toolchain profile {problem.profile_name!r}")
    profile = profiles[problem.profile_name]
    if problem.profile_overrides:
        profile = replace(profile, **problem.profile_overrides)
    return profile


def _sanitized_env() -> dict[str, str]:
    import os
    return {k: v for k, v in os.environ.items() if not _ENV_DENYLIST.search(k)}


def _substitute(template: str, src: Path, binary: Path, scratch: Path) -> list[str]:
    cmd = (template.replace("{src}", str(src))
                   .replace("{bin}", str(binary))
                   .replace("{dir}", str(scratch)))
    return cmd.split()


def run_candidate(problem: BenchmarkProblem, patch_text: str,
                  profile: ToolchainProfile, keep_scratch: bool = False,
                  scratch_root=None, candidate_index: int = 0) -> CandidateOutcome:
    """Compile and test one patch in an isolated scratch directory."""
    scratch = Path(tempfile.mkdtemp(prefix=f"mor-{problem.id}-", dir=scratch_root))
    started = time.monotonic()
    try:
        src = scratch / problem.source_filename
        src.write_text(patch_text, encoding="utf-8")
        shutil.copytree(problem.tests_dir, scratch / "tests")
        binary = scratch / "candidate_bin"
        env = _sanitized_env()

        if profile.compile_cmd:
            status, output = _run_phase(
                _substitute(profile.compile_cmd, src, binary, scratch),
                scratch, env, profile.compile_timeout, expected_exit=0,
                failure_status="compile_error")
            if status is not None:
                return CandidateOutcome(problem.id, candidate_index, status,
                                        time.monotonic() - started, output)

        status, output = _run_phase(
            _substitute(profile.run_cmd, src, binary, scratch),
            scratch, env, profile.run_timeout,
            expected_exit=profile.expected_exit, failure_status="test_fail")
        final = status if status is not None else "pass"
        return CandidateOutcome(problem.id, candidate_index, final,
                                time.monotonic() - started, output)
    finally:
        if not keep_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


def _run_phase(argv: list[str], cwd: Path, env: dict[str, str], timeout: float,
               expected_exit: int, failure_status: str) -> tuple[str | None, str]:
    """(status, output); status None means the phase succeeded."""
    try:
        proc = subprocess.run(argv, cwd=cwd, env=env, timeout=timeout,
                              capture_output=True, text=True)
    except subprocess.TimeoutExpired as exc:
        out = _clip((exc.stdout or b"").decode("utf-8", "replace")
                    if isinstance(exc.stdout, bytes) else (exc.stdout or ""))
        return "timeout", out
    except FileNotFoundError as exc:
        raise EnvironmentFailure(f"tool not found: {argv[0]}") from exc
    output = _clip((proc.stdout or "") + (proc.stderr or ""))
    if proc.returncode == expected_exit:
        return None, output
    if proc.returncode < 0:
        return "runtime_error", output
    return failure_status, output


def _clip(text: str) -> str:
    return text if len(text) <= _OUTPUT_LIMIT else text[:_OUTPUT_LIMIT] + "...[clipped]"


def top_k(matrix: list[list[bool]], k: int) -> float:
    """Percentage of problems where any of the first k candidates passed.

    One-decimal result with half-away-from-zero rounding.
    """
    if not matrix:
        raise ValidationError("empty pass/fail matrix")
    candidates = len(matrix[0])
    if any(len(row) != candidates for row in matrix):
        raise ValidationError("ragged pass/fail matrix")
    if not 1 <= k <= candidates:
        raise ValidationError(f"k={k} out of range for {candidates} candidates")
    hits = sum(1 for row in matrix if any(row[:k]))
    pct = Decimal(100 * hits) / Decimal(len(matrix))
    return float(pct.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def evaluate(problems: list[BenchmarkProblem],
             candidates_by_problem: dict[str, list[str]],
             ks: list[int],
             profiles: dict[str, ToolchainProfile],
             workers: int = 4,
             benchmark_name: str = "",
             config_snapshot: str = "",
             keep_scratch: bool = False) -> EvalReport:
    """Run every (problem, candidate) pair and fill the TOP-k report.

    Report content is a pure function of its inputs: work is keyed by
    (problem, candidate index), so the worker count cannot change it.
    """
    if not problems:
        raise ValidationError("no problems to evaluate")
    if not ks:
        raise ValidationError("at least one k required")
    max_k = max(ks)
    for problem in problems:
        got = len(candidates_by_problem.get(problem.id, ()))
        if got < max_k:
            raise ValidationError(
                f"problem {problem.id}: {got} candidates, need >= {max_k}")

    started = _utc_now()
    jobs = []
    for problem in problems:
        profile = resolve_profile(problem, profiles)
        for idx, patch in enumerate(candidates_by_problem[problem.id][:max_k]):
            jobs.append((problem, idx, patch, profile))

    outcomes: dict[tuple[str, int], CandidateOutcome] = {}

    def run_job(job) -> CandidateOutcome:
        problem, idx, patch, profile = job
        return run_candidate(problem, patch, profile, keep_scratch=keep_scratch,
                             candidate_index=idx)

    if workers <= 1:
        completed = [run_job(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            completed = list(pool.map(run_job, jobs))
    for outcome in completed:
        outcomes[(outcome.problem_id, outcome.candidate_index)] = outcome

    matrix = [[outcomes[(p.id, i)].passed for i in range(max_k)] for p in problems]
    statuses = [[outcomes[(p.id, i)].status for i in range(max_k)] for p in problems]
    report = EvalReport(
        benchmark_name=benchmark_name,
        problem_ids=[p.id for p in problems],
        matrix=matrix,
        statuses=statuses,
        top_k_values={k: top_k(matrix, k) for k in sorted(ks)},
        config_snapshot=config_snapshot,
        started=started,
        finished=_utc_now(),
    )
    return report


def _utc_now() -> str:
    from datetime import datetime, timezone
    return datetime.now(timezone.utc).isoformat()
