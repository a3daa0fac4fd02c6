"""Isolated execution of candidate code against task test suites.

Each candidate is spliced into a throwaway copy of the repository, replacing
the target span, and the task's test commands run as subprocesses against
that copy with a wall-clock timeout and an address-space cap. The original
corpus is never touched. Network isolation uses an unshared network
namespace when the host supports it.
"""

from __future__ import annotations

import ast
import re
import shlex
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .corpus import GenerationTask


class VerdictStatus(str, Enum):
    PASS = "Pass"
    TEST_FAIL = "TestFail"
    RUNTIME_ERROR = "RuntimeError"
    TIMEOUT = "Timeout"
    CANDIDATE_UNPARSABLE = "CandidateUnparsable"


@dataclass(frozen=True)
class SandboxLimits:
    timeout: float = 10.0     # per test command, seconds
    grace: float = 2.0        # teardown allowance on top of the limit
    memory_mb: int = 512
    network: bool = False     # False = block network when the host allows it
    python: str = ""          # interpreter for commands starting with "python"


@dataclass
class TestCommandResult:
    command: str
    returncode: int | None
    duration: float
    timed_out: bool
    stdout_tail: str
    stderr_tail: str


@dataclass
class ExecutionVerdict:
    status: VerdictStatus
    tests: list = field(default_factory=list)
    wall_time: float = 0.0
    detail: str = ""
    network_isolated: bool = False

    def as_dict(self) -> dict:
        return {
            "status": self.status.value,
            "wall_time": self.wall_time,
            "detail": self.detail,
            "network_isolated": self.network_isolated,
            "tests": [
                {
                    "command": t.command,
                    "returncode": t.returncode,
                    "duration": t.duration,
                    "timed_out": t.timed_out,
                }
                for t in self.tests
            ],
        }


_unshare_works: bool | None = None


def _network_blocker() -> list[str]:
    """Probe once whether an unshared network namespace is available."""
    global _unshare_works
    if _unshare_works is None:
        try:
            probe = subprocess.run(
                ["unshare", "-r", "-n", "true"],
                capture_output=True, timeout=10,
            )
            _unshare_works = probe.returncode == 0
        except Exception:
            _unshare_works = False
    return ["unshare", "-r", "-n"] if _unshare_works else []


def _make_mem_limiter(memory_mb: int):
    def limiter():
        import resource

        cap = memory_mb * 1024 * 1024
        resource.setrlimit(resource.RLIMIT_AS, (cap, cap))

    return limiter


def _indent_candidate(candidate: str, indent: str) -> str:
    if not indent:
        return candidate
    return "\n".join(
        (indent + line) if line.strip() else line for line in candidate.splitlines()
    )


def splice_candidate(checkout: Path, task: GenerationTask, candidate_source: str) -> None:
    """Replace the target span in the checkout with the candidate definition.

    The candidate is re-indented to the original definition's indentation, so
    method-level targets splice correctly. The resulting file must parse.
    """
    target = checkout / task.target_path
    lines = target.read_text(encoding="utf-8").splitlines(keepends=True)
    span = task.target_span
    if span.start < 1 or span.end > len(lines):
        raise ValueError(f"target span outside {task.target_path}")
    original_first = lines[span.start - 1]
    indent = original_first[: len(original_first) - len(original_first.lstrip())]
    body = _indent_candidate(candidate_source.rstrip("\n"), indent) + "\n"
    new_text = "".join(lines[: span.start - 1]) + body + "".join(lines[span.end:])
    ast.parse(new_text)  # SyntaxError propagates; caller maps it to a verdict
    target.write_text(new_text, encoding="utf-8")


_TRACEBACK_TAIL = re.compile(r"^(\w+(?:\.\w+)*(?:Error|Exception|Exit|Interrupt))\b", re.MULTILINE)


def _classify_failure(results) -> VerdictStatus:
    # Assertion-style failures are test failures; any other exception type
    # surfacing in stderr marks the candidate as crashing at runtime.
    for r in results:
        if r.returncode == 0:
            continue
        if "Traceback" in r.stderr_tail:
            exceptions = _TRACEBACK_TAIL.findall(r.stderr_tail)
            if exceptions and not all(e.endswith("AssertionError") for e in exceptions):
                return VerdictStatus.RUNTIME_ERROR
    return VerdictStatus.TEST_FAIL


def execute_candidate(candidate_source: str | None, task: GenerationTask,
                      corpus_root, limits: SandboxLimits | None = None) -> ExecutionVerdict:
    """Run one candidate through the task's test suite in a fresh checkout."""
    limits = limits or SandboxLimits()
    started = time.perf_counter()
    if not candidate_source:
        return ExecutionVerdict(
            status=VerdictStatus.CANDIDATE_UNPARSABLE,
            detail="no candidate source",
            wall_time=time.perf_counter() - started,
        )
    blocker = [] if limits.network else _network_blocker()
    with tempfile.TemporaryDirectory(prefix="alliancecoder-sbx-") as tmp:
        checkout = Path(tmp) / "repo"
        shutil.copytree(corpus_root, checkout)
        try:
            splice_candidate(checkout, task, candidate_source)
        except SyntaxError as exc:
            return ExecutionVerdict(
                status=VerdictStatus.CANDIDATE_UNPARSABLE,
                detail=f"splice does not parse: {exc}",
                wall_time=time.perf_counter() - started,
            )
        results = []
        python = limits.python or sys.executable
        for command in task.test_suite:
            argv = shlex.split(command)
            if argv and argv[0] in ("python", "python3"):
                argv[0] = python
            argv = blocker + argv
            t0 = time.perf_counter()
            timed_out = False
            try:
                proc = subprocess.run(
                    argv, cwd=checkout, capture_output=True, text=True,
                    timeout=limits.timeout,
                    preexec_fn=_make_mem_limiter(limits.memory_mb),
                    env={"PATH": "/usr/bin:/bin:/usr/local/bin",
                         "PYTHONDONTWRITEBYTECODE": "1"},
                )
                rc, out, err = proc.returncode, proc.stdout, proc.stderr
            except subprocess.TimeoutExpired as exc:
                timed_out = True
                rc = None
                out = (exc.stdout or b"").decode("utf-8", "replace") if isinstance(exc.stdout, bytes) else (exc.stdout or "")
                err = (exc.stderr or b"").decode("utf-8", "replace") if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            results.append(TestCommandResult(
                command=command,
                returncode=rc,
                duration=time.perf_counter() - t0,
                timed_out=timed_out,
                stdout_tail=out[-2000:],
                stderr_tail=err[-2000:],
            ))
            if timed_out:
                break  # no point running the rest of the suite
        wall = time.perf_counter() - started
        if any(r.timed_out for r in results):
            status = VerdictStatus.TIMEOUT
        elif all(r.returncode == 0 for r in results):
            status = VerdictStatus.PASS
        else:
            status = _classify_failure(results)
        return ExecutionVerdict(
            status=status, tests=results, wall_time=wall,
            network_isolated=bool(blocker),
        )
