"""Sandboxed execution tests: verdicts, isolation, limits."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from alliancecoder.corpus import (
    corpus_hash,
    extract_corpus_api_units,
    load_tasks,
    scan_repository,
)
from alliancecoder.sandbox import (
    ExecutionVerdict,
    SandboxLimits,
    VerdictStatus,
    execute_candidate,
    splice_candidate,
)

FIXTURES = Path(__file__).parent / "fixtures"
MINI_REPO = FIXTURES / "mini_repo"

FAST = SandboxLimits(timeout=30.0)


@pytest.fixture(scope="module")
def tasks():
    manifest = scan_repository(MINI_REPO, exclude_globs=["tests/*"])
    units, _ = extract_corpus_api_units(manifest)
    loaded = load_tasks(FIXTURES / "benchmark", manifest, units)
    return {t.task_id: t for t in loaded}


class TestVerdicts:
    def test_reference_solutions_pass(self, tasks):
        for task in tasks.values():
            verdict = execute_candidate(task.reference_solution, task, MINI_REPO, FAST)
            assert verdict.status is VerdictStatus.PASS, (task.task_id, verdict)

    def test_mutated_solution_fails_tests(self, tasks):
        task = tasks["t1"]
        mutant = task.reference_solution.replace(
            "return run_query(db, table)", "return []"
        )
        assert mutant != task.reference_solution
        verdict = execute_candidate(mutant, task, MINI_REPO, FAST)
        assert verdict.status is VerdictStatus.TEST_FAIL

    def test_mutated_method_fails_tests(self, tasks):
        task = tasks["t2"]
        mutant = task.reference_solution.replace('out["key"] = self.key', "pass")
        verdict = execute_candidate(mutant, task, MINI_REPO, FAST)
        assert verdict.status is VerdictStatus.TEST_FAIL

    def test_crashing_candidate_is_runtime_error(self, tasks):
        task = tasks["t1"]
        crasher = (
            "def load_and_query(path, table):\n"
            "    raise RuntimeError('boom')\n"
        )
        verdict = execute_candidate(crasher, task, MINI_REPO, FAST)
        assert verdict.status is VerdictStatus.RUNTIME_ERROR

    def test_infinite_loop_times_out_within_grace(self, tasks):
        task = tasks["t1"]
        looper = (
            "def load_and_query(path, table):\n"
            "    while True:\n"
            "        pass\n"
        )
        limits = SandboxLimits(timeout=10.0, grace=2.0)
        started = time.perf_counter()
        verdict = execute_candidate(looper, task, MINI_REPO, limits)
        elapsed = time.perf_counter() - started
        assert verdict.status is VerdictStatus.TIMEOUT
        assert elapsed <= limits.timeout + limits.grace

    def test_unparsable_candidate(self, tasks):
        task = tasks["t1"]
        verdict = execute_candidate("def broken(:\n    pass\n", task, MINI_REPO, FAST)
        assert verdict.status is VerdictStatus.CANDIDATE_UNPARSABLE

    def test_missing_candidate(self, tasks):
        verdict = execute_candidate(None, tasks["t1"], MINI_REPO, FAST)
        assert verdict.status is VerdictStatus.CANDIDATE_UNPARSABLE

    def test_deterministic_for_same_candidate(self, tasks):
        task = tasks["t3"]
        first = execute_candidate(task.reference_solution, task, MINI_REPO, FAST)
        second = execute_candidate(task.reference_solution, task, MINI_REPO, FAST)
        assert first.status is second.status


class TestIsolation:
    def test_corpus_untouched_by_destructive_candidate(self, tasks):
        manifest_before = scan_repository(MINI_REPO, exclude_globs=["tests/*"])
        before = corpus_hash(manifest_before)
        task = tasks["t1"]
        vandal = (
            "def load_and_query(path, table):\n"
            "    import os, glob\n"
            "    for f in glob.glob('*.py') + glob.glob('*/*.py'):\n"
            "        os.remove(f)\n"
            "    return []\n"
        )
        verdict = execute_candidate(vandal, task, MINI_REPO, FAST)
        assert verdict.status is not VerdictStatus.PASS
        after = corpus_hash(scan_repository(MINI_REPO, exclude_globs=["tests/*"]))
        assert after == before

    def test_memory_limit_enforced(self, tasks):
        task = tasks["t1"]
        hog = (
            "def load_and_query(path, table):\n"
            "    data = []\n"
            "    while True:\n"
            "        data.append(bytearray(50 * 1024 * 1024))\n"
        )
        limits = SandboxLimits(timeout=30.0, memory_mb=256)
        verdict = execute_candidate(hog, task, MINI_REPO, limits)
        # the allocation loop must die from the cap, not pass
        assert verdict.status in (VerdictStatus.RUNTIME_ERROR, VerdictStatus.TEST_FAIL)

    def test_per_test_results_recorded(self, tasks):
        task = tasks["t1"]
        verdict = execute_candidate(task.reference_solution, task, MINI_REPO, FAST)
        assert len(verdict.tests) == len(task.test_suite)
        assert verdict.tests[0].returncode == 0
        assert verdict.wall_time > 0


class TestSplice:
    def test_method_reindented(self, tasks, tmp_path):
        import shutil

        task = tasks["t2"]
        checkout = tmp_path / "repo"
        shutil.copytree(MINI_REPO, checkout)
        splice_candidate(checkout, task, task.reference_solution)
        text = (checkout / "models.py").read_text()
        assert "    def to_dict(self):" in text
        compile(text, "models.py", "exec")

    def test_top_level_splice_byte_faithful(self, tasks, tmp_path):
        import shutil

        task = tasks["t1"]
        checkout = tmp_path / "repo"
        shutil.copytree(MINI_REPO, checkout)
        original = (checkout / "service.py").read_text()
        splice_candidate(checkout, task, task.reference_solution)
        assert (checkout / "service.py").read_text() == original
