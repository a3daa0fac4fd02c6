"""Run-directory persistence: generation records, verdicts, and locking.

Layout under a run directory:

    manifest.json    run metadata, written at start and finalized at end
    records.jsonl    one generation record per line, append-only
    verdicts.jsonl   one execution verdict per line, append-only
    reports/         derived plain-text reports, regenerable from records

Records are keyed by (task_id, condition, sample_index); appends skip keys
already on disk so an interrupted run can be rerun without duplicates.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .pipeline import ApiDescription, Block, GenerationRecord, ImplementationStep, PromptBundle
from .vectorindex import ApiRetrievalSet

RECORDS_FILE = "records.jsonl"
VERDICTS_FILE = "verdicts.jsonl"
MANIFEST_FILE = "manifest.json"
REPORTS_DIR = "reports"
LOCK_FILE = ".lock"


class RunDirError(RuntimeError):
    pass


class LockHeldError(RunDirError):
    pass


# ── record (de)serialization ─────────────────────────────────────────────────

def _bundle_to_json(bundle: PromptBundle | None):
    if bundle is None:
        return None
    return {
        "blocks": [{"kind": b.kind, "text": b.text} for b in bundle.blocks],
        "token_estimate": bundle.token_estimate,
        "estimator": bundle.estimator,
    }


def _bundle_from_json(data) -> PromptBundle | None:
    if data is None:
        return None
    blocks = tuple(Block(kind=b["kind"], text=b["text"]) for b in data["blocks"])
    return PromptBundle(
        blocks=blocks,
        token_estimate=data["token_estimate"],
        estimator=data.get("estimator", "bytes4"),
    )


def _retrieval_to_json(retrieved: ApiRetrievalSet | None):
    if retrieved is None:
        return None
    return {
        "pairs": [[d, a, s] for d, a, s in retrieved.pairs],
        "api_ids": list(retrieved.api_ids),
    }


def _retrieval_from_json(data) -> ApiRetrievalSet | None:
    if data is None:
        return None
    return ApiRetrievalSet(
        pairs=[(d, a, s) for d, a, s in data["pairs"]],
        api_ids=tuple(data["api_ids"]),
    )


def _desc_to_json(d: ApiDescription):
    return {
        "description_id": d.description_id,
        "text": d.text,
        "stage": d.stage,
        "origin_step": d.origin_step,
        "api_unit_id": d.api_unit_id,
    }


def _desc_from_json(data) -> ApiDescription:
    return ApiDescription(
        description_id=data["description_id"],
        text=data["text"],
        stage=data["stage"],
        origin_step=data.get("origin_step"),
        api_unit_id=data.get("api_unit_id"),
    )


def record_to_json(record: GenerationRecord) -> dict:
    return {
        "task_id": record.task_id,
        "condition": record.condition,
        "sample_index": record.sample_index,
        "prompt": _bundle_to_json(record.prompt),
        "completion": record.completion,
        "candidate_source": record.candidate_source,
        "extraction_method": record.extraction_method,
        "retrieved": _retrieval_to_json(record.retrieved),
        "steps": [{"index": s.index, "text": s.text} for s in record.steps],
        "predicted": [_desc_to_json(d) for d in record.predicted],
        "extended": [_desc_to_json(d) for d in record.extended],
        "degraded": list(record.degraded),
        "failure": record.failure,
        "verdict": record.verdict,
    }


def record_from_json(data: dict) -> GenerationRecord:
    return GenerationRecord(
        task_id=data["task_id"],
        condition=data["condition"],
        sample_index=data["sample_index"],
        prompt=_bundle_from_json(data.get("prompt")),
        completion=data.get("completion"),
        candidate_source=data.get("candidate_source"),
        extraction_method=data.get("extraction_method"),
        retrieved=_retrieval_from_json(data.get("retrieved")),
        steps=[ImplementationStep(index=s["index"], text=s["text"])
               for s in data.get("steps", [])],
        predicted=[_desc_from_json(d) for d in data.get("predicted", [])],
        extended=[_desc_from_json(d) for d in data.get("extended", [])],
        degraded=list(data.get("degraded", [])),
        failure=data.get("failure"),
        verdict=data.get("verdict"),
    )


def record_key(record: GenerationRecord) -> tuple:
    return (record.task_id, record.condition, record.sample_index)


# ── run directory ────────────────────────────────────────────────────────────

@dataclass
class RunDir:
    """Append-only store for one experiment run."""

    path: Path

    def __init__(self, path):
        self.path = Path(path)

    def ensure(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        (self.path / REPORTS_DIR).mkdir(exist_ok=True)
        return self

    @property
    def records_path(self) -> Path:
        return self.path / RECORDS_FILE

    @property
    def verdicts_path(self) -> Path:
        return self.path / VERDICTS_FILE

    @property
    def manifest_path(self) -> Path:
        return self.path / MANIFEST_FILE

    @property
    def reports_dir(self) -> Path:
        return self.path / REPORTS_DIR

    def load_records(self) -> list:
        if not self.records_path.exists():
            return []
        records = []
        with open(self.records_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(record_from_json(json.loads(line)))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise RunDirError(
                        f"corrupt record at {self.records_path}:{n}: {exc}"
                    ) from exc
        return records

    def existing_keys(self) -> set:
        return {record_key(r) for r in self.load_records()}

    def append_records(self, records, skip_existing: bool = True) -> int:
        """Append records, skipping keys already on disk. Returns the number
        written. Duplicate keys with skip_existing=False raise."""
        have = self.existing_keys()
        to_write = []
        for r in records:
            key = record_key(r)
            if key in have:
                if not skip_existing:
                    raise RunDirError(f"duplicate record key {key}")
                continue
            have.add(key)
            to_write.append(r)
        if to_write:
            with open(self.records_path, "a", encoding="utf-8") as fh:
                for r in to_write:
                    fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")
        return len(to_write)

    def load_verdicts(self) -> dict:
        """Map (task_id, condition, sample_index) -> verdict dict."""
        out: dict = {}
        if not self.verdicts_path.exists():
            return out
        with open(self.verdicts_path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                    key = (data["task_id"], data["condition"], data["sample_index"])
                except (json.JSONDecodeError, KeyError) as exc:
                    raise RunDirError(
                        f"corrupt verdict at {self.verdicts_path}:{n}: {exc}"
                    ) from exc
                out.setdefault(key, data["verdict"])
        return out

    def append_verdicts(self, entries) -> int:
        """entries: iterable of (key tuple, verdict dict). Skips stored keys."""
        have = set(self.load_verdicts())
        written = 0
        with open(self.verdicts_path, "a", encoding="utf-8") as fh:
            for key, verdict in entries:
                if key in have:
                    continue
                have.add(key)
                task_id, condition, sample_index = key
                fh.write(json.dumps({
                    "task_id": task_id,
                    "condition": condition,
                    "sample_index": sample_index,
                    "verdict": verdict,
                }, sort_keys=True) + "\n")
                written += 1
        return written

    def attach_verdicts(self, records) -> list:
        """Return records with stored verdicts filled in where available."""
        verdicts = self.load_verdicts()
        for r in records:
            v = verdicts.get(record_key(r))
            if v is not None and r.verdict is None:
                r.verdict = v
        return records


class RunLock:
    """One command process per run directory, via an exclusive lock file."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / LOCK_FILE
        self._fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = ""
            try:
                holder = self.path.read_text().strip()
            except OSError:
                pass
            raise LockHeldError(
                f"run directory locked by pid {holder or 'unknown'} "
                f"({self.path}); remove the file if the process is gone"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
