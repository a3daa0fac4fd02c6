"""Repository corpus extraction.

Scans a checked-out repository, pulls out its callable API units (top-level
functions and class methods), slices file contexts and sliding windows, and
statically resolves which units a piece of code invokes. All outputs are
deterministic for identical input bytes so manifests and unit ids can be
compared across machines and runs.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatch
from pathlib import Path

DEFAULT_INCLUDE_GLOBS = ("*.py",)
DEFAULT_EXCLUDE_GLOBS = ()
# directory names never descended into
PRUNED_DIRS = {".git", ".hg", ".svn", "__pycache__", ".venv", "venv", "node_modules", ".tox", ".mypy_cache", ".pytest_cache"}


@dataclass(frozen=True)
class Span:
    """Inclusive 1-based line range."""

    start: int
    end: int

    def overlaps(self, other: "Span") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass(frozen=True)
class SourceFile:
    path: str  # repository-relative, posix separators
    text: str
    line_count: int


@dataclass
class CorpusManifest:
    root: str
    files: list[SourceFile]
    warnings: list[dict]

    def get(self, path: str) -> SourceFile:
        for f in self.files:
            if f.path == path:
                return f
        raise KeyError(f"no such file in corpus: {path}")


@dataclass(frozen=True)
class ApiUnit:
    """One callable extracted from the corpus."""

    id: str
    qualified_name: str  # dotted module path + optional class + name
    signature: str       # parenthesized parameter list text
    doc: str | None
    body: str            # full source segment, decorators included
    path: str
    span: Span


@dataclass(frozen=True)
class CodeWindow:
    path: str
    start_line: int
    end_line: int
    text: str

    def key(self) -> str:
        return f"{self.path}:{self.start_line}-{self.end_line}"

    def span(self) -> Span:
        return Span(self.start_line, self.end_line)


class ContainmentClass(str, Enum):
    FULLY_CONTAINED = "FullyContained"
    PARTIALLY_CONTAINED = "PartiallyContained"
    NOT_INCLUDED = "NotIncluded"


@dataclass
class GenerationTask:
    task_id: str
    query: str
    context_block: str
    target_path: str
    target_span: Span
    reference_solution: str
    test_suite: list[str]
    oracle_apis: frozenset[str]
    containment: ContainmentClass | None = None
    diagnostics: list[str] = field(default_factory=list)


def _matches_any(rel: str, patterns) -> bool:
    base = rel.rsplit("/", 1)[-1]
    for pat in patterns:
        if fnmatch(rel, pat):
            return True
        if "/" not in pat and fnmatch(base, pat):
            return True
    return False


def scan_repository(root, include_globs=None, exclude_globs=None) -> CorpusManifest:
    """Walk `root` and collect decodable source files passing the glob filters.

    Excluded, non-matching, empty, and undecodable files are omitted; the
    undecodable ones are recorded as warnings instead of aborting the scan.
    """
    root = Path(root)
    include = tuple(include_globs) if include_globs else DEFAULT_INCLUDE_GLOBS
    exclude = tuple(exclude_globs) if exclude_globs else DEFAULT_EXCLUDE_GLOBS
    files: list[SourceFile] = []
    warnings: list[dict] = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in PRUNED_DIRS and not d.startswith("."))
        for name in sorted(filenames):
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            if not _matches_any(rel, include) or _matches_any(rel, exclude):
                continue
            try:
                text = full.read_text(encoding="utf-8")
            except (UnicodeDecodeError, OSError) as exc:
                warnings.append({"path": rel, "reason": f"unreadable: {exc}"})
                continue
            if not text:
                continue
            files.append(SourceFile(path=rel, text=text, line_count=len(text.splitlines())))
    files.sort(key=lambda f: f.path)
    return CorpusManifest(root=str(root), files=files, warnings=warnings)


def module_name(path: str) -> str:
    parts = Path(path).with_suffix("").as_posix().split("/")
    if parts[-1] == "__init__":
        parts = parts[:-1]
    return ".".join(parts)


def _unit_id(path: str, qualified_name: str, signature: str) -> str:
    digest = hashlib.sha256(f"{path}\x00{qualified_name}\x00{signature}".encode("utf-8"))
    return digest.hexdigest()[:16]


def _make_unit(src: SourceFile, mod: str, cls: str | None, node) -> ApiUnit:
    qualified = f"{mod}.{cls}.{node.name}" if cls else f"{mod}.{node.name}"
    signature = f"({ast.unparse(node.args)})"
    start = node.lineno
    if node.decorator_list:
        start = min(start, min(d.lineno for d in node.decorator_list))
    end = node.end_lineno
    lines = src.text.splitlines()
    body = "\n".join(lines[start - 1:end])
    return ApiUnit(
        id=_unit_id(src.path, qualified, signature),
        qualified_name=qualified,
        signature=signature,
        doc=ast.get_docstring(node),
        body=body,
        path=src.path,
        span=Span(start, end),
    )


def extract_api_units(src: SourceFile) -> list[ApiUnit]:
    """Extract callable units: top-level functions and class methods.

    Constructors count as units; closures nested inside functions do not.
    Raises SyntaxError on unparsable files; use extract_corpus_api_units for
    the skip-and-record behavior.
    """
    tree = ast.parse(src.text)
    mod = module_name(src.path)
    units: list[ApiUnit] = []
    for node in tree.body:
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            units.append(_make_unit(src, mod, None, node))
        elif isinstance(node, ast.ClassDef):
            for item in node.body:
                if isinstance(item, (ast.FunctionDef, ast.AsyncFunctionDef)):
                    units.append(_make_unit(src, mod, node.name, item))
    units.sort(key=lambda u: u.span.start)
    return units


def extract_corpus_api_units(manifest: CorpusManifest):
    """Extract units for every file; a file that fails to parse is skipped
    and recorded, never fatal."""
    units: list[ApiUnit] = []
    errors: list[dict] = []
    for f in manifest.files:
        try:
            units.extend(extract_api_units(f))
        except SyntaxError as exc:
            errors.append({"path": f.path, "reason": f"parse failure: {exc}"})
    return units, errors


def extract_context(target_path: str, target_span: Span, manifest: CorpusManifest) -> str:
    """Verbatim file prefix preceding the target definition."""
    f = manifest.get(target_path)
    if target_span.start < 1 or target_span.end > f.line_count or target_span.start > target_span.end:
        raise ValueError(
            f"target span {target_span.start}-{target_span.end} outside {target_path} "
            f"({f.line_count} lines)"
        )
    lines = f.text.splitlines(keepends=True)
    return "".join(lines[: target_span.start - 1])


def chunk_windows(src: SourceFile, window_size: int = 20, stride: int = 10) -> list[CodeWindow]:
    """Sliding line windows covering the whole file; the tail may be short."""
    if window_size < 1:
        raise ValueError(f"window_size must be >= 1, got {window_size}")
    if not 1 <= stride <= window_size:
        raise ValueError(f"stride must be in 1..window_size, got {stride}")
    lines = src.text.splitlines()
    windows: list[CodeWindow] = []
    start = 1
    while start <= src.line_count:
        end = min(start + window_size - 1, src.line_count)
        windows.append(
            CodeWindow(path=src.path, start_line=start, end_line=end,
                       text="\n".join(lines[start - 1:end]))
        )
        start += stride
    return windows


def corpus_windows(manifest: CorpusManifest, window_size: int = 20, stride: int = 10) -> list[CodeWindow]:
    out: list[CodeWindow] = []
    for f in manifest.files:
        out.extend(chunk_windows(f, window_size, stride))
    return out


def _dotted(expr) -> str | None:
    if isinstance(expr, ast.Name):
        return expr.id
    if isinstance(expr, ast.Attribute):
        prefix = _dotted(expr.value)
        return f"{prefix}.{expr.attr}" if prefix else None
    return None


def _alias_map(tree) -> dict[str, str]:
    aliases: dict[str, str] = {}
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for a in node.names:
                aliases[a.asname or a.name.split(".")[0]] = a.name if a.asname else a.name.split(".")[0]
        elif isinstance(node, ast.ImportFrom) and node.module and node.level == 0:
            for a in node.names:
                aliases[a.asname or a.name] = f"{node.module}.{a.name}"
    return aliases


def _suffix_table(api_table) -> dict[str, set[str]]:
    # every dot-suffix of each matchable name, so call sites can use any tail
    table: dict[str, set[str]] = {}
    for unit in api_table:
        names = [unit.qualified_name]
        if unit.qualified_name.endswith(".__init__"):
            names.append(unit.qualified_name[: -len(".__init__")])
        for name in names:
            parts = name.split(".")
            for i in range(len(parts)):
                table.setdefault(".".join(parts[i:]), set()).add(unit.id)
    return table


def extract_invoked_apis(reference_solution: str, api_table) -> tuple[set[str], list[str]]:
    """Statically resolve the API units a code text invokes.

    Name-based: a call site resolves when its dotted name (after following
    import aliases one level) is an unambiguous suffix of exactly one unit's
    qualified name. Constructors are matchable through their class name.
    Unresolvable or ambiguous calls are omitted. An unparsable input yields
    an empty set plus a diagnostic instead of an error.
    """
    diagnostics: list[str] = []
    try:
        tree = ast.parse(reference_solution)
    except SyntaxError as exc:
        return set(), [f"reference unparsable: {exc}"]
    aliases = _alias_map(tree)
    suffixes = _suffix_table(api_table)
    found: set[str] = set()
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        dotted = _dotted(node.func)
        if not dotted:
            continue
        parts = dotted.split(".")
        if parts[0] in ("self", "cls"):
            parts = parts[1:]
            if not parts:
                continue
        head = aliases.get(parts[0])
        if head:
            parts = head.split(".") + parts[1:]
        candidate = ".".join(parts)
        matches = suffixes.get(candidate, set())
        if len(matches) == 1:
            found.add(next(iter(matches)))
        elif len(matches) > 1:
            diagnostics.append(f"ambiguous call suffix skipped: {candidate}")
    return found, diagnostics


def classify_containment(context: str, oracle_units) -> ContainmentClass:
    """Containment of the oracle units' definitions inside a context text.

    Empty oracle sets classify FullyContained vacuously; callers exclude
    those tasks from containment reporting.
    """
    units = list(oracle_units)
    if not units:
        return ContainmentClass.FULLY_CONTAINED
    present = sum(1 for u in units if u.body in context)
    if present == len(units):
        return ContainmentClass.FULLY_CONTAINED
    if present == 0:
        return ContainmentClass.NOT_INCLUDED
    return ContainmentClass.PARTIALLY_CONTAINED


def corpus_hash(manifest: CorpusManifest) -> str:
    h = hashlib.sha256()
    for f in manifest.files:
        h.update(f.path.encode("utf-8"))
        h.update(b"\x00")
        h.update(f.text.encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()


def load_tasks(benchmark_dir, manifest: CorpusManifest, api_table) -> list[GenerationTask]:
    """Load generation tasks from a benchmark directory.

    One subdirectory per task holding query.txt, target.json (path + span),
    solution.py (the reference definition), and tests.txt (one runnable test
    command per line). Context, oracle APIs, and containment are derived here
    so downstream stages get a fully resolved task.
    """
    root = Path(benchmark_dir)
    if not root.is_dir():
        raise ValueError(f"benchmark directory not found: {root}")
    units_by_id = {u.id: u for u in api_table}
    tasks: list[GenerationTask] = []
    for task_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        query = (task_dir / "query.txt").read_text(encoding="utf-8").strip()
        target = json.loads((task_dir / "target.json").read_text(encoding="utf-8"))
        reference = (task_dir / "solution.py").read_text(encoding="utf-8")
        test_suite = [
            line.strip()
            for line in (task_dir / "tests.txt").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        if not test_suite:
            raise ValueError(f"task {task_dir.name} has an empty test suite")
        span = Span(target["start"], target["end"])
        context = extract_context(target["path"], span, manifest)
        oracle, diagnostics = extract_invoked_apis(reference, api_table)
        containment = classify_containment(
            context, [units_by_id[i] for i in oracle]
        )
        tasks.append(GenerationTask(
            task_id=task_dir.name,
            query=query,
            context_block=context,
            target_path=target["path"],
            target_span=span,
            reference_solution=reference,
            test_suite=test_suite,
            oracle_apis=frozenset(oracle),
            containment=containment,
            diagnostics=diagnostics,
        ))
    return tasks


# ── persistence: line-delimited records ──────────────────────────────────────

def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"root": manifest.root, "warnings": manifest.warnings}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for f in manifest.files:
            fh.write(json.dumps(
                {"path": f.path, "text": f.text, "line_count": f.line_count},
                sort_keys=True,
            ) + "\n")


def load_manifest(path) -> CorpusManifest:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        files = [SourceFile(**json.loads(line)) for line in fh if line.strip()]
    return CorpusManifest(root=header["root"], files=files, warnings=header["warnings"])


def save_api_units(units, path) -> None:
    ordered = sorted(units, key=lambda u: (u.path, u.span.start))
    with open(path, "w", encoding="utf-8") as fh:
        for u in ordered:
            fh.write(json.dumps({
                "id": u.id,
                "qualified_name": u.qualified_name,
                "signature": u.signature,
                "doc": u.doc,
                "body": u.body,
                "path": u.path,
                "span": {"start": u.span.start, "end": u.span.end},
            }, sort_keys=True) + "\n")


def load_api_units(path) -> list[ApiUnit]:
    units: list[ApiUnit] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            units.append(ApiUnit(
                id=rec["id"],
                qualified_name=rec["qualified_name"],
                signature=rec["signature"],
                doc=rec["doc"],
                body=rec["body"],
                path=rec["path"],
                span=Span(rec["span"]["start"], rec["span"]["end"]),
            ))
    return units
