"""Command-line interface.

Commands: index, generate, eval, report, cache.
Exit codes: 0 success, 1 fatal error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import templates
from .config import (
    ConfigError,
    RunConfig,
    RunManifest,
    apply_overrides,
    load_config,
    write_manifest,
)
from .corpus import (
    corpus_hash,
    corpus_windows,
    extract_corpus_api_units,
    load_api_units,
    load_manifest,
    load_tasks,
    save_api_units,
    save_manifest,
    scan_repository,
)
from .embeddings import make_embedding_provider
from .gateway import (
    ENV_API_KEY,
    ENV_BASE_URL,
    Gateway,
    GatewayConfigError,
    GatewayError,
    ReplayCache,
    transport_from_env,
)
from .metrics import (
    TaskRetrieval,
    api_count_comparison,
    dataset_pass_at_k_empirical,
    dataset_pass_at_k_estimator,
    intersection_report,
    pass_set,
    prompt_length_analysis,
    recall_metrics,
)
from .corpus import CodeWindow
from .pipeline import PipelineContext, run_condition
from .records import LockHeldError, RunDir, RunDirError, RunLock, record_key
from .reports import (
    render_comparison,
    render_containment_table,
    render_count_report,
    render_intersections,
    render_length_report,
    render_pass_table,
    render_recall_report,
)
from .sandbox import VerdictStatus, execute_candidate
from .vectorindex import build_index, load_index, save_index

ENV_EMBED_API_KEY = "ALLIANCECODER_EMBED_API_KEY"
ENV_EMBED_BASE_URL = "ALLIANCECODER_EMBED_BASE_URL"

INDEX_DIR = "index"
INDEX_META = "meta.json"
CORPUS_FILE = "corpus.manifest"
UNITS_FILE = "api_units.jsonl"
DESCRIPTIONS_FILE = "descriptions.jsonl"
API_INDEX_FILE = "api_index.bin"
WINDOWS_FILE = "windows.jsonl"
WINDOW_INDEX_FILE = "window_index.bin"

_EPILOG = """\
environment variables:
  ALLIANCECODER_API_KEY         chat-completion API key (live/record modes)
  ALLIANCECODER_BASE_URL        chat-completion base URL (live/record modes)
  ALLIANCECODER_EMBED_API_KEY   embedding API key (http embedding provider)
  ALLIANCECODER_EMBED_BASE_URL  embedding base URL (http embedding provider)

exit codes: 0 success, 1 fatal error, 2 configuration error
"""


class CliError(RuntimeError):
    """Fatal command error; maps to exit code 1."""


# ── shared plumbing ──────────────────────────────────────────────────────────

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alliancecoder",
        description="Retrieval-augmented repository-level code generation toolkit.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a run config JSON file")
    common.add_argument("--mode", choices=("live", "record", "replay"))
    common.add_argument("--model")
    common.add_argument("--temperature", type=float)
    common.add_argument("-k", "--k-samples", dest="k_samples", type=int)
    common.add_argument("--corpus-root", dest="corpus_root")
    common.add_argument("--benchmark-dir", dest="benchmark_dir")
    common.add_argument("--run-dir", dest="run_dir")
    common.add_argument("--cache", dest="cache_path")
    common.add_argument("--source-mode", dest="source_mode",
                        choices=("text_description", "raw_code"))
    common.add_argument("--embed-dim", dest="embed_dim", type=int)
    common.add_argument("--embed-seed", dest="embed_seed", type=int)
    common.add_argument("--window-size", dest="window_size", type=int)
    common.add_argument("--stride", dest="stride", type=int)

    p_index = sub.add_parser(
        "index", parents=[common],
        help="scan the corpus, describe APIs, build the retrieval indexes",
    )
    p_index.add_argument("--force", action="store_true",
                         help="rebuild even if the index is up to date")

    p_gen = sub.add_parser(
        "generate", parents=[common],
        help="run generation conditions over benchmark tasks",
    )
    p_gen.add_argument("--task", action="append", dest="tasks",
                       help="task id to run (repeatable; default: all)")
    p_gen.add_argument("--condition", action="append", dest="conditions",
                       help="condition name or 'all8' (repeatable)")

    p_eval = sub.add_parser(
        "eval", parents=[common],
        help="execute candidates in the sandbox and render reports",
    )
    p_eval.add_argument("--report", choices=("tables", "all"), default="all",
                        help="which reports to render (default: all)")

    p_report = sub.add_parser(
        "report", help="merge evaluated run directories into one comparison table",
    )
    p_report.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")

    p_cache = sub.add_parser(
        "cache", parents=[common], help="inspect or export the replay cache",
    )
    p_cache.add_argument("--export", dest="export_path",
                         help="write a deduplicated copy of the cache here")
    return parser


_OVERRIDE_FIELDS = (
    "mode", "model", "temperature", "k_samples", "corpus_root", "benchmark_dir",
    "run_dir", "cache_path", "source_mode", "embed_dim", "embed_seed",
    "window_size", "stride",
)


def _resolve_config(args, need: tuple = (), check_replay_cache: bool = True) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {name: getattr(args, name, None) for name in _OVERRIDE_FIELDS}
    if getattr(args, "conditions", None):
        overrides["conditions"] = args.conditions
    cfg = apply_overrides(cfg, **overrides)
    if not check_replay_cache and cfg.mode == "replay" and not cfg.cache_path:
        pass  # cache command can inspect nothing only via explicit flag
    cfg = cfg.validate() if check_replay_cache else cfg
    for attr in need:
        if not getattr(cfg, attr):
            raise ConfigError(f"{attr} is required (set it in the config file "
                              f"or pass --{attr.replace('_', '-')})")
    return cfg


def _make_provider(cfg: RunConfig):
    return make_embedding_provider(
        cfg.embed_provider, dim=cfg.embed_dim, seed=cfg.embed_seed,
    )


def _build_gateway(cfg: RunConfig) -> Gateway:
    cache = ReplayCache(cfg.cache_path) if cfg.cache_path else None
    transport = None
    if cfg.mode in ("live", "record"):
        transport = transport_from_env()
    return Gateway(cfg.mode, cache=cache, transport=transport,
                   max_in_flight=cfg.max_in_flight)


def _index_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run_dir) / INDEX_DIR


def _index_fingerprint(cfg: RunConfig, chash: str, provider) -> dict:
    return {
        "corpus_hash": chash,
        "provider_id": provider.provider_id,
        "source_mode": cfg.source_mode,
        "template_versions": dict(templates.TEMPLATE_VERSIONS),
        "window_size": cfg.window_size,
        "stride": cfg.stride,
        "model": cfg.model if cfg.source_mode == "text_description" else "",
    }


def _read_meta(idx: Path) -> dict | None:
    meta_path = idx / INDEX_META
    if not meta_path.exists():
        return None
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None


def _write_meta(idx: Path, fingerprint: dict, stages: dict) -> None:
    tmp = idx / (INDEX_META + ".tmp")
    tmp.write_text(json.dumps({**fingerprint, "stages": stages},
                              indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(idx / INDEX_META)


# ── index ────────────────────────────────────────────────────────────────────

def cmd_index(args, out=None) -> int:
    out = out if out is not None else sys.stdout
    cfg = _resolve_config(args, need=("corpus_root", "run_dir"))
    manifest = scan_repository(cfg.corpus_root, exclude_globs=list(cfg.exclude_globs))
    chash = corpus_hash(manifest)
    provider = _make_provider(cfg)
    fingerprint = _index_fingerprint(cfg, chash, provider)

    idx = _index_dir(cfg)
    idx.mkdir(parents=True, exist_ok=True)
    meta = _read_meta(idx)
    stages: dict = {}
    if meta is not None and {k: meta.get(k) for k in fingerprint} == fingerprint:
        stages = dict(meta.get("stages", {}))
        if not args.force and all(
            stages.get(s) for s in ("corpus", "descriptions", "api_index", "windows")
        ):
            print(f"index up to date ({idx})", file=out)
            return 0
    if args.force:
        stages = {}

    units, skipped = extract_corpus_api_units(manifest)
    for path, err in skipped:
        print(f"warning: skipped unparsable file {path}: {err}", file=sys.stderr)

    if not stages.get("corpus"):
        save_manifest(manifest, idx / CORPUS_FILE)
        save_api_units(units, idx / UNITS_FILE)
        stages["corpus"] = True
        _write_meta(idx, fingerprint, stages)

    llm_calls = 0
    if not stages.get("descriptions"):
        if cfg.source_mode == "text_description":
            gw = _build_gateway(cfg)
            descriptions, degraded = describe_units(units, gw, cfg)
            llm_calls = gw.stats["llm_calls"]
            if degraded:
                print(f"warning: {len(degraded)} description(s) degraded to "
                      f"docstring/signature fallback", file=sys.stderr)
        else:
            descriptions = [
                {"api_unit_id": u.id, "text": u.body, "stage": "raw"} for u in units
            ]
        with open(idx / DESCRIPTIONS_FILE, "w", encoding="utf-8") as fh:
            for d in descriptions:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        stages["descriptions"] = True
        _write_meta(idx, fingerprint, stages)

    if not stages.get("api_index"):
        with open(idx / DESCRIPTIONS_FILE, encoding="utf-8") as fh:
            descriptions = [json.loads(line) for line in fh if line.strip()]
        items = [(f"repo:{d['api_unit_id']}", d["text"]) for d in descriptions]
        api_index = build_index(items, provider, cfg.source_mode)
        save_index(api_index, idx / API_INDEX_FILE)
        stages["api_index"] = True
        _write_meta(idx, fingerprint, stages)

    if not stages.get("windows"):
        windows = corpus_windows(manifest, cfg.window_size, cfg.stride)
        with open(idx / WINDOWS_FILE, "w", encoding="utf-8") as fh:
            for w in windows:
                fh.write(json.dumps({
                    "path": w.path, "start_line": w.start_line,
                    "end_line": w.end_line, "text": w.text,
                }, sort_keys=True) + "\n")
        window_index = build_index(
            [(w.key(), w.text) for w in windows], provider, "raw_code"
        )
        save_index(window_index, idx / WINDOW_INDEX_FILE)
        stages["windows"] = True
        _write_meta(idx, fingerprint, stages)

    print(f"indexed {len(units)} API units from {len(manifest.files)} files "
          f"({llm_calls} LLM calls, corpus {chash[:12]})", file=out)
    return 0


def describe_units(units, gw: Gateway, cfg: RunConfig):
    from .pipeline import describe_repository_apis

    descs, degraded = describe_repository_apis(units, gw, cfg.model, cfg.temperature)
    rows = [
        {
            "api_unit_id": d.api_unit_id,
            "text": d.text,
            "stage": d.stage,
            "degraded": d.api_unit_id in degraded,
        }
        for d in descs
    ]
    return rows, degraded


# ── generate ─────────────────────────────────────────────────────────────────

class IndexArtifacts:
    def __init__(self, manifest, units, api_index, windows_by_key, window_index, meta):
        self.manifest = manifest
        self.units = units
        self.table = {u.id: u for u in units}
        self.api_index = api_index
        self.windows_by_key = windows_by_key
        self.window_index = window_index
        self.meta = meta


def _load_artifacts(cfg: RunConfig, provider) -> IndexArtifacts:
    idx = _index_dir(cfg)
    meta = _read_meta(idx)
    required = ("corpus", "descriptions", "api_index", "windows")
    if meta is None or not all(meta.get("stages", {}).get(s) for s in required):
        raise CliError(f"no complete index under {idx}; run 'alliancecoder index' first")
    manifest = load_manifest(idx / CORPUS_FILE)
    units = load_api_units(idx / UNITS_FILE)
    api_index = load_index(idx / API_INDEX_FILE)
    window_index = load_index(idx / WINDOW_INDEX_FILE)
    if api_index.provider_id != provider.provider_id:
        raise ConfigError(
            f"index built with embedding provider {api_index.provider_id}, "
            f"current config gives {provider.provider_id}; re-run index"
        )
    current = corpus_hash(scan_repository(cfg.corpus_root,
                                          exclude_globs=list(cfg.exclude_globs)))
    if current != meta["corpus_hash"]:
        raise CliError("corpus changed since indexing; re-run 'alliancecoder index'")
    windows_by_key = {}
    with open(idx / WINDOWS_FILE, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                w = CodeWindow(path=d["path"], start_line=d["start_line"],
                               end_line=d["end_line"], text=d["text"])
                windows_by_key[w.key()] = w
    return IndexArtifacts(manifest, units, api_index, windows_by_key,
                          window_index, meta)


def _select_tasks(cfg: RunConfig, artifacts: IndexArtifacts, wanted):
    tasks = load_tasks(cfg.benchmark_dir, artifacts.manifest, artifacts.units)
    by_id = {t.task_id: t for t in tasks}
    if not wanted:
        return [by_id[t] for t in sorted(by_id)]
    missing = sorted(set(wanted) - set(by_id))
    if missing:
        raise CliError(
            f"unknown task id(s): {', '.join(missing)}; "
            f"available: {', '.join(sorted(by_id))}"
        )
    return [by_id[t] for t in wanted]


def cmd_generate(args, out=None) -> int:
    out = out if out is not None else sys.stdout
    cfg = _resolve_config(args, need=("corpus_root", "benchmark_dir", "run_dir"))
    provider = _make_provider(cfg)
    artifacts = _load_artifacts(cfg, provider)
    tasks = _select_tasks(cfg, artifacts, args.tasks)
    conditions = cfg.expanded_conditions()
    gw = _build_gateway(cfg)
    ctx = PipelineContext(
        model=cfg.model, temperature=cfg.temperature, k_samples=cfg.k_samples,
        api_units=artifacts.units, api_table=artifacts.table,
        embed_provider=provider, api_index=artifacts.api_index,
        window_index=artifacts.window_index, windows_by_key=artifacts.windows_by_key,
        top_k_similar=cfg.top_k_similar, token_budget=cfg.token_budget,
        examples_per_stage=cfg.examples_per_stage,
    )
    rd = RunDir(cfg.run_dir).ensure()
    written = skipped = 0
    with RunLock(cfg.run_dir):
        manifest = RunManifest.start(cfg, artifacts.meta["corpus_hash"])
        write_manifest(manifest, rd.manifest_path)
        existing = rd.existing_keys()
        for task in tasks:
            for name in conditions:
                keys = {(task.task_id, name, i) for i in range(1, cfg.k_samples + 1)}
                if keys <= existing:
                    skipped += len(keys)
                    continue
                records = run_condition(task, name, gw, ctx)
                written += rd.append_records(records)
        manifest.finalize({
            "records_written": written,
            "records_skipped": skipped,
            "llm_calls": gw.stats["llm_calls"],
            "cache_hits": gw.stats["cache_hits"],
        })
        write_manifest(manifest, rd.manifest_path)
    print(f"generated {written} record(s) ({skipped} already present) "
          f"across {len(tasks)} task(s) x {len(conditions)} condition(s)", file=out)
    return 0


# ── eval ─────────────────────────────────────────────────────────────────────

def _verdict_for(record, task, cfg: RunConfig):
    if record.candidate_source is None:
        return {
            "status": VerdictStatus.CANDIDATE_UNPARSABLE.value,
            "tests": [],
            "wall_time": 0.0,
            "network_isolated": False,
            "note": record.failure or "no candidate extracted",
        }
    verdict = execute_candidate(record.candidate_source, task, cfg.corpus_root,
                                cfg.sandbox_limits())
    return verdict.as_dict()


def _run_sandbox(records, tasks_by_id, cfg: RunConfig, rd: RunDir, out) -> int:
    stored = rd.load_verdicts()
    todo = [r for r in records if record_key(r) not in stored]
    if not todo:
        return 0
    results = {}
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        futures = {
            record_key(r): pool.submit(_verdict_for, r, tasks_by_id[r.task_id], cfg)
            for r in todo
        }
        for key, fut in futures.items():
            results[key] = fut.result()
    entries = [(key, results[key]) for key in sorted(results)]
    n = rd.append_verdicts(entries)
    print(f"executed {n} candidate(s) in the sandbox", file=out)
    return n


def _status_matrix(records, verdicts):
    """condition -> task -> [status string ordered by sample_index]."""
    by_cond: dict = {}
    for r in sorted(records, key=record_key):
        v = verdicts.get(record_key(r))
        if v is None:
            continue
        by_cond.setdefault(r.condition, {}).setdefault(r.task_id, []).append(
            v["status"]
        )
    return by_cond


def _pass_summaries(by_cond, ks=(1, 3, 5)):
    """Per-condition Pass@k estimator values plus the empirical any-pass."""
    summary: dict = {}
    empirical: dict = {}
    for cond, tasks in by_cond.items():
        ns = {len(statuses) for statuses in tasks.values()}
        if len(ns) != 1:
            raise CliError(f"inconsistent sample counts for condition {cond}: {sorted(ns)}")
        n = ns.pop()
        counts = [
            (n, sum(1 for s in statuses if s == VerdictStatus.PASS.value))
            for statuses in tasks.values()
        ]
        summary[cond] = {
            k: dataset_pass_at_k_estimator(counts, k) for k in ks if k <= n
        }
        empirical[cond] = {
            n: dataset_pass_at_k_empirical(list(tasks.values()), n)
        }
    return summary, empirical


def _bool_matrix(by_cond):
    return {
        cond: {
            task: [s == VerdictStatus.PASS.value for s in statuses]
            for task, statuses in tasks.items()
        }
        for cond, tasks in by_cond.items()
    }


def _context_contained(task, table) -> frozenset:
    return frozenset(
        uid for uid in task.oracle_apis
        if uid in table and table[uid].body and table[uid].body in task.context_block
    )


def _write_report(rd: RunDir, name: str, text: str, out) -> None:
    path = rd.reports_dir / name
    path.write_text(text + "\n", encoding="utf-8")
    print(f"\n{text}", file=out)


def cmd_eval(args, out=None) -> int:
    out = out if out is not None else sys.stdout
    cfg = _resolve_config(args, need=("corpus_root", "benchmark_dir", "run_dir"))
    rd = RunDir(cfg.run_dir).ensure()
    records = rd.load_records()
    if not records:
        raise CliError(f"no records in run directory {cfg.run_dir}; "
                       f"run 'alliancecoder generate' first")
    manifest = scan_repository(cfg.corpus_root, exclude_globs=list(cfg.exclude_globs))
    units, _ = extract_corpus_api_units(manifest)
    table = {u.id: u for u in units}
    tasks = load_tasks(cfg.benchmark_dir, manifest, units)
    tasks_by_id = {t.task_id: t for t in tasks}
    unknown = sorted({r.task_id for r in records} - set(tasks_by_id))
    if unknown:
        raise CliError(f"records reference unknown task(s): {', '.join(unknown)}")

    with RunLock(cfg.run_dir):
        _run_sandbox(records, tasks_by_id, cfg, rd, out)
        verdicts = rd.load_verdicts()
        by_cond = _status_matrix(records, verdicts)
        if not by_cond:
            raise CliError("no verdicts available to report on")
        summary, empirical = _pass_summaries(by_cond)
        _write_report(rd, "pass_table.txt", render_pass_table(summary), out)
        emp_lines = ["Empirical any-pass rate (percent, k = samples per task)"]
        for cond in sorted(empirical):
            for n, p in empirical[cond].items():
                emp_lines.append(f"  {cond} (k={n}): {p.as_percent_str()}")
        _write_report(rd, "pass_empirical.txt", "\n".join(emp_lines), out)

        if args.report == "tables":
            return 0

        bools = _bool_matrix(by_cond)
        vacuous = {t.task_id for t in tasks if not t.oracle_apis}

        # retrieval-quality reports for conditions that predict their APIs
        for cond in sorted(by_cond):
            cond_records = [r for r in records
                            if r.condition == cond and r.sample_index == 1]
            if not any(r.retrieved is not None and r.steps for r in cond_records):
                continue
            rows = []
            for r in cond_records:
                task = tasks_by_id[r.task_id]
                retrieved = frozenset(r.retrieved.api_ids) if r.retrieved else frozenset()
                rows.append(TaskRetrieval(
                    task_id=r.task_id,
                    retrieved=retrieved,
                    oracle=frozenset(task.oracle_apis),
                    context_contained=_context_contained(task, table),
                ))
            passed = pass_set(bools.get(cond, {}))
            conapi_passed = pass_set(bools.get("ConAPI", {}))
            recall = recall_metrics(rows, passed, conapi_passed)
            _write_report(rd, f"recall_{cond}.txt",
                          render_recall_report(recall, cond), out)
            scored = [r for r in rows if r.oracle]
            if scored:
                counts = api_count_comparison(rows)
                _write_report(rd, f"count_{cond}.txt",
                              render_count_report(counts, cond), out)

        # cross-condition intersection analyses need a shared task set
        if len(bools) > 1:
            common = set.intersection(*(set(t) for t in bools.values()))
            if not common:
                print("warning: no common tasks across conditions; "
                      "skipping intersection analyses", file=sys.stderr)
            else:
                narrowed = {
                    cond: {t: samples for t, samples in tasks_.items() if t in common}
                    for cond, tasks_ in bools.items()
                }
                dropped = {t for tasks_ in bools.values() for t in tasks_} - common
                if dropped:
                    print(f"warning: conditions cover different tasks; "
                          f"intersection analyses restricted to {len(common)} "
                          f"common task(s)", file=sys.stderr)
                containment = {
                    t: tasks_by_id[t].containment.value for t in common
                }
                report = intersection_report(narrowed, containment,
                                             vacuous_tasks=vacuous)
                _write_report(rd, "intersections.txt",
                              render_intersections(report), out)
                if report.containment:
                    _write_report(rd, "containment.txt",
                                  render_containment_table(report), out)
                if "API" in report.pass_sets and "ConAPI" in report.pass_sets:
                    lengths = {
                        r.task_id: r.prompt.token_estimate
                        for r in records
                        if r.condition == "ConAPI" and r.sample_index == 1 and r.prompt
                    }
                    api_p = report.pass_sets["API"]
                    con_p = report.pass_sets["ConAPI"]
                    partition = {
                        "both_pass": api_p & con_p,
                        "api_only_pass": api_p - con_p,
                    }
                    summaries = prompt_length_analysis(lengths, partition)
                    _write_report(rd, "prompt_lengths.txt",
                                  render_length_report(summaries), out)
    return 0


# ── report ───────────────────────────────────────────────────────────────────

def cmd_report(args, out=None) -> int:
    out = out if out is not None else sys.stdout
    labeled = []
    task_sets = []
    loaded = []
    for dir_path in args.run_dirs:
        rd = RunDir(dir_path)
        records = rd.load_records()
        verdicts = rd.load_verdicts()
        if not records or not verdicts:
            raise CliError(f"run directory {dir_path} has no evaluated records")
        by_cond = _status_matrix(records, verdicts)
        tasks = {t for tasks_ in by_cond.values() for t in tasks_}
        task_sets.append(tasks)
        loaded.append((Path(dir_path).name, by_cond))

    common = set.intersection(*task_sets)
    mismatched = any(ts != common for ts in task_sets)
    if mismatched:
        if not common:
            raise CliError("run directories share no tasks; nothing to compare")
        print(f"warning: run directories cover different task sets; "
              f"comparing the {len(common)} common task(s) only", file=sys.stderr)

    for label, by_cond in loaded:
        narrowed = {
            cond: {t: s for t, s in tasks_.items() if t in common}
            for cond, tasks_ in by_cond.items()
        }
        narrowed = {cond: tasks_ for cond, tasks_ in narrowed.items() if tasks_}
        summary, _ = _pass_summaries(narrowed)
        for cond in sorted(summary):
            labeled.append((f"{label}/{cond}", summary[cond]))
    print(render_comparison(labeled), file=out)
    return 0


# ── cache ────────────────────────────────────────────────────────────────────

def cmd_cache(args, out=None) -> int:
    out = out if out is not None else sys.stdout
    cfg = _resolve_config(args, check_replay_cache=False)
    path = cfg.cache_path
    if not path:
        raise ConfigError("cache path required (config cache_path or --cache)")
    if not Path(path).exists():
        raise ConfigError(f"replay cache not found: {path}")
    cache = ReplayCache(path)
    print(f"cache: {path}", file=out)
    print(f"records: {len(cache)}", file=out)
    for stage, count in sorted(cache.stage_counts().items()):
        print(f"  {stage}: {count}", file=out)
    if args.export_path:
        dest = Path(args.export_path)
        dest.parent.mkdir(parents=True, exist_ok=True)
        exported = ReplayCache(dest)
        for key, (stage, text) in cache.entries():
            if exported.get(key) is None:
                exported.append(key, stage, text)
        print(f"exported {len(exported)} record(s) to {dest}", file=out)
    return 0


# ── entry point ──────────────────────────────────────────────────────────────

_COMMANDS = {
    "index": cmd_index,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "report": cmd_report,
    "cache": cmd_cache,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, GatewayConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, LockHeldError, RunDirError, GatewayError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
