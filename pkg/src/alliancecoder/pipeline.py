"""Generation pipeline: conditions, query-stage chain, prompt assembly, runs.

The study matrix crosses three prompt ingredients: the target file context,
similar code windows, and API units. The eight study conditions use oracle
API sets; the AllianceCoder condition predicts its API set through a staged
chain: decompose the query into steps, describe the helper APIs each step
needs, split composite descriptions, then retrieve the top-scoring unit per
description and deduplicate.

Prompt blocks always render in the order: API units, similar code, file
context, query. The query is always last.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from . import templates
from .corpus import ApiUnit, CodeWindow, GenerationTask
from .gateway import (
    CandidateUnparsableError,
    ChatRequest,
    Gateway,
    GatewayConfigError,
    TransportError,
    estimate_tokens,
    extract_code,
)
from .vectorindex import ApiRetrievalSet, VectorIndex, retrieve_apis, retrieve_similar


class AssemblyError(RuntimeError):
    pass


# ── conditions ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Condition:
    name: str
    use_context: bool
    use_similar: bool
    use_api: bool
    api_source: str | None  # "oracle" | "predicted" | None

    def signature(self) -> tuple:
        return (self.use_context, self.use_similar, self.use_api,
                self.api_source if self.use_api else None)


CONDITIONS: dict[str, Condition] = {
    c.name: c
    for c in (
        Condition("Pure", False, False, False, None),
        Condition("Context", True, False, False, None),
        Condition("Similar", False, True, False, None),
        Condition("API", False, False, True, "oracle"),
        Condition("ConSim", True, True, False, None),
        Condition("ConAPI", True, False, True, "oracle"),
        Condition("SimAPI", False, True, True, "oracle"),
        Condition("ConSimAPI", True, True, True, "oracle"),
        Condition("AllianceCoder", True, False, True, "predicted"),
    )
}

STUDY_CONDITIONS = ("Pure", "Context", "Similar", "API", "ConSim", "ConAPI", "SimAPI", "ConSimAPI")


def get_condition(name: str) -> Condition:
    try:
        return CONDITIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown condition {name!r}; valid: {', '.join(CONDITIONS)}"
        ) from None


# ── query-stage artifacts ────────────────────────────────────────────────────

@dataclass(frozen=True)
class ImplementationStep:
    index: int  # 1-based
    text: str


@dataclass(frozen=True)
class ApiDescription:
    description_id: str
    text: str
    stage: str  # "repo" | "predicted" | "extended"
    origin_step: int | None = None
    api_unit_id: str | None = None  # repo stage only


@dataclass(frozen=True)
class Block:
    kind: str  # "api" | "similar" | "context" | "query"
    text: str


@dataclass(frozen=True)
class PromptBundle:
    blocks: tuple
    token_estimate: int
    estimator: str = "bytes4"

    def render(self) -> str:
        return "\n\n".join(b.text for b in self.blocks)

    def kinds(self) -> tuple:
        return tuple(b.kind for b in self.blocks)


@dataclass
class GenerationRecord:
    task_id: str
    condition: str
    sample_index: int  # 1-based
    prompt: PromptBundle | None
    completion: str | None
    candidate_source: str | None
    extraction_method: str | None
    retrieved: ApiRetrievalSet | None
    steps: list = field(default_factory=list)
    predicted: list = field(default_factory=list)
    extended: list = field(default_factory=list)
    degraded: list = field(default_factory=list)
    failure: str | None = None
    verdict: dict | None = None

    def set_verdict(self, verdict: dict) -> None:
        if self.verdict is not None:
            raise ValueError(
                f"verdict already set for {self.task_id}/{self.condition}/{self.sample_index}"
            )
        self.verdict = verdict


# ── repository description stage ─────────────────────────────────────────────

def describe_repository_apis(api_units, gw: Gateway, model: str,
                             temperature: float = 0.7):
    """LLM-describe every API unit; a unit whose call fails after retries
    falls back to its docstring or signature and is flagged degraded."""
    descriptions: list[ApiDescription] = []
    degraded: list[str] = []
    for unit in api_units:
        messages = templates.render_template("api_describe", {
            "qualified_name": unit.qualified_name,
            "signature": unit.signature,
            "doc": unit.doc or "(none)",
            "body": unit.body,
        })
        request = ChatRequest(
            model=model, messages=messages, stage_tag="api_describe",
            temperature=temperature,
            template_version=templates.TEMPLATE_VERSIONS["api_describe"],
        )
        try:
            text = gw.complete(request).text.strip()
        except (TransportError, GatewayConfigError) as exc:
            if isinstance(exc, GatewayConfigError):
                raise
            text = unit.doc or f"{unit.qualified_name}{unit.signature}"
            degraded.append(unit.id)
        descriptions.append(ApiDescription(
            description_id=f"repo:{unit.id}",
            text=text,
            stage="repo",
            api_unit_id=unit.id,
        ))
    return descriptions, degraded


# ── query stages ─────────────────────────────────────────────────────────────

_STEP_LINE = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")
_DESC_LINE = re.compile(r"^\s*(?:[-*]\s*)?\[step\s+(\d+)\]\s*(.*\S)\s*$", re.IGNORECASE)


def parse_steps(text: str) -> list[ImplementationStep]:
    steps = []
    for line in text.splitlines():
        m = _STEP_LINE.match(line)
        if m:
            steps.append(ImplementationStep(index=len(steps) + 1, text=m.group(2)))
    return steps


def generate_steps(task: GenerationTask, gw: Gateway, model: str,
                   temperature: float = 0.7, examples=None) -> tuple:
    """Decompose the query into numbered implementation steps.

    Returns (steps, degraded). One strict-format retry; if nothing parses the
    query itself becomes the single step and the run is flagged degraded.
    """
    if examples is None:
        examples = templates.default_examples("steps", 2)
    attempts = [
        {"query": task.query},
        {"query": task.query + "\n\nReply with numbered lines like '1. ...' and nothing else."},
    ]
    for bindings in attempts:
        messages = templates.render_template("steps", bindings, examples=examples)
        request = ChatRequest(
            model=model, messages=messages, stage_tag="steps", temperature=temperature,
            template_version=templates.TEMPLATE_VERSIONS["steps"],
        )
        steps = parse_steps(gw.complete(request).text)
        if steps:
            return steps, []
    return [ImplementationStep(index=1, text=task.query)], ["steps_unparsable"]


def _render_steps(steps) -> str:
    return "\n".join(f"{s.index}. {s.text}" for s in steps)


def parse_api_descriptions(text: str, stage: str, id_prefix: str) -> list[ApiDescription]:
    out = []
    for line in text.splitlines():
        m = _DESC_LINE.match(line)
        if m:
            out.append(ApiDescription(
                description_id=f"{id_prefix}:{len(out) + 1}",
                text=m.group(2),
                stage=stage,
                origin_step=int(m.group(1)),
            ))
    return out


def generate_api_descriptions(steps, gw: Gateway, model: str,
                              temperature: float = 0.7, examples=None) -> list[ApiDescription]:
    """Describe the helper APIs each step needs. A step may map to zero or
    several descriptions; an unparsable completion yields an empty list."""
    if examples is None:
        examples = templates.default_examples("api_descs", 2)
    messages = templates.render_template(
        "api_descs", {"steps": _render_steps(steps)}, examples=examples
    )
    request = ChatRequest(
        model=model, messages=messages, stage_tag="api_descs", temperature=temperature,
        template_version=templates.TEMPLATE_VERSIONS["api_descs"],
    )
    return parse_api_descriptions(gw.complete(request).text, "predicted", "pred")


def extend_api_descriptions(descriptions, gw: Gateway, model: str,
                            temperature: float = 0.7) -> list[ApiDescription]:
    """Split composite descriptions into atomic ones.

    Returns the union of the originals and the rewritten lines, re-staged as
    "extended", with exact-duplicate texts removed (first occurrence wins).
    An unparsable completion leaves the originals unchanged.
    """
    if not descriptions:
        return []
    listing = "\n".join(f"- [step {d.origin_step or 1}] {d.text}" for d in descriptions)
    messages = templates.render_template("extend", {"descriptions": listing})
    request = ChatRequest(
        model=model, messages=messages, stage_tag="extend", temperature=temperature,
        template_version=templates.TEMPLATE_VERSIONS["extend"],
    )
    rewritten = parse_api_descriptions(gw.complete(request).text, "extended", "ext-new")
    merged: list[ApiDescription] = []
    seen: set[str] = set()
    for d in list(descriptions) + rewritten:
        if d.text in seen:
            continue
        seen.add(d.text)
        merged.append(ApiDescription(
            description_id=f"ext:{len(merged) + 1}",
            text=d.text,
            stage="extended",
            origin_step=d.origin_step,
        ))
    return merged


# ── prompt assembly ──────────────────────────────────────────────────────────

def render_api_unit(unit: ApiUnit, include_body: bool = True) -> str:
    header = f"### {unit.qualified_name}{unit.signature}"
    if include_body:
        return f"{header}\n{unit.body}"
    doc = f'"""{unit.doc}"""' if unit.doc else "(body elided)"
    return f"{header}\n{doc}"


def _api_block_text(units, include_bodies: bool = True) -> str:
    if not units:
        return "Relevant repository functions:\n(none retrieved)"
    rendered = "\n\n".join(render_api_unit(u, include_bodies) for u in units)
    return f"Relevant repository functions:\n\n{rendered}"


def _similar_block_text(windows) -> str:
    if not windows:
        return "Similar code from the repository:\n(none found)"
    rendered = "\n\n".join(
        f"# {w.path}:{w.start_line}-{w.end_line}\n{w.text}" for w in windows
    )
    return f"Similar code from the repository:\n\n{rendered}"


def _context_block_text(task: GenerationTask) -> str:
    return f"File context ({task.target_path}):\n\n{task.context_block}"


def _query_block_text(task: GenerationTask) -> str:
    return f"Task:\n{task.query}"


def _bundle(blocks) -> PromptBundle:
    text = "\n\n".join(b.text for b in blocks)
    return PromptBundle(blocks=tuple(blocks), token_estimate=estimate_tokens(text))


def assemble_prompt(condition: Condition, task: GenerationTask,
                    retrieved: ApiRetrievalSet | None = None,
                    api_table: dict | None = None,
                    similar=None,
                    token_budget: int = 0) -> PromptBundle:
    """Assemble the ordered prompt blocks for one condition.

    Block order is fixed: api, similar, context, query. Flags must match the
    content handed in: an API condition without a retrieval set (or a similar
    condition without a window list) is an assembly error. When the bundle
    exceeds `token_budget` (> 0), API unit bodies are elided first, then
    similar windows drop from the lowest-ranked end; context and query are
    never truncated.
    """
    blocks: list[Block] = []
    units: list[ApiUnit] = []
    if condition.use_api:
        if retrieved is None:
            raise AssemblyError(f"condition {condition.name} needs a retrieval set")
        if api_table is None:
            raise AssemblyError("api_table required to render API units")
        try:
            units = [api_table[i] for i in retrieved.api_ids]
        except KeyError as exc:
            raise AssemblyError(f"retrieved id not in api table: {exc}") from exc
        blocks.append(Block("api", _api_block_text(units)))
    elif retrieved is not None and retrieved.api_ids:
        raise AssemblyError(f"condition {condition.name} does not take an API block")

    windows = list(similar) if similar is not None else None
    if condition.use_similar:
        if windows is None:
            raise AssemblyError(f"condition {condition.name} needs similar windows")
        blocks.append(Block("similar", _similar_block_text(windows)))
    elif windows:
        raise AssemblyError(f"condition {condition.name} does not take a similar block")

    if condition.use_context:
        blocks.append(Block("context", _context_block_text(task)))
    blocks.append(Block("query", _query_block_text(task)))

    bundle = _bundle(blocks)
    if token_budget and bundle.token_estimate > token_budget:
        bundle = _shrink(bundle, condition, task, units, windows or [], token_budget)
    return bundle


def _shrink(bundle: PromptBundle, condition, task, units, windows, budget) -> PromptBundle:
    def rebuild(units_bodies: bool, keep_windows: int) -> PromptBundle:
        blocks = []
        if condition.use_api:
            blocks.append(Block("api", _api_block_text(units, units_bodies)))
        if condition.use_similar:
            blocks.append(Block("similar", _similar_block_text(windows[:keep_windows])))
        if condition.use_context:
            blocks.append(Block("context", _context_block_text(task)))
        blocks.append(Block("query", _query_block_text(task)))
        return _bundle(blocks)

    shrunk = rebuild(False, len(windows))
    if shrunk.token_estimate <= budget:
        return shrunk
    for keep in range(len(windows) - 1, -1, -1):
        shrunk = rebuild(False, keep)
        if shrunk.token_estimate <= budget:
            return shrunk
    return shrunk  # context and query are never cut


# ── run drivers ──────────────────────────────────────────────────────────────

@dataclass
class PipelineContext:
    """Everything a condition run needs besides the task itself."""

    model: str
    temperature: float
    k_samples: int
    api_units: list
    api_table: dict                      # unit id -> ApiUnit
    embed_provider: object
    api_index: VectorIndex | None        # repo description (or raw code) index
    window_index: VectorIndex | None
    windows_by_key: dict
    top_k_similar: int = 5
    token_budget: int = 0
    examples_per_stage: int = 2

    def unit_order(self, ids) -> list:
        ordered = sorted(
            (self.api_table[i] for i in ids),
            key=lambda u: (u.path, u.span.start),
        )
        return [u.id for u in ordered]


def _oracle_retrieval_set(task: GenerationTask, ctx: PipelineContext) -> ApiRetrievalSet:
    ordered = ctx.unit_order(task.oracle_apis)
    pairs = [(f"oracle:{n + 1}", api_id, 1.0) for n, api_id in enumerate(ordered)]
    return ApiRetrievalSet(pairs=pairs, api_ids=tuple(ordered))


def _similar_windows(task: GenerationTask, ctx: PipelineContext):
    if ctx.window_index is None or len(ctx.window_index) == 0:
        return []
    key_vec = ctx.embed_provider.embed(task.reference_solution)
    return retrieve_similar(
        key_vec, ctx.window_index, ctx.windows_by_key, k=ctx.top_k_similar,
        exclude_path=task.target_path, exclude_span=task.target_span,
    )


def _complete_samples(task, condition, bundle, gw, ctx) -> list[GenerationRecord]:
    messages = templates.render_template("generate", {"prompt": bundle.render()})
    request = ChatRequest(
        model=ctx.model, messages=messages, stage_tag="generate",
        temperature=ctx.temperature,
        template_version=templates.TEMPLATE_VERSIONS["generate"],
    )
    records = []
    for sample in range(1, ctx.k_samples + 1):
        record = GenerationRecord(
            task_id=task.task_id, condition=condition.name, sample_index=sample,
            prompt=bundle, completion=None, candidate_source=None,
            extraction_method=None, retrieved=None,
        )
        try:
            record.completion = gw.complete(request).text
        except TransportError as exc:
            record.failure = f"completion failed: {exc}"
            records.append(record)
            continue
        try:
            candidate = extract_code(record.completion)
            record.candidate_source = candidate.source
            record.extraction_method = candidate.extraction_method
        except CandidateUnparsableError as exc:
            record.failure = f"CandidateUnparsable: {exc}"
        records.append(record)
    return records


def run_condition(task: GenerationTask, condition_name: str, gw: Gateway,
                  ctx: PipelineContext) -> list[GenerationRecord]:
    """Run one study condition on one task: k independent samples sharing a
    single assembled prompt. Oracle conditions render exactly the task's
    oracle API set; similar retrieval is keyed by the reference solution."""
    condition = get_condition(condition_name)
    if condition.api_source == "predicted":
        return run_alliancecoder(task, gw, ctx)
    retrieved = _oracle_retrieval_set(task, ctx) if condition.use_api else None
    similar = _similar_windows(task, ctx) if condition.use_similar else None
    bundle = assemble_prompt(
        condition, task, retrieved=retrieved, api_table=ctx.api_table,
        similar=similar, token_budget=ctx.token_budget,
    )
    records = _complete_samples(task, condition, bundle, gw, ctx)
    for r in records:
        r.retrieved = retrieved
    return records


def run_alliancecoder(task: GenerationTask, gw: Gateway,
                      ctx: PipelineContext) -> list[GenerationRecord]:
    """Full predicted-API pipeline on one task.

    Stages run strictly in order: steps, per-step API descriptions, extension,
    embedding + top-1 retrieval per description, dedup, then k completions.
    With no retrievable APIs (empty repository index) the prompt degenerates
    to the Context condition's shape.
    """
    condition = get_condition("AllianceCoder")
    degraded: list[str] = []
    steps, flags = generate_steps(
        task, gw, ctx.model, ctx.temperature,
        examples=templates.default_examples("steps", ctx.examples_per_stage),
    )
    degraded.extend(flags)
    predicted = generate_api_descriptions(
        steps, gw, ctx.model, ctx.temperature,
        examples=templates.default_examples("api_descs", ctx.examples_per_stage),
    )
    extended = extend_api_descriptions(predicted, gw, ctx.model, ctx.temperature)

    retrieved: ApiRetrievalSet | None = None
    if ctx.api_index is not None and len(ctx.api_index) and extended:
        desc_vectors = [
            (d.description_id, ctx.embed_provider.embed(d.text)) for d in extended
        ]
        raw = retrieve_apis(desc_vectors, ctx.api_index)
        # index ids are "repo:<unit id>"; map back to unit ids for rendering
        pairs = [(d, _strip_repo_prefix(a), s) for d, a, s in raw.pairs]
        retrieved = ApiRetrievalSet(
            pairs=pairs,
            api_ids=tuple(_strip_repo_prefix(a) for a in raw.api_ids),
        )

    if retrieved is None or not retrieved.api_ids:
        degraded.append("no_apis_retrieved")
        bundle = assemble_prompt(
            get_condition("Context"), task, token_budget=ctx.token_budget
        )
    else:
        bundle = assemble_prompt(
            condition, task, retrieved=retrieved, api_table=ctx.api_table,
            token_budget=ctx.token_budget,
        )
    records = _complete_samples(task, condition, bundle, gw, ctx)
    for r in records:
        r.retrieved = retrieved
        r.steps = list(steps)
        r.predicted = list(predicted)
        r.extended = list(extended)
        r.degraded = list(degraded)
    return records


def _strip_repo_prefix(item_id: str) -> str:
    return item_id[5:] if item_id.startswith("repo:") else item_id
