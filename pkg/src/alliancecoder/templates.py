"""Prompt templates and bundled in-context examples for each LLM stage.

Templates are versioned; the version string rides along on every request and
participates in the replay-cache key, so editing a template invalidates old
transcripts instead of silently replaying them.
"""

from __future__ import annotations

from dataclasses import dataclass


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptExample:
    example_id: str
    stage_tag: str
    body: str


TEMPLATE_VERSIONS = {
    "api_describe": "v1",
    "steps": "v1",
    "api_descs": "v1",
    "extend": "v1",
    "generate": "v1",
}

_SYSTEM = {
    "api_describe": (
        "You document code. Given one function or method from a repository, "
        "reply with a single plain sentence describing what it does, covering "
        "its inputs and outputs. Reply with the sentence only."
    ),
    "steps": (
        "You plan code. Break the requested function down into a short "
        "numbered list of concrete implementation steps. Reply with the "
        "numbered list only."
    ),
    "api_descs": (
        "For each implementation step, describe the repository helpers the "
        "step would call, one per line in the form '- [step N] description'. "
        "A step may need zero, one, or several helpers. Describe what each "
        "helper does, never guess its name. Reply with the list only."
    ),
    "extend": (
        "Some helper descriptions below may bundle several capabilities. "
        "Rewrite the list so every line covers exactly one capability, "
        "splitting composite lines and keeping already-atomic lines as they "
        "are. Keep the '- [step N] description' form. Reply with the list only."
    ),
    "generate": (
        "You write repository-level Python. Complete the requested function "
        "so it works inside the given repository. Reply with one fenced "
        "Python code block containing only the complete function definition."
    ),
}

_USER_SKELETON = {
    "api_describe": (
        "Function: {qualified_name}\n"
        "Signature: {signature}\n"
        "Docstring: {doc}\n"
        "Source:\n{body}\n\n"
        "Describe this function in one sentence."
    ),
    "steps": "Task:\n{query}\n\nList the implementation steps.",
    "api_descs": "Steps:\n{steps}\n\nList the helper descriptions.",
    "extend": "Descriptions:\n{descriptions}\n\nRewrite the list with one capability per line.",
    "generate": "{prompt}",
}

# stages that splice in-context examples ahead of the real input
_EXAMPLE_STAGES = ("steps", "api_descs")

DEFAULT_EXAMPLES = {
    "steps": (
        PromptExample(
            example_id="steps-01",
            stage_tag="steps",
            body=(
                "Task:\n"
                "Write a function that returns the newest backup file in a directory.\n"
                "def newest_backup(directory):\n\n"
                "Steps:\n"
                "1. List the entries of the directory.\n"
                "2. Keep only the backup files.\n"
                "3. Sort the backups by modification time.\n"
                "4. Return the most recent one."
            ),
        ),
        PromptExample(
            example_id="steps-02",
            stage_tag="steps",
            body=(
                "Task:\n"
                "Write a function that counts distinct words in a text file.\n"
                "def count_words(path):\n\n"
                "Steps:\n"
                "1. Read the file contents.\n"
                "2. Split the text into words.\n"
                "3. Normalize the words to lower case.\n"
                "4. Count the distinct normalized words."
            ),
        ),
    ),
    "api_descs": (
        PromptExample(
            example_id="apidescs-01",
            stage_tag="api_descs",
            body=(
                "Steps:\n"
                "1. List the entries of the directory.\n"
                "2. Keep only the backup files.\n"
                "3. Return the most recent one.\n\n"
                "Helpers:\n"
                "- [step 1] Lists the file entries of a directory path.\n"
                "- [step 2] Tells whether a file name is a backup file.\n"
                "- [step 3] Returns the modification time of a file."
            ),
        ),
        PromptExample(
            example_id="apidescs-02",
            stage_tag="api_descs",
            body=(
                "Steps:\n"
                "1. Read the file contents.\n"
                "2. Split the text into words.\n\n"
                "Helpers:\n"
                "- [step 1] Reads a text file and returns its contents.\n"
                "- [step 2] Splits text into normalized word tokens."
            ),
        ),
    ),
}


class _StrictBindings(dict):
    def __missing__(self, key):
        raise TemplateError(f"template slot not bound: {key}")


def render_template(stage_tag: str, bindings: dict, examples=None) -> tuple:
    """Render a stage template into chat messages.

    Examples (when given, and only on stages that take them) are spliced in
    example_id order ahead of the real input inside the user message. Every
    slot in the skeleton must be bound or a TemplateError names it.
    """
    if stage_tag not in _USER_SKELETON:
        raise TemplateError(f"unknown template stage: {stage_tag}")
    skeleton = _USER_SKELETON[stage_tag]
    try:
        body = skeleton.format_map(_StrictBindings(bindings))
    except TemplateError:
        raise
    parts = []
    if examples and stage_tag in _EXAMPLE_STAGES:
        for ex in sorted(examples, key=lambda e: e.example_id):
            if ex.stage_tag != stage_tag:
                raise TemplateError(
                    f"example {ex.example_id} is for stage {ex.stage_tag}, not {stage_tag}"
                )
            parts.append(f"Example:\n{ex.body}")
    parts.append(body)
    return (
        ("system", _SYSTEM[stage_tag]),
        ("user", "\n\n".join(parts)),
    )


def default_examples(stage_tag: str, count: int):
    pool = DEFAULT_EXAMPLES.get(stage_tag, ())
    return tuple(pool[:count])
