"""Structured reasoning traces: ``<think>...</think><answer>...</answer>``.

Two independent recognizers share one grammar: :func:`format_reward` is a
regular expression, :func:`parse_trace` is a hand-written scanner that also
reports which rule failed. Tests hold them to agreement.

Grammar (on text):
    optional whitespace, ``<think>``, content, ``</think>``, optional whitespace,
    ``<answer>``, content, ``</answer>``, optional whitespace, end.
    Content may be empty and may not contain any of the four tags.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

_BODY = r"(?:(?!</?think>|</?answer>).)*?"
_PATTERN = re.compile(rf"\s*<think>({_BODY})</think>\s*<answer>({_BODY})</answer>\s*", re.DOTALL)


def format_reward(text: str) -> int:
    """1 if ``text`` is exactly one think block followed by one answer block, else 0."""
    return 1 if _PATTERN.fullmatch(text) is not None else 0


class TraceFormatError(ValueError):
    def __init__(self, rule: str, position: int):
        super().__init__(f"{rule} (at offset {position})")
        self.rule = rule
        self.position = position


def _next_tag(text: str, start: int) -> tuple[int, str | None]:
    best, which = len(text), None
    for tag in TAGS:
        i = text.find(tag, start)
        if i != -1 and i < best:
            best, which = i, tag
    return best, which


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def parse_text(text: str) -> tuple[str, str]:
    """Return ``(think, answer)`` contents or raise :class:`TraceFormatError`."""
    i = _skip_ws(text, 0)
    if not text.startswith(THINK_OPEN, i):
        raise TraceFormatError("trace must open with <think>", i)
    i += len(THINK_OPEN)
    j, tag = _next_tag(text, i)
    if tag is None:
        raise TraceFormatError("unclosed <think> block", len(text))
    if tag != THINK_CLOSE:
        raise TraceFormatError(f"{tag} not allowed inside <think> block", j)
    think = text[i:j]
    i = _skip_ws(text, j + len(THINK_CLOSE))
    if not text.startswith(ANSWER_OPEN, i):
        raise TraceFormatError("<answer> must follow </think>", i)
    i += len(ANSWER_OPEN)
    j, tag = _next_tag(text, i)
    if tag is None:
        raise TraceFormatError("unclosed <answer> block", len(text))
    if tag != ANSWER_CLOSE:
        raise TraceFormatError(f"{tag} not allowed inside <answer> block", j)
    answer = text[i:j]
    k = _skip_ws(text, j + len(ANSWER_CLOSE))
    if k != len(text):
        rule = "repeated or trailing block after </answer>"
        raise TraceFormatError(rule, k)
    return think, answer


@dataclass
class Trace:
    """A generated or annotated trace over token ids.

    ``think_span``/``answer_span`` are half-open token index ranges of the
    block contents (tags excluded), present only when the trace is well formed.
    """

    token_ids: list[int] = field(default_factory=list)
    text: str = ""
    think_span: tuple[int, int] | None = None
    answer_span: tuple[int, int] | None = None
    well_formed: bool = False

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def think_ids(self) -> list[int]:
        return [] if self.think_span is None else self.token_ids[slice(*self.think_span)]

    @property
    def answer_ids(self) -> list[int]:
        return [] if self.answer_span is None else self.token_ids[slice(*self.answer_span)]

    @property
    def is_empty(self) -> bool:
        return not self.token_ids

    def blocks(self) -> tuple[str, str]:
        """Text contents of the think and answer blocks."""
        return parse_text(self.text)


def trace_from_ids(ids, vocab) -> Trace:
    """Render ``ids`` and locate the block spans when the text is well formed."""
    ids = [int(t) for t in ids]
    text = vocab.render(ids)
    if not ids or not format_reward(text):
        return Trace(ids, text, None, None, False)
    pos = {tag: ids.index(vocab.id(tag)) for tag in TAGS}
    return Trace(
        ids,
        text,
        (pos[THINK_OPEN] + 1, pos[THINK_CLOSE]),
        (pos[ANSWER_OPEN] + 1, pos[ANSWER_CLOSE]),
        True,
    )


def parse_trace(text: str, vocab=None) -> Trace:
    """Parse trace text; raises :class:`TraceFormatError` naming the violated rule.

    With a vocabulary the text is also tokenized so spans refer to token ids.
    """
    parse_text(text)
    if vocab is None:
        return Trace([], text, None, None, True)
    ids = vocab.encode(text)
    return trace_from_ids(ids, vocab)
