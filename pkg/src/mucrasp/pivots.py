"""Reasoning-transition (pivot) detection over chain-of-thought text."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

# (class, sub-type, pattern); matched case-insensitively, ``^`` anchors at line starts
MARKER_TAXONOMY: list[tuple[str, str, str]] = [
    ("structural", "numbered_step", r"^(\d+)[.)]\s"),
    ("structural", "labelled_step", r"Step\s*\d+\s*[:–]"),
    ("structural", "sub_step", r"(\d+)\.(\d+)\s"),
    ("structural", "final_answer", r"Final Answer[:–]"),
    ("structural", "answer_marker", r"\bAnswer\b\s*[:–]"),
    ("structural", "conclusion_label", r"(Conclusion|Summary)[:–]"),
    ("structural", "think_tag", r"<think>|</think>"),
    ("connective", "causal_conclusion", r"\b(Therefore|Thus|Hence)\b"),
    ("connective", "consequence", r"\b(So|Consequently|As a result)\b"),
    ("connective", "inference", r"\b(This means|This implies|This suggests)\b"),
    ("connective", "deduction", r"\b(We can (therefore|thus) conclude)\b"),
    ("connective", "summary", r"\b(In (summary|conclusion)|To summarize)\b"),
    ("connective", "transition_adverb", r"\b(Next|Now|Moving on|Finally)\b"),
    ("connective", "contrastive_pivot", r"\b(However|Nevertheless|Despite this)\b"),
    ("connective", "additive_reasoning", r"\b(Furthermore|Additionally|Moreover)\b"),
]

_COMPILED = [(cls, sub, re.compile(pat, re.IGNORECASE | re.MULTILINE))
             for cls, sub, pat in MARKER_TAXONOMY]


class PivotError(ValueError):
    pass


@dataclass(frozen=True)
class MarkerMatch:
    marker_class: str
    sub_type: str
    char_start: int
    text: str


@dataclass(frozen=True)
class PivotMask:
    pivot_indices: tuple[int, ...]
    window: frozenset[int]
    half_width: int
    source: str  # "markers" | "fallback_thirds" | "random"
    response_length: int

    @property
    def window_fraction(self) -> float:
        return len(self.window) / self.response_length if self.response_length else 0.0


def find_markers(text: str) -> list[MarkerMatch]:
    found = []
    for cls, sub, rx in _COMPILED:
        for m in rx.finditer(text):
            found.append(MarkerMatch(cls, sub, m.start(), m.group(0)))
    found.sort(key=lambda m: (m.char_start, m.sub_type))
    return found


def build_window(pivots, half_width: int, response_length: int) -> frozenset[int]:
    """Union of ``[i - W, i + W]`` over pivots, clipped to ``[0, response_length)``."""
    window = set()
    for i in pivots:
        lo, hi = max(0, i - half_width), min(response_length - 1, i + half_width)
        window.update(range(lo, hi + 1))
    return frozenset(window)


def thirds_boundaries(response_length: int) -> list[int]:
    return sorted({response_length // 3, (2 * response_length) // 3})


def detect_pivots(response_text: str, char_to_token, W: int = 8, min_markers: int = 2,
                  response_length: int | None = None) -> PivotMask:
    """Map taxonomy matches to token positions; fall back to equal thirds.

    ``response_length`` defaults to the number of tokens covered by
    ``char_to_token`` (i.e. the text's byte length).
    """
    if W < 1:
        raise PivotError("window half-width must be >= 1")
    if not response_text:
        raise PivotError("empty response")
    if response_length is None:
        response_length = len(response_text.encode("utf-8"))
    matches = find_markers(response_text)
    if len(matches) >= min_markers and matches:
        pivots = sorted({int(char_to_token[m.char_start]) for m in matches})
        source = "markers"
    else:
        pivots = thirds_boundaries(response_length)
        source = "fallback_thirds"
    pivots = [p for p in pivots if 0 <= p < response_length]
    return PivotMask(tuple(pivots), build_window(pivots, W, response_length), W, source,
                     response_length)


def random_pivots(response_length: int, count: int, seed: int, W: int = 8) -> PivotMask:
    if count < 1:
        raise PivotError("count must be >= 1")
    if count > response_length:
        raise PivotError(f"count {count} exceeds response length {response_length}")
    rng = np.random.default_rng(seed)
    pivots = sorted(int(i) for i in rng.choice(response_length, size=count, replace=False))
    return PivotMask(tuple(pivots), build_window(pivots, W, response_length), W, "random",
                     response_length)
