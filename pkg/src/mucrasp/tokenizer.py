"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, then three specials."""

from __future__ import annotations

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259
SPECIAL_TEXT = {BOS: "", EOS: "", PAD: ""}


def tokenize(text: str) -> tuple[list[int], list[int]]:
    """Return ``(ids, char_to_token)``.

    ``char_to_token[i]`` is the index of the token holding the first byte of
    character ``i``.
    """
    ids: list[int] = []
    char_to_token: list[int] = []
    for ch in text:
        char_to_token.append(len(ids))
        ids.extend(ch.encode("utf-8"))
    return ids, char_to_token


def detokenize(ids) -> str:
    raw = bytes(i for i in ids if i < 256)
    return raw.decode("utf-8", errors="replace")


def token_char_spans(text: str) -> list[tuple[int, int]]:
    """Character span ``[start, end)`` covered by each token (multi-byte chars share a span)."""
    spans = []
    for i, ch in enumerate(text):
        spans.extend([(i, i + 1)] * len(ch.encode("utf-8")))
    return spans
