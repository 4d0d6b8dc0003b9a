"""Synthetic image-question-CoT calibration corpus and a toy SGD trainer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import model as mc
from .checkpoint import atomic_write_bytes
from .tokenizer import BOS, EOS, tokenize

NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"]
COLORS = ["red", "blue", "green", "yellow"]
SHAPES = ["cube", "ball", "cone", "ring"]
_CODEBOOK_SEED = 20240601


class CorpusError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class CalibrationSample:
    vision_embeddings: np.ndarray
    prompt_text: str
    response_text: str
    latent_answer: int = -1

    @cached_property
    def prompt_ids(self) -> list[int]:
        return [BOS] + tokenize(self.prompt_text)[0]

    @cached_property
    def response_ids(self) -> list[int]:
        return tokenize(self.response_text)[0] + [EOS]

    @property
    def token_ids(self) -> list[int]:
        return self.prompt_ids + self.response_ids

    @property
    def loss_mask(self) -> np.ndarray:
        """True exactly on response tokens of ``token_ids``."""
        return np.arange(len(self.token_ids)) >= len(self.prompt_ids)

    @property
    def char_to_token(self) -> list[int]:
        """Response character index -> response token index."""
        return tokenize(self.response_text)[1]

    @property
    def response_length(self) -> int:
        return len(self.response_ids)

    @property
    def response_row_offset(self) -> int:
        """Logit row predicting response token 0."""
        return len(self.vision_embeddings) + len(self.prompt_ids) - 1

    def model_inputs(self):
        """``(tokens, vision, targets, row_mask)`` for the decoder.

        The final token is never fed back in; logit row ``r`` predicts the
        text token at sequence position ``r + 1``.
        """
        ids = self.token_ids
        n_vis = len(self.vision_embeddings)
        tokens = np.asarray(ids[:-1], dtype=np.int64)
        T = n_vis + tokens.size
        targets = np.full(T, -1, dtype=np.int64)
        targets[n_vis - 1:] = ids
        mask = np.zeros(T, bool)
        off = self.response_row_offset
        mask[off:off + self.response_length] = True
        return tokens, self.vision_embeddings, targets, mask

    def rows_for_response_positions(self, positions) -> np.ndarray:
        return self.response_row_offset + np.asarray(sorted(positions), dtype=np.int64)

    def to_json(self) -> dict:
        return {"vision_embeddings": np.asarray(self.vision_embeddings).tolist(),
                "prompt_text": self.prompt_text,
                "response_text": self.response_text,
                "latent_answer": int(self.latent_answer)}

    def __eq__(self, other):
        if not isinstance(other, CalibrationSample):
            return NotImplemented
        return (self.prompt_text == other.prompt_text
                and self.response_text == other.response_text
                and self.latent_answer == other.latent_answer
                and np.array_equal(self.vision_embeddings, other.vision_embeddings))


@dataclass
class Corpus:
    samples: list[CalibrationSample]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise CorpusError("corpus must contain at least one sample")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.seed == other.seed and self.samples == other.samples


# --------------------------------------------------------------------------
# generation


def _codebook(d_model: int):
    rng = np.random.default_rng(_CODEBOOK_SEED + d_model)
    colors = rng.standard_normal((len(COLORS), d_model)) / math.sqrt(d_model)
    shapes = rng.standard_normal((len(SHAPES), d_model)) / math.sqrt(d_model)
    return colors, shapes


_OBSERVE = [
    "I look at the {n} objects shown in the image.",
    "I scan the image and see {n} objects in total.",
    "I inspect each of the {n} objects in the picture.",
]
_FILTER = [
    "I keep only the {color} {shape}s and ignore the rest.",
    "I mark every object that is a {color} {shape}.",
    "I check which objects are {color} {shape}s.",
]
_CONNECT = ["Therefore", "Thus", "Hence"]
_CONCLUDE = [
    "{c}, the count of {color} {shape}s is {k}.",
    "{c}, there are {k} {color} {shape}s here.",
]


def _make_sample(rng: np.random.Generator, n_vision: int, d_model: int, codebook) -> CalibrationSample:
    colors, shapes = codebook
    ci = int(rng.integers(len(COLORS)))
    si = int(rng.integers(len(SHAPES)))
    k = int(rng.integers(1, min(5, n_vision - 1) + 1))
    emb = np.empty((n_vision, d_model))
    for slot in range(n_vision):
        if slot < k:
            c, s = ci, si
        else:
            # distractor: never the target colour/shape pair
            c = int(rng.integers(len(COLORS)))
            s = int(rng.integers(len(SHAPES)))
            if c == ci and s == si:
                s = (s + 1) % len(SHAPES)
        emb[slot] = colors[c] + shapes[s] + 0.05 * rng.standard_normal(d_model) / math.sqrt(d_model)
    emb = emb[rng.permutation(n_vision)]

    color, shape, word = COLORS[ci], SHAPES[si], NUMBER_WORDS[k]
    prompt = f"Question: How many {color} {shape}s are in the image?"
    pick = lambda opts: opts[int(rng.integers(len(opts)))]
    steps = [
        pick(_OBSERVE).format(n=NUMBER_WORDS[n_vision] if n_vision < len(NUMBER_WORDS) else n_vision),
        pick(_FILTER).format(color=color, shape=shape),
    ]
    lines = [f"{i + 1}. {s}" for i, s in enumerate(steps)]
    lines.append(pick(_CONCLUDE).format(c=pick(_CONNECT), color=color, shape=shape, k=word))
    lines.append(f"Final Answer: {word}")
    return CalibrationSample(emb, prompt, "\n".join(lines), k)


def generate_synthetic_corpus(seed: int, n: int, config: mc.ModelConfig) -> Corpus:
    """Counting task: ``k`` of the vision slots come from the asked-about cluster."""
    if n < 1:
        raise CorpusError("n must be >= 1")
    rng = np.random.default_rng(seed)
    codebook = _codebook(config.d_model)
    samples = []
    for _ in range(n):
        s = _make_sample(rng, config.n_vision_tokens, config.d_model, codebook)
        length = config.n_vision_tokens + len(s.token_ids) - 1
        if length > config.max_seq:
            raise CorpusError(f"generated sample of length {length} exceeds max_seq {config.max_seq}")
        samples.append(s)
    return Corpus(samples, seed)


# --------------------------------------------------------------------------
# JSONL I/O

_REQUIRED = ("vision_embeddings", "prompt_text", "response_text")


def corpus_to_jsonl(corpus: Corpus) -> str:
    lines = []
    for s in corpus.samples:
        row = s.to_json()
        row["corpus_seed"] = corpus.seed
        lines.append(json.dumps(row))
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path) -> None:
    atomic_write_bytes(path, corpus_to_jsonl(corpus).encode("utf-8"))


def load_corpus(path) -> Corpus:
    samples, seed = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in row]
            if missing:
                raise CorpusError(f"line {lineno}: missing field(s) {', '.join(missing)}")
            try:
                emb = np.asarray(row["vision_embeddings"], dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"line {lineno}: vision_embeddings is not a numeric matrix") from exc
            if emb.ndim != 2:
                raise CorpusError(f"line {lineno}: vision_embeddings must be an array of arrays")
            seed = int(row.get("corpus_seed", seed))
            samples.append(CalibrationSample(emb, str(row["prompt_text"]), str(row["response_text"]),
                                             int(row.get("latent_answer", -1))))
    if not samples:
        raise CorpusError(f"{path}: no samples")
    return Corpus(samples, seed)


# --------------------------------------------------------------------------
# training


def corpus_nll(weights: mc.ModelWeights, corpus: Corpus) -> tuple[float, int]:
    """Total masked NLL and the number of masked tokens."""
    total, count = 0.0, 0
    for s in corpus:
        tokens, vis, targets, mask = s.model_inputs()
        nll = mc.token_nll(mc.forward(weights, tokens, vis), targets, mask)
        total += float(nll.sum())
        count += nll.size
    return total, count


def corpus_perplexity(weights: mc.ModelWeights, corpus: Corpus) -> float:
    total, count = corpus_nll(weights, corpus)
    return math.exp(total / count)


def train(weights: mc.ModelWeights, corpus: Corpus, steps: int, learning_rate: float,
          seed: int = 0, batch_size: int = 2, history: list | None = None) -> mc.ModelWeights:
    """Plain minibatch SGD on the masked response NLL; returns new weights."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    weights = weights.copy()
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for step in range(steps):
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(len(corpus)))
            batch.append(order.pop())
        grad_sum = None
        batch_loss = 0.0
        for idx in batch:
            tokens, vis, targets, mask = corpus[idx].model_inputs()
            value, grads = mc.loss_and_grad(weights, tokens, vis, targets, mask)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (sample {idx})")
            batch_loss += value
            if grad_sum is None:
                grad_sum = grads
            else:
                for (_, acc), (_, g) in zip(grad_sum.named_tensors(), grads.named_tensors()):
                    acc += g
        scale = learning_rate / len(batch)
        for (_, w), (_, g) in zip(weights.named_tensors(), grad_sum.named_tensors()):
            w -= scale * g
        if history is not None:
            history.append(batch_loss / len(batch))
    return weights
