"""Pruned-model quality: perplexity, per-token KL against the dense model,
retention summaries, MLP zero-out ablations and method comparisons."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import allocator as al
from . import model as mc
from .calibration import Corpus, corpus_nll

KL_BINS = 64
KL_RANGE = (0.0, 16.0)
SCHEMA_VERSION = 1


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    method: str
    ratio: float | None
    perplexity: float
    mean_kl: float
    kl_histogram: list[int]
    kl_overflow: int
    dropped_positions: int
    total_positions: int
    retention: dict = field(default_factory=dict)
    kept_params: int | None = None
    runtime_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        """Flat summary used for CSV output and report merging."""
        row = {"method": self.method, "ratio": self.ratio, "perplexity": self.perplexity,
               "mean_kl": self.mean_kl, "dropped_positions": self.dropped_positions,
               "total_positions": self.total_positions, "kept_params": self.kept_params,
               **{k: v for k, v in self.extra.items() if not isinstance(v, (dict, list))}}
        return {k: v for k, v in row.items() if v is not None or k in ("method", "ratio")}

    def to_json(self) -> dict:
        d = asdict(self)
        runtime = d.pop("runtime_seconds")
        d["retention"] = {f"{k[0]}:{k[1]}" if isinstance(k, tuple) else k: v
                          for k, v in self.retention.items()}
        return {"schema_version": SCHEMA_VERSION, "report": d,
                "meta": {"runtime_seconds": runtime}}


def perplexity(weights: mc.ModelWeights, corpus: Corpus) -> float:
    total, count = corpus_nll(weights, corpus)
    if count == 0:
        raise EvaluationError("no masked-in positions")
    return math.exp(total / count)


def kl_rows(dense_logits: np.ndarray, pruned_logits: np.ndarray) -> np.ndarray:
    """Per-row ``KL(softmax(dense) || softmax(pruned))`` in nats."""
    lp = mc._log_softmax(np.asarray(dense_logits, np.float64))
    lq = mc._log_softmax(np.asarray(pruned_logits, np.float64))
    with np.errstate(invalid="ignore", over="ignore"):
        return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def kl_histogram(values: np.ndarray) -> tuple[list[int], int]:
    counts, _ = np.histogram(values, bins=KL_BINS, range=KL_RANGE)
    overflow = int(np.sum(values > KL_RANGE[1]))
    return [int(c) for c in counts], overflow


@dataclass
class KLResult:
    mean_kl: float
    histogram: list[int]
    overflow: int
    dropped_positions: int
    total_positions: int
    values: np.ndarray


def kl_report(dense: mc.ModelWeights, pruned: mc.ModelWeights, corpus: Corpus) -> KLResult:
    """KL at every response position; non-finite values are dropped and counted."""
    collected, dropped, total = [], 0, 0
    for s in corpus:
        tokens, vis, _, mask = s.model_inputs()
        kl = kl_rows(mc.forward(dense, tokens, vis).logits[mask],
                     mc.forward(pruned, tokens, vis).logits[mask])
        ok = np.isfinite(kl)
        dropped += int((~ok).sum())
        total += kl.size
        collected.append(np.maximum(kl[ok], 0.0))
    values = np.concatenate(collected) if collected else np.zeros(0)
    if values.size == 0:
        raise EvaluationError("no finite KL positions")
    hist, overflow = kl_histogram(values)
    return KLResult(float(values.mean()), hist, overflow, dropped, total, values)


def retention_report(plan: al.PruningPlan) -> dict[tuple[int, str], float]:
    """Kept fraction per (layer, sublayer); every fraction is checked against its minimum."""
    etas = al.minimum_retention(plan.units, plan.config)
    out = {}
    for (layer, kind), idx in al._groups(plan.units).items():
        kept = int(plan.keep[idx].sum())
        if kept < etas[(layer, kind)]:
            raise EvaluationError(f"layer {layer} {kind.name} keeps {kept} < minimum {etas[(layer, kind)]}")
        out[(layer, kind.sublayer)] = kept / idx.size
    if any(v == 0 for v in out.values()):
        raise EvaluationError("a layer lost every unit of one kind")
    return out


def _report(method, ratio, dense, pruned, corpus, t0, **kw) -> EvalReport:
    kl = kl_report(dense, pruned, corpus)
    return EvalReport(method, ratio, perplexity(pruned, corpus), kl.mean_kl, kl.histogram,
                      kl.overflow, kl.dropped_positions, kl.total_positions,
                      runtime_seconds=time.perf_counter() - t0, **kw)


def evaluate_pair(dense: mc.ModelWeights, pruned: mc.ModelWeights, corpus: Corpus,
                  method: str = "eval", ratio: float | None = None) -> EvalReport:
    t0 = time.perf_counter()
    return _report(method, ratio, dense, pruned, corpus, t0,
                   extra={"dense_perplexity": perplexity(dense, corpus),
                          "model_params": pruned.parameter_count()})


def zero_mlp_layers(weights: mc.ModelWeights, layers) -> mc.ModelWeights:
    out = weights.copy()
    for l in layers:
        for name in ("w_gate", "w_up", "w_down"):
            getattr(out.layers[l], name)[...] = 0.0
    return out


def zero_out_ablation(weights: mc.ModelWeights, corpus: Corpus, window_start: int,
                      window_len: int = 4) -> EvalReport:
    """Evaluate with MLP weights of ``window_len`` contiguous layers zeroed."""
    n = weights.config.n_layers
    if window_len < 0 or window_start < 0 or window_start + window_len > n:
        raise EvaluationError(f"window [{window_start}, {window_start + window_len}) outside 0..{n}")
    t0 = time.perf_counter()
    ablated = zero_mlp_layers(weights, range(window_start, window_start + window_len))
    return _report(f"zero_mlp[{window_start}:{window_start + window_len}]", None, weights,
                   ablated, corpus, t0,
                   extra={"window_start": window_start, "window_len": window_len})


def sliding_ablation(weights: mc.ModelWeights, corpus: Corpus, window_len: int = 4) -> list[EvalReport]:
    n = weights.config.n_layers
    if window_len > n:
        raise EvaluationError("window longer than the model")
    return [zero_out_ablation(weights, corpus, s, window_len) for s in range(n - window_len + 1)]


# --------------------------------------------------------------------------
# method comparison

# method name -> PruningConfig overrides
METHODS = {
    "mucrasp": {},
    "taylor": {"scoring": "taylor"},
    "magnitude": {"scoring": "magnitude"},
    "no-pivot": {"pivot_mode": "none"},
    "random-pivot": {"pivot_mode": "random"},
    "no-cmds": {"cmds_enabled": False},
    "layerwise": {"allocation": "layerwise"},
}


def method_config(method: str, ratio: float, **overrides) -> al.PruningConfig:
    if method not in METHODS:
        raise EvaluationError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return al.PruningConfig(ratio=ratio, **{**overrides, **METHODS[method]})


def compare_methods(weights: mc.ModelWeights, corpus: Corpus, S: float, methods: list[str],
                    eval_corpus: Corpus | None = None, jobs: int = 1, **overrides) -> list[EvalReport | dict]:
    """One row per method; a failing method yields an error row, the rest still run."""
    if not methods:
        raise EvaluationError("at least one method required")
    eval_corpus = corpus if eval_corpus is None else eval_corpus
    cache: dict = {}
    rows = []
    for method in methods:
        t0 = time.perf_counter()
        try:
            cfg = method_config(method, S, **overrides)
            plan = al.build_plan(weights, corpus, cfg, cache=cache, jobs=jobs)
            _, pruned = mc.apply_prune(weights, plan.keep_units)
            rows.append(_report(method, S, weights, pruned, eval_corpus, t0,
                                retention=retention_report(plan), kept_params=plan.kept_params,
                                extra={"gamma": plan.gamma, "budget": plan.budget}))
        except (ValueError, RuntimeError) as exc:
            rows.append({"method": method, "ratio": S, "error": f"{type(exc).__name__}: {exc}"})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
