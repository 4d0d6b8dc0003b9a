"""First-order Taylor importance per structural unit.

A unit's score is ``sum |w * dL/dw|`` over the parameters pruning it would
remove.  Scores are accumulated per calibration sample (absolute value taken
per sample, then summed).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from . import model as mc
from .calibration import CalibrationSample, Corpus
from .pivots import PivotMask

TABLE_KINDS = ("global", "pivot", "fused", "magnitude")


class AttributionError(ValueError):
    pass


@dataclass
class ImportanceTable:
    units: list[mc.StructuralUnit]
    values: np.ndarray
    kind: str
    sample_count: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.units),):
            raise AttributionError("one score per unit required")
        if self.kind not in TABLE_KINDS:
            raise AttributionError(f"unknown table kind {self.kind!r}")

    def __getitem__(self, unit: mc.StructuralUnit) -> float:
        return float(self.values[self._index[unit.key]])

    @cached_property
    def _index(self) -> dict:
        return {u.key: i for i, u in enumerate(self.units)}

    def kind_mask(self, kind: mc.UnitKind) -> np.ndarray:
        return np.array([u.kind is kind for u in self.units], bool)

    def same_universe(self, other: "ImportanceTable") -> bool:
        return [u.key for u in self.units] == [u.key for u in other.units]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "sample_count": self.sample_count,
            "normalized": self.normalized,
            "scores": [{**u.to_dict(), "value": float(v)} for u, v in zip(self.units, self.values)],
        }

    @classmethod
    def from_json(cls, data: dict, config: mc.ModelConfig) -> "ImportanceTable":
        units = mc.enumerate_units(config)
        by_key = {u.key: u for u in units}
        values = np.zeros(len(units))
        pos = {u.key: i for i, u in enumerate(units)}
        seen = set()
        for row in data["scores"]:
            key = (int(row["layer"]), int(mc.UnitKind[row["kind"]]), int(row["index"]))
            if key not in by_key:
                raise AttributionError(f"score for unknown unit {key}")
            values[pos[key]] = float(row["value"])
            seen.add(key)
        if len(seen) != len(units):
            raise AttributionError("table does not cover every unit")
        return cls(units, values, data["kind"], int(data["sample_count"]), bool(data["normalized"]))


# --------------------------------------------------------------------------
# per-unit slices


def unit_scores(weights: mc.ModelWeights, tensors: mc.ModelWeights,
                strict_paper: bool = False) -> np.ndarray:
    """Sum ``|tensors|`` over each unit's parameter slice, in enumerate_units order.

    ``tensors`` is typically ``|w * g|`` or ``|w|``.  With ``strict_paper``
    a GQA group only counts its Q rows and O columns.
    """
    cfg = weights.config
    hd, hpg = cfg.head_dim, cfg.heads_per_group
    out = []
    for li, T in enumerate(tensors.layers):
        n_groups = cfg.layer_kv_groups(li)
        q = T.w_q.reshape(n_groups, hpg * hd, -1).sum(axis=(1, 2))
        o = T.w_o.reshape(T.w_o.shape[0], n_groups, hpg * hd).sum(axis=(0, 2))
        group = q + o
        if not strict_paper:
            group = group + T.w_k.reshape(n_groups, hd, -1).sum(axis=(1, 2)) \
                + T.w_v.reshape(n_groups, hd, -1).sum(axis=(1, 2))
        neuron = T.w_gate.sum(axis=1) + T.w_up.sum(axis=1) + T.w_down.sum(axis=0)
        out.append(group)
        out.append(neuron)
    return np.concatenate(out).astype(np.float64)


def taylor_unit_scores(weights: mc.ModelWeights, grads: mc.ModelWeights,
                       strict_paper: bool = False) -> np.ndarray:
    layers = [mc.LayerWeights(**{n: np.abs(getattr(w, n) * getattr(g, n)) for n in mc.LAYER_TENSORS})
              for w, g in zip(weights.layers, grads.layers)]
    prod = replace(weights, layers=layers)
    return unit_scores(weights, prod, strict_paper)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# attribution passes


def sample_taylor(weights: mc.ModelWeights, sample: CalibrationSample, rows=None,
                  reduction: str = "mean", strict_paper: bool = False) -> np.ndarray:
    """Per-unit ``|w*g|`` for one sample; ``rows`` restricts the loss to those logit rows."""
    tokens, vis, targets, mask = sample.model_inputs()
    if rows is not None:
        mask = np.zeros_like(mask)
        mask[np.asarray(list(rows), dtype=np.int64)] = True
    _, grads = mc.loss_and_grad(weights, tokens, vis, targets, mask, reduction)
    return taylor_unit_scores(weights, grads, strict_paper)


def global_attribution(weights: mc.ModelWeights, corpus: Corpus, reduction: str = "mean",
                       strict_paper: bool = False, jobs: int = 1) -> ImportanceTable:
    """Full-response Taylor scores averaged over the corpus."""
    per_sample = _map(lambda s: sample_taylor(weights, s, None, reduction, strict_paper),
                      list(corpus), jobs)
    acc = np.zeros_like(per_sample[0])
    for s in per_sample:
        acc += s
    return ImportanceTable(mc.enumerate_units(weights.config), acc / len(corpus), "global",
                           len(corpus))


def pivot_attribution(weights: mc.ModelWeights, corpus: Corpus, masks: list[PivotMask | None],
                      strict_paper: bool = False, jobs: int = 1) -> ImportanceTable:
    """Window-restricted (sum-form) Taylor scores.

    Each contributing sample is scaled by ``1/|pivots|``; the accumulator is
    then divided by the number of contributing samples.
    """
    if len(masks) != len(corpus):
        raise AttributionError("one pivot mask per sample required")
    work = [(s, m) for s, m in zip(corpus, masks) if m is not None and m.window]
    if not work:
        raise AttributionError("no sample has a non-empty transition window")

    def one(item):
        sample, pm = item
        rows = sample.rows_for_response_positions(pm.window)
        return sample_taylor(weights, sample, rows, "sum", strict_paper) / len(pm.pivot_indices)

    per_sample = _map(one, work, jobs)
    acc = np.zeros_like(per_sample[0])
    for s in per_sample:
        acc += s
    return ImportanceTable(mc.enumerate_units(weights.config), acc / len(work), "pivot", len(work))


def magnitude_scores(weights: mc.ModelWeights, strict_paper: bool = False) -> ImportanceTable:
    """l1 norm of each unit's parameters."""
    return ImportanceTable(mc.enumerate_units(weights.config),
                           unit_scores(weights, weights.map(np.abs), strict_paper), "magnitude")


def normalize_importance(table: ImportanceTable) -> ImportanceTable:
    """Divide each unit kind's scores by that kind's mean (all-zero kinds stay zero)."""
    values = table.values.copy()
    for kind in mc.UnitKind:
        sel = table.kind_mask(kind)
        if not sel.any():
            continue
        mean = values[sel].mean()
        values[sel] = values[sel] / mean if mean > 0 else 0.0
    return ImportanceTable(table.units, values, table.kind, table.sample_count, True)
