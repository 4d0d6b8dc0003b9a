"""Score fusion, layer protection and budgeted global unit selection."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import attribution as attr
from . import model as mc
from . import pivots as pv
from . import profiling as prof
from .calibration import Corpus

PIVOT_MODES = ("real", "random", "none")
ALLOCATIONS = ("global", "layerwise")
SCORINGS = ("mucrasp", "magnitude", "taylor")


class AllocationError(ValueError):
    pass


class InfeasibleBudgetError(AllocationError):
    """Minimum-retention cost alone exceeds the budget."""

    def __init__(self, budget: int, required: int, binding: list[dict]):
        self.budget, self.required, self.binding = budget, required, binding
        layers = sorted({b["layer"] for b in binding})
        super().__init__(f"minimum retention needs {required} parameters but the budget is "
                         f"{budget}; binding layers: {layers}")


@dataclass
class PruningConfig:
    ratio: float
    window: int = 8
    min_markers: int = 2
    gamma_base: float = 0.4
    rho: float = 2.0
    alpha_base: float = 0.3
    alpha_slope: float = 1.5
    beta_base: float = 0.2
    beta_slope: float = 1.0
    n_early: int = 4
    n_final: int = 2
    early_boost_slope: float = 0.5
    final_boost: float = 1.3
    attention_boost: float = 1.8
    vision_boost: float = 1.2
    attn_keep_floor: int = 2
    attn_keep_min_frac: float = 0.35
    attn_keep_slope: float = 0.70
    mlp_keep_floor: int = 1
    mlp_keep_min_frac: float = 0.05
    mlp_keep_slope: float = 0.25
    pivot_mode: str = "real"
    cmds_enabled: bool = True
    allocation: str = "global"
    scoring: str = "mucrasp"
    strict_paper: bool = False
    seed: int = 42

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise AllocationError(f"pruning ratio must lie in (0, 1), got {self.ratio}")
        if not 0.0 <= self.gamma_base <= 1.0:
            raise AllocationError("gamma_base must lie in [0, 1]")
        if min(self.final_boost, self.attention_boost, self.vision_boost) < 1.0:
            raise AllocationError("structural boosts must be >= 1")
        if self.window < 1:
            raise AllocationError("window must be >= 1")
        if self.pivot_mode not in PIVOT_MODES:
            raise AllocationError(f"pivot_mode must be one of {PIVOT_MODES}")
        if self.allocation not in ALLOCATIONS:
            raise AllocationError(f"allocation must be one of {ALLOCATIONS}")
        if self.scoring not in SCORINGS:
            raise AllocationError(f"scoring must be one of {SCORINGS}")

    def alpha(self, S: float | None = None) -> float:
        S = self.ratio if S is None else S
        return self.alpha_base + self.alpha_slope * S

    def beta(self, S: float | None = None) -> float:
        S = self.ratio if S is None else S
        return self.beta_base + self.beta_slope * S

    def attn_min_keep(self, n: int, S: float | None = None) -> int:
        S = self.ratio if S is None else S
        frac = max(self.attn_keep_min_frac, self.attn_keep_slope * (1 - S))
        return min(n, max(self.attn_keep_floor, math.floor(n * frac)))

    def mlp_min_keep(self, n: int, S: float | None = None) -> int:
        S = self.ratio if S is None else S
        frac = max(self.mlp_keep_min_frac, self.mlp_keep_slope * (1 - S))
        return min(n, max(self.mlp_keep_floor, math.floor(n * frac)))

    def min_keep(self, kind: mc.UnitKind, n: int) -> int:
        return self.attn_min_keep(n) if kind is mc.UnitKind.GqaGroup else self.mlp_min_keep(n)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def dynamic_gamma(S: float, gamma_base: float = 0.4, rho: float = 2.0) -> float:
    """Pivot-signal weight, shrinking as the pruning ratio grows."""
    if not 0.0 <= S <= 1.0:
        raise AllocationError("S must lie in [0, 1]")
    return gamma_base * (1 - S) ** rho


def fuse(global_table: attr.ImportanceTable, pivot_table: attr.ImportanceTable,
         gamma: float) -> attr.ImportanceTable:
    if not global_table.same_universe(pivot_table):
        raise AllocationError("global and pivot tables cover different units")
    values = (1 - gamma) * global_table.values + gamma * pivot_table.values
    return attr.ImportanceTable(global_table.units, values, "fused",
                                global_table.sample_count,
                                global_table.normalized and pivot_table.normalized)


def structural_prior(layer: int, sublayer: str, n_layers: int, config: PruningConfig,
                     vision: bool = False) -> float:
    if not 0 <= layer < n_layers:
        raise AllocationError(f"layer {layer} out of range")
    omega = 1.0
    if layer < config.n_early:
        omega *= 1 + config.early_boost_slope * (1 - layer / config.n_early)
    if layer >= n_layers - config.n_final:
        omega *= config.final_boost
    if sublayer == "attention":
        omega *= config.attention_boost
    if vision:
        omega *= config.vision_boost
    return omega


def protection(profile: prof.LayerProfile, S: float, config: PruningConfig) -> float:
    sens_term = 1 + config.alpha(S) * profile.sens_norm
    cmds_term = 1 + config.beta(S) * profile.cmds_norm if config.cmds_enabled else 1.0
    return sens_term * cmds_term * profile.omega


# --------------------------------------------------------------------------
# packing


@dataclass
class PackResult:
    keep: np.ndarray
    value: float
    cost: int
    fallback_fired: bool


def efficiency_order(values: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Indices by descending value/cost; ties keep input (layer, kind, index) order."""
    eff = np.asarray(values, float) / np.asarray(costs, float)
    return np.argsort(-eff, kind="stable")


def _greedy_fill(order, costs, budget, keep) -> int:
    used = int(costs[keep].sum())
    for i in order:
        if not keep[i] and used + costs[i] <= budget:
            keep[i] = True
            used += int(costs[i])
    return used


def greedy_pack(values, costs, budget: int) -> PackResult:
    """Skip-and-continue greedy by efficiency, with best-single-item fallback.

    The returned set is maximal: no excluded item fits the leftover budget.
    """
    values = np.asarray(values, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.int64)
    if budget < 0:
        raise AllocationError("budget must be >= 0")
    if np.any(costs < 1):
        raise AllocationError("costs must be >= 1")
    order = efficiency_order(values, costs)
    keep = np.zeros(values.size, bool)
    _greedy_fill(order, costs, budget, keep)
    total = float(values[keep].sum())

    fallback = False
    fits = np.flatnonzero(costs <= budget)
    if fits.size:
        best = int(fits[np.argmax(values[fits])])
        if values[best] > total:
            alt = np.zeros(values.size, bool)
            alt[best] = True
            _greedy_fill(order, costs, budget, alt)
            if values[alt].sum() > total:
                keep, total, fallback = alt, float(values[alt].sum()), True
    return PackResult(keep, total, int(costs[keep].sum()), fallback)


def _groups(units: list[mc.StructuralUnit]) -> dict[tuple[int, mc.UnitKind], np.ndarray]:
    out: dict[tuple[int, mc.UnitKind], list[int]] = {}
    for i, u in enumerate(units):
        out.setdefault((u.layer, u.kind), []).append(i)
    return {k: np.asarray(v) for k, v in out.items()}


def minimum_retention(units, config: PruningConfig) -> dict[tuple[int, mc.UnitKind], int]:
    return {k: config.min_keep(k[1], idx.size) for k, idx in _groups(units).items()}


def check_feasible(units, costs, budget: int, config: PruningConfig) -> None:
    groups = _groups(units)
    etas = minimum_retention(units, config)
    binding = []
    required = 0
    for key, idx in groups.items():
        need = int(np.sort(costs[idx])[:etas[key]].sum())
        required += need
        binding.append({"layer": key[0], "kind": key[1].name, "min_keep": etas[key], "cost": need})
    if required > budget:
        binding.sort(key=lambda b: (-b["cost"], b["layer"], b["kind"]))
        raise InfeasibleBudgetError(budget, required, binding)


@dataclass
class SafetyResult:
    keep: np.ndarray
    forced_in: list[int]
    evicted: list[int]


def enforce_safety(keep, units: list[mc.StructuralUnit], efficiency, costs, budget: int,
                   config: PruningConfig) -> SafetyResult:
    """Force in each (layer, kind)'s best excluded units up to its minimum, then
    evict the least efficient non-protected units until the budget holds."""
    keep = np.array(keep, bool)
    efficiency = np.asarray(efficiency, float)
    costs = np.asarray(costs, np.int64)
    check_feasible(units, costs, budget, config)
    groups = _groups(units)
    etas = minimum_retention(units, config)
    forced, evicted = [], []
    for key, idx in groups.items():
        short = etas[key] - int(keep[idx].sum())
        if short > 0:
            excluded = idx[~keep[idx]]
            best = excluded[np.argsort(-efficiency[excluded], kind="stable")][:short]
            keep[best] = True
            forced.extend(int(i) for i in best)

    count = {key: int(keep[idx].sum()) for key, idx in groups.items()}
    group_of = {int(i): key for key, idx in groups.items() for i in idx}
    used = int(costs[keep].sum())
    if used > budget:
        # ascending efficiency; ties evict later units first
        order = sorted(np.flatnonzero(keep), key=lambda i: (efficiency[i], -i))
        for i in order:
            if used <= budget:
                break
            key = group_of[int(i)]
            if count[key] <= etas[key]:
                continue
            keep[i] = False
            count[key] -= 1
            used -= int(costs[i])
            evicted.append(int(i))
        if used > budget:
            raise AllocationError("eviction could not meet the budget")
    return SafetyResult(keep, sorted(forced), evicted)


def layerwise_select(units, efficiency, costs, budget: int, config: PruningConfig) -> np.ndarray:
    """Uniform per-(layer, kind) keep fraction ``1 - S`` with minimum retention.

    If the uniform counts overshoot the budget, every MLP group (then every
    attention group) gives up one unit per round until the budget holds.
    """
    costs = np.asarray(costs, np.int64)
    check_feasible(units, costs, budget, config)
    groups = _groups(units)
    etas = minimum_retention(units, config)
    target = {k: max(etas[k], math.floor((1 - config.ratio) * idx.size)) for k, idx in groups.items()}
    ranked = {k: idx[np.argsort(-np.asarray(efficiency)[idx], kind="stable")] for k, idx in groups.items()}

    def cost_of(t):
        return sum(int(costs[ranked[k][:n]].sum()) for k, n in t.items())

    for kind in (mc.UnitKind.MlpNeuron, mc.UnitKind.GqaGroup):
        keys = sorted(k for k in groups if k[1] is kind)
        while cost_of(target) > budget:
            movable = [k for k in keys if target[k] > etas[k]]
            if not movable:
                break
            for k in movable:
                target[k] -= 1
                if cost_of(target) <= budget:
                    break
    keep = np.zeros(len(units), bool)
    for k, n in target.items():
        keep[ranked[k][:n]] = True
    return keep


@dataclass
class Selection:
    keep: np.ndarray
    efficiency: np.ndarray
    budget: int
    kept_params: int
    forced_in: list[int]
    evicted: list[int]
    fallback_fired: bool
    packed: np.ndarray | None = None


def allocate(units: list[mc.StructuralUnit], values, config: PruningConfig) -> Selection:
    """Budgeted selection from per-unit values (already protection-weighted)."""
    values = np.asarray(values, dtype=np.float64)
    costs = np.array([u.cost for u in units], dtype=np.int64)
    efficiency = values / costs
    budget = math.floor((1 - config.ratio) * int(costs.sum()))
    check_feasible(units, costs, budget, config)
    packed, fallback = None, False
    if config.allocation == "layerwise":
        keep = layerwise_select(units, efficiency, costs, budget, config)
    else:
        pack = greedy_pack(values, costs, budget)
        keep, packed, fallback = pack.keep, pack.keep.copy(), pack.fallback_fired
    safety = enforce_safety(keep, units, efficiency, costs, budget, config)
    return Selection(safety.keep, efficiency, budget, int(costs[safety.keep].sum()),
                     safety.forced_in, safety.evicted, fallback, packed)


# --------------------------------------------------------------------------
# plan


@dataclass
class PruningPlan:
    units: list[mc.StructuralUnit]
    keep: np.ndarray
    values: np.ndarray
    efficiency: np.ndarray
    budget: int
    budget_total_base: int
    kept_params: int
    forced_in: list[int]
    evicted: list[int]
    config: PruningConfig
    model_config: mc.ModelConfig
    gamma: float
    fallback_fired: bool = False
    profiles: list[prof.LayerProfile] = field(default_factory=list)
    pivot_sources: dict = field(default_factory=dict)

    @property
    def keep_units(self) -> list[mc.StructuralUnit]:
        return [u for u, k in zip(self.units, self.keep) if k]

    @property
    def prunable_params(self) -> int:
        return int(sum(u.cost for u in self.units))

    def to_json(self) -> dict:
        ref = lambda i: self.units[i].to_dict()
        return {
            "schema_version": 1,
            "config": self.config.to_json(),
            "model_config": self.model_config.to_dict(),
            "gamma": self.gamma,
            "budget": self.budget,
            "budget_total_base": self.budget_total_base,
            "prunable_params": self.prunable_params,
            "kept_params": self.kept_params,
            "retention_prunable": self.kept_params / self.prunable_params,
            "fallback_fired": self.fallback_fired,
            "pivot_sources": self.pivot_sources,
            "units": [{**u.to_dict(), "kept": bool(k), "value": float(v), "efficiency": float(e),
                       "cost": u.cost}
                      for u, k, v, e in zip(self.units, self.keep, self.values, self.efficiency)],
            "forced_in": [ref(i) for i in self.forced_in],
            "evicted": [ref(i) for i in self.evicted],
            "profiles": [p.to_json() for p in self.profiles],
        }

    def same_selection(self, other: "PruningPlan") -> bool:
        return (np.array_equal(self.keep, other.keep) and self.forced_in == other.forced_in
                and self.evicted == other.evicted and self.budget == other.budget)


def corpus_pivot_masks(corpus: Corpus, config: PruningConfig) -> list[pv.PivotMask]:
    masks = []
    for i, s in enumerate(corpus):
        real = pv.detect_pivots(s.response_text, s.char_to_token, config.window,
                                config.min_markers, s.response_length)
        if config.pivot_mode == "random":
            masks.append(pv.random_pivots(s.response_length, len(real.pivot_indices),
                                          seed=config.seed * 100003 + i, W=config.window))
        else:
            masks.append(real)
    return masks


def unit_protection(units, profiles: list[prof.LayerProfile], n_layers: int,
                    config: PruningConfig) -> np.ndarray:
    by_key = {}
    for p in profiles:
        p.omega = structural_prior(p.layer, p.sublayer, n_layers, config)
        p.protection = protection(p, config.ratio, config)
        by_key[(p.layer, p.sublayer)] = p.protection
    return np.array([by_key[(u.layer, u.kind.sublayer)] for u in units])


def fused_table(weights: mc.ModelWeights, corpus: Corpus, config: PruningConfig,
                cache: dict | None = None, jobs: int = 1) -> tuple[attr.ImportanceTable, float, dict]:
    """Phases 1, 2 and the fusion step; returns ``(fused, gamma, pivot_sources)``."""
    cache = {} if cache is None else cache
    gkey = ("global", config.strict_paper)
    if gkey not in cache:
        cache[gkey] = attr.normalize_importance(
            attr.global_attribution(weights, corpus, strict_paper=config.strict_paper, jobs=jobs))
    g = cache[gkey]
    if config.scoring == "taylor" or config.pivot_mode == "none":
        return g, 0.0, {}
    gamma = dynamic_gamma(config.ratio, config.gamma_base, config.rho)
    masks = corpus_pivot_masks(corpus, config)
    sources: dict[str, int] = {}
    for m in masks:
        sources[m.source] = sources.get(m.source, 0) + 1
    pkey = ("pivot", config.strict_paper, config.pivot_mode, config.window, config.min_markers,
            config.seed if config.pivot_mode == "random" else None)
    if pkey not in cache:
        cache[pkey] = attr.normalize_importance(
            attr.pivot_attribution(weights, corpus, masks, config.strict_paper, jobs=jobs))
    return fuse(g, cache[pkey], gamma), gamma, sources


def build_plan(weights: mc.ModelWeights, corpus: Corpus, config: PruningConfig,
               cache: dict | None = None, jobs: int = 1) -> PruningPlan:
    """Score, protect, pack and enforce minimum retention."""
    cache = {} if cache is None else cache
    cfg = weights.config
    units = mc.enumerate_units(cfg)
    profiles: list[prof.LayerProfile] = []
    gamma, sources = 0.0, {}

    if config.scoring == "magnitude":
        values = attr.magnitude_scores(weights, config.strict_paper).values
    else:
        fused, gamma, sources = fused_table(weights, corpus, config, cache, jobs)
        if config.scoring == "taylor":
            values = fused.values.copy()
        else:
            if "profiles" not in cache:
                cache["profiles"] = prof.profile_layers(weights, corpus)
            profiles = [prof.LayerProfile(**dataclasses.asdict(p)) for p in cache["profiles"]]
            values = fused.values * unit_protection(units, profiles, cfg.n_layers, config)

    budget_total = math.floor((1 - config.ratio) * mc.total_parameter_count(cfg))
    sel = allocate(units, values, config)
    keep = sel.keep
    return PruningPlan(units, keep, values, sel.efficiency, sel.budget, budget_total,
                       sel.kept_params, sel.forced_in, sel.evicted, config, cfg,
                       gamma, sel.fallback_fired, profiles, sources)
