"""Per-sublayer output sensitivity and cross-modal dependency (linear-kernel MMD)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import model as mc
from .calibration import Corpus

CMDS_EPS = 1e-8
SUBLAYERS = ("attention", "mlp")


class ProfilingError(ValueError):
    pass


@dataclass
class LayerProfile:
    layer: int
    sublayer: str
    sens_raw: float
    cmds_raw: float
    sens_norm: float = 0.0
    cmds_norm: float = 0.0
    omega: float = 1.0
    protection: float = 1.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ActivationStats:
    """Pooled sufficient statistics for one traced sublayer output."""

    sum_vision: np.ndarray
    n_vision: int
    sum_text: np.ndarray
    n_text: int
    sum_norm: float
    sum_sq_norm: float

    @classmethod
    def empty(cls, d: int) -> "ActivationStats":
        return cls(np.zeros(d), 0, np.zeros(d), 0, 0.0, 0.0)

    def add(self, acts: np.ndarray, is_vision: np.ndarray) -> None:
        acts = np.asarray(acts, dtype=np.float64)
        is_vision = np.asarray(is_vision, bool)
        self.sum_vision += acts[is_vision].sum(axis=0)
        self.sum_text += acts[~is_vision].sum(axis=0)
        self.n_vision += int(is_vision.sum())
        self.n_text += int((~is_vision).sum())
        norms = np.linalg.norm(acts, axis=1)
        self.sum_norm += float(norms.sum())
        self.sum_sq_norm += float(np.sum(norms ** 2))

    @property
    def count(self) -> int:
        return self.n_vision + self.n_text

    def cmds(self, eps: float = CMDS_EPS) -> float:
        if self.n_vision == 0 or self.n_text == 0:
            raise ProfilingError("CMDS needs both vision and text positions")
        gap = self.sum_vision / self.n_vision - self.sum_text / self.n_text
        return float(np.linalg.norm(gap) / (self.sum_norm / self.count + eps))

    def sensitivity(self) -> float:
        if self.count == 0:
            raise ProfilingError("no positions collected")
        return float(np.sqrt(self.sum_sq_norm / self.count))


def cmds_from_activations(acts, is_vision, eps: float = CMDS_EPS) -> float:
    """``||mean(vision) - mean(text)|| / (mean ||act|| + eps)`` over pooled positions."""
    acts = np.asarray(acts, dtype=np.float64)
    stats = ActivationStats.empty(acts.shape[1])
    stats.add(acts, is_vision)
    return stats.cmds(eps)


def sensitivity_from_activations(acts) -> float:
    acts = np.asarray(acts, dtype=np.float64)
    stats = ActivationStats.empty(acts.shape[1])
    stats.add(acts, np.zeros(acts.shape[0], bool))
    return stats.sensitivity()


def collect_stats(weights: mc.ModelWeights, corpus: Corpus) -> dict[tuple[int, str], ActivationStats]:
    """Run the corpus once and pool per-sublayer activation statistics."""
    cfg = weights.config
    stats = {(l, s): ActivationStats.empty(cfg.d_model)
             for l in range(cfg.n_layers) for s in SUBLAYERS}
    for sample in corpus:
        tokens, vis, _, _ = sample.model_inputs()
        trace = mc.forward(weights, tokens, vis)
        for l in range(cfg.n_layers):
            stats[(l, "attention")].add(trace.attn_outputs[l], trace.is_vision)
            stats[(l, "mlp")].add(trace.mlp_outputs[l], trace.is_vision)
    return stats


def compute_cmds(weights: mc.ModelWeights, corpus: Corpus) -> dict[tuple[int, str], float]:
    return {k: s.cmds() for k, s in collect_stats(weights, corpus).items()}


def compute_sensitivity(weights: mc.ModelWeights, corpus: Corpus) -> dict[tuple[int, str], float]:
    return {k: s.sensitivity() for k, s in collect_stats(weights, corpus).items()}


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def normalize_profiles(profiles: list[LayerProfile]) -> list[LayerProfile]:
    """Min-max both raw scores to [0, 1] within each sublayer class."""
    out = [LayerProfile(**asdict(p)) for p in profiles]
    for sub in {p.sublayer for p in out}:
        group = [p for p in out if p.sublayer == sub]
        sens = _minmax(np.array([p.sens_raw for p in group]))
        cmds = _minmax(np.array([p.cmds_raw for p in group]))
        for p, s, c in zip(group, sens, cmds):
            p.sens_norm, p.cmds_norm = float(s), float(c)
    return out


def profile_layers(weights: mc.ModelWeights, corpus: Corpus) -> list[LayerProfile]:
    """Raw and normalized Sens/CMDS for every (layer, sublayer)."""
    stats = collect_stats(weights, corpus)
    raw = [LayerProfile(l, s, stats[(l, s)].sensitivity(), stats[(l, s)].cmds())
           for l in range(weights.config.n_layers) for s in SUBLAYERS]
    return normalize_profiles(raw)


def layer_sensitivity(profiles: list[LayerProfile]) -> dict[int, float]:
    """Per-layer aggregate: the larger of the two sublayer sensitivities."""
    out: dict[int, float] = {}
    for p in profiles:
        out[p.layer] = max(out.get(p.layer, 0.0), p.sens_raw)
    return out
