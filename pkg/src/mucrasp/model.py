"""Miniature multimodal decoder: GQA attention, SwiGLU MLPs, RMS norm.

Everything is plain numpy with a hand-written reverse pass.  Weight matrices
use the ``[out, in]`` orientation, so ``y = x @ W.T``.  A layer's structural
units are therefore:

* MLP neuron ``j``: row ``j`` of ``w_gate`` and ``w_up``, column ``j`` of ``w_down``.
* GQA group ``g``: rows ``g*hd:(g+1)*hd`` of ``w_k``/``w_v`` plus the query
  heads sharing that group (their rows of ``w_q`` and columns of ``w_o``).
"""

from __future__ import annotations

import dataclasses
import enum
import functools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

RMS_EPS = 1e-6
NEG_INF = -1e30


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_q_heads: int = 4
    n_kv_groups: int = 2
    head_dim: int = 16
    d_mlp: int = 128
    vocab_size: int = 259
    max_seq: int = 256
    n_vision_tokens: int = 8
    precision: str = "double"
    # per-layer widths after pruning; None means the dense (uniform) shape
    mlp_widths: tuple[int, ...] | None = None
    kv_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        dims = ("n_layers", "d_model", "n_q_heads", "n_kv_groups", "head_dim",
                "d_mlp", "vocab_size", "max_seq", "n_vision_tokens")
        for name in dims:
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.n_q_heads % self.n_kv_groups:
            raise ModelError("n_q_heads must be divisible by n_kv_groups")
        if self.n_q_heads * self.head_dim != self.d_model:
            raise ModelError("n_q_heads * head_dim must equal d_model")
        if self.n_vision_tokens >= self.max_seq:
            raise ModelError("n_vision_tokens must be < max_seq")
        if self.precision not in ("single", "double"):
            raise ModelError(f"unknown precision {self.precision!r}")
        for name, cap in (("mlp_widths", self.d_mlp), ("kv_widths", self.n_kv_groups)):
            widths = getattr(self, name)
            if widths is None:
                continue
            widths = tuple(int(w) for w in widths)
            object.__setattr__(self, name, widths)
            if len(widths) != self.n_layers:
                raise ModelError(f"{name} needs one entry per layer")
            if any(w < 1 or w > cap for w in widths):
                raise ModelError(f"{name} entries must lie in [1, {cap}]")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    @property
    def heads_per_group(self) -> int:
        return self.n_q_heads // self.n_kv_groups

    def layer_mlp_width(self, layer: int) -> int:
        return self.d_mlp if self.mlp_widths is None else self.mlp_widths[layer]

    def layer_kv_groups(self, layer: int) -> int:
        return self.n_kv_groups if self.kv_widths is None else self.kv_widths[layer]

    def layer_q_heads(self, layer: int) -> int:
        return self.layer_kv_groups(layer) * self.heads_per_group

    @property
    def is_dense(self) -> bool:
        return self.mlp_widths is None and self.kv_widths is None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("mlp_widths", "kv_widths"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("mlp_widths", "kv_widths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


LAYER_TENSORS = tuple(f.name for f in dataclasses.fields(LayerWeights))


@dataclass
class ModelWeights:
    """Parameter tensors of the decoder; also used as the gradient table."""

    config: ModelConfig
    token_embedding: np.ndarray
    position_embedding: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    output_head: np.ndarray

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "output_head", self.output_head

    def get(self, name: str) -> np.ndarray:
        if name.startswith("layers."):
            _, idx, attr = name.split(".")
            return getattr(self.layers[int(idx)], attr)
        return getattr(self, name)

    def map(self, fn) -> "ModelWeights":
        """New weights with ``fn`` applied to every tensor."""
        layers = [LayerWeights(**{n: fn(getattr(l, n)) for n in LAYER_TENSORS})
                  for l in self.layers]
        return ModelWeights(self.config, fn(self.token_embedding),
                            fn(self.position_embedding), layers,
                            fn(self.final_norm), fn(self.output_head))

    def copy(self) -> "ModelWeights":
        return self.map(np.array)

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_tensors())


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = config.d_model, config.head_dim
    shapes = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        q = config.layer_q_heads(i) * hd
        kv = config.layer_kv_groups(i) * hd
        m = config.layer_mlp_width(i)
        shapes.update({
            f"layers.{i}.attn_norm": (d,),
            f"layers.{i}.w_q": (q, d),
            f"layers.{i}.w_k": (kv, d),
            f"layers.{i}.w_v": (kv, d),
            f"layers.{i}.w_o": (d, q),
            f"layers.{i}.mlp_norm": (d,),
            f"layers.{i}.w_gate": (m, d),
            f"layers.{i}.w_up": (m, d),
            f"layers.{i}.w_down": (d, m),
        })
    shapes["final_norm"] = (d,)
    shapes["output_head"] = (config.vocab_size, d)
    return shapes


def weights_from_named(config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise ModelError(f"missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise ModelError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    layers = [LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LAYER_TENSORS})
              for i in range(config.n_layers)]
    return ModelWeights(config, tensors["token_embedding"], tensors["position_embedding"],
                        layers, tensors["final_norm"], tensors["output_head"])


def init_weights(config: ModelConfig, seed: int = 0, scale: float = 1.0) -> ModelWeights:
    """Random init: N(0, 1/fan_in) matrices, unit norm scales."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=dt)
        elif name.endswith("embedding"):
            tensors[name] = (rng.standard_normal(shape) * 0.5 * scale).astype(dt)
        else:
            std = scale / np.sqrt(shape[1])
            tensors[name] = (rng.standard_normal(shape) * std).astype(dt)
    return weights_from_named(config, tensors)


def zeros_like(weights: ModelWeights) -> ModelWeights:
    return weights.map(np.zeros_like)


# --------------------------------------------------------------------------
# structural units


class UnitKind(enum.IntEnum):
    # attention precedes MLP inside a layer; this is also the tie-break order
    GqaGroup = 0
    MlpNeuron = 1

    @property
    def sublayer(self) -> str:
        return "attention" if self is UnitKind.GqaGroup else "mlp"


@dataclass(frozen=True, order=True)
class StructuralUnit:
    layer: int
    kind: UnitKind
    index_in_layer: int
    cost: int = field(compare=False)

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.layer, int(self.kind), self.index_in_layer)

    def to_dict(self) -> dict:
        return {"kind": self.kind.name, "layer": self.layer, "index": self.index_in_layer}


def mlp_neuron_cost(config: ModelConfig) -> int:
    return 3 * config.d_model


def gqa_group_cost(config: ModelConfig) -> int:
    hd, d = config.head_dim, config.d_model
    return 2 * hd * d + 2 * config.heads_per_group * hd * d


def enumerate_units(config: ModelConfig) -> list[StructuralUnit]:
    """All prunable units ordered by (layer, kind, index)."""
    mlp_cost, gqa_cost = mlp_neuron_cost(config), gqa_group_cost(config)
    units = []
    for layer in range(config.n_layers):
        units += [StructuralUnit(layer, UnitKind.GqaGroup, g, gqa_cost)
                  for g in range(config.layer_kv_groups(layer))]
        units += [StructuralUnit(layer, UnitKind.MlpNeuron, j, mlp_cost)
                  for j in range(config.layer_mlp_width(layer))]
    return units


def non_prunable_count(config: ModelConfig) -> int:
    d = config.d_model
    return (2 * config.vocab_size * d + config.max_seq * d
            + d * (2 * config.n_layers + 1))


def total_parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in expected_shapes(config).values())


# --------------------------------------------------------------------------
# keep masks


@dataclass
class KeepMask:
    """Per-layer boolean masks over GQA groups and MLP neurons."""

    groups: list[np.ndarray]
    neurons: list[np.ndarray]

    @classmethod
    def from_units(cls, config: ModelConfig, keep: Iterable[StructuralUnit]) -> "KeepMask":
        groups = [np.zeros(config.layer_kv_groups(l), bool) for l in range(config.n_layers)]
        neurons = [np.zeros(config.layer_mlp_width(l), bool) for l in range(config.n_layers)]
        for u in keep:
            if not 0 <= u.layer < config.n_layers:
                raise ModelError(f"unit layer out of range: {u}")
            target = groups if u.kind is UnitKind.GqaGroup else neurons
            if not 0 <= u.index_in_layer < target[u.layer].size:
                raise ModelError(f"unit index out of range: {u}")
            target[u.layer][u.index_in_layer] = True
        return cls(groups, neurons)

    def head_mask(self, layer: int, heads_per_group: int) -> np.ndarray:
        return np.repeat(self.groups[layer], heads_per_group)


# --------------------------------------------------------------------------
# forward / loss / backward


@dataclass
class ForwardTrace:
    attn_outputs: list[np.ndarray]
    mlp_outputs: list[np.ndarray]
    is_vision: np.ndarray
    logits: np.ndarray
    loss_mask: np.ndarray | None = None
    _cache: dict | None = field(default=None, repr=False)

    @property
    def modality_tags(self) -> list[str]:
        return ["vision" if v else "text" for v in self.is_vision]


def _rmsnorm(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    n = x / r
    return n * g, n, r


def _rmsnorm_back(dy, n, r, g):
    dg = np.sum(dy * n, axis=0)
    dn = dy * g
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
    return dx, dg


@functools.lru_cache(maxsize=8)
def _causal_bias(T: int, dtype) -> np.ndarray:
    bias = np.triu(np.full((T, T), NEG_INF, dtype=dtype), k=1)
    bias.flags.writeable = False
    return bias


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def forward(weights: ModelWeights, tokens: Sequence[int], vision_embeddings,
            loss_mask=None, keep: KeepMask | None = None) -> ForwardTrace:
    """Run the decoder over ``vision_embeddings`` followed by text ``tokens``.

    Row ``t`` of the returned logits predicts the token at position ``t + 1``.
    ``keep`` zeroes the contribution of dropped units in place.
    """
    cfg = weights.config
    dt = cfg.dtype
    vision = np.asarray(vision_embeddings, dtype=dt)
    if vision.size == 0:
        vision = vision.reshape(0, cfg.d_model)
    if vision.ndim != 2 or vision.shape[1] != cfg.d_model:
        raise ModelError(f"vision embeddings must have shape (n, {cfg.d_model}), got {vision.shape}")
    if vision.shape[0] != cfg.n_vision_tokens:
        raise ModelError(f"expected {cfg.n_vision_tokens} vision embeddings, got {vision.shape[0]}")
    tokens = np.asarray(tokens, dtype=np.int64)
    T = vision.shape[0] + tokens.size
    if T > cfg.max_seq:
        raise ModelError(f"sequence length {T} exceeds max_seq {cfg.max_seq}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ModelError("token id out of range")

    x = np.concatenate([vision, weights.token_embedding[tokens]], axis=0) \
        + weights.position_embedding[:T]
    is_vision = np.zeros(T, bool)
    is_vision[:vision.shape[0]] = True
    causal = _causal_bias(T, dt)
    hd, hpg = cfg.head_dim, cfg.heads_per_group
    scale = 1.0 / np.sqrt(hd)

    caches, attn_outs, mlp_outs = [], [], []
    for li, L in enumerate(weights.layers):
        c = {"x_in": x}
        a, c["n1"], c["r1"] = _rmsnorm(x, L.attn_norm)
        c["a"] = a
        nq, nkv = L.w_q.shape[0] // hd, L.w_k.shape[0] // hd
        q = (a @ L.w_q.T).reshape(T, nq, hd).transpose(1, 0, 2)
        k = (a @ L.w_k.T).reshape(T, nkv, hd).transpose(1, 0, 2)
        v = (a @ L.w_v.T).reshape(T, nkv, hd).transpose(1, 0, 2)
        kk, vv = np.repeat(k, hpg, axis=0), np.repeat(v, hpg, axis=0)
        s = q @ kk.transpose(0, 2, 1) * scale + causal
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = p @ vv
        hmask = None
        if keep is not None:
            hmask = keep.head_mask(li, hpg).astype(dt)
            o = o * hmask[:, None, None]
        oc = o.transpose(1, 0, 2).reshape(T, nq * hd)
        attn_out = oc @ L.w_o.T
        c.update(q=q, kk=kk, vv=vv, p=p, oc=oc, hmask=hmask, nq=nq, nkv=nkv)
        x = x + attn_out

        c["x_mid"] = x
        m, c["n2"], c["r2"] = _rmsnorm(x, L.mlp_norm)
        gate, up = m @ L.w_gate.T, m @ L.w_up.T
        sg = _sigmoid(gate)
        act = gate * sg
        h = act * up
        nmask = None
        if keep is not None:
            nmask = keep.neurons[li].astype(dt)
            h = h * nmask
        mlp_out = h @ L.w_down.T
        c.update(m=m, gate=gate, up=up, sg=sg, act=act, h=h, nmask=nmask)
        x = x + mlp_out

        caches.append(c)
        attn_outs.append(attn_out)
        mlp_outs.append(mlp_out)

    f, nf, rf = _rmsnorm(x, weights.final_norm)
    logits = f @ weights.output_head.T
    cache = {"layers": caches, "tokens": tokens, "n_vision": vision.shape[0],
             "f": f, "nf": nf, "rf": rf, "keep": keep}
    mask = None if loss_mask is None else np.asarray(loss_mask, bool)
    return ForwardTrace(attn_outs, mlp_outs, is_vision, logits, mask, cache)


def _resolve_mask(trace: ForwardTrace, targets, mask):
    targets = np.asarray(targets, dtype=np.int64)
    mask = trace.loss_mask if mask is None else np.asarray(mask, bool)
    if mask is None:
        mask = targets >= 0
    if targets.shape[0] != trace.logits.shape[0] or mask.shape[0] != trace.logits.shape[0]:
        raise ModelError("targets/mask length must equal the sequence length")
    if not mask.any():
        raise ModelError("loss mask is empty")
    if np.any(targets[mask] < 0):
        raise ModelError("masked-in position has no target")
    return targets, mask


def token_nll(trace: ForwardTrace, targets, mask=None) -> np.ndarray:
    """Per-position negative log-likelihood at masked-in rows."""
    targets, mask = _resolve_mask(trace, targets, mask)
    rows = np.flatnonzero(mask)
    lp = _log_softmax(trace.logits[rows])
    return -lp[np.arange(rows.size), targets[rows]]


def loss(trace: ForwardTrace, targets, mask=None, reduction: str = "mean") -> float:
    """Masked NLL; ``reduction`` is ``"mean"`` or ``"sum"`` over masked rows."""
    nll = token_nll(trace, targets, mask)
    return float(nll.sum() if reduction == "sum" else nll.mean())


def backward(weights: ModelWeights, trace: ForwardTrace, targets, mask=None,
             reduction: str = "mean") -> ModelWeights:
    """Exact gradients of :func:`loss` with respect to every weight tensor."""
    if trace._cache is None:
        raise ModelError("trace carries no cache for backward")
    targets, mask = _resolve_mask(trace, targets, mask)
    cache = trace._cache
    cfg = weights.config
    hd, hpg = cfg.head_dim, cfg.heads_per_group
    T = trace.logits.shape[0]
    scale = 1.0 / np.sqrt(hd)
    grads = zeros_like(weights)

    rows = np.flatnonzero(mask)
    dlogits = np.zeros_like(trace.logits)
    lp = _log_softmax(trace.logits[rows])
    probs = np.exp(lp)
    probs[np.arange(rows.size), targets[rows]] -= 1.0
    dlogits[rows] = probs / (rows.size if reduction == "mean" else 1.0)

    grads.output_head[...] = dlogits.T @ cache["f"]
    df = dlogits @ weights.output_head
    dx, grads.final_norm[...] = _rmsnorm_back(df, cache["nf"], cache["rf"], weights.final_norm)

    for li in reversed(range(len(weights.layers))):
        L, G, c = weights.layers[li], grads.layers[li], cache["layers"][li]
        # MLP sublayer
        G.w_down[...] = dx.T @ c["h"]
        dh = dx @ L.w_down
        if c["nmask"] is not None:
            dh = dh * c["nmask"]
        dact = dh * c["up"]
        dup = dh * c["act"]
        sg = c["sg"]
        dgate = dact * sg * (1.0 + c["gate"] * (1.0 - sg))
        G.w_gate[...] = dgate.T @ c["m"]
        G.w_up[...] = dup.T @ c["m"]
        dm = dgate @ L.w_gate + dup @ L.w_up
        dxn, G.mlp_norm[...] = _rmsnorm_back(dm, c["n2"], c["r2"], L.mlp_norm)
        dx = dx + dxn

        # attention sublayer
        nq, nkv = c["nq"], c["nkv"]
        G.w_o[...] = dx.T @ c["oc"]
        do = (dx @ L.w_o).reshape(T, nq, hd).transpose(1, 0, 2)
        if c["hmask"] is not None:
            do = do * c["hmask"][:, None, None]
        p = c["p"]
        dp = do @ c["vv"].transpose(0, 2, 1)
        dvv = p.transpose(0, 2, 1) @ do
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        dq = ds @ c["kk"]
        dkk = ds.transpose(0, 2, 1) @ c["q"]
        dk = dkk.reshape(nkv, hpg, T, hd).sum(axis=1)
        dv = dvv.reshape(nkv, hpg, T, hd).sum(axis=1)
        dq = dq.transpose(1, 0, 2).reshape(T, nq * hd)
        dk = dk.transpose(1, 0, 2).reshape(T, nkv * hd)
        dv = dv.transpose(1, 0, 2).reshape(T, nkv * hd)
        a = c["a"]
        G.w_q[...] = dq.T @ a
        G.w_k[...] = dk.T @ a
        G.w_v[...] = dv.T @ a
        da = dq @ L.w_q + dk @ L.w_k + dv @ L.w_v
        dxn, G.attn_norm[...] = _rmsnorm_back(da, c["n1"], c["r1"], L.attn_norm)
        dx = dx + dxn

    nv = cache["n_vision"]
    grads.position_embedding[:T] = dx
    np.add.at(grads.token_embedding, cache["tokens"], dx[nv:])
    return grads


def loss_and_grad(weights: ModelWeights, tokens, vision, targets, mask,
                  reduction: str = "mean", keep: KeepMask | None = None):
    trace = forward(weights, tokens, vision, mask, keep=keep)
    return loss(trace, targets, mask, reduction), backward(weights, trace, targets, mask, reduction)


def masked_forward(weights: ModelWeights, keep: Iterable[StructuralUnit], tokens,
                   vision_embeddings, loss_mask=None) -> ForwardTrace:
    """Forward pass with dropped units zeroed in place (no slicing)."""
    mask = KeepMask.from_units(weights.config, keep)
    return forward(weights, tokens, vision_embeddings, loss_mask, keep=mask)


# --------------------------------------------------------------------------
# physical pruning


def apply_prune(weights: ModelWeights, keep: Iterable[StructuralUnit]
                ) -> tuple[ModelConfig, ModelWeights]:
    """Slice away every unit not in ``keep``; returns the smaller dense model."""
    cfg = weights.config
    mask = KeepMask.from_units(cfg, keep)
    hd, hpg = cfg.head_dim, cfg.heads_per_group
    empty = [l for l in range(cfg.n_layers)
             if not mask.groups[l].any() or not mask.neurons[l].any()]
    if empty:
        raise ModelError(f"keep-set would empty layer(s) {empty}")

    layers = []
    for li, L in enumerate(weights.layers):
        g_keep = np.flatnonzero(mask.groups[li])
        kv_rows = (g_keep[:, None] * hd + np.arange(hd)).ravel()
        heads = (g_keep[:, None] * hpg + np.arange(hpg)).ravel()
        q_rows = (heads[:, None] * hd + np.arange(hd)).ravel()
        n_keep = np.flatnonzero(mask.neurons[li])
        layers.append(LayerWeights(
            attn_norm=L.attn_norm.copy(),
            w_q=L.w_q[q_rows].copy(),
            w_k=L.w_k[kv_rows].copy(),
            w_v=L.w_v[kv_rows].copy(),
            w_o=L.w_o[:, q_rows].copy(),
            mlp_norm=L.mlp_norm.copy(),
            w_gate=L.w_gate[n_keep].copy(),
            w_up=L.w_up[n_keep].copy(),
            w_down=L.w_down[:, n_keep].copy(),
        ))
    mlp_widths = tuple(int(m.sum()) for m in mask.neurons)
    kv_widths = tuple(int(g.sum()) for g in mask.groups)
    # keep the original dense width as the cap so costs and limits stay comparable
    new_cfg = dataclasses.replace(cfg, mlp_widths=mlp_widths, kv_widths=kv_widths)
    new = ModelWeights(new_cfg, weights.token_embedding.copy(), weights.position_embedding.copy(),
                       layers, weights.final_norm.copy(), weights.output_head.copy())
    return new_cfg, new
