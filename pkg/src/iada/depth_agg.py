"""Cross-depth aggregation at block boundaries.

At the end of block ``k`` each routing stream (visual, text, or one shared
stream) builds a query, attends over its own rows of the cached boundary
states ``h^0 .. h^{(k-1)B}`` and adds the result back to its positions through
a sigmoid gate::

    c   = norm(pool(h_stream))                 # context, adaptive mode
    q   = W_up @ W_down @ c                    # or a stored q in fixed mode
    r   = CrossAttn(q, [h^0_s; ...; h^{(k-1)B}_s])
    h_j = h_j + sigmoid(gamma_k) * r           # j in the stream's positions

All functions work on batches: hidden states are (b, n, d) and the modality
mask is a (b, n) boolean array with True at visual positions. Modality
separation is done with masks rather than gathers, so rows outside a stream
get exactly zero weight and the result is bit-identical to slicing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numeric as nm
from .numeric import Tensor

QUERY_MODES = ("fixed", "adaptive")
CONDITIONINGS = ("self_modal", "cross_modal", "shared_no_split", "text_only", "vision_only")
SHARINGS = ("separate_per_modality", "shared_projection")
NONLINEARITIES = ("linear", "gelu")
POOLINGS = ("mean", "attention_probe")
GRANULARITIES = ("sequence_level", "token_level")
GATE_MODES = ("global", "per_block", "input_adaptive")
ATTENTIONS = ("parameter_free", "learned_projections")
FULL_RANK = "full_rank"

_CHOICES = {
    "query_mode": QUERY_MODES,
    "conditioning": CONDITIONINGS,
    "projection_sharing": SHARINGS,
    "bottleneck_nonlinearity": NONLINEARITIES,
    "pooling": POOLINGS,
    "granularity": GRANULARITIES,
    "gate_mode": GATE_MODES,
    "attention_parameterization": ATTENTIONS,
}


@dataclass(frozen=True)
class AggregatorConfig:
    query_mode: str = "adaptive"
    conditioning: str = "self_modal"
    projection_sharing: str = "separate_per_modality"
    rank: int | str = 16
    bottleneck_nonlinearity: str = "linear"
    pooling: str = "mean"
    granularity: str = "sequence_level"
    gate_mode: str = "per_block"
    gate_init: float = -12.0
    attention_parameterization: str = "parameter_free"
    per_boundary_params: bool = False
    context_norm: bool = True

    def __post_init__(self):
        for name, allowed in _CHOICES.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        if self.rank != FULL_RANK:
            if not isinstance(self.rank, (int, np.integer)) or isinstance(self.rank, bool) or self.rank < 1:
                raise ValueError(f"rank must be a positive integer or {FULL_RANK!r}, got {self.rank!r}")
        elif self.bottleneck_nonlinearity == "gelu":
            raise ValueError("a full-rank query map has no bottleneck for the gelu variant")

    @property
    def full_rank(self) -> bool:
        return self.rank == FULL_RANK

    def check_width(self, d: int) -> None:
        if self.query_mode == "adaptive" and not self.full_rank and self.rank > d:
            raise ValueError(f"rank {self.rank} exceeds width {d}")

    def streams(self) -> list[tuple[str, str]]:
        """(stream name, rows it covers) pairs; rows are visual, text, or all."""
        return {
            "self_modal": [("v", "visual"), ("t", "text")],
            "cross_modal": [("v", "visual"), ("t", "text")],
            "shared_no_split": [("all", "all")],
            "text_only": [("t", "text")],
            "vision_only": [("v", "visual")],
        }[self.conditioning]

    def param_key(self, stream: str) -> str:
        if self.projection_sharing == "shared_projection" and len(self.streams()) > 1:
            return "shared"
        return stream

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- parameter accounting --------------------------------------------------------

def _set_size(cfg: AggregatorConfig, d: int) -> int:
    """Elements in one stream's parameter set."""
    n = 0
    if cfg.query_mode == "adaptive":
        if cfg.context_norm:
            n += 2 * d
        n += d * d if cfg.full_rank else 2 * cfg.rank * d
    else:
        n += d
    if cfg.pooling == "attention_probe":
        n += d
    if cfg.attention_parameterization == "learned_projections":
        n += 4 * d * d
    return n


def gate_size(cfg: AggregatorConfig, d: int, n_blocks: int) -> int:
    return {"global": 1, "per_block": n_blocks, "input_adaptive": d + 1}[cfg.gate_mode]


def param_count(cfg: AggregatorConfig, d: int, n_blocks: int = 4, include_gates: bool = False) -> int:
    """Closed-form count of aggregator parameters.

    By default the gate logits are left out, matching how routing parameters
    are usually quoted; ``include_gates=True`` gives the full stored total.
    """
    n_sets = len({cfg.param_key(s) for s, _ in cfg.streams()})
    total = n_sets * _set_size(cfg, d)
    if cfg.per_boundary_params:
        total *= n_blocks
    if include_gates:
        total += gate_size(cfg, d, n_blocks)
    return total


def format_millions(count: int, decimals: int | None = None) -> str:
    """``139264 -> '0.14M'``; two decimals below one million, one above."""
    if decimals is None:
        decimals = 2 if count < 1_000_000 else 1
    return f"{count / 1e6:.{decimals}f}M"


# -- the module ----------------------------------------------------------------

class DepthAggregator:
    """Holds aggregator parameters and applies injection at each boundary."""

    def __init__(self, cfg: AggregatorConfig, d_model: int, n_blocks: int, n_heads: int,
                 seed: int = 0):
        cfg.check_width(d_model)
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.cfg = cfg
        self.d = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.params: dict[str, Tensor] = {}
        r = np.random.default_rng(seed)
        d = d_model
        prefixes = [f"b{k}." for k in range(1, n_blocks + 1)] if cfg.per_boundary_params else [""]
        keys = sorted({cfg.param_key(s) for s, _ in cfg.streams()})
        for pre in prefixes:
            for key in keys:
                name = f"{pre}{key}."
                P = self.params
                if cfg.query_mode == "adaptive":
                    if cfg.context_norm:
                        P[name + "norm_scale"] = nm.parameter(np.ones(d))
                        P[name + "norm_bias"] = nm.parameter(np.zeros(d))
                    if cfg.full_rank:
                        P[name + "full"] = nm.parameter(r.normal(0, 1 / np.sqrt(d), (d, d)))
                    else:
                        P[name + "down"] = nm.parameter(r.normal(0, 1 / np.sqrt(d), (cfg.rank, d)))
                        P[name + "up"] = nm.parameter(r.normal(0, 1 / np.sqrt(cfg.rank), (d, cfg.rank)))
                else:
                    P[name + "query"] = nm.parameter(r.normal(0, 1.0, (1, d)))
                if cfg.pooling == "attention_probe":
                    P[name + "probe"] = nm.parameter(np.zeros(d))
                if cfg.attention_parameterization == "learned_projections":
                    for w in ("wq", "wk", "wv", "wo"):
                        P[name + w] = nm.parameter(r.normal(0, 1 / np.sqrt(d), (d, d)))
        if cfg.gate_mode == "global":
            self.params["gate"] = nm.parameter(np.full(1, cfg.gate_init))
        elif cfg.gate_mode == "per_block":
            self.params["gate"] = nm.parameter(np.full(n_blocks, cfg.gate_init))
        else:
            self.params["gate"] = nm.parameter(np.full(1, cfg.gate_init))
            self.params["gate_w"] = nm.parameter(np.zeros(d))

    # -- helpers -----------------------------------------------------------
    def stream_params(self, k: int, stream: str) -> dict[str, Tensor]:
        pre = f"b{k}." if self.cfg.per_boundary_params else ""
        name = f"{pre}{self.cfg.param_key(stream)}."
        return {key[len(name):]: v for key, v in self.params.items() if key.startswith(name)}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "DepthAggregator":
        new = DepthAggregator.__new__(DepthAggregator)
        new.__dict__.update(self.__dict__)
        new.params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)
                      for k, v in self.params.items()}
        return new

    def astype(self, bits: int) -> "DepthAggregator":
        dtype = {32: np.float32, 64: np.float64}[bits]
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def inject(self, k: int, h: Tensor, cache, visual: np.ndarray) -> Tensor:
        residuals, contexts = aggregate(self, k, h, cache, visual)
        return gated_inject(self, k, h, residuals, visual, contexts)


# -- operations ------------------------------------------------------------------

def stream_weights(visual: np.ndarray, rows: str, dtype) -> np.ndarray:
    """0/1 float mask (same shape as ``visual``) selecting a stream's positions."""
    visual = np.asarray(visual, dtype=bool)
    if rows == "visual":
        w = visual
    elif rows == "text":
        w = ~visual
    else:
        w = np.ones_like(visual)
    return w.astype(dtype)


def pool_context(h: Tensor, weights: np.ndarray | None, p: dict, cfg: AggregatorConfig) -> Tensor:
    """Pool the selected rows of ``h`` into one context vector per sequence.

    ``h`` is (n, d) or (b, n, d); ``weights`` the 0/1 row selector (None = all
    rows). Mean mode averages the rows; attention_probe weights them by
    softmax(h . probe / sqrt(d)). The context norm is applied when present.
    An empty selection gives a zero vector before normalisation.
    """
    d = h.shape[-1]
    if weights is None:
        weights = np.ones(h.shape[:-1], dtype=h.dtype)
    weights = np.asarray(weights, dtype=h.dtype)
    if cfg.pooling == "attention_probe" and "probe" in p:
        scores = nm.matmul(h, nm.reshape(p["probe"], (d, 1))) * (1.0 / np.sqrt(d))
        scores = nm.reshape(scores, weights.shape)
        alpha = nm.softmax(scores, axis=-1, mask=weights > 0)
    else:
        count = np.maximum(weights.sum(axis=-1, keepdims=True), 1.0)
        alpha = nm.Tensor(weights / count, dtype=h.dtype)
    c = nm.matmul(nm.reshape(alpha, weights.shape[:-1] + (1, weights.shape[-1])), h)
    c = nm.reshape(c, h.shape[:-2] + (d,))
    return normalize_context(c, p)


def normalize_context(c: Tensor, p: dict) -> Tensor:
    if "norm_scale" in p:
        return nm.affine_norm(c, p["norm_scale"], p["norm_bias"])
    return c


def gen_query(c: Tensor, p: dict, cfg: AggregatorConfig) -> Tensor:
    """Map context rows (..., d) to query rows (..., d)."""
    if cfg.query_mode == "fixed":
        return _broadcast_query(p["query"], c)
    if cfg.full_rank:
        return _rows_times(c, p["full"])
    z = _rows_times(c, p["down"])
    if cfg.bottleneck_nonlinearity == "gelu":
        z = nm.gelu(z)
    return _rows_times(z, p["up"])


def _rows_times(x: Tensor, w: Tensor) -> Tensor:
    """Apply ``w`` (out, in) to each row of ``x`` (..., in)."""
    lead = x.shape[:-1]
    x2 = nm.reshape(x, (-1, x.shape[-1]))
    y = nm.matmul(x2, nm.transpose(w))
    return nm.reshape(y, lead + (w.shape[0],))


def _broadcast_query(q: Tensor, c: Tensor | None) -> Tensor:
    if c is None:
        return q
    lead = c.shape[:-1]
    ones = np.ones(lead + (1,), dtype=q.dtype)
    return nm.mul(nm.reshape(q, (q.shape[-1],)), ones)


def cross_attn(q: Tensor, memory: Tensor, p: dict, cfg: AggregatorConfig, n_heads: int,
               mask: np.ndarray | None = None) -> Tensor:
    """Multi-head cross-attention of queries (..., n_q, d) over memory (..., n_x, d).

    ``mask`` (..., n_x) marks usable memory rows. parameter_free splits q and
    memory into ``n_heads`` chunks and uses the memory as keys and values;
    learned_projections applies per-head W_Q, W_K, W_V and an output W_O.
    """
    if memory.shape[-2] == 0:
        raise ValueError("cross-attention over an empty memory")
    amask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        amask = mask[..., None, None, :]
    if cfg.attention_parameterization == "parameter_free":
        return nm.multihead_attention(q, memory, memory, n_heads, amask)
    out = nm.multihead_attention(nm.matmul(q, p["wq"]), nm.matmul(memory, p["wk"]),
                                 nm.matmul(memory, p["wv"]), n_heads, amask)
    return nm.matmul(out, p["wo"])


def aggregate(agg: DepthAggregator, k: int, h: Tensor, cache, visual: np.ndarray):
    """Residuals for boundary ``k`` from cache entries 0..k-1.

    ``h`` is the current (pre-injection) boundary state. Returns
    ``(residuals, contexts)`` keyed by stream; a residual is (b, d) for
    sequence-level routing and (b, n, d) for token-level. Streams that the
    configuration does not adapt are absent (zero residual).
    """
    cfg = agg.cfg
    if k < 1 or k > agg.n_blocks:
        raise ValueError(f"boundary k must be in 1..{agg.n_blocks}, got {k}")
    if len(cache) < k:
        raise ValueError(f"cache holds {len(cache)} entries, boundary {k} needs {k}")
    visual = np.asarray(visual, dtype=bool)
    if visual.shape != h.shape[:-1]:
        raise ValueError("modality mask shape does not match hidden state")
    squeeze = h.ndim == 2
    if squeeze:
        h = nm.reshape(h, (1,) + h.shape)
        visual = visual[None]
    states = [cache[j] for j in range(k)]
    if squeeze:
        states = [nm.reshape(s, (1,) + s.shape) for s in states]
    for s in states:
        if s.shape != h.shape:
            raise ValueError("cached state shape differs from the current state")
    memory = states[0] if k == 1 else nm.concat(states, axis=1)
    residuals, contexts = {}, {}
    for stream, rows in cfg.streams():
        p = agg.stream_params(k, stream)
        w = stream_weights(visual, rows, h.dtype)
        mem_mask = np.tile(w, (1, k)) > 0
        src = w
        if cfg.conditioning == "cross_modal":
            src = stream_weights(visual, "text" if rows == "visual" else "visual", h.dtype)
        if cfg.query_mode == "fixed":
            ctx = _raw_mean(h, src)
            q = gen_query(h if cfg.granularity == "token_level" else ctx, p, cfg)
        else:
            ctx = pool_context(h, src, p, cfg)
            if cfg.granularity == "sequence_level":
                q = gen_query(ctx, p, cfg)
            elif cfg.conditioning == "cross_modal":
                # per-token queries cannot come from the other stream's rows
                q = gen_query(_expand_rows(ctx, h.shape[-2]), p, cfg)
            else:
                q = gen_query(normalize_context(h, p), p, cfg)
        if cfg.granularity == "sequence_level":
            q = nm.reshape(q, (q.shape[0], 1, q.shape[-1]))
            r = cross_attn(q, memory, p, cfg, agg.n_heads, mem_mask)
            r = nm.reshape(r, (r.shape[0], r.shape[-1]))
        else:
            r = cross_attn(q, memory, p, cfg, agg.n_heads, mem_mask)
        if squeeze:
            r = nm.reshape(r, r.shape[1:])
            ctx = nm.reshape(ctx, ctx.shape[1:])
        residuals[stream] = r
        contexts[stream] = ctx
    return residuals, contexts


def _expand_rows(c: Tensor, n: int) -> Tensor:
    ones = np.ones((n, 1), dtype=c.dtype)
    return nm.mul(nm.reshape(c, c.shape[:-1] + (1, c.shape[-1])), ones)


def _raw_mean(h: Tensor, w: np.ndarray) -> Tensor:
    count = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    alpha = nm.Tensor((w / count)[..., None, :], dtype=h.dtype)
    c = nm.matmul(alpha, h)
    return nm.reshape(c, h.shape[:-2] + (h.shape[-1],))


def gate_value(agg: DepthAggregator, k: int, context: Tensor | None = None) -> Tensor:
    """alpha for boundary ``k``: scalar, or one value per sequence when input-adaptive."""
    g = agg.params["gate"]
    mode = agg.cfg.gate_mode
    if mode == "global":
        return nm.sigmoid(nm.reshape(g, ()))
    if mode == "per_block":
        return nm.sigmoid(g[k - 1])
    logit = nm.matmul(nm.reshape(context, (-1, context.shape[-1])),
                      nm.reshape(agg.params["gate_w"], (-1, 1)))
    return nm.sigmoid(nm.add(nm.reshape(logit, context.shape[:-1]), nm.reshape(g, ())))


def gated_inject(agg: DepthAggregator, k: int, h: Tensor, residuals: dict, visual: np.ndarray,
                 contexts: dict | None = None) -> Tensor:
    """h_j <- h_j + alpha_k * r^m for every position j of stream m."""
    cfg = agg.cfg
    visual = np.asarray(visual, dtype=bool)
    out = h
    for stream, rows in cfg.streams():
        if stream not in residuals:
            continue
        r = residuals[stream]
        w = stream_weights(visual, rows, h.dtype)[..., None]
        if r.ndim == h.ndim - 1:
            r = nm.reshape(r, r.shape[:-1] + (1, r.shape[-1]))
        term = nm.mul(r, w)
        alpha = gate_value(agg, k, contexts[stream] if contexts else None)
        if alpha.ndim:
            alpha = nm.reshape(alpha, alpha.shape + (1, 1))
        out = nm.add(out, nm.mul(term, alpha))
    return out
