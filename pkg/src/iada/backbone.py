"""Toy decoder-only multimodal transformer.

Visual and text tokens share one embedding table: ids ``0..visual_vocab-1``
are visual patch symbols and ``visual_vocab..vocab_size-1`` are text symbols.
Layers are pre-norm with causal multi-head self-attention and a GELU
feed-forward. The ``n_layers`` layers are grouped into ``n_blocks`` blocks;
the hidden state after the embedding and after each block is cached so that a
depth aggregator can read it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import numeric as nm
from .numeric import Tensor

ADAPTED_MAPS = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2")
LAYER_PARAMS = ("ln1.scale", "ln1.bias", "ln2.scale", "ln2.bias") + tuple(
    f"{m}.{w}" for m in ADAPTED_MAPS for w in ("weight", "bias"))


@dataclass
class BackboneConfig:
    n_layers: int = 8
    n_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    visual_vocab: int = 10
    text_vocab: int = 24
    max_len: int = 32
    ffn_mult: int = 2
    init_std: float = 0.02
    lora_rank: int = 0
    lora_alpha: float = 0.0

    def __post_init__(self):
        if self.n_blocks <= 0 or self.n_layers % self.n_blocks:
            raise ValueError(f"n_layers={self.n_layers} is not a multiple of n_blocks={self.n_blocks}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")

    @property
    def block_size(self) -> int:
        return self.n_layers // self.n_blocks

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_size(self) -> int:
        return self.visual_vocab + self.text_vocab

    def text_id(self, j: int) -> int:
        return self.visual_vocab + j


@dataclass
class TokenSequence:
    """One interleaved sequence. ``visual[i]`` is True for visual positions."""

    ids: np.ndarray
    visual: np.ndarray
    target_pos: int = -1
    target_id: int = -1

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.visual = np.asarray(self.visual, dtype=bool)
        if self.ids.shape != self.visual.shape:
            raise ValueError("modality mask length differs from sequence length")

    def __len__(self):
        return len(self.ids)


@dataclass
class BlockBoundaryCache:
    """Hidden states at layers 0, B, 2B, ... (pre-injection snapshots)."""

    block_size: int
    states: list = field(default_factory=list)

    @property
    def layer_indices(self) -> list:
        return [j * self.block_size for j in range(len(self.states))]

    def __len__(self):
        return len(self.states)

    def __getitem__(self, j) -> Tensor:
        return self.states[j]


class Aggregator(Protocol):
    def inject(self, k: int, h: Tensor, cache: BlockBoundaryCache, visual: np.ndarray) -> Tensor:
        ...


class Backbone:
    """Parameters plus forward pass. ``params`` maps dotted names to Tensors."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, tuple[Tensor, Tensor]] = {}
        self.lora_scale = 0.0
        r = np.random.default_rng(seed)
        d, V, std = cfg.d_model, cfg.vocab_size, cfg.init_std
        f = cfg.ffn_mult * d
        P = self.params
        P["tok_emb"] = nm.parameter(r.normal(0, std, (V, d)))
        P["pos_emb"] = nm.parameter(r.normal(0, std, (cfg.max_len, d)))
        out_std = std / np.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            P[pre + "ln1.scale"] = nm.parameter(np.ones(d))
            P[pre + "ln1.bias"] = nm.parameter(np.zeros(d))
            for name in ("q", "k", "v"):
                P[pre + f"attn.{name}.weight"] = nm.parameter(r.normal(0, std, (d, d)))
                P[pre + f"attn.{name}.bias"] = nm.parameter(np.zeros(d))
            P[pre + "attn.o.weight"] = nm.parameter(r.normal(0, out_std, (d, d)))
            P[pre + "attn.o.bias"] = nm.parameter(np.zeros(d))
            P[pre + "ln2.scale"] = nm.parameter(np.ones(d))
            P[pre + "ln2.bias"] = nm.parameter(np.zeros(d))
            P[pre + "ffn.fc1.weight"] = nm.parameter(r.normal(0, std, (d, f)))
            P[pre + "ffn.fc1.bias"] = nm.parameter(np.zeros(f))
            P[pre + "ffn.fc2.weight"] = nm.parameter(r.normal(0, out_std, (f, d)))
            P[pre + "ffn.fc2.bias"] = nm.parameter(np.zeros(d))
        P["final_ln.scale"] = nm.parameter(np.ones(d))
        P["final_ln.bias"] = nm.parameter(np.zeros(d))
        P["unembed.weight"] = nm.parameter(r.normal(0, std, (d, V)))
        P["unembed.bias"] = nm.parameter(np.zeros(V))
        if cfg.lora_rank > 0:
            self.add_adapters(cfg.lora_rank, cfg.lora_alpha, seed=seed + 1)

    # -- adapters ------------------------------------------------------------
    def add_adapters(self, rank: int, alpha: float, seed: int = 0) -> None:
        """Attach zero-initialised low-rank adapters to every layer's linear maps."""
        if rank <= 0:
            raise ValueError("adapter rank must be positive")
        r = np.random.default_rng(seed)
        dtype = self.params["tok_emb"].dtype
        self.adapters = {}
        for i in range(self.cfg.n_layers):
            for m in ADAPTED_MAPS:
                w = self.params[f"layers.{i}.{m}.weight"]
                d_in, d_out = w.shape
                a = r.normal(0, 1.0 / np.sqrt(d_in), (rank, d_in))
                self.adapters[f"layers.{i}.{m}"] = (
                    Tensor(a, requires_grad=True, dtype=dtype),
                    Tensor(np.zeros((d_out, rank)), requires_grad=True, dtype=dtype),
                )
        self.cfg = dataclasses.replace(self.cfg, lora_rank=rank, lora_alpha=alpha)
        self.lora_scale = alpha / rank

    def adapter_params(self) -> dict[str, Tensor]:
        out = {}
        for name, (a, b) in self.adapters.items():
            out[name + ".lora_a"] = a
            out[name + ".lora_b"] = b
        return out

    def all_params(self) -> dict[str, Tensor]:
        return {**self.params, **self.adapter_params()}

    # -- utilities -------------------------------------------------------------
    def clone(self) -> "Backbone":
        new = Backbone.__new__(Backbone)
        new.cfg = self.cfg
        new.lora_scale = self.lora_scale
        new.params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)
                      for k, v in self.params.items()}
        new.adapters = {k: (Tensor(a.data.copy(), requires_grad=True, dtype=a.dtype),
                            Tensor(b.data.copy(), requires_grad=True, dtype=b.dtype))
                        for k, (a, b) in self.adapters.items()}
        return new

    def astype(self, bits: int) -> "Backbone":
        dtype = {32: np.float32, 64: np.float64}[bits]
        for t in list(self.params.values()) + [x for ab in self.adapters.values() for x in ab]:
            t.data = t.data.astype(dtype)
        return self

    def layer_params(self, i: int) -> dict[str, Tensor]:
        pre = f"layers.{i}."
        return {k: self.params[pre + k] for k in LAYER_PARAMS}

    def layer_adapters(self, i: int) -> dict[str, tuple[Tensor, Tensor]]:
        if not self.adapters:
            return {}
        pre = f"layers.{i}."
        return {m: self.adapters[pre + m] for m in ADAPTED_MAPS}

    # -- forward ---------------------------------------------------------------
    def embed(self, ids) -> Tensor:
        return embed(ids, self.params, self.cfg)

    def forward(self, ids, visual, aggregator: Aggregator | None = None,
                last_only: bool = False):
        return forward_with_boundaries(self, ids, visual, aggregator, last_only)

    __call__ = forward


def embed(ids, params: dict, cfg: BackboneConfig) -> Tensor:
    """Token embedding plus learned positional embedding; ids are (n,) or (b, n)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ValueError("empty sequence")
    n = ids.shape[-1]
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")
    tok = nm.embedding(params["tok_emb"], ids)
    pos = params["pos_emb"][:n]
    return tok + pos


def lora_apply(x: Tensor, weight: Tensor, bias: Tensor | None = None,
               adapter: tuple[Tensor, Tensor] | None = None, scale: float = 1.0) -> Tensor:
    """Base map plus ``scale * Bm @ A @ x`` (rows of ``x`` are inputs)."""
    if adapter is None:
        return nm.linear(x, weight, bias)
    a, b = adapter
    return nm.linear(x, weight, bias, a, b, scale)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def transformer_layer(h: Tensor, p: dict, mask: np.ndarray, n_heads: int,
                      adapters: dict | None = None, lora_scale: float = 1.0) -> Tensor:
    """Pre-norm block: h + attn(norm(h)), then + ffn(norm(h))."""
    adapters = adapters or {}

    def lin(x, name):
        return lora_apply(x, p[name + ".weight"], p[name + ".bias"], adapters.get(name), lora_scale)

    if h.shape[-1] != p["attn.q.weight"].shape[0]:
        raise ValueError(f"hidden width {h.shape[-1]} does not match layer width")
    a = nm.affine_norm(h, p["ln1.scale"], p["ln1.bias"])
    att = nm.multihead_attention(lin(a, "attn.q"), lin(a, "attn.k"), lin(a, "attn.v"), n_heads, mask)
    h = h + lin(att, "attn.o")
    a = nm.affine_norm(h, p["ln2.scale"], p["ln2.bias"])
    return h + lin(nm.gelu(lin(a, "ffn.fc1")), "ffn.fc2")


def forward_with_boundaries(model: Backbone, ids, visual, aggregator: Aggregator | None = None,
                            last_only: bool = False):
    """Run the stack, caching block-boundary states and injecting aggregation.

    Returns ``(logits, cache)``. Logits are (..., n, V), or (..., V) for the
    final position only when ``last_only``. Injection at the last boundary
    happens before the final norm.
    """
    cfg = model.cfg
    ids = np.asarray(ids)
    visual = np.asarray(visual, dtype=bool)
    if visual.shape != ids.shape:
        raise ValueError("modality mask shape differs from ids shape")
    h = model.embed(ids)
    n = ids.shape[-1]
    mask = causal_mask(n)
    cache = BlockBoundaryCache(cfg.block_size, [h])
    B = cfg.block_size
    for k in range(1, cfg.n_blocks + 1):
        for i in range((k - 1) * B, k * B):
            h = transformer_layer(h, model.layer_params(i), mask, cfg.n_heads,
                                  model.layer_adapters(i), model.lora_scale)
        cache.states.append(h)
        if aggregator is not None:
            h = aggregator.inject(k, h, cache, visual)
    P = model.params
    if last_only:
        h = h[..., -1, :]
    h = nm.affine_norm(h, P["final_ln.scale"], P["final_ln.bias"])
    logits = nm.linear(h, P["unembed.weight"], P["unembed.bias"])
    return logits, cache
