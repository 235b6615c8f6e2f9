"""End-to-end finite-difference checks over a pairwise-covering set of
aggregator configurations."""

from __future__ import annotations

import itertools

import numpy as np

from . import numeric as nm
from .backbone import Backbone, BackboneConfig
from .depth_agg import FULL_RANK, AggregatorConfig, DepthAggregator
from .numeric.gradcheck import finite_diff_grad, max_relative_error

AXES = {
    "query_mode": ("fixed", "adaptive"),
    "conditioning": ("self_modal", "cross_modal", "shared_no_split", "text_only", "vision_only"),
    "projection_sharing": ("separate_per_modality", "shared_projection"),
    "rank": (2, FULL_RANK),
    "bottleneck_nonlinearity": ("linear", "gelu"),
    "pooling": ("mean", "attention_probe"),
    "granularity": ("sequence_level", "token_level"),
    "gate_mode": ("global", "per_block", "input_adaptive"),
    "attention_parameterization": ("parameter_free", "learned_projections"),
    "per_boundary_params": (False, True),
    "context_norm": (True, False),
}

GRAD_BACKBONE = BackboneConfig(n_layers=6, n_blocks=3, d_model=8, n_heads=2,
                               visual_vocab=6, text_vocab=8, max_len=10)


def _valid(combo: dict) -> bool:
    return not (combo.get("rank") == FULL_RANK and combo.get("bottleneck_nonlinearity") == "gelu")


def _pairs(combo: dict):
    names = sorted(combo)
    for a, b in itertools.combinations(names, 2):
        yield (a, combo[a], b, combo[b])


def pairwise_configs(seed: int = 0, candidates: int = 200, axes: dict = AXES, **fixed) -> list:
    """Greedy covering array: every valid value pair of any two axes appears
    in at least one returned configuration. Deterministic in ``seed``."""
    names = list(axes)
    uncovered = set()
    for a, b in itertools.combinations(sorted(names), 2):
        for va in axes[a]:
            for vb in axes[b]:
                if _valid({a: va, b: vb}):
                    uncovered.add((a, va, b, vb))
    r = np.random.default_rng(seed)
    out = []
    while uncovered:
        # seed the candidate pool with one uncovered pair so progress is guaranteed
        a, va, b, vb = sorted(uncovered, key=repr)[0]
        best, best_gain = None, -1
        for _ in range(candidates):
            combo = {n: axes[n][r.integers(len(axes[n]))] for n in names}
            combo[a], combo[b] = va, vb
            if not _valid(combo):
                continue
            gain = sum(1 for p in _pairs(combo) if p in uncovered)
            if gain > best_gain:
                best, best_gain = combo, gain
        uncovered -= set(_pairs(best))
        out.append(AggregatorConfig(**{**best, **fixed}))
    return out


def _jitter(params: dict, r: np.random.Generator, scale: float = 0.3) -> None:
    for t in params.values():
        t.data = t.data + r.normal(0, scale, t.shape)


def check_config(cfg: AggregatorConfig, seed: int = 0, bb: BackboneConfig = GRAD_BACKBONE,
                 batch: int = 2, h: float = 1e-3, order: int = 4) -> dict:
    """Max relative error per aggregator parameter for an end-to-end loss.

    Runs at 64-bit with every gate opened (gamma near 0) and parameters
    jittered away from their structured initial values, so that no gradient
    is trivially zero.
    """
    r = np.random.default_rng(seed)
    with nm.precision(64):
        model = Backbone(bb, seed=seed)
        _jitter(model.params, r, 0.05)
        agg = DepthAggregator(AggregatorConfig(**{**cfg.to_dict(), "gate_init": 0.0}),
                              bb.d_model, bb.n_blocks, bb.n_heads, seed=seed)
        _jitter(agg.params, r)
        n = bb.max_len
        ids = r.integers(bb.vocab_size, size=(batch, n))
        vis = np.zeros((batch, n), dtype=bool)
        for i in range(batch):
            vis[i, : int(r.integers(2, n - 2))] = True
        targets = r.integers(bb.vocab_size, size=batch * n)

        def loss():
            logits, _ = model(ids, vis, agg)
            return nm.cross_entropy(nm.reshape(logits, (batch * n, -1)), targets)

        for p in agg.params.values():
            p.grad = None
        loss().backward()
        errs = {}
        for name, p in agg.params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            numeric = finite_diff_grad(lambda: loss().item(), p, h=h, order=order)
            errs[name] = max_relative_error(analytic, numeric)
    return errs


def run_suite(seed: int = 1, configs=None) -> list:
    """``[(cfg, max error over all its parameters)]`` for the covering set."""
    configs = configs if configs is not None else pairwise_configs(seed)
    return [(c, max(check_config(c, seed=seed + i).values())) for i, c in enumerate(configs)]
