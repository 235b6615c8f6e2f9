"""Training and evaluation: AdamW, pretraining, the four fine-tuning
conditions, accuracy metrics, tax deltas and sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .backbone import Backbone, BackboneConfig
from .depth_agg import AggregatorConfig, DepthAggregator, param_count
from .numeric import Tensor
from .tasks import Batch, TaskSpec, collate, generate, make_dataset

log = logging.getLogger(__name__)

CONDITIONS = ("A_pretrained", "B_lora_only", "C_fixed_attnres_lora", "D_iada_lora")
_SHORT = {c[0]: c for c in CONDITIONS}

# fixed-query baseline: one learned query, no modality split
FIXED_AGGREGATOR = AggregatorConfig(query_mode="fixed", conditioning="shared_no_split")

EVAL_OFFSET = 1 << 30  # evaluation seeds never overlap training seeds


def resolve_condition(name: str) -> str:
    if name in CONDITIONS:
        return name
    if name.upper() in _SHORT:
        return _SHORT[name.upper()]
    raise ValueError(f"unknown condition {name!r}; expected one of {CONDITIONS} or A-D")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be positive")

    def param_count(self, bb: BackboneConfig) -> int:
        d, f = bb.d_model, bb.ffn_mult * bb.d_model
        per_layer = 4 * (d + d) + (d + f) + (f + d)
        return self.rank * per_layer * bb.n_layers


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3               # full-parameter pretraining rate
    adapter_lr: float = 2e-4
    aggregator_lr: float = 1e-2    # 50x the adapter rate
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup: int = 0
    seed: int = 0
    precision: int = 32
    condition: str = "D_iada_lora"
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        object.__setattr__(self, "condition", resolve_condition(self.condition))


# -- optimizer -----------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay over named parameter groups.

    ``groups`` is a list of ``(params, lr)`` where ``params`` maps names to
    Tensors. Decay applies only to matrices; vectors (norms, biases, gates)
    are left undecayed. Learning rate ramps linearly over ``warmup`` steps.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup=0):
        self.groups = [(dict(params), float(lr)) for params, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.warmup = warmup
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        seen = set()
        for params, _ in self.groups:
            for p in params.values():
                if id(p) in seen:
                    raise ValueError("parameter appears in two groups")
                seen.add(id(p))

    def zero_grad(self):
        for params, _ in self.groups:
            for p in params.values():
                p.grad = None

    def step(self):
        self.t += 1
        t = self.t
        ramp = min(1.0, t / self.warmup) if self.warmup else 1.0
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for params, base_lr in self.groups:
            lr = base_lr * ramp
            for p in params.values():
                g = p.grad
                if g is None:
                    g = np.zeros_like(p.data)
                key = id(p)
                if key not in self.m:
                    self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                m, v = self.m[key], self.v[key]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                if self.wd and p.data.ndim >= 2:
                    p.data -= (lr * self.wd) * p.data
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- metrics ----------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: dict = field(default_factory=dict)        # task name -> accuracy
    task_kind: dict = field(default_factory=dict)       # task name -> surface|composition
    loss_curve: list = field(default_factory=list)      # [(step, loss)]
    params: dict = field(default_factory=dict)          # adapter / aggregator / trainable
    eval_digest: str = ""

    def _avg(self, kind):
        vals = [a for t, a in self.accuracy.items() if self.task_kind.get(t) == kind]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def surface_avg(self) -> float:
        return self._avg("surface")

    @property
    def composition_avg(self) -> float:
        return self._avg("composition")

    @property
    def overall_avg(self) -> float:
        return float(np.mean(list(self.accuracy.values()))) if self.accuracy else float("nan")

    def summary(self) -> dict:
        return {**self.accuracy, "composition_avg": self.composition_avg,
                "surface_avg": self.surface_avg, "overall_avg": self.overall_avg}


def dataset_digest(datasets: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(datasets):
        b = datasets[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(b.ids, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(b.visual).tobytes())
        h.update(np.ascontiguousarray(b.answers, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def eval_suite(specs: dict, n: int) -> dict:
    """Fixed evaluation sets, one per named spec, from seeds disjoint from training."""
    return {name: make_dataset(spec, n, start=EVAL_OFFSET) for name, spec in specs.items()}


# -- core loops -----------------------------------------------------------------------

def batch_loss(model: Backbone, batch: Batch, aggregator=None) -> Tensor:
    logits, _ = model(batch.ids, batch.visual, aggregator, last_only=True)
    return nm.cross_entropy(logits, batch.answers)


def predict(model: Backbone, ids, visual, aggregator=None, batch_size: int = 256,
            candidates=None) -> np.ndarray:
    """Greedy prediction at the target position, over ``candidates`` ids if given."""
    out = []
    for s in range(0, len(ids), batch_size):
        logits, _ = model(ids[s:s + batch_size], visual[s:s + batch_size], aggregator, last_only=True)
        z = logits.data
        if candidates is None:
            out.append(np.argmax(z, axis=-1))
        else:
            out.append(candidates[np.argmax(z[:, candidates], axis=-1)])
    return np.concatenate(out)


def answer_candidates(specs) -> np.ndarray:
    return np.unique(np.concatenate([s.answer_tokens() for s in specs]))


def evaluate(model: Backbone, datasets: dict, aggregator=None, task_kind: dict | None = None,
             batch_size: int = 256, predictor=None, candidates=None) -> Metrics:
    """Greedy accuracy at the target position for every named dataset.

    ``candidates`` restricts the argmax to the answer vocabulary.
    ``predictor(batch) -> predicted ids`` replaces the model when given (used
    for oracle upper bounds).
    """
    if not datasets:
        raise ValueError("no datasets to evaluate")
    if candidates is not None:
        candidates = np.asarray(candidates, dtype=np.int64)
    m = Metrics(eval_digest=dataset_digest(datasets))
    for name in sorted(datasets):
        b = datasets[name]
        if len(b) == 0:
            raise ValueError(f"dataset {name!r} is empty")
        if predictor is not None:
            pred = np.asarray(predictor(b))
        else:
            pred = predict(model, b.ids, b.visual, aggregator, batch_size, candidates)
        m.accuracy[name] = float(np.mean(pred == b.answers))
        kind = (task_kind or {}).get(name) or b.kinds[0]
        m.task_kind[name] = kind
    return m


class _MixtureStream:
    """Deterministic training batches: example i of step s uses seed s*B + i.

    With several specs the batch is split evenly between them (remainder to
    the first ones), so a 50/50 surface/composition mixture is exact.
    """

    def __init__(self, specs, batch_size: int):
        self.specs = list(specs)
        self.b = batch_size

    def batch(self, step: int) -> Batch:
        k = len(self.specs)
        exs = []
        for i in range(self.b):
            spec = self.specs[i % k]
            exs.append(generate(spec, step * self.b + i))
        return collate(exs)


def _train(model, aggregator, optimizer, stream, steps, log_every, what):
    curve = []
    for step in range(steps):
        batch = stream.batch(step)
        try:
            loss = batch_loss(model, batch, aggregator)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"{what}: non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        except nm.NonFiniteError as err:
            raise DivergenceError(f"{what}: non-finite values at step {step}: {err}") from err
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, val))
            log.info("%s step %d loss %.4f", what, step, val)
    return curve


def pretrain(model: Backbone, specs, cfg: TrainConfig) -> tuple[Backbone, Metrics]:
    """Full-parameter training on a mixture of task specs. Mutates ``model``."""
    with nm.precision(cfg.precision):
        model.astype(cfg.precision)
        params = model.params
        for p in params.values():
            p.requires_grad = True
        opt = AdamW([(params, cfg.lr)], (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.warmup)
        stream = _MixtureStream(specs, cfg.batch_size)
        curve = _train(model, None, opt, stream, cfg.steps, cfg.log_every, "pretrain")
    n = sum(p.size for p in params.values())
    return model, Metrics(loss_curve=curve, params={"adapter": 0, "aggregator": 0, "trainable": int(n)})


@dataclass
class FinetuneResult:
    model: Backbone
    aggregator: DepthAggregator | None
    metrics: Metrics
    optimizer: AdamW | None = None


def build_condition(model: Backbone, condition: str, adapter: AdapterConfig,
                    agg_cfg: AggregatorConfig | None, seed: int = 0):
    """Clone ``model`` and attach what ``condition`` trains.

    Returns ``(model, aggregator)``; the clone's backbone weights are frozen.
    """
    condition = resolve_condition(condition)
    m = model.clone()
    for p in m.params.values():
        p.requires_grad = False
    if condition == "A_pretrained":
        return m, None
    m.add_adapters(adapter.rank, adapter.alpha, seed=seed + 101)
    m.astype(32 if m.params["tok_emb"].dtype == np.float32 else 64)
    agg = None
    if condition in ("C_fixed_attnres_lora", "D_iada_lora"):
        acfg = FIXED_AGGREGATOR if condition == "C_fixed_attnres_lora" else (agg_cfg or AggregatorConfig())
        if condition == "C_fixed_attnres_lora" and agg_cfg is not None:
            acfg = dataclasses.replace(acfg, gate_init=agg_cfg.gate_init, gate_mode=agg_cfg.gate_mode)
        c = m.cfg
        agg = DepthAggregator(acfg, c.d_model, c.n_blocks, c.n_heads, seed=seed + 202)
        agg.astype(32 if m.params["tok_emb"].dtype == np.float32 else 64)
    return m, agg


def finetune(model: Backbone, condition: str, specs, cfg: TrainConfig,
             adapter: AdapterConfig | None = None,
             agg_cfg: AggregatorConfig | None = None) -> FinetuneResult:
    """Train adapters (and the aggregator for C/D) on ``specs``; backbone frozen.

    The input model is not modified.
    """
    condition = resolve_condition(condition)
    if condition == "A_pretrained":
        raise ValueError("condition A is the pretrained reference and is not trained")
    adapter = adapter or AdapterConfig()
    with nm.precision(cfg.precision):
        base = model.clone().astype(cfg.precision)
        m, agg = build_condition(base, condition, adapter, agg_cfg, cfg.seed)
        groups = [(m.adapter_params(), cfg.adapter_lr)]
        if agg is not None:
            groups.append((agg.params, cfg.aggregator_lr))
        opt = AdamW(groups, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.warmup)
        stream = _MixtureStream(specs, cfg.batch_size)
        curve = _train(m, agg, opt, stream, cfg.steps, cfg.log_every, f"finetune[{condition}]")
    n_ad = sum(p.size for p in m.adapter_params().values())
    n_ag = agg.num_parameters() if agg is not None else 0
    metrics = Metrics(loss_curve=curve,
                      params={"adapter": int(n_ad), "aggregator": int(n_ag), "trainable": int(n_ad + n_ag)})
    return FinetuneResult(m, agg, metrics, opt)


# -- reports -------------------------------------------------------------------------------

@dataclass
class TaxReport:
    rows: dict                 # condition -> summary dict
    deltas: dict               # "D-A" / "D-B" -> summary-shaped dict of differences
    columns: list

    def delta(self, which: str, column: str) -> float:
        return self.deltas[which][column]


def tax_report(metrics: dict) -> TaxReport:
    """Per-task and average deltas D-A and D-B from per-condition Metrics."""
    by = {resolve_condition(k): v for k, v in metrics.items()}
    missing = [c for c in CONDITIONS if c not in by]
    if missing:
        raise ValueError(f"missing conditions: {missing}")
    digests = {m.eval_digest for m in by.values()}
    tasks = {tuple(sorted(m.accuracy)) for m in by.values()}
    if len(digests) != 1 or len(tasks) != 1:
        raise ValueError("conditions were evaluated on different datasets")
    rows = {c: by[c].summary() for c in CONDITIONS}
    columns = list(rows[CONDITIONS[0]].keys())
    D, A, B = rows["D_iada_lora"], rows["A_pretrained"], rows["B_lora_only"]
    deltas = {"D-A": {c: D[c] - A[c] for c in columns},
              "D-B": {c: D[c] - B[c] for c in columns}}
    return TaxReport(rows, deltas, columns)


@dataclass
class SeedSummary:
    seeds: list
    composition_delta_db: list
    surface_delta_db: list

    @property
    def mean_composition_delta(self) -> float:
        return float(np.mean(self.composition_delta_db))

    @property
    def signs(self) -> list:
        return [int(np.sign(x)) for x in self.composition_delta_db]


def aggregate_seeds(reports: dict) -> SeedSummary:
    seeds = sorted(reports)
    return SeedSummary(seeds,
                       [reports[s].delta("D-B", "composition_avg") for s in seeds],
                       [reports[s].delta("D-B", "surface_avg") for s in seeds])


# -- end-to-end protocol ---------------------------------------------------------------------

@dataclass(frozen=True)
class Experiment:
    """Everything needed to run the four-condition protocol for one seed."""
    backbone: BackboneConfig = BackboneConfig()
    aggregator: AggregatorConfig = AggregatorConfig()
    adapter: AdapterConfig = AdapterConfig()
    pretrain: TrainConfig = TrainConfig(steps=3000, lr=1e-3, warmup=100)
    finetune: TrainConfig = TrainConfig(steps=600)
    pretrain_tasks: tuple = (TaskSpec(kind="surface"), TaskSpec(kind="composition"))
    # perception SFT: a new visual question (name the first visual symbol)
    finetune_tasks: tuple = (TaskSpec(kind="surface", target="first"),)
    eval_tasks: tuple = (("surface", TaskSpec(kind="surface", target="first")),
                         ("composition", TaskSpec(kind="composition")))
    eval_size: int = 1000


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(cfg, seed=seed)


def _specs_with_seed(specs, seed):
    return tuple(dataclasses.replace(s, seed=seed) for s in specs)


def run_pretrain(exp: Experiment, seed: int) -> tuple[Backbone, Metrics]:
    with nm.precision(exp.pretrain.precision):
        model = Backbone(exp.backbone, seed=seed)
    return pretrain(model, _specs_with_seed(exp.pretrain_tasks, seed), _seeded(exp.pretrain, seed))


def run_conditions(exp: Experiment, model: Backbone, seed: int, conditions=CONDITIONS,
                   pretrain_metrics: Metrics | None = None) -> dict:
    """Evaluate the pretrained model and fine-tune/evaluate each other condition."""
    eval_specs = {name: dataclasses.replace(spec, seed=seed) for name, spec in exp.eval_tasks}
    data = eval_suite(eval_specs, exp.eval_size)
    kinds = {name: spec.kind for name, spec in exp.eval_tasks}
    cands = answer_candidates(spec for _, spec in exp.eval_tasks)
    ft_specs = _specs_with_seed(exp.finetune_tasks, seed + 7919)
    out = {}
    for cond in conditions:
        cond = resolve_condition(cond)
        if cond == "A_pretrained":
            with nm.precision(exp.finetune.precision):
                m = evaluate(model.clone().astype(exp.finetune.precision), data, None, kinds,
                             candidates=cands)
            if pretrain_metrics is not None:
                m.loss_curve = list(pretrain_metrics.loss_curve)
            m.params = {"adapter": 0, "aggregator": 0, "trainable": 0}
        else:
            res = finetune(model, cond, ft_specs, _seeded(dataclasses.replace(exp.finetune, condition=cond), seed),
                           exp.adapter, exp.aggregator)
            with nm.precision(exp.finetune.precision):
                m = evaluate(res.model, data, res.aggregator, kinds, candidates=cands)
            m.loss_curve, m.params = res.metrics.loss_curve, res.metrics.params
        out[cond] = m
    return out


def run_tax(exp: Experiment, seed: int) -> tuple[dict, TaxReport]:
    model, pm = run_pretrain(exp, seed)
    metrics = run_conditions(exp, model, seed, pretrain_metrics=pm)
    return metrics, tax_report(metrics)


# -- sweeps -------------------------------------------------------------------------------------

def _axis_owner(axis: str) -> str:
    if axis in AggregatorConfig.field_names():
        return "aggregator"
    if axis.startswith("adapter_") and axis[len("adapter_"):] in ("rank", "alpha"):
        return "adapter"
    if axis in {f.name for f in dataclasses.fields(TrainConfig)}:
        return "finetune"
    raise ValueError(f"{axis!r} is not an aggregator, adapter or training field")


def _apply_axis(exp: Experiment, axis: str, value) -> Experiment:
    owner = _axis_owner(axis)
    if owner == "aggregator":
        return dataclasses.replace(exp, aggregator=dataclasses.replace(exp.aggregator, **{axis: value}))
    if owner == "adapter":
        return dataclasses.replace(exp, adapter=dataclasses.replace(exp.adapter, **{axis[8:]: value}))
    return dataclasses.replace(exp, finetune=dataclasses.replace(exp.finetune, **{axis: value}))


@dataclass
class SweepCell:
    value: object
    aggregator_params: int
    adapter_params: int
    metrics: Metrics | None = None


def sweep(axis: str, values, exp: Experiment, seed: int = 0, count_only: bool = False,
          d_model: int | None = None, n_layers: int | None = None,
          model: Backbone | None = None, condition: str = "D_iada_lora") -> list:
    """One cell per value of ``axis``: parameter counts, plus a full
    fine-tune/eval run unless ``count_only``. Invalid values raise before
    anything runs."""
    cells = []
    exps = []
    for v in values:
        try:
            e = _apply_axis(exp, axis, v)
        except (TypeError, ValueError) as err:
            raise ValueError(f"invalid value {v!r} for axis {axis!r}: {err}") from err
        exps.append((v, e))
    if not count_only and model is None:
        model, _ = run_pretrain(exp, seed)
    for v, e in exps:
        bb = e.backbone
        if d_model is not None:
            bb = dataclasses.replace(bb, d_model=d_model, n_heads=bb.n_heads if d_model % bb.n_heads == 0 else 1)
        if n_layers is not None:
            bb = dataclasses.replace(bb, n_layers=n_layers)
        e.aggregator.check_width(bb.d_model)
        cell = SweepCell(v, param_count(e.aggregator, bb.d_model, bb.n_blocks), e.adapter.param_count(bb))
        if not count_only:
            cell.metrics = run_conditions(e, model, seed, conditions=(condition,))[resolve_condition(condition)]
        cells.append(cell)
    return cells
