"""Command-line entry point: ``iada <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import numeric as nm
from .config import ConfigError, build_experiment, load_config, resolve_experiment, serialize_config
from .depth_agg import DepthAggregator, format_millions, param_count
from .gradsuite import pairwise_configs, run_suite
from .harness import (
    CONDITIONS,
    DivergenceError,
    Experiment,
    aggregate_seeds,
    answer_candidates,
    build_condition,
    eval_suite,
    evaluate,
    finetune,
    resolve_condition,
    run_conditions,
    run_pretrain,
    sweep,
    tax_report,
)
from .io import (
    CheckpointError,
    atomic_write,
    condition_table,
    dumps_records,
    emit_report,
    load_checkpoint,
    load_into,
    metrics_records,
    save_checkpoint,
    sweep_table,
)
from .tasks import dump_line, generate

log = logging.getLogger("iada")

VERBS = ("pretrain", "finetune", "eval", "tax", "sweep", "gradcheck", "params", "gen-data")
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seeds(values) -> list:
    out = []
    for v in values:
        for part in str(v).strip("{}").split(","):
            if part.strip():
                out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or bundled config name (toy, iada_r16, ...)")
    common.add_argument("--seed", nargs="+", default=["1"], help="seed, or several for tax")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--condition", choices=list("ABCD") + list(CONDITIONS), default="D")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--checkpoint", help="input checkpoint (finetune, eval)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="iada", description="Input-adaptive depth aggregation laboratory")
    sub = p.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    sub.required = True
    sub.add_parser("pretrain", parents=[common], help="pretrain a backbone on the task mixture")
    sub.add_parser("finetune", parents=[common], help="fine-tune one condition from a checkpoint")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sub.add_parser("tax", parents=[common], help="run conditions A-D and report deltas")
    sp = sub.add_parser("sweep", parents=[common], help="one run per value of a config field")
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--count-only", action="store_true", help="parameter counts only, no training")
    sp.add_argument("--d", type=int, help="width for count-only accounting")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference suite over aggregator configs")
    pp = sub.add_parser("params", parents=[common], help="closed-form and inventory parameter counts")
    pp.add_argument("--d", type=int, help="model width (e.g. 2048)")
    gp = sub.add_parser("gen-data", parents=[common], help="dump evaluation datasets")
    gp.add_argument("--n", type=int, default=1000)
    return p


# -- helpers ---------------------------------------------------------------------------

def _experiment(args) -> tuple[Experiment, str]:
    resolved = load_config(args.config)
    if args.precision is not None:
        resolved["train"]["precision"] = args.precision
    exp = build_experiment(resolved)
    return exp, serialize_config(resolve_experiment(exp))


def _one_seed(args) -> int:
    seeds = _seeds(args.seed)
    if len(seeds) != 1:
        raise UsageError(f"{args.verb} takes exactly one seed")
    return seeds[0]


def _pretrained(args, exp, seed, cfg_text):
    path = Path(args.checkpoint) if args.checkpoint else Path(args.out) / f"pretrained_s{seed}.ckpt"
    with nm.precision(exp.pretrain.precision):
        from .backbone import Backbone
        model = Backbone(exp.backbone, seed=seed)
    if path.is_file():
        load_into(load_checkpoint(path), model)
        log.info("loaded %s", path)
        return model
    if args.checkpoint:
        raise UsageError(f"checkpoint {path} not found")
    log.info("no checkpoint at %s; pretraining", path)
    model, _ = run_pretrain(exp, seed)
    save_checkpoint(path, model, config_text=cfg_text)
    return model


def _write_metrics(out, name, metrics: dict, seed, exp, cfg_text):
    recs = []
    first = True
    for cond, m in metrics.items():
        steps = exp.pretrain.steps if cond == "A_pretrained" else exp.finetune.steps
        recs += metrics_records(m, f"{name}-s{seed}", cond, seed, steps, cfg_text if first else None)
        first = False
    path = Path(out) / f"{name}_s{seed}.jsonl"
    atomic_write(path, dumps_records(recs))
    return path


# -- verbs ------------------------------------------------------------------------------------

def cmd_pretrain(args):
    exp, cfg_text = _experiment(args)
    seed = _one_seed(args)
    model, m = run_pretrain(exp, seed)
    path = Path(args.out) / f"pretrained_s{seed}.ckpt"
    save_checkpoint(path, model, config_text=cfg_text)
    recs = metrics_records(m, f"pretrain-s{seed}", "A_pretrained", seed, exp.pretrain.steps, cfg_text)
    atomic_write(Path(args.out) / f"pretrain_s{seed}.jsonl", dumps_records(recs))
    print(f"wrote {path} (final loss {m.loss_curve[-1][1]:.4f})" if m.loss_curve else f"wrote {path}")


def cmd_finetune(args):
    exp, cfg_text = _experiment(args)
    seed = _one_seed(args)
    cond = resolve_condition(args.condition)
    if cond == "A_pretrained":
        raise UsageError("condition A is the pretrained model; nothing to fine-tune")
    model = _pretrained(args, exp, seed, cfg_text)
    cfg = dataclasses.replace(exp.finetune, condition=cond, seed=seed)
    ft = tuple(dataclasses.replace(s, seed=seed + 7919) for s in exp.finetune_tasks)
    res = finetune(model, cond, ft, cfg, exp.adapter, exp.aggregator)
    path = Path(args.out) / f"finetuned_{cond}_s{seed}.ckpt"
    save_checkpoint(path, res.model, res.aggregator, cfg_text)
    recs = metrics_records(res.metrics, f"finetune-s{seed}", cond, seed, cfg.steps, cfg_text)
    atomic_write(Path(args.out) / f"finetune_{cond}_s{seed}.jsonl", dumps_records(recs))
    print(f"wrote {path}")


def cmd_eval(args):
    exp, cfg_text = _experiment(args)
    seed = _one_seed(args)
    cond = resolve_condition(args.condition)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    arrays = load_checkpoint(args.checkpoint)
    has_agg = any(k.startswith("aggregator.") for k in arrays)
    has_adapters = any(k.endswith(".lora_a") for k in arrays)
    if not has_adapters:
        cond = "A_pretrained"
    elif not has_agg:
        cond = "B_lora_only"
    prec = exp.finetune.precision
    with nm.precision(prec):
        from .backbone import Backbone
        base = Backbone(exp.backbone, seed=seed)
        model, agg = build_condition(base, cond, exp.adapter, exp.aggregator, seed)
        load_into(arrays, model, agg)
        specs = {n: dataclasses.replace(s, seed=seed) for n, s in exp.eval_tasks}
        data = eval_suite(specs, exp.eval_size)
        m = evaluate(model, data, agg, {n: s.kind for n, s in exp.eval_tasks},
                     candidates=answer_candidates(s for _, s in exp.eval_tasks))
    _write_metrics(args.out, "eval", {cond: m}, seed, exp, cfg_text)
    print(condition_table({cond: m}), end="")


def cmd_tax(args):
    exp, cfg_text = _experiment(args)
    reports = {}
    for seed in _seeds(args.seed):
        model, pm = run_pretrain(exp, seed)
        metrics = run_conditions(exp, model, seed, pretrain_metrics=pm)
        rep = tax_report(metrics)
        reports[seed] = rep
        _write_metrics(args.out, "tax", metrics, seed, exp, cfg_text)
        text = emit_report(args.out, f"tax_s{seed}", metrics, rep, cfg_text)
        print(f"seed {seed}\n{text}")
    if len(reports) > 1:
        s = aggregate_seeds(reports)
        lines = ["seed  delta(D-B) composition  delta(D-B) surface  sign"]
        for seed, c, p in zip(s.seeds, s.composition_delta_db, s.surface_delta_db):
            lines.append(f"{seed:<4}  {100 * c:+22.1f}  {100 * p:+18.1f}  {int(np.sign(c)):+d}")
        lines.append(f"mean  {100 * s.mean_composition_delta:+22.1f}")
        text = "\n".join(lines) + "\n"
        atomic_write(Path(args.out) / "tax_summary.txt", text)
        print(text, end="")


def _parse_value(raw: str):
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def cmd_sweep(args):
    exp, cfg_text = _experiment(args)
    seed = _one_seed(args)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
    try:
        cells = sweep(args.axis, values, exp, seed=seed, count_only=args.count_only, d_model=args.d)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    text = sweep_table(args.axis, cells)
    if args.count_only:
        text += "".join(f"{c.value}: {format_millions(c.aggregator_params)}\n" for c in cells)
    atomic_write(Path(args.out) / f"sweep_{args.axis}_s{seed}.txt", text)
    print(text, end="")


def cmd_gradcheck(args):
    if args.precision not in (None, 64):
        raise UsageError("gradcheck runs at 64-bit precision only")
    seed = _one_seed(args)
    worst = 0.0
    for cfg, err in run_suite(seed, pairwise_configs(seed)):
        worst = max(worst, err)
        desc = ", ".join(f"{k}={v}" for k, v in cfg.to_dict().items() if k != "gate_init")
        print(f"{err:.3e}  {desc}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_params(args):
    exp, _ = _experiment(args)
    d = args.d or exp.backbone.d_model
    K = exp.backbone.n_blocks
    cfg = exp.aggregator
    cfg.check_width(d)
    closed = param_count(cfg, d, K)
    n_heads = exp.backbone.n_heads if d % exp.backbone.n_heads == 0 else 1
    agg = DepthAggregator(cfg, d, K, n_heads, seed=0)   # aggregator only, no backbone
    gates = sum(v.size for k, v in agg.params.items() if k in ("gate", "gate_w"))
    inventory = agg.num_parameters() - gates
    print(f"closed-form {closed} (≈{format_millions(closed)})")
    print(f"inventory   {inventory} (+{gates} gate parameters)")
    if inventory != closed:
        print("MISMATCH between closed form and inventory", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_data(args):
    exp, _ = _experiment(args)
    seed = _one_seed(args)
    out = Path(args.out)
    for name, spec in exp.eval_tasks:
        spec = dataclasses.replace(spec, seed=seed)
        text = "".join(dump_line(generate(spec, i)) + "\n" for i in range(args.n))
        atomic_write(out / f"{name}_s{seed}.tsv", text)
        print(f"wrote {out / f'{name}_s{seed}.tsv'}")


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval, "tax": cmd_tax,
            "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "params": cmd_params,
            "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"iada: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = COMMANDS[args.verb](args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"iada: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError) as err:
        print(f"iada: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, nm.NonFiniteError) as err:
        print(f"iada: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
