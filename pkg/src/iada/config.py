"""Sectioned ``key = value`` experiment configuration.

Five sections: ``[backbone]``, ``[aggregator]``, ``[adapter]``, ``[train]``
and ``[tasks]``. Unknown sections or keys are errors, missing keys take the
defaults of :class:`~iada.harness.Experiment`. Comments start with ``#``.

``[train]`` holds the fine-tuning :class:`TrainConfig` fields; the three
``pretrain_*`` keys override steps, learning rate and warmup for pretraining,
which otherwise shares the optimizer settings.
"""

from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

from .backbone import BackboneConfig
from .depth_agg import FULL_RANK, AggregatorConfig
from .harness import AdapterConfig, Experiment, TrainConfig
from .tasks import TaskSpec

SECTIONS = ("backbone", "aggregator", "adapter", "train", "tasks")
_SKIP_BACKBONE = {"lora_rank", "lora_alpha"}  # adapters come from [adapter]
_PRETRAIN_KEYS = ("pretrain_steps", "pretrain_lr", "pretrain_warmup")
_TASK_KEYS = ("n_visual", "seq_len", "n_facts", "min_majority", "max_majority",
              "finetune_target", "eval_size")


class ConfigError(ValueError):
    """Malformed configuration; message names the line when there is one."""


def _defaults() -> dict:
    exp = Experiment()
    return resolve_experiment(exp)


def resolve_experiment(exp: Experiment) -> dict:
    """Flatten an Experiment into ``{section: {key: value}}``."""
    bb = {f.name: getattr(exp.backbone, f.name) for f in dataclasses.fields(BackboneConfig)
          if f.name not in _SKIP_BACKBONE}
    agg = exp.aggregator.to_dict()
    ad = dataclasses.asdict(exp.adapter)
    tr = dataclasses.asdict(exp.finetune)
    tr["pretrain_steps"] = exp.pretrain.steps
    tr["pretrain_lr"] = exp.pretrain.lr
    tr["pretrain_warmup"] = exp.pretrain.warmup
    surf = dict(exp.eval_tasks)["surface"]
    comp = dict(exp.eval_tasks)["composition"]
    tasks = {"n_visual": surf.n_visual, "seq_len": surf.seq_len, "n_facts": comp.n_facts,
             "min_majority": surf.min_majority, "max_majority": surf.max_majority,
             "finetune_target": exp.finetune_tasks[0].target, "eval_size": exp.eval_size}
    return {"backbone": bb, "aggregator": agg, "adapter": ad, "train": tr, "tasks": tasks}


def build_experiment(resolved: dict) -> Experiment:
    bb = BackboneConfig(**resolved["backbone"])
    agg = AggregatorConfig(**resolved["aggregator"])
    ad = AdapterConfig(**resolved["adapter"])
    tr = dict(resolved["train"])
    pre = {k[len("pretrain_"):]: tr.pop(k) for k in _PRETRAIN_KEYS}
    finetune = TrainConfig(**tr)
    pretrain = dataclasses.replace(finetune, condition="D_iada_lora", **pre)
    t = resolved["tasks"]
    common = dict(visual_vocab=bb.visual_vocab, text_vocab=bb.text_vocab, n_visual=t["n_visual"],
                  seq_len=t["seq_len"], min_majority=t["min_majority"], max_majority=t["max_majority"])
    if t["seq_len"] > bb.max_len:
        raise ConfigError(f"tasks.seq_len={t['seq_len']} exceeds backbone.max_len={bb.max_len}")
    surface = TaskSpec(kind="surface", **common)
    comp = TaskSpec(kind="composition", n_facts=t["n_facts"], **common)
    sft = dataclasses.replace(surface, target=t["finetune_target"])
    return Experiment(backbone=bb, aggregator=agg, adapter=ad, pretrain=pretrain, finetune=finetune,
                      pretrain_tasks=(surface, comp), finetune_tasks=(sft,),
                      eval_tasks=(("surface", sft), ("composition", comp)),
                      eval_size=t["eval_size"])


# -- text format -----------------------------------------------------------------

def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, default, key: str):
    if key == "rank" and raw == FULL_RANK:
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse config text into a fully resolved ``{section: {key: value}}``."""
    resolved = _defaults()
    section = None
    seen: set = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        where = f"{source}:{lineno}"
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {s!r}")
            section = s[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]; expected one of {SECTIONS}")
            continue
        if "=" not in s:
            raise ConfigError(f"{where}: expected 'key = value', got {s!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any section")
        key, raw = (x.strip() for x in s.split("=", 1))
        if key not in resolved[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        seen.add((section, key))
        try:
            resolved[section][key] = _convert(raw, resolved[section][key], key)
        except ValueError as err:
            raise ConfigError(f"{where}: bad value for {key}: {err}") from None
    try:
        build_experiment(resolved)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{source}: invalid configuration: {err}") from None
    return resolved


def serialize_config(resolved: dict) -> str:
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for k, v in resolved[section].items():
            out.append(f"{k} = {_format(v)}")
        out.append("")
    return "\n".join(out)


def named_configs() -> list:
    files = resources.files("iada").joinpath("configs")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def load_config(name_or_path: str | None) -> dict:
    """Resolve a file path, or the name of a bundled config (``toy``, ``iada_r16`` ...)."""
    if name_or_path is None:
        return _defaults()
    path = Path(name_or_path)
    if path.is_file():
        return parse_config(path.read_text(), str(path))
    res = resources.files("iada").joinpath("configs", f"{name_or_path}.cfg")
    if res.is_file():
        return parse_config(res.read_text(), f"{name_or_path}.cfg")
    raise ConfigError(f"no config file or bundled config named {name_or_path!r} "
                      f"(bundled: {', '.join(named_configs())})")
