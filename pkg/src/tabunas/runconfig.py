"""Run configuration: one validated bundle for a whole search run.

The JSON config file mirrors this structure section by section; every field
has a default so a minimal file like `{"task": {"kind": "regress"}}` works.
Seeds for the task generator and probe initialization derive from the master
search seed unless set explicitly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np

from . import zerocost
from .ats import SearchConfig, SearchDriver, SearchReport
from .evaluator import ToyEvaluator, TrainConfig, make_evaluator
from .objective import ObjectiveConfig
from .search_space import ConvKind, HeadKind, SkipOp, SpaceConfig, ComputeBudget, TaskHead
from .tasks import ToyTaskConfig, gen_task
from .utils import derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    size: int = 16
    source: str = "task"  # "task" | "noise"
    init_seed: int | None = None  # derived from the master seed when None
    avg_seeds: int = 1  # average the score over this many init seeds

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("probe size must be >= 1")
        if self.source not in ("task", "noise"):
            raise ConfigError(f"probe source must be 'task' or 'noise', got {self.source!r}")
        if self.avg_seeds < 1:
            raise ConfigError("avg_seeds must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    task: ToyTaskConfig = field(default_factory=ToyTaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    evaluator_kind: str = "toy-trainer"

    def __post_init__(self):
        if self.evaluator_kind not in ("toy-trainer", "zero-cost-only"):
            raise ConfigError(f"unknown evaluator kind {self.evaluator_kind!r}")
        need = 2 ** (self.space.scale_range[1] - 1)
        if self.task.resolution % need:
            raise ConfigError(
                f"task resolution {self.task.resolution} not divisible by "
                f"2^(max scales - 1) = {need}"
            )

    def to_public_dict(self) -> dict:
        out = {
            "objective": asdict(self.objective),
            "space": _space_to_dict(self.space),
            "search": asdict(self.search),
            "task": asdict(self.task),
            "train": asdict(self.train),
            "probe": asdict(self.probe),
            "evaluator_kind": self.evaluator_kind,
        }
        return out


_SPACE_KEYS = {
    "scale_range", "layers_range", "channel_ladder", "conv_kinds",
    "kernel_sizes", "se_ratios", "skip_ops", "ib_expansion",
    "per_block_cost_cap", "param_cap", "in_channels", "mutate_num_layers",
}


def _space_to_dict(space: SpaceConfig) -> dict:
    return {
        "scale_range": list(space.scale_range),
        "layers_range": list(space.layers_range),
        "channel_ladder": list(space.channel_ladder),
        "conv_kinds": [k.value for k in space.conv_kinds],
        "kernel_sizes": list(space.kernel_sizes),
        "se_ratios": list(space.se_ratios),
        "skip_ops": [s.value for s in space.skip_ops],
        "ib_expansion": space.ib_expansion,
        "per_block_cost_cap": space.budget.per_block_cost_cap,
        "param_cap": space.budget.param_cap,
        "in_channels": space.in_channels,
        "mutate_num_layers": space.mutate_num_layers,
    }


def _head_for_task(task: ToyTaskConfig) -> TaskHead:
    if task.kind == "regress":
        return TaskHead(HeadKind.REGRESS)
    if task.kind == "classify":
        return TaskHead(HeadKind.CLASSIFY, classes=task.num_classes)
    return TaskHead(HeadKind.SUPERRES, factor=task.sr_factor)


def _space_from_dict(data: dict, task: ToyTaskConfig) -> SpaceConfig:
    unknown = set(data) - _SPACE_KEYS
    if unknown:
        raise ConfigError(f"unknown keys in 'space': {sorted(unknown)}")
    kw: dict = {}
    if "scale_range" in data:
        kw["scale_range"] = tuple(data["scale_range"])
    if "layers_range" in data:
        kw["layers_range"] = tuple(data["layers_range"])
    if "channel_ladder" in data:
        kw["channel_ladder"] = tuple(data["channel_ladder"])
    if "conv_kinds" in data:
        try:
            kw["conv_kinds"] = tuple(ConvKind(k) for k in data["conv_kinds"])
        except ValueError as exc:
            raise ConfigError(f"space.conv_kinds: {exc}")
    if "kernel_sizes" in data:
        kw["kernel_sizes"] = tuple(data["kernel_sizes"])
    if "se_ratios" in data:
        kw["se_ratios"] = tuple(data["se_ratios"])
    if "skip_ops" in data:
        try:
            kw["skip_ops"] = tuple(SkipOp(s) for s in data["skip_ops"])
        except ValueError as exc:
            raise ConfigError(f"space.skip_ops: {exc}")
    if "ib_expansion" in data:
        kw["ib_expansion"] = data["ib_expansion"]
    if "mutate_num_layers" in data:
        kw["mutate_num_layers"] = data["mutate_num_layers"]
    budget = ComputeBudget(
        per_block_cost_cap=data.get("per_block_cost_cap", 1200),
        param_cap=data.get("param_cap", 2_000_000),
    )
    return SpaceConfig(
        budget=budget,
        in_channels=task.channels,
        task_head=_head_for_task(task),
        **kw,
    )


def _section(data: dict, name: str, cls, **extra):
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"section '{name}' must be an object")
    valid = set(cls.__dataclass_fields__)
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}")


def load_run_config(data: dict) -> RunConfig:
    """Build and validate a RunConfig from a parsed JSON object."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = {"objective", "space", "search", "task", "train", "probe", "evaluator_kind"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    task = _section(data, "task", ToyTaskConfig)
    search = _section(data, "search", SearchConfig)
    objective = _section(data, "objective", ObjectiveConfig)
    train = _section(data, "train", TrainConfig)
    probe = _section(data, "probe", ProbeConfig)
    space_data = data.get("space", {})
    if not isinstance(space_data, dict):
        raise ConfigError("section 'space' must be an object")
    try:
        space = _space_from_dict(space_data, task)
    except ValueError as exc:
        raise ConfigError(str(exc))
    try:
        return RunConfig(
            objective=objective, space=space, search=search, task=task,
            train=train, probe=probe,
            evaluator_kind=data.get("evaluator_kind", "toy-trainer"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def load_run_config_file(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}")
    return load_run_config(data)


# --- wiring ------------------------------------------------------------------


def make_probe(cfg: RunConfig) -> zerocost.ProbeBatch:
    """Probe inputs: leading task training samples, or seeded noise."""
    if cfg.probe.source == "noise":
        return zerocost.noise_probe(
            cfg.probe.size, cfg.task.channels, cfg.task.resolution,
            cfg.task.resolution, seed=derive_seed(cfg.search.seed, "probe"),
        )
    train, _ = gen_task(cfg.task)
    n = min(cfg.probe.size, len(train))
    return zerocost.ProbeBatch(data=train.inputs[:n].copy(), source="task")


def _score_spec(spec, space_cfg: SpaceConfig, probe: zerocost.ProbeBatch,
                init_seed: int, avg_seeds: int) -> float:
    scores = []
    for i in range(avg_seeds):
        report = zerocost.score_network(spec, space_cfg, probe,
                                        derive_seed(init_seed, i))
        if report.degenerate:
            return float("-inf")
        scores.append(report.score)
    return float(np.mean(scores))


def make_scorer(cfg: RunConfig, probe: zerocost.ProbeBatch | None = None):
    """Picklable spec -> score callable (workers fan it out by pickling)."""
    if probe is None:
        probe = make_probe(cfg)
    init_seed = cfg.probe.init_seed
    if init_seed is None:
        init_seed = derive_seed(cfg.search.seed, "score-init")
    return partial(_score_spec, space_cfg=cfg.space, probe=probe,
                   init_seed=init_seed, avg_seeds=cfg.probe.avg_seeds)


def build_driver(cfg: RunConfig, log_path: str, ckpt_dir: str | None = None) -> SearchDriver:
    scorer = make_scorer(cfg)
    evaluator = make_evaluator(cfg.evaluator_kind, cfg.task, cfg.train, cfg.objective)
    return SearchDriver(cfg.space, cfg.objective, cfg.search, scorer, evaluator,
                        log_path, ckpt_dir, cfg.to_public_dict())


def resume_driver(ckpt_path: str, log_path: str, ckpt_dir: str | None = None) -> SearchDriver:
    """Rebuild scorer and evaluator from the checkpointed config, then resume."""
    import pickle

    with open(ckpt_path, "rb") as fh:
        state = pickle.load(fh)
    cfg = load_run_config(state["run_config"])
    scorer = make_scorer(cfg)
    evaluator = make_evaluator(cfg.evaluator_kind, cfg.task, cfg.train, cfg.objective)
    return SearchDriver.resume(ckpt_path, scorer, evaluator, log_path, ckpt_dir)


DEFAULT_ALPHAS = (0.0, 0.4, 0.5, 0.6, 1.0)


def sweep_alpha(cfg: RunConfig, alphas, log_dir: str) -> list[dict]:
    """Run one search per alpha with shared seeds; rows for the grid CSV."""
    import os

    os.makedirs(log_dir, exist_ok=True)
    rows = []
    for alpha in alphas:
        run_cfg = replace(cfg, objective=replace(cfg.objective, alpha=alpha))
        log_path = os.path.join(log_dir, f"alpha_{alpha:g}.ndjson")
        driver = build_driver(run_cfg, log_path)
        report = driver.run()
        best = report.best
        rows.append({
            "task": cfg.task.kind,
            "alpha": alpha,
            "best_accuracy": best.best_accuracy if best else float("nan"),
            "best_params": best.best_params if best else 0,
            "best_grade": best.best_grade if best else float("nan"),
        })
    return rows
