"""Training-backed candidate grading on the procedural toy tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net_graph, objective, tasks, tensor_engine
from .objective import EvalResult, ObjectiveConfig
from .search_space import HeadKind, NetworkSpec, spec_hash
from .tensor_engine import AdamHyper, NonFiniteError
from .utils import derive_seed

DEPTH_CLAMP_MIN = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _loss_kind(task_kind: str) -> str:
    return "ce" if task_kind == "classify" else "l1"


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    b, h, w = labels.shape
    out = np.zeros((b, num_classes, h, w), dtype=np.float32)
    flat = labels.reshape(b, 1, h, w)
    for k in range(num_classes):
        out[:, k : k + 1][flat == k] = 1.0
    return out


def _check_head(spec: NetworkSpec, task_cfg: tasks.ToyTaskConfig):
    head = spec.task_head
    kind = task_cfg.kind
    ok = (
        (kind == "regress" and head.kind is HeadKind.REGRESS)
        or (kind == "classify" and head.kind is HeadKind.CLASSIFY
            and head.classes == task_cfg.num_classes)
        or (kind == "superres" and head.kind is HeadKind.SUPERRES
            and head.factor == task_cfg.sr_factor)
    )
    if not ok:
        raise ValueError(
            f"spec head {head.canonical()} does not fit task {kind}"
        )


class ToyEvaluator:
    """Trains a candidate on the toy task and grades the validation metrics.

    Deterministic per (configs, spec): init, shuffling and augmentation seeds
    all derive from the configured seed and the spec hash.  Results are cached
    by spec hash.  `train_invocations` counts actual training loops, so a
    zero-epoch ("score only") configuration never increments it.
    """

    def __init__(self, task_cfg: tasks.ToyTaskConfig, train_cfg: TrainConfig,
                 obj_cfg: ObjectiveConfig):
        self.task_cfg = task_cfg
        self.train_cfg = train_cfg
        self.obj_cfg = obj_cfg
        self.train_data, self.val_data = tasks.gen_task(task_cfg)
        self.train_invocations = 0
        self._cache: dict[int, EvalResult] = {}

    def __call__(self, spec: NetworkSpec) -> EvalResult:
        key = spec_hash(spec)
        if key not in self._cache:
            self._cache[key] = self._evaluate(spec)
        return self._cache[key]

    def _evaluate(self, spec: NetworkSpec) -> EvalResult:
        _check_head(spec, self.task_cfg)
        res = self.task_cfg.resolution
        plan = net_graph.instantiate(spec, (res, res))
        params = net_graph.count_params(plan)
        seed = derive_seed(self.train_cfg.seed, "evaluate", spec_hash(spec))
        store = tensor_engine.init_params(plan, seed)
        diverged = False
        if self.train_cfg.epochs > 0:
            diverged = not self._train(plan, store, seed)
        if diverged:
            result = EvalResult(accuracy=0.0, params=params, grade=0.0,
                                metrics={}, diverged=True)
        else:
            metrics = self._validate(plan, store)
            accuracy = objective.accuracy_of(self.task_cfg.kind, metrics)
            result = EvalResult(accuracy=accuracy, params=params, grade=0.0,
                                metrics=metrics)
        result.grade = objective.grade(result.accuracy, params, self.obj_cfg)
        return result

    def _train(self, plan, store, seed) -> bool:
        """Adam training loop; returns False on divergence."""
        self.train_invocations += 1
        cfg = self.train_cfg
        kind = self.task_cfg.kind
        loss_kind = _loss_kind(kind)
        n = len(self.train_data)
        order_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
        step = 0
        for epoch in range(cfg.epochs):
            lr = tensor_engine.lr_schedule(epoch, cfg.base_lr)
            hyper = AdamHyper(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
            order = order_rng.permutation(n)
            aug_rng = np.random.default_rng(derive_seed(seed, "augment", epoch))
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb = self.train_data.inputs[idx]
                tb = self.train_data.targets[idx]
                if cfg.augment:
                    xb, tb = tasks.augment_batch(xb, tb, kind, aug_rng)
                if kind == "classify":
                    tb = _one_hot(tb, self.task_cfg.num_classes)
                try:
                    _, grads = tensor_engine.backward(plan, store, xb, tb,
                                                      loss_kind, update_stats=True)
                except NonFiniteError:
                    return False
                if not np.all(np.isfinite(grads)):
                    return False
                step += 1
                tensor_engine.adam_step(store, grads, hyper, step)
        return True

    def _validate(self, plan, store) -> dict:
        cfg = self.task_cfg
        preds = []
        for start in range(0, len(self.val_data), self.train_cfg.batch_size):
            xb = self.val_data.inputs[start : start + self.train_cfg.batch_size]
            preds.append(tensor_engine.forward(plan, store, xb, training=False))
        pred = np.concatenate(preds, axis=0)
        target = self.val_data.targets
        if cfg.kind == "regress":
            clipped = np.maximum(pred, DEPTH_CLAMP_MIN)
            return objective.depth_metrics(clipped, target, mask=target > 1e-6)
        if cfg.kind == "classify":
            labels = pred.argmax(axis=1)
            return objective.seg_metrics(labels, target, cfg.num_classes)
        clipped = np.clip(pred, 0.0, 1.0)
        return objective.sr_metrics(clipped, target, value_range=1.0)


def evaluate(spec: NetworkSpec, task_cfg: tasks.ToyTaskConfig,
             train_cfg: TrainConfig, obj_cfg: ObjectiveConfig) -> EvalResult:
    """One-shot convenience wrapper around ToyEvaluator."""
    return ToyEvaluator(task_cfg, train_cfg, obj_cfg)(spec)


def make_evaluator(kind: str, task_cfg: tasks.ToyTaskConfig,
                   train_cfg: TrainConfig, obj_cfg: ObjectiveConfig) -> ToyEvaluator:
    """`toy-trainer` grades with training; `zero-cost-only` skips it (epochs=0)."""
    if kind == "zero-cost-only":
        train_cfg = TrainConfig(
            epochs=0, batch_size=train_cfg.batch_size, base_lr=train_cfg.base_lr,
            beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
            augment=False, seed=train_cfg.seed,
        )
    elif kind != "toy-trainer":
        raise ValueError(f"unknown evaluator kind {kind!r}")
    return ToyEvaluator(task_cfg, train_cfg, obj_cfg)
