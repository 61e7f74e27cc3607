"""Score-assisted tabu search over architecture genotypes.

Flow: sample a pool of unique genotypes, rank them by the training-free
score, pick six parents (three top-ranked, three best-scored near the target
size), then walk each parent: every iteration mutates a batch of children,
ranks them by the cheap mutation reward, trains only the winner, and either
adopts it (better grade) or falls back to the best tabu entry while the
rejected candidate enters the tabu list.

Everything is driven by explicitly derived rng streams and the event log is
a pure function of (config, master seed): identical runs produce identical
bytes, and checkpoints resume mid-run with an identical continuation.
"""
from __future__ import annotations

import json
import pickle
import random
from dataclasses import dataclass, field, replace
from typing import Callable

from . import net_graph
from .objective import DegenerateParentError, ObjectiveConfig, mutation_reward, size_term
from .search_space import (
    MutationFailed,
    NetworkSpec,
    SpaceConfig,
    mutate_modify,
    mutate_swap,
    random_spec,
    serialize,
    spec_hash_hex,
)
from .utils import derive_seed

CHECKPOINT_VERSION = 1


class PoolError(RuntimeError):
    """Could not assemble enough unique genotypes."""


@dataclass
class PoolEntry:
    spec: NetworkSpec
    hash: str
    score: float
    params: int
    grade: float | None = None


@dataclass
class TabuEntry:
    spec_hash: str
    grade: float
    iteration: int
    spec: NetworkSpec
    score: float
    params: int


@dataclass
class ParentState:
    """Bookkeeping for one parent's walk."""

    current_spec: NetworkSpec
    current_hash: str
    current_score: float
    current_params: int
    current_grade: float
    best_spec: NetworkSpec
    best_hash: str
    best_grade: float
    best_params: int
    best_accuracy: float = 0.0
    tabu: list = field(default_factory=list)
    iteration: int = 0
    no_improve: int = 0
    rng_state: tuple | None = None


@dataclass
class ParentResult:
    parent_index: int
    best_hash: str
    best_grade: float
    best_params: int
    best_spec: NetworkSpec
    iterations: int
    best_accuracy: float = 0.0
    aborted: bool = False
    error: str = ""


@dataclass
class SearchReport:
    results: list
    best: ParentResult | None
    ranking: list  # merged PoolEntry list, graded entries first


@dataclass(frozen=True)
class SearchConfig:
    pool_size: int = 2000
    n_parents: int = 6
    n_children: int = 24
    max_iter: int = 100
    patience: int = 10
    tenure: int = 20
    swap_prob: float = 0.5
    parent_window: float = 0.1
    seed: int = 0
    workers: int = 1
    patience_mode: str = "best"  # "best" | "adopt"

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.n_children < 1 or self.max_iter < 1 or self.patience < 1:
            raise ValueError("n_children, max_iter and patience must be >= 1")
        if self.tenure < 1:
            raise ValueError("tenure must be >= 1")
        if not (0.0 <= self.swap_prob <= 1.0):
            raise ValueError("swap_prob must be in [0, 1]")
        if self.patience_mode not in ("best", "adopt"):
            raise ValueError("patience_mode must be 'best' or 'adopt'")


def build_parent_pool(cfg: SpaceConfig, pool_size: int, seed: int,
                      scorer: Callable[[NetworkSpec], float],
                      mapper=map) -> list[PoolEntry]:
    """`pool_size` unique genotypes, scored and sorted by score descending."""
    specs: list[NetworkSpec] = []
    seen: set[str] = set()
    attempts = 0
    budget = 50 * pool_size
    while len(specs) < pool_size:
        if attempts >= budget:
            raise PoolError(
                f"only {len(specs)}/{pool_size} unique genotypes in {budget} attempts"
            )
        spec = random_spec(cfg, derive_seed(seed, "pool", attempts))
        attempts += 1
        h = spec_hash_hex(spec)
        if h in seen:
            continue
        seen.add(h)
        specs.append(spec)
    scores = list(mapper(scorer, specs))
    entries = [
        PoolEntry(spec=s, hash=spec_hash_hex(s), score=float(score),
                  params=net_graph.count_params_spec(s))
        for s, score in zip(specs, scores)
    ]
    entries.sort(key=lambda e: (-e.score, e.hash))
    return entries


def score_offset(entries: list[PoolEntry]) -> float:
    """Run-constant shift making the smallest finite pool score at least 1."""
    finite = [e.score for e in entries if e.score != float("-inf")]
    if not finite:
        return 0.0
    return max(0.0, 1.0 - min(finite))


def select_parents(ranking: list[PoolEntry], target_params: int,
                   count: int = 6, window: float = 0.1) -> list[PoolEntry]:
    """Half the parents by raw score, half by score near the target size.

    The size window is relative (|params - target| / target) and doubles
    until it holds enough unpicked candidates.
    """
    if not ranking:
        raise PoolError("empty ranking")
    if len(ranking) <= count:
        return list(ranking)
    top = count // 2
    picked = list(ranking[:top])
    picked_hashes = {e.hash for e in picked}
    rel = {e.hash: abs(e.params - target_params) / target_params for e in ranking}
    max_rel = max(rel.values())
    need = count - top
    w = window
    while True:
        cands = [e for e in ranking if e.hash not in picked_hashes and rel[e.hash] <= w]
        if len(cands) >= need or w >= max_rel:
            break
        w *= 2.0
    cands.sort(key=lambda e: (-e.score, e.hash))
    picked.extend(cands[:need])
    return picked


@dataclass
class ChildRecord:
    spec: NetworkSpec
    hash: str
    op: str
    score: float
    params: int
    reward: float


def _json_safe(value: float | None):
    if value is None:
        return None
    if value == float("-inf") or value != value:
        return None
    return value


class _ParentAbort(Exception):
    def __init__(self, cause: Exception):
        self.cause = cause
        super().__init__(str(cause))


class SearchDriver:
    """Runs the full search, logging every event and checkpointing each step.

    `scorer` maps a genotype to its training-free score (-inf if degenerate);
    `evaluator` maps a genotype to an EvalResult with a grade.  Both must be
    deterministic for replay and resume to reproduce bytes.
    """

    def __init__(self, space_cfg: SpaceConfig, obj_cfg: ObjectiveConfig,
                 search_cfg: SearchConfig, scorer, evaluator,
                 log_path: str, ckpt_dir: str | None = None,
                 run_config: dict | None = None):
        self.space_cfg = space_cfg
        self.obj_cfg = obj_cfg
        self.search_cfg = search_cfg
        self.scorer = scorer
        self.evaluator = evaluator
        self.log_path = log_path
        self.ckpt_dir = ckpt_dir
        self.run_config = run_config or {}
        self._log_fh = None
        self._record_count = 0
        self._executor = None
        # resumable state
        self.ranking: list[PoolEntry] = []
        self.parents: list[PoolEntry] = []
        self.offset = 0.0
        self.parent_idx = 0
        self.parent_state: ParentState | None = None
        self.results: list[ParentResult] = []
        self._started = False

    # --- logging / checkpointing ---------------------------------------------

    def _emit(self, record: dict):
        if self._log_fh is None:
            self._log_fh = open(self.log_path, "a")
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        self._log_fh.write(line + "\n")
        self._log_fh.flush()
        self._record_count += 1

    def _checkpoint(self):
        if self.ckpt_dir is None:
            return
        import os

        os.makedirs(self.ckpt_dir, exist_ok=True)
        state = {
            "version": CHECKPOINT_VERSION,
            "run_config": self.run_config,
            "space_cfg": self.space_cfg,
            "obj_cfg": self.obj_cfg,
            "search_cfg": self.search_cfg,
            "ranking": self.ranking,
            "parents": self.parents,
            "offset": self.offset,
            "parent_idx": self.parent_idx,
            "parent_state": self.parent_state,
            "results": self.results,
            "started": self._started,
            "record_count": self._record_count,
        }
        path = f"{self.ckpt_dir}/ckpt_{self._record_count:06d}.pkl"
        with open(path, "wb") as fh:
            pickle.dump(state, fh)

    @classmethod
    def resume(cls, ckpt_path: str, scorer, evaluator, log_path: str,
               ckpt_dir: str | None = None) -> "SearchDriver":
        with open(ckpt_path, "rb") as fh:
            state = pickle.load(fh)
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        driver = cls(
            space_cfg=state["space_cfg"],
            obj_cfg=state["obj_cfg"],
            search_cfg=state["search_cfg"],
            scorer=scorer,
            evaluator=evaluator,
            log_path=log_path,
            ckpt_dir=ckpt_dir,
            run_config=state["run_config"],
        )
        driver.ranking = state["ranking"]
        driver.parents = state["parents"]
        driver.offset = state["offset"]
        driver.parent_idx = state["parent_idx"]
        driver.parent_state = state["parent_state"]
        driver.results = state["results"]
        driver._started = state["started"]
        driver._record_count = state["record_count"]
        return driver

    # --- run -------------------------------------------------------------------

    def run(self) -> SearchReport:
        cfg = self.search_cfg
        if not self._started:
            self.ranking = build_parent_pool(
                self.space_cfg, cfg.pool_size, cfg.seed, self.scorer,
                mapper=self._mapper(),
            )
            self.offset = score_offset(self.ranking)
            public_cfg = {
                k: v for k, v in self.run_config.items() if not k.startswith("_")
            }
            self._emit({
                "type": "header",
                "version": 1,
                "config": public_cfg,
                "score_offset": _json_safe(self.offset),
                "pool_size": len(self.ranking),
            })
            self.parents = select_parents(
                self.ranking, self.obj_cfg.target_params,
                count=cfg.n_parents, window=cfg.parent_window,
            )
            self._emit({
                "type": "parents",
                "hashes": [e.hash for e in self.parents],
                "short": len(self.parents) < cfg.n_parents,
            })
            self._started = True
            self._checkpoint()

        while self.parent_idx < len(self.parents):
            try:
                self._run_parent(self.parent_idx)
            except _ParentAbort as abort:
                state = self.parent_state
                self._emit({
                    "type": "parent_abort",
                    "parent": self.parent_idx,
                    "error": f"{type(abort.cause).__name__}: {abort.cause}",
                    "iteration": state.iteration if state else 0,
                })
                self.results.append(ParentResult(
                    parent_index=self.parent_idx,
                    best_hash=state.best_hash if state else self.parents[self.parent_idx].hash,
                    best_grade=state.best_grade if state else float("-inf"),
                    best_params=state.best_params if state else self.parents[self.parent_idx].params,
                    best_spec=state.best_spec if state else self.parents[self.parent_idx].spec,
                    iterations=state.iteration if state else 0,
                    aborted=True,
                    error=f"{type(abort.cause).__name__}",
                ))
            self.parent_idx += 1
            self.parent_state = None
            self._merge_ranking()
            self._checkpoint()

        report = self._final_report()
        self._emit({
            "type": "summary",
            "best": report.best.best_hash if report.best else None,
            "best_grade": _json_safe(report.best.best_grade) if report.best else None,
            "best_params": report.best.best_params if report.best else None,
            "parents": [
                {
                    "parent": r.parent_index,
                    "best": r.best_hash,
                    "grade": _json_safe(r.best_grade),
                    "params": r.best_params,
                    "aborted": r.aborted,
                }
                for r in self.results
            ],
        })
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None
        return report

    def _mapper(self):
        if self.search_cfg.workers <= 1:
            return map
        if self._executor is None:
            from concurrent.futures import ProcessPoolExecutor

            self._executor = ProcessPoolExecutor(max_workers=self.search_cfg.workers)
        return self._executor.map

    def _grade(self, spec: NetworkSpec):
        try:
            return self.evaluator(spec)
        except Exception as exc:  # evaluator failure aborts this parent only
            raise _ParentAbort(exc)

    def _run_parent(self, p_idx: int):
        cfg = self.search_cfg
        if self.parent_state is None:
            parent = self.parents[p_idx]
            result = self._grade(parent.spec)
            rng = random.Random(derive_seed(cfg.seed, "parent", p_idx))
            self.parent_state = ParentState(
                current_spec=parent.spec,
                current_hash=parent.hash,
                current_score=parent.score,
                current_params=parent.params,
                current_grade=result.grade,
                best_spec=parent.spec,
                best_hash=parent.hash,
                best_grade=result.grade,
                best_params=parent.params,
                best_accuracy=result.accuracy,
                rng_state=rng.getstate(),
            )
            self._emit({
                "type": "parent_start",
                "parent": p_idx,
                "hash": parent.hash,
                "grade": _json_safe(result.grade),
                "params": parent.params,
                "score": _json_safe(parent.score),
            })
            self._checkpoint()
        state = self.parent_state
        while state.iteration < cfg.max_iter and state.no_improve < cfg.patience:
            self._iterate(p_idx, state)
            self._checkpoint()
        self._emit({
            "type": "parent_end",
            "parent": p_idx,
            "best": state.best_hash,
            "best_accuracy": _json_safe(state.best_accuracy),
            "best_grade": _json_safe(state.best_grade),
            "best_params": state.best_params,
            "iterations": state.iteration,
        })
        self.results.append(ParentResult(
            parent_index=p_idx,
            best_hash=state.best_hash,
            best_grade=state.best_grade,
            best_params=state.best_params,
            best_spec=state.best_spec,
            iterations=state.iteration,
            best_accuracy=state.best_accuracy,
        ))

    def _make_children(self, state: ParentState, rng: random.Random) -> list[ChildRecord]:
        cfg = self.search_cfg
        children: list[ChildRecord] = []
        seen = {state.current_hash}
        for _ in range(cfg.n_children):
            op = "swap" if rng.random() < cfg.swap_prob else "modify"
            seed = rng.randrange(2 ** 31)
            try:
                if op == "swap":
                    child = mutate_swap(state.current_spec, seed, self.space_cfg)
                else:
                    child = mutate_modify(state.current_spec, self.space_cfg, seed)
            except MutationFailed:
                continue
            h = spec_hash_hex(child)
            if h in seen:
                continue
            seen.add(h)
            children.append(ChildRecord(
                spec=child, hash=h, op=op, score=0.0,
                params=net_graph.count_params_spec(child), reward=0.0,
            ))
        return children

    def _iterate(self, p_idx: int, state: ParentState):
        cfg = self.search_cfg
        rng = random.Random()
        rng.setstate(state.rng_state)
        children = self._make_children(state, rng)
        state.rng_state = rng.getstate()
        state.iteration += 1

        scores = list(self._score_children(children))
        for child, score in zip(children, scores):
            child.score = float(score)
            child.reward = self._reward(state, child)

        trained = None
        trained_grade = None
        adopted = False
        swapped_to = None
        tabu_by_hash = {e.spec_hash: e for e in state.tabu}
        chosen = self._pick_child(children, tabu_by_hash, state.best_grade)
        barren = chosen is None

        improved = False
        if not barren:
            result = self._grade(chosen.spec)
            trained = chosen.hash
            trained_grade = result.grade
            if result.grade > state.current_grade:
                # good mutation: keep building on it, retire the old current
                self._admit_tabu(state, TabuEntry(
                    spec_hash=state.current_hash, grade=state.current_grade,
                    iteration=state.iteration, spec=state.current_spec,
                    score=state.current_score, params=state.current_params,
                ))
                state.current_spec = chosen.spec
                state.current_hash = chosen.hash
                state.current_score = chosen.score
                state.current_params = chosen.params
                state.current_grade = result.grade
                adopted = True
            else:
                # pick the fallback from the list as it stood, then retire the
                # rejected child; with an empty list the current spec stays
                swap = self._best_tabu(state, exclude=state.current_hash)
                self._admit_tabu(state, TabuEntry(
                    spec_hash=chosen.hash, grade=result.grade,
                    iteration=state.iteration, spec=chosen.spec,
                    score=chosen.score, params=chosen.params,
                ))
                if swap is not None:
                    state.current_spec = swap.spec
                    state.current_hash = swap.spec_hash
                    state.current_score = swap.score
                    state.current_params = swap.params
                    state.current_grade = swap.grade
                    swapped_to = swap.spec_hash
            improved = self._update_best(state, chosen.spec, chosen.hash,
                                         result.grade, chosen.params,
                                         result.accuracy)

        if cfg.patience_mode == "best":
            state.no_improve = 0 if improved else state.no_improve + 1
        else:
            state.no_improve = 0 if adopted else state.no_improve + 1

        self._emit({
            "type": "iteration",
            "parent": p_idx,
            "iter": state.iteration,
            "children": [
                {
                    "hash": c.hash,
                    "op": c.op,
                    "score": _json_safe(c.score),
                    "reward": _json_safe(c.reward),
                    "params": c.params,
                }
                for c in children
            ],
            "trained": trained,
            "trained_grade": _json_safe(trained_grade),
            "adopted": adopted,
            "swapped_to": swapped_to,
            "barren": barren,
            "current": state.current_hash,
            "current_grade": _json_safe(state.current_grade),
            "best": state.best_hash,
            "best_grade": _json_safe(state.best_grade),
            "no_improve": state.no_improve,
            "tabu": [e.spec_hash for e in state.tabu],
        })

    def _score_children(self, children):
        if not children:
            return []
        return self._mapper()(self.scorer, [c.spec for c in children])

    def _reward(self, state: ParentState, child: ChildRecord) -> float:
        try:
            return mutation_reward(
                state.current_score, child.score, child.params,
                self.obj_cfg, offset=self.offset,
            )
        except DegenerateParentError:
            # degenerate parent carries no score signal; rank by size alone
            if child.score == float("-inf"):
                return float("-inf")
            return size_term(child.params, self.obj_cfg.target_params)

    @staticmethod
    def _pick_child(children, tabu_by_hash, best_grade):
        """Highest-reward child to train; tabu hashes are skipped unless
        their recorded grade beats the best seen (aspiration)."""
        ordered = sorted(
            (c for c in children if c.reward != float("-inf")),
            key=lambda c: (-c.reward, c.hash),
        )
        for cand in ordered:
            entry = tabu_by_hash.get(cand.hash)
            if entry is None or entry.grade > best_grade:
                return cand
        return None

    def _admit_tabu(self, state: ParentState, entry: TabuEntry):
        if any(e.spec_hash == entry.spec_hash for e in state.tabu):
            return
        state.tabu.append(entry)
        while len(state.tabu) > self.search_cfg.tenure:
            state.tabu.pop(0)

    @staticmethod
    def _best_tabu(state: ParentState, exclude: str):
        cands = [e for e in state.tabu if e.spec_hash != exclude]
        if not cands:
            return None
        cands.sort(key=lambda e: (-e.grade, e.spec_hash))
        return cands[0]

    @staticmethod
    def _update_best(state: ParentState, spec, h, g, params, accuracy) -> bool:
        """Lexicographic best: grade, then fewer params, then hash.

        Only a strict grade increase counts as improvement for patience.
        """
        better = (
            g > state.best_grade
            or (g == state.best_grade and params < state.best_params)
            or (g == state.best_grade and params == state.best_params
                and h < state.best_hash)
        )
        if better:
            improved = g > state.best_grade
            state.best_spec = spec
            state.best_hash = h
            state.best_grade = g
            state.best_params = params
            state.best_accuracy = accuracy
            return improved
        return False

    def _merge_ranking(self):
        """Fold grades into the ranking: graded entries first, by grade."""
        grades: dict[str, float] = {}
        for res in self.results:
            grades[res.best_hash] = max(grades.get(res.best_hash, float("-inf")),
                                        res.best_grade)
        cache = getattr(self.evaluator, "_cache", None)
        if cache:
            for key, result in cache.items():
                grades[f"{key:016x}"] = result.grade
        known = {e.hash for e in self.ranking}
        for res in self.results:
            if res.best_hash not in known:
                self.ranking.append(PoolEntry(
                    spec=res.best_spec, hash=res.best_hash,
                    score=float("-inf"), params=res.best_params,
                ))
                known.add(res.best_hash)
        for entry in self.ranking:
            if entry.hash in grades:
                entry.grade = grades[entry.hash]
        self.ranking.sort(key=lambda e: (
            0 if e.grade is not None else 1,
            -(e.grade if e.grade is not None else 0.0),
            -e.score,
            e.hash,
        ))

    def _final_report(self) -> SearchReport:
        best = None
        for res in self.results:
            if res.aborted:
                continue
            if best is None or (res.best_grade, -res.best_params) > (
                best.best_grade, -best.best_params
            ):
                best = res
        return SearchReport(results=list(self.results), best=best,
                            ranking=list(self.ranking))


def run_search(space_cfg: SpaceConfig, obj_cfg: ObjectiveConfig,
               search_cfg: SearchConfig, scorer, evaluator,
               log_path: str, ckpt_dir: str | None = None,
               run_config: dict | None = None) -> SearchReport:
    """Build a driver and run the whole search."""
    driver = SearchDriver(space_cfg, obj_cfg, search_cfg, scorer, evaluator,
                          log_path, ckpt_dir, run_config)
    return driver.run()
