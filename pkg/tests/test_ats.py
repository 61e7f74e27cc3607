import json
import random
from dataclasses import replace

import pytest

from tabunas import net_graph
from tabunas.ats import (
    ChildRecord,
    ParentState,
    PoolEntry,
    PoolError,
    SearchConfig,
    SearchDriver,
    TabuEntry,
    build_parent_pool,
    score_offset,
    select_parents,
)
from tabunas.objective import EvalResult, ObjectiveConfig
from tabunas.search_space import SpaceConfig, random_spec, spec_hash, spec_hash_hex
from tabunas.utils import derive_seed


def stub_scorer(spec):
    """Deterministic pseudo-score from the genotype digest."""
    return float(spec_hash(spec) % 9973) / 100.0


class StubEvaluator:
    """Programmable grades; defaults to a deterministic hash-derived grade."""

    def __init__(self, grade_fn=None, fail_hashes=()):
        self.grade_fn = grade_fn
        self.fail_hashes = set(fail_hashes)
        self.calls = 0
        self._cache = {}

    def __call__(self, spec):
        self.calls += 1
        h = spec_hash(spec)
        hexed = f"{h:016x}"
        if hexed in self.fail_hashes:
            raise RuntimeError("injected evaluator failure")
        if h not in self._cache:
            params = net_graph.count_params_spec(spec)
            if self.grade_fn is not None:
                grade = self.grade_fn(spec)
            else:
                grade = float(h % 1000) / 1000.0
            self._cache[h] = EvalResult(accuracy=grade, params=params, grade=grade)
        return self._cache[h]


@pytest.fixture
def space_cfg():
    return SpaceConfig(scale_range=(1, 2), layers_range=(1, 2),
                       channel_ladder=(8, 16, 24))


def make_driver(tmp_path, space_cfg, evaluator=None, **search_kw):
    search = SearchConfig(**{
        "pool_size": 12, "n_parents": 4, "n_children": 4,
        "max_iter": 3, "patience": 2, "tenure": 5, "seed": 1, **search_kw,
    })
    obj = ObjectiveConfig(alpha=0.6, target_params=20_000)
    return SearchDriver(
        space_cfg, obj, search, stub_scorer,
        evaluator or StubEvaluator(),
        log_path=str(tmp_path / "run.ndjson"),
        ckpt_dir=str(tmp_path / "ckpts"),
        run_config={"note": "test"},
    )


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class TestBuildParentPool:
    def test_singleton_pool(self, space_cfg):
        pool = build_parent_pool(space_cfg, 1, seed=0, scorer=stub_scorer)
        assert len(pool) == 1

    def test_fixed_seed_reproducible(self, space_cfg):
        a = build_parent_pool(space_cfg, 20, seed=3, scorer=stub_scorer)
        b = build_parent_pool(space_cfg, 20, seed=3, scorer=stub_scorer)
        assert [e.hash for e in a] == [e.hash for e in b]
        assert [e.score for e in a] == [e.score for e in b]

    def test_unique_and_sorted(self, space_cfg):
        pool = build_parent_pool(space_cfg, 60, seed=5, scorer=stub_scorer)
        hashes = [e.hash for e in pool]
        assert len(set(hashes)) == 60
        scores = [e.score for e in pool]
        assert scores == sorted(scores, reverse=True)

    def test_uniqueness_exhaustion_raises(self):
        cfg = SpaceConfig(
            scale_range=(1, 1), layers_range=(1, 1), channel_ladder=(8,),
            conv_kinds=(list(SpaceConfig().conv_kinds)[0],),
            kernel_sizes=(3,), se_ratios=(0.0,),
            skip_ops=(list(SpaceConfig().skip_ops)[0],),
        )
        with pytest.raises(PoolError):
            build_parent_pool(cfg, 2, seed=0, scorer=stub_scorer)


def entry(h, score, params):
    return PoolEntry(spec=None, hash=h, score=score, params=params)


class TestSelectParents:
    def test_ranking_of_exactly_six(self):
        ranking = [entry(f"{i:016x}", 10.0 - i, 1000 * (i + 1)) for i in range(6)]
        assert select_parents(ranking, 3000) == ranking

    def test_small_ranking_returns_all(self):
        ranking = [entry(f"{i:016x}", 5.0 - i, 100) for i in range(4)]
        assert len(select_parents(ranking, 100)) == 4

    def test_window_pulls_near_target_specs(self):
        # top scores sit far above the target size; the window triple must
        # come from the near-target band
        ranking = (
            [entry(f"a{i:015x}", 100.0 - i, 10_000_000) for i in range(3)]
            + [entry(f"b{i:015x}", 50.0 - i, 1_000_000 + i) for i in range(4)]
            + [entry(f"c{i:015x}", 80.0 - i, 30_000_000) for i in range(3)]
        )
        picked = select_parents(ranking, 1_000_000, count=6, window=0.1)
        assert len(picked) == 6
        top3 = {e.hash for e in picked[:3]}
        assert top3 == {f"a{i:015x}" for i in range(3)}
        near = {e.hash for e in picked[3:]}
        assert near == {f"b{i:015x}" for i in range(3)}

    def test_window_widens_when_band_sparse(self):
        ranking = (
            [entry(f"a{i:015x}", 100.0 - i, 5_000_000) for i in range(3)]
            + [entry(f"d{i:015x}", 10.0 - i, 3_000_000) for i in range(5)]
        )
        picked = select_parents(ranking, 1_000_000, count=6, window=0.1)
        assert len(picked) == 6

    def test_no_duplicates(self):
        ranking = [entry(f"{i:016x}", 10.0 - 0.1 * i, 1000 + i) for i in range(20)]
        picked = select_parents(ranking, 1500)
        hashes = [e.hash for e in picked]
        assert len(hashes) == len(set(hashes)) == 6


class TestPickChild:
    def make_children(self, rewards):
        return [
            ChildRecord(spec=None, hash=f"{i:016x}", op="swap", score=1.0,
                        params=10, reward=r)
            for i, r in enumerate(rewards)
        ]

    def test_highest_reward_wins(self):
        children = self.make_children([0.5, 2.0, 1.0])
        chosen = SearchDriver._pick_child(children, {}, best_grade=0.0)
        assert chosen.hash == f"{1:016x}"

    def test_degenerate_rewards_excluded(self):
        children = self.make_children([float("-inf"), float("-inf")])
        assert SearchDriver._pick_child(children, {}, 0.0) is None

    def test_tabu_child_skipped(self):
        children = self.make_children([2.0, 1.0])
        tabu = {f"{0:016x}": TabuEntry(f"{0:016x}", 0.2, 1, None, 0.0, 10)}
        chosen = SearchDriver._pick_child(children, tabu, best_grade=0.5)
        assert chosen.hash == f"{1:016x}"

    def test_aspiration_readmits_strong_tabu_child(self):
        children = self.make_children([2.0, 1.0])
        tabu = {f"{0:016x}": TabuEntry(f"{0:016x}", 0.9, 1, None, 0.0, 10)}
        chosen = SearchDriver._pick_child(children, tabu, best_grade=0.5)
        assert chosen.hash == f"{0:016x}"


class TestIterationBranches:
    def seed_state(self, driver, space_cfg, grade):
        spec = random_spec(space_cfg, 0)
        h = spec_hash_hex(spec)
        return ParentState(
            current_spec=spec, current_hash=h, current_score=stub_scorer(spec),
            current_params=net_graph.count_params_spec(spec),
            current_grade=grade, best_spec=spec, best_hash=h,
            best_grade=grade, best_params=net_graph.count_params_spec(spec),
            rng_state=random.Random(1).getstate(),
        )

    def test_adoption_branch(self, tmp_path, space_cfg):
        evaluator = StubEvaluator(grade_fn=lambda spec: 0.9)
        driver = make_driver(tmp_path, space_cfg, evaluator)
        state = self.seed_state(driver, space_cfg, grade=0.5)
        old_hash = state.current_hash
        driver._iterate(0, state)
        record = read_log(driver.log_path)[-1]
        assert record["adopted"] is True
        assert state.current_hash == record["trained"]
        assert any(e.spec_hash == old_hash for e in state.tabu)
        assert state.best_grade == 0.9

    def test_rejection_with_empty_tabu_keeps_current(self, tmp_path, space_cfg):
        evaluator = StubEvaluator(grade_fn=lambda spec: 0.1)
        driver = make_driver(tmp_path, space_cfg, evaluator)
        state = self.seed_state(driver, space_cfg, grade=0.5)
        old_hash = state.current_hash
        driver._iterate(0, state)
        record = read_log(driver.log_path)[-1]
        assert record["adopted"] is False
        assert record["swapped_to"] is None
        assert state.current_hash == old_hash
        # the rejected child entered the tabu list
        assert len(state.tabu) == 1
        assert state.tabu[0].spec_hash == record["trained"]

    def test_rejection_swaps_to_best_preexisting_entry(self, tmp_path, space_cfg):
        evaluator = StubEvaluator(grade_fn=lambda spec: 0.1)
        driver = make_driver(tmp_path, space_cfg, evaluator)
        state = self.seed_state(driver, space_cfg, grade=0.5)
        other = random_spec(space_cfg, 123)
        good = TabuEntry(spec_hash_hex(other), 0.4, 0, other, 1.0,
                         net_graph.count_params_spec(other))
        worse = random_spec(space_cfg, 321)
        bad = TabuEntry(spec_hash_hex(worse), 0.2, 0, worse, 1.0,
                        net_graph.count_params_spec(worse))
        state.tabu.extend([bad, good])
        driver._iterate(0, state)
        record = read_log(driver.log_path)[-1]
        assert record["swapped_to"] == good.spec_hash
        assert state.current_hash == good.spec_hash
        assert state.current_grade == 0.4

    def test_tenure_eviction_and_uniqueness(self, tmp_path, space_cfg):
        driver = make_driver(tmp_path, space_cfg, tenure=3)
        state = self.seed_state(driver, space_cfg, grade=0.5)
        for i in range(5):
            spec = random_spec(space_cfg, 100 + i)
            driver._admit_tabu(state, TabuEntry(
                spec_hash_hex(spec), 0.1 * i, i, spec, 1.0, 10))
        assert len(state.tabu) == 3
        hashes = [e.spec_hash for e in state.tabu]
        assert len(set(hashes)) == 3
        driver._admit_tabu(state, state.tabu[-1])  # duplicate ignored
        assert len(state.tabu) == 3

    def test_deterministic_replay(self, tmp_path, space_cfg):
        ev_a = StubEvaluator()
        a = make_driver(tmp_path / "a", space_cfg, ev_a)
        (tmp_path / "a").mkdir(exist_ok=True)
        state_a = self.seed_state(a, space_cfg, 0.5)
        a._iterate(0, state_a)
        ev_b = StubEvaluator()
        (tmp_path / "b").mkdir(exist_ok=True)
        b = make_driver(tmp_path / "b", space_cfg, ev_b)
        state_b = self.seed_state(b, space_cfg, 0.5)
        b._iterate(0, state_b)
        assert read_log(a.log_path) == read_log(b.log_path)


class TestRunSearch:
    def test_constant_grade_stops_at_patience(self, tmp_path, space_cfg):
        evaluator = StubEvaluator(grade_fn=lambda spec: 0.5)
        driver = make_driver(tmp_path, space_cfg, evaluator,
                             patience=1, max_iter=10, n_parents=2)
        report = driver.run()
        for res in report.results:
            assert res.iterations == 1

    def test_best_grade_nondecreasing(self, tmp_path, space_cfg):
        driver = make_driver(tmp_path, space_cfg, max_iter=6, n_parents=3,
                             patience=6)
        driver.run()
        last = {}
        for record in read_log(driver.log_path):
            if record["type"] != "iteration":
                continue
            parent = record["parent"]
            grade = record["best_grade"]
            if parent in last and grade is not None and last[parent] is not None:
                assert grade >= last[parent]
            last[parent] = grade

    def test_full_determinism(self, tmp_path, space_cfg):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            driver = make_driver(tmp_path / name, space_cfg, StubEvaluator(),
                                 max_iter=4, n_parents=3, patience=3)
            driver.run()
        a = (tmp_path / "a" / "run.ndjson").read_bytes()
        b = (tmp_path / "b" / "run.ndjson").read_bytes()
        assert a == b

    def test_resume_is_byte_identical(self, tmp_path, space_cfg):
        (tmp_path / "full").mkdir()
        full = make_driver(tmp_path / "full", space_cfg, StubEvaluator(),
                           max_iter=4, n_parents=3, patience=3)
        full.run()
        full_lines = (tmp_path / "full" / "run.ndjson").read_bytes().splitlines(keepends=True)

        ckpts = sorted((tmp_path / "full" / "ckpts").glob("ckpt_*.pkl"))
        assert ckpts
        middle = ckpts[len(ckpts) // 2]
        resumed_records = int(middle.stem.split("_")[1])

        (tmp_path / "resumed").mkdir()
        resumed = SearchDriver.resume(
            str(middle), stub_scorer, StubEvaluator(),
            log_path=str(tmp_path / "resumed" / "run.ndjson"),
            ckpt_dir=str(tmp_path / "resumed" / "ckpts"),
        )
        resumed.run()
        tail = (tmp_path / "resumed" / "run.ndjson").read_bytes().splitlines(keepends=True)
        assert tail == full_lines[resumed_records:]

    def test_alpha_zero_best_is_smallest_graded(self, tmp_path, space_cfg):
        from tabunas.objective import size_term

        target = 15_000

        def size_grade(spec):
            return size_term(net_graph.count_params_spec(spec), target)

        evaluator = StubEvaluator(grade_fn=size_grade)
        driver = make_driver(tmp_path, space_cfg, evaluator,
                             max_iter=5, n_parents=2, patience=5)
        driver.obj_cfg = ObjectiveConfig(alpha=0.0, target_params=target)
        report = driver.run()
        assert report.best is not None
        for result in evaluator._cache.values():
            assert (report.best.best_params <= result.params
                    or report.best.best_grade == result.grade)

    def test_evaluator_failure_aborts_one_parent_only(self, tmp_path, space_cfg):
        pool = build_parent_pool(space_cfg, 12, seed=1, scorer=stub_scorer)
        parents = select_parents(pool, 20_000, count=4)
        victim = parents[1].hash
        evaluator = StubEvaluator(fail_hashes={victim})
        driver = make_driver(tmp_path, space_cfg, evaluator, n_parents=4)
        report = driver.run()
        aborted = [r for r in report.results if r.aborted]
        finished = [r for r in report.results if not r.aborted]
        assert len(aborted) == 1
        assert len(finished) == 3
        kinds = [r["type"] for r in read_log(driver.log_path)]
        assert "parent_abort" in kinds and kinds[-1] == "summary"

    def test_merged_ranking_puts_graded_first(self, tmp_path, space_cfg):
        driver = make_driver(tmp_path, space_cfg, StubEvaluator(),
                             max_iter=2, n_parents=2, patience=2)
        report = driver.run()
        seen_ungraded = False
        for entry_ in report.ranking:
            if entry_.grade is None:
                seen_ungraded = True
            else:
                assert not seen_ungraded, "graded entry after ungraded ones"


class TestScoreOffset:
    def test_offset_lifts_minimum_to_one(self):
        entries = [entry("a" * 16, -3.0, 10), entry("b" * 16, 5.0, 10)]
        assert score_offset(entries) == 4.0

    def test_no_shift_when_scores_large(self):
        entries = [entry("a" * 16, 10.0, 10)]
        assert score_offset(entries) == 0.0

    def test_all_degenerate(self):
        entries = [entry("a" * 16, float("-inf"), 10)]
        assert score_offset(entries) == 0.0
