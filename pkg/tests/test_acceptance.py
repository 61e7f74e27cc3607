"""Acceptance gate: one test per criterion, each printing a PASS line.

Desk-scale dial choices (resolutions, epoch counts, learning rates, space
caps) live in the constants below; the asserted properties and tolerances
are fixed.
"""
import json
import math

import numpy as np
import pytest

from tabunas import net_graph, tensor_engine as te
from tabunas.ats import SearchDriver
from tabunas.evaluator import ToyEvaluator, TrainConfig
from tabunas.objective import ObjectiveConfig, grade, size_term
from tabunas.runconfig import DEFAULT_ALPHAS, load_run_config, build_driver, sweep_alpha
from tabunas.search_space import (
    ComputeBudget,
    ConvKind,
    HeadKind,
    SkipOp,
    SpaceConfig,
    TaskHead,
    random_spec,
    space_size_from_m,
)
from tabunas.tasks import ToyTaskConfig, gen_task
from tabunas.utils import derive_seed, spearman
from tabunas.zerocost import ProbeBatch, hamming_kernel, log_abs_det, score_network
from tabunas.zerocost import DegenerateKernelError

from conftest import build_uniform_spec


def report(name):
    print(f"PASS {name}")


# --- criterion 1: search-space size -------------------------------------------


class TestSearchSpaceSize:
    def test_paper_scale_size(self, capsys):
        total, log10 = space_size_from_m(192, 5)
        assert total == 192 ** 33
        assert 75.3 <= log10 <= 75.4
        from tabunas.cli import main

        assert main(["space-size", "--m", "192", "--s", "5"]) == 0
        out = capsys.readouterr().out
        assert f"size={192 ** 33}" in out
        with capsys.disabled():
            report("search-space size: 192^33 exact, log10 in [75.3, 75.4]")


# --- criterion 2: grade formula branches ---------------------------------------


class TestGradeFormula:
    def test_thousand_random_tuples(self, capsys):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            accuracy = float(rng.uniform(0, 1))
            params = int(rng.integers(1, 10_000_000))
            target = int(rng.integers(1, 10_000_000))
            alpha = float(rng.uniform(0, 1))
            cfg = ObjectiveConfig(alpha=alpha, target_params=target)
            expected_size = 1.0 if params <= target else target / params
            expected = alpha * accuracy + (1.0 - alpha) * expected_size
            assert abs(grade(accuracy, params, cfg) - expected) <= 1e-12
            if params <= target:
                assert size_term(params, target) == 1.0
        with capsys.disabled():
            report("grade formula: 1000 tuples match hand formula to 1e-12; "
                   "size term exactly 1 at or under target")


# --- criterion 3: kernel properties and log|det| --------------------------------


def cofactor_det(m):
    n = m.shape[0]
    if n == 1:
        return float(m[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(m, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * float(m[0, j]) * cofactor_det(minor)
    return total


class TestKernelProperties:
    def test_five_hundred_code_sets(self, capsys):
        rng = np.random.default_rng(7)
        checked_dets = 0
        for trial in range(500):
            n = int(rng.integers(2, 9))
            bits = int(rng.integers(4, 64))
            codes = rng.integers(0, 2, size=(n, bits)).astype(bool)
            kernel = hamming_kernel(codes)
            assert np.array_equal(kernel, kernel.T)
            assert np.all(np.diag(kernel) == bits)
            assert kernel.min() >= 0 and kernel.max() <= bits
            if n == 5:
                reference = cofactor_det(kernel)
                try:
                    ours = log_abs_det(kernel)
                except DegenerateKernelError:
                    assert abs(reference) <= 1e-6 * float(bits) ** 5
                    continue
                checked_dets += 1
                assert math.isclose(ours, math.log(abs(reference)), rel_tol=1e-8)
        assert checked_dets >= 30
        with capsys.disabled():
            report(f"kernel properties: 500 code sets symmetric/diagonal/ranged; "
                   f"{checked_dets} 5x5 determinants match cofactor expansion to 1e-8")


# --- criterion 4: gradient correctness ------------------------------------------


GRAD_EPS = 1e-6
GRAD_TOL = 1e-3

GRAD_CASES = [
    dict(op_kind=ConvKind.VANILLA, kernel=3),
    dict(op_kind=ConvKind.VANILLA, kernel=5, se=0.25),
    dict(op_kind=ConvKind.VANILLA, skip=SkipOp.RESIDUAL, layers=2),
    dict(op_kind=ConvKind.DWSEP, kernel=3),
    dict(op_kind=ConvKind.DWSEP, kernel=5, se=0.25, skip=SkipOp.RESIDUAL),
    dict(op_kind=ConvKind.IBCONV, kernel=3),
    dict(op_kind=ConvKind.IBCONV, kernel=5, se=0.25, skip=SkipOp.RESIDUAL),
    dict(op_kind=ConvKind.MICRO, kernel=3),
    dict(op_kind=ConvKind.MICRO, kernel=5, se=0.25, skip=SkipOp.RESIDUAL),
    dict(op_kind=ConvKind.VANILLA, scales=2),
    dict(op_kind=ConvKind.DWSEP, scales=2, skip=SkipOp.RESIDUAL),
    dict(op_kind=ConvKind.IBCONV, scales=2, se=0.25),
    dict(op_kind=ConvKind.MICRO, scales=2, channels=16),
    dict(op_kind=ConvKind.VANILLA, head=TaskHead(HeadKind.CLASSIFY, classes=3)),
    dict(op_kind=ConvKind.DWSEP, head=TaskHead(HeadKind.CLASSIFY, classes=5), se=0.25),
    dict(op_kind=ConvKind.VANILLA, head=TaskHead(HeadKind.SUPERRES, factor=2)),
    dict(op_kind=ConvKind.IBCONV, head=TaskHead(HeadKind.SUPERRES, factor=4)),
    dict(op_kind=ConvKind.MICRO, head=TaskHead(HeadKind.CLASSIFY, classes=4), scales=2),
    dict(op_kind=ConvKind.DWSEP, layers=2, se=0.25),
    dict(op_kind=ConvKind.VANILLA, kernel=5, scales=2, skip=SkipOp.RESIDUAL),
]


def _fd_worst_error(case, seed):
    spec = build_uniform_spec(**case)
    plan = net_graph.instantiate(spec, (8, 8))
    store = te.init_params(plan, seed)
    store.params = store.params.astype(np.float64)
    store.grads = np.zeros_like(store.params)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))
    if spec.task_head.kind is HeadKind.CLASSIFY:
        kind = "ce"
        classes = spec.task_head.classes
        labels = rng.integers(0, classes, size=(2, 8, 8))
        t = np.zeros((2, classes, 8, 8))
        for c in range(classes):
            t[:, c][labels == c] = 1.0
    else:
        kind = "l2"
        out = te.forward(plan, store, x, training=True)
        t = rng.standard_normal(out.shape)
    _, grads = te.backward(plan, store, x, t, kind)
    grads = grads.copy()

    def loss_and_signs():
        out, trace = te.forward(plan, store, x, capture=True, training=True,
                                update_stats=False)
        return te._loss_and_grad(out, t, kind)[0], trace.codes

    _, base_signs = loss_and_signs()
    worst = 0.0
    checked = 0
    idx = rng.choice(store.params.size, size=min(16, store.params.size), replace=False)
    for i in idx:
        orig = store.params[i]
        store.params[i] = orig + GRAD_EPS
        lp, sp = loss_and_signs()
        store.params[i] = orig - GRAD_EPS
        lm, sm = loss_and_signs()
        store.params[i] = orig
        if not (np.array_equal(sp, base_signs) and np.array_equal(sm, base_signs)):
            # an activation sign flipped inside the probe interval, so the
            # loss is not differentiable there and the estimate is invalid
            continue
        checked += 1
        fd = (lp - lm) / (2 * GRAD_EPS)
        err = abs(fd - grads[i]) / max(abs(fd), abs(grads[i]), 1.0)
        worst = max(worst, err)
    assert checked >= 12, f"only {checked} differentiable probe points"
    return worst


class TestGradientCorrectness:
    def test_twenty_micro_graphs(self, capsys):
        assert len(GRAD_CASES) == 20
        kinds_covered = {case["op_kind"] for case in GRAD_CASES}
        assert kinds_covered == set(ConvKind)
        worst_overall = 0.0
        for seed, case in enumerate(GRAD_CASES):
            worst = _fd_worst_error(case, seed)
            assert worst <= GRAD_TOL, (case, worst)
            worst_overall = max(worst_overall, worst)
        with capsys.disabled():
            report(f"gradient correctness: 20 micro-graphs, all op kinds, "
                   f"worst relative error {worst_overall:.2e} <= {GRAD_TOL}")


# --- criterion 5: parameter-count oracle ----------------------------------------


class TestParamCountOracle:
    def test_hundred_random_specs(self, capsys):
        cfg = SpaceConfig()
        seen_ops = set()
        seen_se = set()
        for seed in range(100):
            spec = random_spec(cfg, seed)
            for block in spec.blocks.values():
                seen_ops.add(block.layer.conv_op.kind)
                seen_se.add(block.layer.se_ratio)
            plan = net_graph.instantiate(spec, (32, 32))
            store = te.init_params(plan, seed)
            assert net_graph.count_params(plan) == len(store)
        assert seen_ops == set(ConvKind)
        assert seen_se == {0.0, 0.25}
        with capsys.disabled():
            report("parameter-count oracle: closed forms equal allocated "
                   "lengths exactly on 100 specs covering all ops and SE ratios")


# --- criterion 6: search contract (monotone best, byte-identical resume) --------


ATS_CONFIG = {
    "task": {"kind": "regress", "resolution": 16, "train_size": 32,
             "val_size": 12, "seed": 3},
    "space": {"scale_range": [1, 2], "layers_range": [1, 2],
              "channel_ladder": [8, 16, 24, 32], "param_cap": 60_000},
    "search": {"pool_size": 200, "n_parents": 6, "n_children": 6,
               "max_iter": 15, "patience": 15, "seed": 2025},
    "objective": {"alpha": 0.6, "target_params": 25_000},
    "train": {"epochs": 2, "batch_size": 16, "base_lr": 7e-3},
    "probe": {"size": 8, "source": "task"},
    "evaluator_kind": "toy-trainer",
}


class TestSearchContract:
    def test_desk_search_monotone_and_resumable(self, tmp_path, capsys):
        cfg = load_run_config(json.loads(json.dumps(ATS_CONFIG)))
        full_dir = tmp_path / "full"
        full_dir.mkdir()
        driver = build_driver(cfg, str(full_dir / "run.ndjson"),
                              str(full_dir / "ckpts"))
        report_obj = driver.run()
        assert report_obj.best is not None

        lines = (full_dir / "run.ndjson").read_bytes().splitlines(keepends=True)
        best = {}
        iterations = 0
        for raw in lines:
            record = json.loads(raw)
            if record["type"] != "iteration":
                continue
            iterations += 1
            parent = record["parent"]
            value = record["best_grade"]
            if parent in best and value is not None and best[parent] is not None:
                assert value >= best[parent], "best grade decreased"
            best[parent] = value
        assert iterations > 0

        ckpts = sorted((full_dir / "ckpts").glob("ckpt_*.pkl"))
        middle = ckpts[len(ckpts) // 2]
        done = int(middle.stem.split("_")[1])
        resumed_dir = tmp_path / "resumed"
        resumed_dir.mkdir()
        from tabunas.runconfig import resume_driver

        resumed = resume_driver(str(middle), str(resumed_dir / "run.ndjson"),
                                str(resumed_dir / "ckpts"))
        resumed.run()
        tail = (resumed_dir / "run.ndjson").read_bytes().splitlines(keepends=True)
        assert tail == lines[done:], "resumed run diverged from original"
        with capsys.disabled():
            report(f"search contract: pool 200, 6 parents, {iterations} iterations, "
                   "best grade nondecreasing, resume byte-identical")


# --- criterion 7: alpha trade-off ------------------------------------------------


ALPHA_GRID_CONFIG = {
    "task": {"kind": "regress", "resolution": 16, "train_size": 48,
             "val_size": 24, "seed": 3},
    "space": {"scale_range": [1, 2], "layers_range": [1, 2],
              "channel_ladder": [8, 16, 24, 32], "param_cap": 80_000},
    "search": {"pool_size": 120, "n_parents": 2, "n_children": 8,
               "max_iter": 8, "patience": 8, "seed": 17},
    "objective": {"alpha": 0.6, "target_params": 25_000},
    "train": {"epochs": 10, "batch_size": 16, "base_lr": 7e-3},
    "probe": {"size": 12, "source": "task"},
    "evaluator_kind": "toy-trainer",
}


class TestAlphaTradeoff:
    def test_extreme_alphas_bound_the_sweep(self, tmp_path, capsys):
        cfg = load_run_config(json.loads(json.dumps(ALPHA_GRID_CONFIG)))
        rows = sweep_alpha(cfg, DEFAULT_ALPHAS, str(tmp_path / "logs"))
        assert [row["alpha"] for row in rows] == list(DEFAULT_ALPHAS)
        by_alpha = {row["alpha"]: row for row in rows}
        size_seeker = by_alpha[0.0]
        acc_seeker = by_alpha[1.0]
        for alpha, row in by_alpha.items():
            assert size_seeker["best_params"] <= row["best_params"], (
                f"alpha=0 params {size_seeker['best_params']} > "
                f"alpha={alpha} params {row['best_params']}"
            )
            assert acc_seeker["best_accuracy"] >= row["best_accuracy"], (
                f"alpha=1 accuracy {acc_seeker['best_accuracy']} < "
                f"alpha={alpha} accuracy {row['best_accuracy']}"
            )
        with capsys.disabled():
            report("alpha trade-off: alpha=0 run smallest, alpha=1 run most accurate "
                   f"(params {size_seeker['best_params']}..{acc_seeker['best_params']}, "
                   f"accuracy {size_seeker['best_accuracy']:.3f}..{acc_seeker['best_accuracy']:.3f})")


# --- criterion 8: zero-cost rank signal ------------------------------------------


RANK_SIGNAL_SPECS = 30
RANK_SIGNAL_RUNS = 3
RANK_SIGNAL_EPOCHS = 12


class TestRankSignal:
    def test_spearman_above_threshold(self, capsys):
        task = ToyTaskConfig(kind="regress", resolution=16, train_size=48,
                             val_size=24, seed=3)
        cfg = SpaceConfig(scale_range=(1, 2), layers_range=(1, 2),
                          channel_ladder=(8, 16, 24, 32),
                          budget=ComputeBudget(per_block_cost_cap=1200,
                                               param_cap=80_000))
        obj = ObjectiveConfig()
        train, _ = gen_task(task)
        probe = ProbeBatch(data=train.inputs[:16].copy(), source="task")
        rhos = []
        for run in range(RANK_SIGNAL_RUNS):
            evaluator = ToyEvaluator(
                task, TrainConfig(epochs=RANK_SIGNAL_EPOCHS, batch_size=16,
                                  base_lr=7e-3, seed=run), obj)
            scores, accs = [], []
            for i in range(RANK_SIGNAL_SPECS):
                spec = random_spec(cfg, derive_seed("ranksig", run, i))
                rep = score_network(spec, cfg, probe, derive_seed("init", run))
                result = evaluator(spec)
                scores.append(rep.score)
                accs.append(result.metrics.get("d1", 0.0))
            rhos.append(spearman(scores, accs))
        mean_rho = float(np.mean(rhos))
        assert mean_rho > 0.3, f"mean spearman {mean_rho:.3f} (runs: {rhos})"
        with capsys.disabled():
            report(f"zero-cost rank signal: mean spearman {mean_rho:.3f} > 0.3 "
                   f"over {RANK_SIGNAL_RUNS} seeds x {RANK_SIGNAL_SPECS} specs")


# --- criterion 9: metric oracles --------------------------------------------------


class TestMetricOracles:
    def test_fixture_cases(self, capsys):
        from tabunas.objective import depth_metrics, seg_metrics, sr_metrics

        gt = np.array([1.0, 2.0])
        m = depth_metrics(np.array([1.0, 1.0]), gt)
        assert abs(m["rel"] - 0.25) <= 1e-9
        assert abs(m["rmse"] - math.sqrt(0.5)) <= 1e-9
        assert abs(m["d1"] - 0.5) <= 1e-9

        exact = depth_metrics(gt.copy(), gt)
        assert exact["rel"] == 0.0 and exact["rmse"] == 0.0
        assert exact["d1"] == exact["d2"] == exact["d3"] == 1.0

        doubled = depth_metrics(2 * np.ones(4), np.ones(4))
        assert abs(doubled["rel"] - 1.0) <= 1e-9
        assert doubled["d1"] == 0.0 and doubled["d3"] == 0.0

        seg = seg_metrics(np.array([[0, 0], [1, 0]]), np.array([[0, 0], [1, 1]]), 2)
        assert abs(seg["pixacc"] - 0.75) <= 1e-9
        assert abs(seg["miou"] - 7.0 / 12.0) <= 1e-9

        perfect = seg_metrics(np.array([0, 1]), np.array([0, 1]), 2)
        assert perfect["miou"] == 1.0 and perfect["pixacc"] == 1.0

        sr = sr_metrics(np.zeros((10, 10)) + 0.1, np.zeros((10, 10)), 1.0)
        assert abs(sr["psnr"] - 20.0) <= 1e-9

        same = np.random.default_rng(0).uniform(0, 1, (16, 16))
        identical = sr_metrics(same, same)
        assert identical["psnr"] == float("inf") and identical["ssim"] == 1.0

        v, c = 0.4, 0.2
        shift = sr_metrics(np.full((16, 16), v + c), np.full((16, 16), v), 1.0)
        c1 = 0.01 ** 2
        luminance = (2 * v * (v + c) + c1) / (v * v + (v + c) ** 2 + c1)
        assert abs(shift["ssim"] - luminance) <= 1e-9
        with capsys.disabled():
            report("metric oracles: depth/segmentation/super-resolution "
                   "fixtures match hand values to 1e-9")
