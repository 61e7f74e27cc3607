"""Score-assisted tabu search for lightweight dense-prediction backbones."""

from .search_space import (
    BlockKind,
    BlockSpec,
    ComputeBudget,
    ConvKind,
    ConvOp,
    HeadKind,
    LayerSpec,
    MutationFailed,
    NetworkSpec,
    SkipOp,
    SpaceConfig,
    SpaceConfigError,
    SpecParseError,
    TaskHead,
    check_constraints,
    deserialize,
    mutate_modify,
    mutate_swap,
    random_spec,
    serialize,
    space_size,
    space_size_from_m,
    spec_hash,
    spec_hash_hex,
)
from .net_graph import GraphPlan, ShapeError, count_params, count_params_spec, describe, instantiate, relu_units
from .objective import EvalResult, ObjectiveConfig, accuracy_of, depth_metrics, grade, mutation_reward, seg_metrics, size_term, sr_metrics
from .zerocost import DegenerateKernelError, ProbeBatch, ScoreReport, hamming_kernel, log_abs_det, noise_probe, score_network
from .tensor_engine import ActivationTrace, AdamHyper, ParamStore, adam_step, backward, forward, init_params, lr_schedule
from .ats import SearchConfig, SearchDriver, build_parent_pool, run_search, select_parents
from .evaluator import ToyEvaluator, TrainConfig, evaluate, make_evaluator
from .tasks import Dataset, ToyTaskConfig, gen_task
from .runconfig import ConfigError, ProbeConfig, RunConfig, build_driver, load_run_config, load_run_config_file

__version__ = "0.1.0"
