"""Training-free architecture scoring from binary activation codes.

An untrained network maps each probe input to a binary code: one sign bit
per ReLU unit.  Codes that stay distinct across the probe batch indicate a
network that separates inputs into many linear regions; the score is the
log-magnitude determinant of the code-agreement kernel

    K[i, j] = n_units - hamming(code_i, code_j)

computed by pivoted LU elimination so rank-deficient kernels (duplicate
codes) are detected instead of crashing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net_graph, tensor_engine
from .search_space import NetworkSpec, SpaceConfig
from .tensor_engine import ActivationTrace

PIVOT_TOL = 1e-12


class DegenerateKernelError(ArithmeticError):
    """The kernel is numerically rank-deficient (duplicate codes)."""


@dataclass(frozen=True)
class ProbeBatch:
    """Fixed probe inputs; kept constant within a run so scores compare."""

    data: np.ndarray  # (n, channels, height, width) float32
    source: str = "noise"  # "noise" | "task"

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise ValueError(f"probe batch must be 4-d and nonempty, got {self.data.shape}")


def noise_probe(n: int, channels: int, height: int, width: int, seed: int) -> ProbeBatch:
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, channels, height, width), dtype=np.float32)
    return ProbeBatch(data=data, source="noise")


@dataclass
class ScoreReport:
    score: float
    kernel: np.ndarray  # (n, n) float64
    n_units: int
    degenerate: bool


def binary_codes(trace: ActivationTrace) -> np.ndarray:
    """(batch, n_units) sign-bit matrix; row i is the code of probe input i."""
    return trace.codes


def hamming_kernel(codes) -> np.ndarray:
    """Code-agreement kernel: n_units minus pairwise Hamming distance."""
    if isinstance(codes, np.ndarray) and codes.ndim == 2:
        mat = codes.astype(np.float64)
    else:
        rows = [np.asarray(c).ravel() for c in codes]
        lengths = {r.size for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"ragged codes: lengths {sorted(lengths)}")
        mat = np.stack(rows).astype(np.float64)
    inv = 1.0 - mat
    return mat @ mat.T + inv @ inv.T


def log_abs_det(kernel: np.ndarray) -> float:
    """log |det K| by partially pivoted LU with log-magnitude accumulation.

    Raises DegenerateKernelError when a pivot falls below PIVOT_TOL times the
    kernel's diagonal magnitude (the activation-unit count for code kernels).
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got {k.shape}")
    n = k.shape[0]
    scale = max(float(np.max(np.abs(np.diag(k)))), 1.0)
    tol = PIVOT_TOL * scale
    a = k.copy()
    total = 0.0
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(a[col:, col])))
        pivot = a[pivot_row, col]
        if abs(pivot) < tol:
            raise DegenerateKernelError(
                f"pivot {pivot:.3e} below tolerance {tol:.3e} at column {col}"
            )
        if pivot_row != col:
            a[[col, pivot_row]] = a[[pivot_row, col]]
        total += np.log(abs(pivot))
        if col + 1 < n:
            factors = a[col + 1 :, col] / pivot
            a[col + 1 :, col + 1 :] -= np.outer(factors, a[col, col + 1 :])
    return float(total)


def score_network(spec: NetworkSpec, cfg: SpaceConfig, probe: ProbeBatch,
                  init_seed: int) -> ScoreReport:
    """Instantiate, initialize, and score `spec` on the probe batch.

    Degenerate kernels map to a score of -inf so rankings stay total.
    """
    height, width = probe.data.shape[2], probe.data.shape[3]
    plan = net_graph.instantiate(spec, (height, width))
    store = tensor_engine.init_params(plan, init_seed)
    _, trace = tensor_engine.forward(
        plan, store, probe.data, capture=True, training=True, update_stats=False
    )
    codes = binary_codes(trace)
    kernel = hamming_kernel(codes)
    n_units = trace.units_per_element
    try:
        score = log_abs_det(kernel)
        degenerate = False
    except DegenerateKernelError:
        score = float("-inf")
        degenerate = True
    return ScoreReport(score=score, kernel=kernel, n_units=n_units, degenerate=degenerate)
