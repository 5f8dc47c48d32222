"""
Proxy Hessians for the weight matrices of a transformer block.

Feed-forward (linear) weights use ``H = 2XᵀX`` of their input ``X`` (``tokens × features``),
attention weights use the Gauss-Newton form ``H = 2·Σ G Gᵀ`` of the attention output gradients.
Both are kept as a running average over calibration samples (sequences), not as a raw sum.
"""

from dataclasses import dataclass, field, replace
import logging
from typing import Iterable, Optional, Union

import numpy as np
from scipy import linalg as sla

from ..errors import DefinitenessError, ShapeError
from ..linalg.dense import DenseMatrix, as_matrix, check_finite, cholesky, shifted_cholesky_probe
from ..model.gradients import basis_seed, build_workspace, weight_gradients
from ..model.transformer import AttentionLayerWeights, AttentionShape, CalibrationBatch


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


DEFAULT_DAMP = 0.01
ORACLE_SIZE_LIMIT = 64  # n · d_model


@dataclass
class HessianState:
    """Accumulated proxy Hessian of one weight matrix.

    :param dim: input feature dimension of the weight (``d_col``).
    :param param_count: number of weights of the layer, used for sensitivity records.
    :param undamped_trace: trace before damping, kept for sensitivity measurement.
    """

    dim: int
    h: DenseMatrix
    nsamples: int = 0
    damped: bool = False
    layer_id: str = ""
    param_count: int = 0
    undamped_trace: Optional[float] = None
    dead: tuple[int, ...] = field(default_factory=tuple)

    @classmethod
    def empty(cls, dim: int, layer_id: str = "", param_count: int = 0) -> "HessianState":
        return cls(dim=dim, h=np.zeros((dim, dim)), layer_id=layer_id, param_count=param_count)


@dataclass(frozen=True)
class SensitivityRecord:
    """Average Hessian trace of a layer."""

    layer_id: str
    avg_trace: float
    param_count: int


def _averaged(state: HessianState, contribution: DenseMatrix, count: int) -> HessianState:
    if state.damped:
        raise ValueError(f"Hessian of '{state.layer_id}' is already damped, can not accumulate.")
    total = state.nsamples + count
    h = (state.h * state.nsamples + contribution) / total
    h = (h + h.T) / 2
    check_finite(h, f"Hessian of '{state.layer_id}'")
    return replace(state, h=h, nsamples=total)


def accumulate_linear(state: HessianState, x: Union[np.ndarray, CalibrationBatch],
                      features_first: bool = False) -> HessianState:
    """Add ``2XᵀX`` of the input `x` to the running average.

    :param x: ``tokens × features`` (one sample) or ``batch × tokens × features`` (`batch`
        samples).
    :param features_first: `x` is given as ``features × tokens`` instead.
    """
    if isinstance(x, CalibrationBatch):
        x = x.x
    x = np.asarray(x, dtype=np.float64)
    if features_first:
        x = np.swapaxes(x, -1, -2)
    if x.ndim == 2:
        x = x[np.newaxis]
    if x.ndim != 3 or x.shape[-1] != state.dim:
        raise ShapeError(
            f"Input of shape {x.shape} does not fit Hessian dimension {state.dim} of "
            f"'{state.layer_id}'."
        )
    tokens = x.reshape(-1, state.dim)
    return _averaged(state, 2 * tokens.T @ tokens, count=x.shape[0])


def accumulate_attention(state: HessianState, grads: Iterable[DenseMatrix],
                         nsamples: int = 1) -> HessianState:
    """Add ``2·Σ G Gᵀ`` of gradient matrices `grads` (all with ``dim`` rows).

    :param nsamples: Number of calibration samples the gradients stem from.
    """
    contribution = np.zeros((state.dim, state.dim))
    for grad in grads:
        grad = as_matrix(grad, "gradient")
        if grad.shape[0] != state.dim:
            raise ShapeError(
                f"Gradient with {grad.shape[0]} rows does not fit Hessian dimension {state.dim} "
                f"of '{state.layer_id}'."
            )
        contribution += grad @ grad.T
    return _averaged(state, 2 * contribution, count=nsamples)


def merge(first: HessianState, second: HessianState) -> HessianState:
    """Merge two partial accumulations of the same layer (associative and commutative)."""
    if first.dim != second.dim:
        raise ShapeError(f"Can not merge Hessians of dimension {first.dim} and {second.dim}.")
    total = first.nsamples + second.nsamples
    if total == 0:
        return replace(first)
    h = (first.h * first.nsamples + second.h * second.nsamples) / total
    return replace(first, h=(h + h.T) / 2, nsamples=total)


def damp(state: HessianState, percent: float = DEFAULT_DAMP) -> HessianState:
    """Add ``percent · mean(diag(h)) · I``.

    Diagonal entries equal to zero (inputs which never fire) are set to one first.
    If the whole diagonal is zero, ``percent · I`` is added instead.
    """
    if percent <= 0:
        raise ValueError(f"Damping percent has to be positive, got {percent}.")
    h = state.h.copy()
    trace = float(np.trace(h))
    diagonal = np.diag(h)
    mean_diagonal = float(np.mean(diagonal))
    dead: tuple[int, ...] = ()
    if mean_diagonal == 0:
        log.debug(f"Hessian of '{state.layer_id}' vanishes, damping with {percent} · I.")
        h += percent * np.eye(state.dim)
    else:
        dead = tuple(int(i) for i in np.flatnonzero(diagonal == 0))
        if dead:
            h[list(dead), list(dead)] = 1.0
        h += percent * float(np.mean(np.diag(h))) * np.eye(state.dim)
    return replace(state, h=h, damped=True, undamped_trace=trace, dead=dead)


def inverse_upper_factor(state: HessianState) -> DenseMatrix:
    """Return the upper triangular ``U`` with ``UᵀU = H⁻¹``, used by the column loop.

    :raises DefinitenessError: if damping was insufficient.
    """
    if not state.damped:
        raise ValueError(f"Hessian of '{state.layer_id}' has to be damped before factorization.")
    try:
        lower = cholesky(state.h)
    except DefinitenessError as exc:
        raise DefinitenessError(
            f"Damped Hessian of '{state.layer_id}' is not positive definite: {exc}", pivot=exc.pivot
        ) from exc
    inverse = sla.cho_solve((lower, True), np.eye(state.dim))
    return cholesky(inverse).T


def avg_trace(state: HessianState) -> SensitivityRecord:
    """Average trace ``trace(H)/dim`` of the undamped accumulation."""
    if state.nsamples < 1:
        raise ValueError(f"No samples accumulated for '{state.layer_id}'.")
    trace = state.undamped_trace if state.damped else float(np.trace(state.h))
    return SensitivityRecord(
        layer_id=state.layer_id, avg_trace=float(trace) / state.dim, param_count=state.param_count
    )


def is_positive_semidefinite(state: HessianState, tolerance: float = 1e-8) -> bool:
    """Probe, whether the smallest eigenvalue of ``h`` is above ``-tolerance``."""
    return shifted_cholesky_probe(state.h, shift=tolerance)


def gauss_newton_oracle(
    shape: AttentionShape,
    w: Union[AttentionLayerWeights, DenseMatrix],
    x: Union[CalibrationBatch, DenseMatrix],
    target: str,
) -> DenseMatrix:
    """Exact Gauss-Newton matrix of a small block by seeding every output basis direction.

    Normalized per output column of the target weight: ``2/d_out · Σ_e g(e) g(e)ᵀ``.

    :param w: attention weights, or the weight matrix (``in × out``) for target "linear".
    :param target: one of "wq", "wk", "wv", "wo", "linear".
    """
    x_matrix = x.x if isinstance(x, CalibrationBatch) else as_matrix(x, "input")
    if shape.n * shape.d_model > ORACLE_SIZE_LIMIT:
        raise ShapeError(
            f"Oracle is limited to n · d_model <= {ORACLE_SIZE_LIMIT}, "
            f"got {shape.n * shape.d_model}."
        )
    if target == "linear":
        weight = as_matrix(w, "weight")
        d_out = weight.shape[1]
        result = np.zeros((weight.shape[0], weight.shape[0]))
        for row in range(x_matrix.shape[0]):
            for column in range(d_out):
                gradient = np.zeros_like(weight)
                gradient[:, column] = x_matrix[row]
                result += gradient @ gradient.T
        return 2 * result / d_out
    if not isinstance(w, AttentionLayerWeights):
        raise ShapeError("Attention targets need AttentionLayerWeights.")
    ws = build_workspace(w, x_matrix)
    result = np.zeros((shape.d_model, shape.d_model))
    for row in range(shape.n):
        for column in range(shape.d_model):
            seed = basis_seed(shape.n, shape.d_model, row, column)
            gradient = np.hstack(weight_gradients(ws, seed, w, target))
            result += gradient @ gradient.T
    return 2 * result / shape.d_model
