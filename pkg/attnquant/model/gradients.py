"""
Closed-form gradients of the attention output with respect to the projection matrices.

All gradients are taken of the scalarized objective ``⟨S, F(W, X)⟩`` (Frobenius inner product
of a sensitivity seed ``S`` with the attention output), which makes them finite-difference
checkable.
The head selector of the score sensitivity is realized as head-block slicing, it is never
materialized as a matrix.
"""

from dataclasses import dataclass
import logging
from typing import Callable, Literal, Optional, Union

import numpy as np

from ..errors import NumericError, ShapeError
from ..linalg.dense import DenseMatrix, as_matrix
from .transformer import (
    AttentionIntermediates,
    AttentionLayerWeights,
    AttentionShape,
    CalibrationBatch,
    attention_forward,
    attention_intermediates,
)


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


SeedKind = Literal["identity", "gaussian", "basis"]
FD_STEP = 1e-5
RELATIVE_FLOOR = 1e-8


@dataclass
class SensitivitySeed:
    """Upstream direction ``S`` in output space (``n × d_model``)."""

    s: DenseMatrix
    kind: str = "identity"

    def __post_init__(self) -> None:
        self.s = as_matrix(self.s, "sensitivity seed")
        if not np.all(np.isfinite(self.s)):
            raise NumericError("Sensitivity seed contains non-finite values.")

    def scaled(self, factor: float) -> "SensitivitySeed":
        return SensitivitySeed(self.s * factor, kind=self.kind)


def identity_seed(n: int, d_model: int) -> SensitivitySeed:
    """The ``n × d_model`` matrix with ones on the main diagonal."""
    return SensitivitySeed(np.eye(n, d_model), kind="identity")


def gaussian_seed(n: int, d_model: int,
                  rng: Union[int, np.random.Generator, None] = None) -> SensitivitySeed:
    """Standard normal seed, drawn from `rng` (a generator or an integer seed)."""
    generator = np.random.default_rng(rng)
    return SensitivitySeed(generator.standard_normal((n, d_model)), kind="gaussian")


def basis_seed(n: int, d_model: int, row: int, column: int) -> SensitivitySeed:
    """Seed selecting the single output entry ``(row, column)``."""
    s = np.zeros((n, d_model))
    s[row, column] = 1.0
    return SensitivitySeed(s, kind="basis")


@dataclass
class GradientWorkspace:
    """Forward intermediates needed by the gradient formulas, read-only after construction."""

    intermediates: AttentionIntermediates
    shape: AttentionShape

    @property
    def x(self) -> DenseMatrix:
        return self.intermediates.x

    @property
    def concat(self) -> DenseMatrix:
        return self.intermediates.concat

    def probabilities(self, h: int) -> DenseMatrix:
        if not 0 <= h < self.shape.heads:
            raise ShapeError(f"Head index {h} out of range for {self.shape.heads} heads.")
        return self.intermediates.probabilities[h]


def build_workspace(w: AttentionLayerWeights, x: Union[CalibrationBatch, DenseMatrix],
                    causal: bool = False) -> GradientWorkspace:
    intermediates = attention_intermediates(w, x, causal=causal)
    return GradientWorkspace(
        intermediates=intermediates, shape=w.shape_for(intermediates.x.shape[0])
    )


def _seed_matrix(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix]) -> DenseMatrix:
    matrix = s.s if isinstance(s, SensitivitySeed) else as_matrix(s, "sensitivity seed")
    expected = (ws.shape.n, ws.shape.d_model)
    if matrix.shape != expected:
        raise ShapeError(f"Seed shape {matrix.shape} does not match output shape {expected}.")
    return matrix


def grad_wo(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix]) -> DenseMatrix:
    """Gradient with respect to ``W^O``: ``Cᵀ · S``."""
    return ws.concat.T @ _seed_matrix(ws, s)


def grad_wv(
    ws: GradientWorkspace,
    s: Union[SensitivitySeed, DenseMatrix],
    w: AttentionLayerWeights,
    value_reading: Literal["input", "projected"] = "input",
) -> DenseMatrix:
    """Gradient with respect to ``W^V``.

    Per head ``G_h = (P_h X)ᵀ · S · (W_h^O)ᵀ``, assembled side by side.

    :param value_reading: "input" uses ``M_h = P_h X`` (the exact gradient).
        "projected" uses ``M_h = P_h X W_h^V`` and returns ``Mᵀ S (W^O)ᵀ``, the literal reading
        of the mixing matrix with projected values. It is not a gradient and only kept for
        comparison.
    """
    seed = _seed_matrix(ws, s)
    if value_reading == "projected":
        return ws.concat.T @ seed @ w.wo.T
    elif value_reading != "input":
        raise ValueError(f"Unknown value reading '{value_reading}'.")
    blocks = []
    for h in range(ws.shape.heads):
        rows = w.head_columns(h)
        mixed = ws.probabilities(h) @ ws.x
        blocks.append(mixed.T @ seed @ w.wo[rows, :].T)
    return np.hstack(blocks)


def score_sensitivity(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix],
                      w: AttentionLayerWeights, h: int) -> DenseMatrix:
    """Return ``T_h``, the derivative of ``⟨S, F⟩`` with respect to the scores ``N_h``.

    The softmax is back-propagated row-wise: ``T = P ⊙ (B − rowsum(P ⊙ B))`` with
    ``B = S · (W_h^O)ᵀ · (X W_h^V)ᵀ`` the derivative with respect to ``P_h``.
    """
    seed = _seed_matrix(ws, s)
    probabilities = ws.probabilities(h)
    columns = w.head_columns(h)
    values = ws.x @ w.wv[:, columns]
    upstream = seed @ w.wo[columns, :].T @ values.T
    return probabilities * (upstream - np.sum(probabilities * upstream, axis=1, keepdims=True))


def grad_wq(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix],
            w: AttentionLayerWeights, h: int) -> DenseMatrix:
    """Gradient with respect to ``W_h^Q`` (``d_model × d_k``): ``Xᵀ T_h X W_h^K / √d_k``."""
    t = score_sensitivity(ws, s, w, h)
    x = ws.x
    return (x.T @ t @ x @ w.wk[:, w.head_columns(h)]) / np.sqrt(w.d_k)


def grad_wk(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix],
            w: AttentionLayerWeights, h: int) -> DenseMatrix:
    """Gradient with respect to ``W_h^K`` (``d_model × d_k``): ``Xᵀ T_hᵀ X W_h^Q / √d_k``."""
    t = score_sensitivity(ws, s, w, h)
    x = ws.x
    return (x.T @ t.T @ x @ w.wq[:, w.head_columns(h)]) / np.sqrt(w.d_k)


def grad_all_heads(
    grad: Callable[[GradientWorkspace, SensitivitySeed, AttentionLayerWeights, int], DenseMatrix],
    ws: GradientWorkspace,
    s: Union[SensitivitySeed, DenseMatrix],
    w: AttentionLayerWeights,
) -> DenseMatrix:
    """Assemble the per-head gradients of `grad` into the layout of the full weight matrix."""
    return np.hstack([grad(ws, s, w, h) for h in range(ws.shape.heads)])


def weight_gradients(ws: GradientWorkspace, s: Union[SensitivitySeed, DenseMatrix],
                     w: AttentionLayerWeights, role: str) -> list[DenseMatrix]:
    """Return the gradient matrices of weight `role` for one seed, one per head for wq/wk.

    All returned matrices have ``d_model`` rows (the input features of the weight).
    """
    if role == "wo":
        return [grad_wo(ws, s)]
    elif role == "wv":
        return [grad_wv(ws, s, w)]
    elif role == "wq":
        return [grad_wq(ws, s, w, h) for h in range(ws.shape.heads)]
    elif role == "wk":
        return [grad_wk(ws, s, w, h) for h in range(ws.shape.heads)]
    raise ValueError(f"Unknown attention weight role '{role}'.")


def seeded_objective(w: AttentionLayerWeights, x: Union[CalibrationBatch, DenseMatrix],
                     s: Union[SensitivitySeed, DenseMatrix], causal: bool = False) -> float:
    """Return ``⟨S, F(W, X)⟩``."""
    seed = s.s if isinstance(s, SensitivitySeed) else as_matrix(s)
    return float(np.sum(seed * attention_forward(w, x, causal=causal)))


def finite_diff_grad(f: Callable[[DenseMatrix], float], w0: DenseMatrix,
                     step: float = FD_STEP) -> DenseMatrix:
    """Central-difference gradient of the scalar function `f` at `w0`.

    :param step: Perturbation size per entry, has to be positive.
    """
    if step <= 0:
        raise ValueError(f"Step has to be positive, got {step}.")
    w0 = as_matrix(w0, "weight")
    gradient = np.zeros_like(w0)
    probe = w0.copy()
    for index in np.ndindex(*w0.shape):
        original = probe[index]
        probe[index] = original + step
        upper = f(probe)
        probe[index] = original - step
        lower = f(probe)
        probe[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericError(f"Non-finite function value at entry {index}.")
        gradient[index] = (upper - lower) / (2 * step)
    return gradient


def max_relative_error(analytic: DenseMatrix, reference: DenseMatrix,
                       floor: float = RELATIVE_FLOOR) -> float:
    """Largest element-wise relative deviation, each denominator floored at `floor`."""
    analytic = np.asarray(analytic)
    reference = np.asarray(reference)
    if analytic.shape != reference.shape:
        raise ShapeError(f"Shapes {analytic.shape} and {reference.shape} differ.")
    deviation = np.abs(analytic - reference) / np.maximum(np.abs(reference), floor)
    return float(np.max(deviation, initial=0.0))


def weight_objective(w: AttentionLayerWeights, x: Union[CalibrationBatch, DenseMatrix],
                     s: Union[SensitivitySeed, DenseMatrix], role: str, causal: bool = False,
                     head: Optional[int] = None) -> Callable[[DenseMatrix], float]:
    """Return ``f(M) = ⟨S, F⟩`` as a function of weight `role` (or its head slice)."""
    def objective(matrix: DenseMatrix) -> float:
        full = getattr(w, role)
        if head is not None:
            full = full.copy()
            full[:, w.head_columns(head)] = matrix
        else:
            full = matrix
        return seeded_objective(w.replace(**{role: full}), x, s, causal=causal)
    return objective
