"""
Column-wise, group-quantized, error-compensating quantization of a weight matrix.

Columns are processed in fixed ascending order in blocks of ``block_size``.
The quantization error of each column is propagated onto the not yet quantized columns with the
upper Cholesky factor ``U`` of the inverse Hessian (``UᵀU = H⁻¹``).
Updates inside a block are applied immediately, updates for later columns once per block.

With ``d_j = U_jj`` the scaled error ``err_j = (w_j − ŵ_j) / d_j`` is stored.
The conditional inverse Hessian diagonal is ``d_j²``, such that
``Σ E² · [H⁻¹]_jj = Σ err²`` with ``E = (w − ŵ) / [H⁻¹]_jj``.
This sum equals ``tr(ΔW · H · ΔWᵀ)`` of the final quantization error ``ΔW``.
"""

from dataclasses import dataclass
import logging
import time
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np

from ..errors import ShapeError
from ..linalg.dense import DenseMatrix, as_matrix
from ..model.transformer import (
    AttentionLayerWeights,
    CalibrationBatch,
    FeedForwardWeights,
    attention_forward,
    feedforward_forward,
)
from .hessian import HessianState, inverse_upper_factor


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


SCALE_FLOOR = 1e-12
SUPPORTED_BITS = (2, 4)
CLIP_GRID = 100
CLIP_MAX_SHRINK = 0.8


@dataclass(frozen=True)
class QuantConfig:
    """Configuration of the quantization pipeline.

    :param bits: bit width of a layer (2 or 4), usually supplied by the planner.
    :param group_size: columns per group sharing scale and zero point.
    :param block_size: columns per lazy update block.
    :param damp_percent: damping relative to the mean Hessian diagonal.
    :param symmetric: use a grid symmetric around zero.
    :param clip_grid_search: shrink the range to minimize the rounding error.
    :param seed_kind: sensitivity seed of attention Hessians, "identity" or "gaussian".
    :param probes: number of gaussian seeds per calibration sample.
    :param mode: "attention" for attention-aware Hessians, "layerwise" for ``2XᵀX`` everywhere.
    :param workers: number of threads quantizing layers concurrently.
    :param damp_retries: factorization retries, each with ten times the damping.
    """

    bits: int = 4
    group_size: int = 128
    block_size: int = 128
    damp_percent: float = 0.01
    symmetric: bool = False
    clip_grid_search: bool = False
    seed_kind: Literal["identity", "gaussian"] = "identity"
    probes: int = 1
    mode: Literal["attention", "layerwise"] = "attention"
    workers: int = 1
    damp_retries: int = 3

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"Only {SUPPORTED_BITS} bits are supported, got {self.bits}.")
        if self.group_size < 1 or self.block_size < 1:
            raise ValueError("Group size and block size have to be at least 1.")
        if self.damp_percent <= 0:
            raise ValueError(f"Damping percent has to be positive, got {self.damp_percent}.")
        if self.seed_kind not in ("identity", "gaussian"):
            raise ValueError(f"Unknown seed kind '{self.seed_kind}'.")
        if self.mode not in ("attention", "layerwise"):
            raise ValueError(f"Unknown Hessian mode '{self.mode}'.")
        if self.probes < 1 or self.workers < 1 or self.damp_retries < 0:
            raise ValueError("Probes and workers have to be positive, retries not negative.")

    @property
    def maxq(self) -> int:
        return (1 << self.bits) - 1

    def as_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass(frozen=True)
class GroupQuantParams:
    """Scale and zero point of one column group."""

    scale: float
    zero_point: int
    group_index: int = 0


@dataclass
class QuantizedLayer:
    """Result of quantizing a ``d_row × d_col`` matrix.

    :param codes: integer codes in ``[0, 2^bits − 1]``.
    :param groups: parameters per column group, in column order.
    :param recon_error: proxy error ``Σ err²``.
    :param errors: the scaled errors ``err`` per entry, kept for replay.
    """

    codes: np.ndarray
    groups: list[GroupQuantParams]
    bits: int
    group_size: int
    recon_error: float
    layer_id: str = ""
    errors: Optional[DenseMatrix] = None
    wall_time: float = 0.0

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    def column_params(self) -> tuple[np.ndarray, np.ndarray]:
        """Return scale and zero point per column."""
        group_of_column = np.arange(self.cols) // self.group_size
        scales = np.array([group.scale for group in self.groups], dtype=np.float64)
        zeros = np.array([group.zero_point for group in self.groups], dtype=np.float64)
        return scales[group_of_column], zeros[group_of_column]

    def dequantize(self) -> DenseMatrix:
        """Return ``(code − zero_point) · scale`` for every entry."""
        scales, zeros = self.column_params()
        return (self.codes.astype(np.float64) - zeros) * scales

    def record(self) -> dict[str, Any]:
        """Line record for reports."""
        return {
            "layer_id": self.layer_id,
            "bits": self.bits,
            "rows": self.rows,
            "cols": self.cols,
            "groups": len(self.groups),
            "proxy_error": self.recon_error,
            "wall_time": self.wall_time,
        }


def quantize_values(values: np.ndarray, params: GroupQuantParams, bits: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized quantization: return codes and dequantized values."""
    maxq = (1 << bits) - 1
    codes = np.clip(np.round(values / params.scale) + params.zero_point, 0, maxq)
    return codes.astype(np.int64), (codes - params.zero_point) * params.scale


def quant_dequant(w: float, p: GroupQuantParams, bits: int) -> tuple[int, float]:
    """Quantize a single weight: ``code = clamp(round(w/scale) + zero, 0, 2^bits − 1)``."""
    codes, values = quantize_values(np.asarray([w], dtype=np.float64), p, bits)
    return int(codes[0]), float(values[0])


def _min_max_params(low: float, high: float, bits: int, symmetric: bool, group_index: int
                    ) -> GroupQuantParams:
    maxq = (1 << bits) - 1
    if symmetric:
        high = max(abs(low), high)
        low = -high
    if high - low <= 0:
        return GroupQuantParams(scale=SCALE_FLOOR, zero_point=(maxq + 1) // 2,
                                group_index=group_index)
    scale = max((high - low) / maxq, SCALE_FLOOR)
    if symmetric:
        zero_point = (maxq + 1) // 2
    else:
        zero_point = int(np.clip(np.round(-low / scale), 0, maxq))
    return GroupQuantParams(scale=float(scale), zero_point=zero_point, group_index=group_index)


def fit_group_params(w_cols: DenseMatrix, bits: int, group_index: int = 0,
                     symmetric: bool = False, clip_grid_search: bool = False
                     ) -> GroupQuantParams:
    """Fit scale and zero point of a column group by its min-max range (including zero).

    :param clip_grid_search: try ranges shrunk by ``1 − k/100`` and keep the one with the
        lowest squared rounding error.
    """
    values = np.asarray(w_cols, dtype=np.float64)
    if values.size == 0:
        raise ShapeError("Can not fit quantization parameters to an empty slice.")
    low = min(float(values.min()), 0.0)
    high = max(float(values.max()), 0.0)
    best = _min_max_params(low, high, bits, symmetric, group_index)
    if not clip_grid_search or high - low <= 0:
        return best
    best_error = np.sum((quantize_values(values, best, bits)[1] - values) ** 2)
    for k in range(1, int(CLIP_MAX_SHRINK * CLIP_GRID)):
        shrink = 1 - k / CLIP_GRID
        candidate = _min_max_params(shrink * low, shrink * high, bits, symmetric, group_index)
        error = np.sum((quantize_values(values, candidate, bits)[1] - values) ** 2)
        if error < best_error:
            best, best_error = candidate, error
    return best


def quantize_layer(w: DenseMatrix, h: HessianState, cfg: QuantConfig,
                   layer_id: Optional[str] = None) -> QuantizedLayer:
    """Quantize `w` (``d_row × d_col``) against the damped Hessian `h` (dimension ``d_col``)."""
    start = time.perf_counter()
    layer_id = h.layer_id if layer_id is None else layer_id
    weights = as_matrix(w, "weight").copy()
    rows, cols = weights.shape
    if h.dim != cols:
        raise ShapeError(f"Hessian dimension {h.dim} does not fit {cols} columns of '{layer_id}'.")
    upper = inverse_upper_factor(h)
    codes = np.zeros((rows, cols), dtype=np.int64)
    errors = np.zeros((rows, cols))
    groups: list[GroupQuantParams] = []
    params: Optional[GroupQuantParams] = None
    loss = 0.0
    for i1 in range(0, cols, cfg.block_size):
        i2 = min(i1 + cfg.block_size, cols)
        block = weights[:, i1:i2].copy()
        block_errors = np.zeros((rows, i2 - i1))
        for i in range(i2 - i1):
            column = i1 + i
            if column % cfg.group_size == 0:
                group_end = min(column + cfg.group_size, cols)
                current = block[:, i:min(group_end, i2) - i1]
                if group_end > i2:
                    # later columns have not yet received this block's pending updates
                    pending = block_errors[:, :i] @ upper[i1:column, i2:group_end]
                    current = np.hstack([current, weights[:, i2:group_end] - pending])
                params = fit_group_params(
                    current,
                    cfg.bits,
                    group_index=column // cfg.group_size,
                    symmetric=cfg.symmetric,
                    clip_grid_search=cfg.clip_grid_search,
                )
                groups.append(params)
            assert params is not None
            values = block[:, i]
            column_codes, quantized = quantize_values(values, params, cfg.bits)
            err = (values - quantized) / upper[column, column]
            block[:, i:] -= np.outer(err, upper[column, column:i2])
            codes[:, column] = column_codes
            block_errors[:, i] = err
            loss += float(np.sum(err**2))
        errors[:, i1:i2] = block_errors
        weights[:, i2:] -= block_errors @ upper[i1:i2, i2:]
        log.debug(f"'{layer_id}': columns {i1}..{i2} quantized.")
    elapsed = time.perf_counter() - start
    log.info(f"'{layer_id}' quantized to {cfg.bits} bit, proxy error {loss:.6g}, "
             f"{elapsed:.3f} s.")
    return QuantizedLayer(
        codes=codes,
        groups=groups,
        bits=cfg.bits,
        group_size=cfg.group_size,
        recon_error=loss,
        layer_id=layer_id,
        errors=errors,
        wall_time=elapsed,
    )


def round_to_nearest(w: DenseMatrix, cfg: QuantConfig, layer_id: str = "") -> QuantizedLayer:
    """Group-wise round-to-nearest baseline without error compensation."""
    start = time.perf_counter()
    weights = as_matrix(w, "weight")
    rows, cols = weights.shape
    codes = np.zeros((rows, cols), dtype=np.int64)
    groups = []
    loss = 0.0
    for index, begin in enumerate(range(0, cols, cfg.group_size)):
        end = min(begin + cfg.group_size, cols)
        params = fit_group_params(weights[:, begin:end], cfg.bits, group_index=index,
                                  symmetric=cfg.symmetric,
                                  clip_grid_search=cfg.clip_grid_search)
        groups.append(params)
        codes[:, begin:end], quantized = quantize_values(weights[:, begin:end], params, cfg.bits)
        loss += float(np.sum((weights[:, begin:end] - quantized) ** 2))
    return QuantizedLayer(codes=codes, groups=groups, bits=cfg.bits, group_size=cfg.group_size,
                          recon_error=loss, layer_id=layer_id,
                          wall_time=time.perf_counter() - start)


def proxy_error(w: DenseMatrix, w_hat: DenseMatrix, h: Union[HessianState, DenseMatrix]) -> float:
    """Return ``tr((W − Ŵ) · H · (W − Ŵ)ᵀ)`` for ``d_row × d_col`` matrices."""
    hessian = h.h if isinstance(h, HessianState) else as_matrix(h)
    delta = as_matrix(w) - as_matrix(w_hat)
    return float(np.sum((delta @ hessian) * delta))


def reconstruction_error(
    original: Union[AttentionLayerWeights, FeedForwardWeights],
    quantized: Union[AttentionLayerWeights, FeedForwardWeights],
    x: Union[CalibrationBatch, DenseMatrix, Sequence[Union[CalibrationBatch, DenseMatrix]]],
    causal: bool = False,
) -> float:
    """Return ``Σ ‖F(W) − F(Ŵ)‖²`` over the calibration batches `x`."""
    if type(original) is not type(quantized):
        raise ShapeError("Original and quantized weights are of different block types.")
    if isinstance(x, (CalibrationBatch, np.ndarray)):
        batches: Sequence = [x]
    else:
        batches = x
    total = 0.0
    for batch in batches:
        matrix = batch.x if isinstance(batch, CalibrationBatch) else as_matrix(batch)
        if isinstance(original, AttentionLayerWeights):
            if original.wq.shape != quantized.wq.shape:  # type: ignore[union-attr]
                raise ShapeError("Attention weights of different shapes.")
            difference = attention_forward(original, matrix, causal=causal) - attention_forward(
                quantized, matrix, causal=causal  # type: ignore[arg-type]
            )
        else:
            if (original.w1.shape != quantized.w1.shape  # type: ignore[union-attr]
                    or original.w2.shape != quantized.w2.shape):  # type: ignore[union-attr]
                raise ShapeError("Feed-forward weights of different shapes.")
            difference = feedforward_forward(original, matrix) - feedforward_forward(
                quantized, matrix  # type: ignore[arg-type]
            )
        total += float(np.sum(difference**2))
    return total
