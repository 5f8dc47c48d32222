"""
Mixed 2/4 bit precision plans.

Layers are ranked by the average trace of their proxy Hessian.
The most sensitive fraction `r` of all PARAMETERS gets 4 bits, the rest 2 bits, such that the
average bit width is ``4·r + 2·(1 − r)`` up to layer granularity.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..errors import PlanError
from .hessian import SensitivityRecord


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


HIGH_BITS = 4
LOW_BITS = 2
# relative slack of the parameter budget against float round-off
BUDGET_SLACK = 1e-12


@dataclass
class PrecisionPlan:
    """Bit width per layer.

    :param assignments: layer_id to bits, in ranking (or model) order.
    :param ratio_r: requested fraction of parameters at 4 bits.
    :param method: "trace", "manual-blockwise", or "uniform".
    """

    assignments: dict[str, int]
    ratio_r: float
    achieved_avg_bits: float
    ranking: list[SensitivityRecord] = field(default_factory=list)
    param_counts: dict[str, int] = field(default_factory=dict)
    method: str = "trace"

    @property
    def achieved_ratio(self) -> float:
        """Fraction of parameters at 4 bits."""
        return (self.achieved_avg_bits - LOW_BITS) / (HIGH_BITS - LOW_BITS)

    @property
    def target_avg_bits(self) -> float:
        return HIGH_BITS * self.ratio_r + LOW_BITS * (1 - self.ratio_r)

    def bits_for(self, layer_id: str) -> int:
        try:
            return self.assignments[layer_id]
        except KeyError:
            raise PlanError(f"Layer '{layer_id}' is not part of the plan.") from None

    def summary(self) -> dict:
        return {
            "method": self.method,
            "target_ratio": self.ratio_r,
            "achieved_ratio": self.achieved_ratio,
            "target_avg_bits": self.target_avg_bits,
            "achieved_avg_bits": self.achieved_avg_bits,
            "layers": len(self.assignments),
            "layers_4bit": sum(1 for bits in self.assignments.values() if bits == HIGH_BITS),
        }


def average_bits(assignments: Mapping[str, int], param_counts: Mapping[str, int]) -> float:
    """Return ``(4·P₄ + 2·P₂) / (P₄ + P₂)`` weighted by parameter counts."""
    total = sum(param_counts[layer_id] for layer_id in assignments)
    if total <= 0:
        raise PlanError("The planned layers do not contain any parameters.")
    return sum(bits * param_counts[layer_id] for layer_id, bits in assignments.items()) / total


def _check_ratio(r: float) -> None:
    if not 0 <= r <= 1:
        raise PlanError(f"The 4 bit ratio has to be within [0, 1], got {r}.")


def _counts(records: Iterable[SensitivityRecord],
            param_counts: Optional[Mapping[str, int]]) -> dict[str, int]:
    counts = {record.layer_id: record.param_count for record in records}
    if param_counts is not None:
        counts.update(param_counts)
    return counts


def rank_layers(records: Sequence[SensitivityRecord]) -> list[SensitivityRecord]:
    """Sort by average trace descending, ties by layer_id."""
    if not records:
        raise PlanError("Can not plan an empty set of layers.")
    for record in records:
        if not np.isfinite(record.avg_trace):
            raise PlanError(f"Trace of '{record.layer_id}' is not finite.")
    return sorted(records, key=lambda record: (-record.avg_trace, record.layer_id))


def allocate_bits(ranking: Sequence[SensitivityRecord], r: float,
                  param_counts: Optional[Mapping[str, int]] = None) -> PrecisionPlan:
    """Walk the ranking, assigning 4 bits while the 4 bit parameters stay within ``r · total``.

    The first layer exceeding the budget gets 4 bits only if that brings the achieved ratio
    strictly closer to `r`. All later layers get 2 bits.

    :param param_counts: overrides the counts of the records.
    """
    _check_ratio(r)
    ranking = rank_layers(ranking)
    counts = _counts(ranking, param_counts)
    total = sum(counts[record.layer_id] for record in ranking)
    if total <= 0:
        raise PlanError("The ranked layers do not contain any parameters.")
    budget = r * total
    assignments: dict[str, int] = {}
    high = 0
    boundary_passed = False
    for record in ranking:
        count = counts[record.layer_id]
        if boundary_passed:
            assignments[record.layer_id] = LOW_BITS
        elif high + count <= budget + BUDGET_SLACK * total:
            assignments[record.layer_id] = HIGH_BITS
            high += count
        else:
            boundary_passed = True
            if abs(high + count - budget) < abs(high - budget):
                assignments[record.layer_id] = HIGH_BITS
                high += count
            else:
                assignments[record.layer_id] = LOW_BITS
    plan = PrecisionPlan(
        assignments=assignments,
        ratio_r=r,
        achieved_avg_bits=average_bits(assignments, counts),
        ranking=list(ranking),
        param_counts=counts,
        method="trace",
    )
    log.info(f"Trace based plan for R={r}: {plan.achieved_avg_bits:.4f} average bits.")
    return plan


def manual_blockwise_plan(blocks: Sequence[Sequence[str]], r: float,
                          param_counts: Mapping[str, int],
                          records: Sequence[SensitivityRecord] = ()) -> PrecisionPlan:
    """Give the first ``⌈r · #blocks⌉`` blocks (model order) 4 bits, the rest 2 bits.

    :param blocks: layer ids grouped by transformer block, in model order.
    """
    _check_ratio(r)
    if not blocks or not any(blocks):
        raise PlanError("Can not plan an empty set of blocks.")
    high_blocks = math.ceil(r * len(blocks) - BUDGET_SLACK * len(blocks))
    assignments = {
        layer_id: HIGH_BITS if index < high_blocks else LOW_BITS
        for index, block in enumerate(blocks)
        for layer_id in block
    }
    counts = dict(param_counts)
    missing = [layer_id for layer_id in assignments if layer_id not in counts]
    if missing:
        raise PlanError(f"Parameter counts missing for {missing}.")
    plan = PrecisionPlan(
        assignments=assignments,
        ratio_r=r,
        achieved_avg_bits=average_bits(assignments, counts),
        ranking=rank_layers(records) if records else [],
        param_counts=counts,
        method="manual-blockwise",
    )
    log.info(f"Manual block-wise plan for R={r}: {high_blocks} of {len(blocks)} blocks at 4 bit.")
    return plan


def uniform_plan(layer_ids: Sequence[str], bits: int, param_counts: Mapping[str, int]
                 ) -> PrecisionPlan:
    """All layers at the same bit width."""
    if bits not in (LOW_BITS, HIGH_BITS):
        raise PlanError(f"Uniform plans support {LOW_BITS} or {HIGH_BITS} bits, got {bits}.")
    if not layer_ids:
        raise PlanError("Can not plan an empty set of layers.")
    assignments = {layer_id: bits for layer_id in layer_ids}
    return PrecisionPlan(
        assignments=assignments,
        ratio_r=1.0 if bits == HIGH_BITS else 0.0,
        achieved_avg_bits=float(bits),
        param_counts=dict(param_counts),
        method="uniform",
    )
