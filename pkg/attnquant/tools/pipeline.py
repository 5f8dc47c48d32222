"""
End-to-end quantization pipeline of a toy model.

sensitivity → plan → per-layer quantization → evaluation.

Calibration data enters the first block, later blocks are calibrated on the full precision
output of the previous block.
Layer ids are the tensor names of the model file, for example ``blocks.0.wq``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import time
from typing import Any, Literal, Optional, Sequence

import numpy as np

from ..errors import DefinitenessError, PlanError
from ..linalg.dense import DenseMatrix
from ..model.gradients import build_workspace, gaussian_seed, identity_seed, weight_gradients
from ..model.transformer import (
    ToyModel,
    TransformerBlock,
    attention_intermediates,
    block_forward,
    feedforward_hidden,
)
from ..quantization.gptq import (
    QuantConfig,
    QuantizedLayer,
    proxy_error,
    quantize_layer,
    reconstruction_error,
    round_to_nearest,
)
from ..quantization.hessian import (
    HessianState,
    SensitivityRecord,
    accumulate_attention,
    accumulate_linear,
    avg_trace,
    damp,
)
from ..quantization.planner import (
    PrecisionPlan,
    allocate_bits,
    manual_blockwise_plan,
    rank_layers,
    uniform_plan,
)
from ..store.model_file import (
    ATTENTION_ROLES,
    WEIGHT_ROLES,
    CalibrationSet,
    layer_name,
    parse_layer_name,
)
from ..store.synthetic import rng_stream
from .perplexity import toy_perplexity


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


METHODS = ("aptq", "layerwise-hessian", "rtn", "manual-blockwise")
PlanKind = Literal["trace", "manual-blockwise", "uniform"]


@dataclass
class BlockActivations:
    """Full precision activations of one block per calibration segment.

    :param inputs: ``x`` entering the block.
    :param hidden: ``h = x + attention(x)`` entering the feed-forward part.
    """

    inputs: list[DenseMatrix]
    hidden: list[DenseMatrix]


def layer_ids(model: ToyModel) -> list[str]:
    return sorted(layer_name(b, role) for b in range(len(model.blocks)) for role in WEIGHT_ROLES)


def layer_weight(model: ToyModel, layer_id: str) -> DenseMatrix:
    """Weight matrix in product orientation (``in × out``)."""
    index, role = parse_layer_name(layer_id)
    block = model.blocks[index]
    if role in ATTENTION_ROLES:
        return getattr(block.attention, role)
    return block.feedforward.w1 if role == "ffn1" else block.feedforward.w2


def param_counts(model: ToyModel) -> dict[str, int]:
    return {layer_id: int(layer_weight(model, layer_id).size) for layer_id in layer_ids(model)}


def block_layer_groups(model: ToyModel) -> list[list[str]]:
    """Layer ids grouped by block, in model order."""
    return [[layer_name(b, role) for role in WEIGHT_ROLES] for b in range(len(model.blocks))]


def propagate_calibration(model: ToyModel, calibration: CalibrationSet, causal: bool = True
                          ) -> list[BlockActivations]:
    """Run the calibration segments through the full precision model."""
    if not calibration.batches:
        raise PlanError("The calibration set is empty.")
    calibration.check_model(model)
    current = [batch.x for batch in calibration.batches]
    activations = []
    for block in model.blocks:
        hidden, outputs = [], []
        for x in current:
            h, y = block_forward(block, x, causal=causal)
            hidden.append(h)
            outputs.append(y)
        activations.append(BlockActivations(inputs=current, hidden=hidden))
        current = outputs
    return activations


def _sensitivity_seeds(n: int, d_model: int, cfg: QuantConfig, rng: np.random.Generator):
    if cfg.seed_kind == "identity":
        return [identity_seed(n, d_model)]
    # E[g gᵀ] over these seeds is the Gauss-Newton matrix normalized per output column
    factor = 1 / np.sqrt(d_model * cfg.probes)
    return [gaussian_seed(n, d_model, rng).scaled(factor) for _ in range(cfg.probes)]


def block_hessians(index: int, block: TransformerBlock, activations: BlockActivations,
                   cfg: QuantConfig, seed: int = 0, causal: bool = True
                   ) -> dict[str, HessianState]:
    """Accumulate the undamped Hessians of all six matrices of a block."""
    attention = block.attention
    d_model, d_ff = attention.d_model, block.feedforward.d_ff
    states = {role: HessianState.empty(d_model, layer_name(index, role), d_model * d_model)
              for role in ATTENTION_ROLES}
    states["ffn1"] = HessianState.empty(d_model, layer_name(index, "ffn1"), d_model * d_ff)
    states["ffn2"] = HessianState.empty(d_ff, layer_name(index, "ffn2"), d_ff * d_model)
    rng = rng_stream(seed, "probes", index)
    for x, h in zip(activations.inputs, activations.hidden):
        if cfg.mode == "attention":
            ws = build_workspace(attention, x, causal=causal)
            seeds = _sensitivity_seeds(x.shape[0], d_model, cfg, rng)
            for role in ATTENTION_ROLES:
                grads = [g for s in seeds for g in weight_gradients(ws, s, attention, role)]
                states[role] = accumulate_attention(states[role], grads)
        else:
            concat = attention_intermediates(attention, x, causal=causal).concat
            for role in ("wq", "wk", "wv"):
                states[role] = accumulate_linear(states[role], x)
            states["wo"] = accumulate_linear(states["wo"], concat)
        states["ffn1"] = accumulate_linear(states["ffn1"], h)
        states["ffn2"] = accumulate_linear(states["ffn2"], feedforward_hidden(block.feedforward, h))
    return {state.layer_id: state for state in states.values()}


def collect_hessians(model: ToyModel, calibration: CalibrationSet, cfg: QuantConfig,
                     seed: int = 0, causal: bool = True) -> dict[str, HessianState]:
    """Undamped Hessians of all quantizable matrices, keyed and ordered by layer id."""
    activations = propagate_calibration(model, calibration, causal=causal)
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        futures = [
            executor.submit(block_hessians, index, block, block_activations, cfg, seed, causal)
            for index, (block, block_activations) in enumerate(zip(model.blocks, activations))
        ]
        hessians: dict[str, HessianState] = {}
        for future in futures:
            hessians.update(future.result())
    log.info(f"Accumulated {len(hessians)} Hessians in {cfg.mode} mode over "
             f"{calibration.n_segments} segments.")
    return dict(sorted(hessians.items()))


def sensitivity(hessians: dict[str, HessianState]) -> list[SensitivityRecord]:
    """Average trace records, sorted by layer id."""
    return [avg_trace(hessians[layer_id]) for layer_id in sorted(hessians)]


def make_plan(model: ToyModel, records: Sequence[SensitivityRecord], kind: PlanKind = "trace",
              ratio: Optional[float] = None, bits: Optional[int] = None) -> PrecisionPlan:
    counts = param_counts(model)
    if kind == "uniform":
        if bits is None:
            raise PlanError("A uniform plan needs a bit width.")
        return uniform_plan(layer_ids(model), bits, counts)
    if ratio is None:
        raise PlanError(f"A {kind} plan needs a ratio.")
    if kind == "manual-blockwise":
        return manual_blockwise_plan(block_layer_groups(model), ratio, counts, records)
    return allocate_bits(rank_layers(records), ratio, counts)


def _quantize_with_retries(weight: DenseMatrix, state: HessianState, cfg: QuantConfig
                           ) -> QuantizedLayer:
    percent = cfg.damp_percent
    attempt = 0
    while True:
        try:
            return quantize_layer(weight, damp(state, percent), cfg, layer_id=state.layer_id)
        except DefinitenessError as exc:
            if attempt >= cfg.damp_retries:
                raise
            attempt += 1
            percent *= 10
            log.warning(f"{exc} Retry {attempt} with damping {percent:g}.")


@dataclass
class QuantizationResult:
    model: ToyModel
    layers: list[QuantizedLayer]
    plan: PrecisionPlan

    def records(self) -> list[dict[str, Any]]:
        return [layer.record() for layer in self.layers]

    @property
    def proxy_error(self) -> float:
        return float(sum(layer.recon_error for layer in self.layers))


def replace_weights(model: ToyModel, matrices: dict[str, DenseMatrix]) -> ToyModel:
    """Return a copy of `model` with the weights (``in × out``) of some layers replaced."""
    blocks = []
    for index, block in enumerate(model.blocks):
        attention = {role: matrices[layer_name(index, role)]
                     for role in ATTENTION_ROLES if layer_name(index, role) in matrices}
        feedforward = {}
        if layer_name(index, "ffn1") in matrices:
            feedforward["w1"] = matrices[layer_name(index, "ffn1")]
        if layer_name(index, "ffn2") in matrices:
            feedforward["w2"] = matrices[layer_name(index, "ffn2")]
        blocks.append(TransformerBlock(attention=block.attention.replace(**attention),
                                       feedforward=block.feedforward.replace(**feedforward)))
    return ToyModel(blocks=blocks, embedding=model.embedding.copy(), heads=model.heads,
                    metadata=dict(model.metadata))


def quantize_model(model: ToyModel, hessians: dict[str, HessianState], plan: PrecisionPlan,
                   cfg: QuantConfig, method: Literal["gptq", "rtn"] = "gptq"
                   ) -> QuantizationResult:
    """Quantize every planned layer, concurrently with ``cfg.workers`` threads.

    Results are ordered by layer id, independent of the thread scheduling.
    """
    def quantize_one(layer_id: str) -> QuantizedLayer:
        layer_cfg = replace(cfg, bits=plan.bits_for(layer_id))
        weight = layer_weight(model, layer_id).T
        if method == "rtn":
            layer = round_to_nearest(weight, layer_cfg, layer_id=layer_id)
            if layer_id in hessians:
                layer.recon_error = proxy_error(weight, layer.dequantize(),
                                                damp(hessians[layer_id], cfg.damp_percent))
            return layer
        if layer_id not in hessians:
            raise PlanError(f"No Hessian for planned layer '{layer_id}'.")
        return _quantize_with_retries(weight, hessians[layer_id], layer_cfg)

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        layers = list(executor.map(quantize_one, sorted(plan.assignments)))
    quantized = replace_weights(model, {layer.layer_id: layer.dequantize().T for layer in layers})
    return QuantizationResult(model=quantized, layers=layers, plan=plan)


def evaluate(original: ToyModel, quantized: ToyModel, calibration: CalibrationSet,
             causal: bool = True, toy_ppl: bool = False, seed: int = 0,
             ppl_sequences: int = 16, ppl_length: Optional[int] = None) -> dict[str, Any]:
    """Per-block and total reconstruction error, optionally the toy perplexities.

    Both blocks see the full precision inputs of the original model.
    """
    if len(original.blocks) != len(quantized.blocks) or original.d_model != quantized.d_model:
        raise PlanError("Original and quantized model differ in shape.")
    activations = propagate_calibration(original, calibration, causal=causal)
    blocks = []
    for index, (fp, q, acts) in enumerate(zip(original.blocks, quantized.blocks, activations)):
        attention = reconstruction_error(fp.attention, q.attention, acts.inputs, causal=causal)
        feedforward = reconstruction_error(fp.feedforward, q.feedforward, acts.hidden)
        blocks.append({"block": index, "attention_error": attention,
                       "feedforward_error": feedforward, "error": attention + feedforward})
    result: dict[str, Any] = {
        "blocks": blocks,
        "reconstruction_error": float(sum(block["error"] for block in blocks)),
    }
    if toy_ppl:
        length = ppl_length or calibration.tokens_per_segment
        original_ppl, quantized_ppl = toy_perplexity(
            original, [quantized], rng_stream(seed, "evaluation"), count=ppl_sequences,
            length=length,
        )
        result["ppl_original"] = original_ppl
        result["ppl_quantized"] = quantized_ppl[0]
    return result


@dataclass
class RunReport:
    """Everything a quantization or evaluation run produced.

    Wall times are kept apart from the records, which are a pure function of inputs, flags,
    and seed.
    """

    config: dict[str, Any]
    layers: list[dict[str, Any]] = field(default_factory=list)
    totals: dict[str, Any] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)
    seed: int = 0

    def records(self) -> list[dict[str, Any]]:
        return (
            [{"record": "config", "seed": self.seed, **self.config}]
            + [{"record": "layer", **layer} for layer in self.layers]
            + [{"record": "totals", **self.totals}]
        )

    def text(self) -> str:
        lines = [f"seed: {self.seed}"]
        lines += [f"{key}: {value}" for key, value in sorted(self.config.items())]
        if self.layers:
            columns = [key for key in ("layer_id", "bits", "avg_trace", "proxy_error",
                                       "reconstruction_error") if key in self.layers[0]]
            lines.append("\t".join(columns))
            for layer in self.layers:
                lines.append("\t".join(_format(layer.get(key)) for key in columns))
        lines += [f"{key}: {_format(value)}" for key, value in sorted(self.totals.items())]
        lines += [f"wall time {key}: {value:.3f} s" for key, value in self.wall_times.items()]
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def layer_reconstruction_errors(original: ToyModel, quantized: ToyModel,
                                activations: list[BlockActivations], causal: bool = True
                                ) -> dict[str, float]:
    """Output error of each layer with only that layer quantized, on full precision inputs."""
    errors = {}
    for index, (fp, q, acts) in enumerate(zip(original.blocks, quantized.blocks, activations)):
        for role in ATTENTION_ROLES:
            single = fp.attention.replace(**{role: getattr(q.attention, role)})
            errors[layer_name(index, role)] = reconstruction_error(fp.attention, single,
                                                                   acts.inputs, causal=causal)
        for role, key in (("ffn1", "w1"), ("ffn2", "w2")):
            single = fp.feedforward.replace(**{key: getattr(q.feedforward, key)})
            errors[layer_name(index, role)] = reconstruction_error(fp.feedforward, single,
                                                                   acts.hidden)
    return errors


def run_quantization(model: ToyModel, calibration: CalibrationSet, cfg: QuantConfig,
                     plan_kind: PlanKind = "trace", ratio: Optional[float] = None,
                     bits: Optional[int] = None, seed: int = 0, causal: bool = True,
                     method: Literal["gptq", "rtn"] = "gptq",
                     plan: Optional[PrecisionPlan] = None,
                     ) -> tuple[QuantizationResult, RunReport]:
    """Sensitivity, plan, and quantization of a model with a report."""
    start = time.perf_counter()
    hessians = collect_hessians(model, calibration, cfg, seed=seed, causal=causal)
    records = sensitivity(hessians)
    hessian_time = time.perf_counter() - start
    if plan is None:
        plan = make_plan(model, records, plan_kind, ratio=ratio, bits=bits)
    result = quantize_model(model, hessians, plan, cfg, method=method)
    quantize_time = time.perf_counter() - start - hessian_time
    activations = propagate_calibration(model, calibration, causal=causal)
    true_errors = layer_reconstruction_errors(model, result.model, activations, causal=causal)
    traces = {record.layer_id: record.avg_trace for record in records}
    layers = [
        {
            "layer_id": layer.layer_id,
            "bits": layer.bits,
            "avg_trace": traces[layer.layer_id],
            "params": layer.rows * layer.cols,
            "proxy_error": layer.recon_error,
            "reconstruction_error": true_errors[layer.layer_id],
        }
        for layer in result.layers
    ]
    evaluation = evaluate(model, result.model, calibration, causal=causal)
    report = RunReport(
        config={"plan": plan.method, "quantizer": method, "ratio": ratio, "bits": bits,
                **cfg.as_dict()},
        layers=layers,
        totals={**plan.summary(), "proxy_error": result.proxy_error,
                "reconstruction_error": evaluation["reconstruction_error"]},
        wall_times={"hessians": hessian_time, "quantization": quantize_time},
        seed=seed,
    )
    return result, report


def compare(model: ToyModel, calibration: CalibrationSet, cfg: QuantConfig,
            methods: Sequence[str] = METHODS, ratios: Sequence[float] = (0.5, 0.75, 1.0),
            seed: int = 0, causal: bool = True, toy_ppl: bool = False,
            ppl_sequences: int = 16) -> list[dict[str, Any]]:
    """Grid of methods × ratios with reconstruction error (and toy perplexity).

    - aptq: attention-aware Hessians, trace based plan, compensating quantizer.
    - layerwise-hessian: ``2XᵀX`` Hessians everywhere, trace based plan of those.
    - rtn: round to nearest with the aptq plan, its proxy measured on the aptq Hessians.
    - manual-blockwise: attention-aware Hessians, first blocks at 4 bits.
    """
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise PlanError(f"Unknown methods {unknown}, valid are {METHODS}.")
    attention_cfg = replace(cfg, mode="attention")
    hessians = {"attention": collect_hessians(model, calibration, attention_cfg, seed, causal)}
    if "layerwise-hessian" in methods:
        hessians["layerwise"] = collect_hessians(model, calibration,
                                                 replace(cfg, mode="layerwise"), seed, causal)
    records = {mode: sensitivity(states) for mode, states in hessians.items()}
    rows = []
    for ratio in ratios:
        for method in methods:
            mode = "layerwise" if method == "layerwise-hessian" else "attention"
            kind: PlanKind = "manual-blockwise" if method == "manual-blockwise" else "trace"
            plan = make_plan(model, records[mode], kind, ratio=ratio)
            result = quantize_model(model, hessians[mode], plan, replace(cfg, mode=mode),
                                    method="rtn" if method == "rtn" else "gptq")
            evaluation = evaluate(model, result.model, calibration, causal=causal,
                                  toy_ppl=toy_ppl, seed=seed, ppl_sequences=ppl_sequences)
            row = {
                "method": method,
                "ratio": ratio,
                "achieved_avg_bits": plan.achieved_avg_bits,
                "proxy_error": result.proxy_error,
                "reconstruction_error": evaluation["reconstruction_error"],
            }
            if toy_ppl:
                row["ppl_original"] = evaluation["ppl_original"]
                row["ppl_quantized"] = evaluation["ppl_quantized"]
            log.debug(f"compare {method} R={ratio}: {row['reconstruction_error']:.6g}")
            rows.append(row)
    return rows
