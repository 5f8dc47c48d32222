"""
Command line interface of attnquant.

Exit codes: 0 success, 2 input errors, 3 numeric failures.
"""

import argparse
import logging
from pathlib import Path
import sys
import time
from typing import Any, Optional, Sequence

from ..errors import (
    DefinitenessError,
    ManifestError,
    NumericError,
    PlanError,
    ShapeError,
    StoreError,
)
from ..quantization.gptq import QuantConfig
from ..quantization.planner import allocate_bits, manual_blockwise_plan, rank_layers
from ..store.model_file import (
    CALIBRATION_MAGIC,
    MODEL_MAGIC,
    load_calibration,
    load_model,
    parse_layer_name,
    read_calibration_manifest,
    read_model_manifest,
    save_calibration,
    save_model,
    verify_regions,
)
from ..store.packed_file import PACKED_MAGIC, load_packed, load_packed_tensors, save_packed
from ..store.synthetic import SyntheticConfig, generate_synthetic
from ..store.tables import (
    read_plan_table,
    read_sensitivity_table,
    write_plan_table,
    write_sensitivity_table,
)
from ..utils.records import RecordWriter
from ..utils.units import storage_size, wall_time
from . import pipeline


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _ratio_list(value: str) -> list[float]:
    try:
        return [float(item) for item in value.split(",") if item]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{value}' is not a comma separated list of ratios.")


def _method_list(value: str) -> list[str]:
    methods = [item for item in value.split(",") if item]
    unknown = [method for method in methods if method not in pipeline.METHODS]
    if unknown:
        raise argparse.ArgumentTypeError(f"Unknown methods {unknown}, valid are "
                                         f"{', '.join(pipeline.METHODS)}.")
    return methods


def _add_quant_options(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("quantization")
    group.add_argument("--group-size", type=int, default=128,
                       help="columns per quantization group")
    group.add_argument("--block-size", type=int, default=128,
                       help="columns per lazy update block")
    group.add_argument("--damp", type=float, default=0.01,
                       help="damping relative to the mean Hessian diagonal")
    group.add_argument("--mode", choices=("attention", "layerwise"), default="attention",
                       help="attention-aware Hessians or 2XᵀX for every matrix")
    group.add_argument("--seed-kind", choices=("identity", "gaussian"), default="identity",
                       help="sensitivity seed of the attention Hessians")
    group.add_argument("--probes", type=int, default=1, help="gaussian seeds per segment")
    group.add_argument("--symmetric", action="store_true", help="symmetric quantization grid")
    group.add_argument("--clip-search", action="store_true",
                       help="search the clipping range of every group")
    group.add_argument("--workers", type=int, default=1, help="worker threads")


def _add_report_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--report", type=Path, help="human readable report file")
    parser.add_argument("--records", type=Path, help="JSON lines report file")


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnquant",
        description="Attention-aware mixed 2/4 bit post-training quantization.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase the logging level by one step")
    parser.add_argument("-q", "--quiet", action="count", default=0,
                        help="decrease the logging level by one step")
    parser.add_argument("--seed", type=int, default=0, help="seed of all random streams")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="generate a synthetic model and calibration")
    generate.add_argument("model", type=Path, help="model file to write")
    generate.add_argument("calibration", type=Path, help="calibration file to write")
    generate.add_argument("--d-model", type=int, default=32)
    generate.add_argument("--heads", type=int, default=4)
    generate.add_argument("--d-ff", type=int, default=None, help="default 4 · d_model")
    generate.add_argument("--blocks", type=int, default=4)
    generate.add_argument("--seq-len", type=int, default=32, help="tokens per segment")
    generate.add_argument("--segments", type=int, default=16)
    generate.add_argument("--vocab", type=int, default=64)

    sensitivity = commands.add_parser("sensitivity", help="compute the average Hessian traces")
    sensitivity.add_argument("model", type=Path)
    sensitivity.add_argument("calibration", type=Path)
    sensitivity.add_argument("-o", "--out", type=Path, required=True, help="sensitivity table")
    _add_quant_options(sensitivity)

    plan = commands.add_parser("plan", help="create a precision plan from a sensitivity table")
    plan.add_argument("table", type=Path, help="sensitivity table")
    plan.add_argument("--ratio", type=float, required=True, help="fraction of 4 bit parameters")
    plan.add_argument("--plan", choices=("trace", "manual-blockwise"), default="trace")
    plan.add_argument("-o", "--out", type=Path, required=True, help="plan table")

    quantize = commands.add_parser("quantize", help="quantize a model")
    quantize.add_argument("model", type=Path)
    quantize.add_argument("calibration", type=Path)
    quantize.add_argument("-o", "--out", type=Path, required=True, help="packed file")
    target = quantize.add_mutually_exclusive_group(required=True)
    target.add_argument("--ratio", type=float, help="fraction of 4 bit parameters")
    target.add_argument("--bits", type=int, choices=(2, 4), help="uniform bit width")
    target.add_argument("--plan-file", type=Path, help="plan table created by 'plan'")
    quantize.add_argument("--plan", choices=("trace", "manual-blockwise"), default="trace",
                          help="planner used with --ratio")
    quantize.add_argument("--rtn", action="store_true",
                          help="round to nearest without error compensation")
    _add_quant_options(quantize)
    _add_report_options(quantize)

    evaluate = commands.add_parser("eval", help="evaluate a packed model against the original")
    evaluate.add_argument("model", type=Path)
    evaluate.add_argument("packed", type=Path)
    evaluate.add_argument("calibration", type=Path)
    evaluate.add_argument("--toy-ppl", action="store_true", help="also compute toy perplexities")
    evaluate.add_argument("--ppl-sequences", type=int, default=16)
    _add_report_options(evaluate)

    compare = commands.add_parser("compare", help="compare methods over a grid of ratios")
    compare.add_argument("model", type=Path)
    compare.add_argument("calibration", type=Path)
    compare.add_argument("--methods", type=_method_list, default=list(pipeline.METHODS),
                         help="comma separated methods")
    compare.add_argument("--ratios", type=_ratio_list, default=[0.5, 0.75, 1.0],
                         help="comma separated 4 bit ratios")
    compare.add_argument("--toy-ppl", action="store_true")
    compare.add_argument("--ppl-sequences", type=int, default=16)
    _add_quant_options(compare)
    _add_report_options(compare)

    inspect = commands.add_parser("inspect", help="print the manifest of a file")
    inspect.add_argument("path", type=Path)
    return parser


def configure_logging(verbose: int, quiet: int) -> None:
    level = logging.WARNING - 10 * (verbose - quiet)
    logger = logging.getLogger("attnquant")
    logger.setLevel(min(max(level, logging.DEBUG), logging.CRITICAL))
    if not any(isinstance(handler, logging.StreamHandler) for handler in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)


def quant_config(args: argparse.Namespace) -> QuantConfig:
    return QuantConfig(
        group_size=args.group_size,
        block_size=args.block_size,
        damp_percent=args.damp,
        symmetric=args.symmetric,
        clip_grid_search=args.clip_search,
        seed_kind=args.seed_kind,
        probes=args.probes,
        mode=args.mode,
        workers=args.workers,
    )


def write_report(report: pipeline.RunReport, args: argparse.Namespace) -> None:
    text = report.text()
    sys.stdout.write(text)
    if args.report is not None:
        args.report.write_text(text, encoding="utf-8", newline="\n")
    if args.records is not None:
        with RecordWriter(args.records) as writer:
            writer.write_all(report.records())


def cmd_generate(args: argparse.Namespace) -> None:
    config = SyntheticConfig(
        d_model=args.d_model, heads=args.heads, d_ff=args.d_ff, blocks=args.blocks,
        seq_len=args.seq_len, segments=args.segments, vocab=args.vocab, seed=args.seed,
    )
    model, calibration = generate_synthetic(config)
    save_model(model, args.model)
    save_calibration(calibration, args.calibration)


def cmd_sensitivity(args: argparse.Namespace) -> None:
    model = load_model(args.model)
    calibration = load_calibration(args.calibration, model)
    cfg = quant_config(args)
    hessians = pipeline.collect_hessians(model, calibration, cfg, seed=args.seed)
    records = pipeline.sensitivity(hessians)
    write_sensitivity_table(records, args.out, summary={"mode": cfg.mode,
                                                       "seed_kind": cfg.seed_kind,
                                                       "seed": args.seed})
    log.info(f"Wrote {len(records)} sensitivity records to '{args.out}'.")


def cmd_plan(args: argparse.Namespace) -> None:
    records = read_sensitivity_table(args.table)
    counts = {record.layer_id: record.param_count for record in records}
    if args.plan == "manual-blockwise":
        blocks: dict[int, list[str]] = {}
        for record in records:
            index, _ = parse_layer_name(record.layer_id)
            blocks.setdefault(index, []).append(record.layer_id)
        plan = manual_blockwise_plan([blocks[index] for index in sorted(blocks)], args.ratio,
                                     counts, records)
    else:
        plan = allocate_bits(rank_layers(records), args.ratio, counts)
    write_plan_table(plan, args.out)
    sys.stdout.write(f"achieved average bits: {plan.achieved_avg_bits:.6g}\n")


def cmd_quantize(args: argparse.Namespace) -> None:
    model = load_model(args.model)
    calibration = load_calibration(args.calibration, model)
    cfg = quant_config(args)
    plan = read_plan_table(args.plan_file) if args.plan_file is not None else None
    kind = "uniform" if args.bits is not None else args.plan
    result, report = pipeline.run_quantization(
        model, calibration, cfg, plan_kind=kind, ratio=args.ratio, bits=args.bits,
        seed=args.seed, method="rtn" if args.rtn else "gptq", plan=plan,
    )
    nbytes = save_packed(result.plan, result.layers, args.out, model,
                         metadata={"seed": args.seed, "config": cfg.as_dict()})
    report.wall_times["total"] = sum(report.wall_times.values())
    log.info(f"Packed model has {storage_size(nbytes):~}, quantization took "
             f"{wall_time(report.wall_times['total']):~}.")
    write_report(report, args)


def cmd_eval(args: argparse.Namespace) -> None:
    start = time.perf_counter()
    model = load_model(args.model)
    quantized, plan = load_packed(args.packed)
    calibration = load_calibration(args.calibration, model)
    evaluation = pipeline.evaluate(model, quantized, calibration, toy_ppl=args.toy_ppl,
                                   seed=args.seed, ppl_sequences=args.ppl_sequences)
    totals = {key: value for key, value in evaluation.items() if key != "blocks"}
    totals["achieved_avg_bits"] = plan.achieved_avg_bits
    report = pipeline.RunReport(
        config={"toy_ppl": args.toy_ppl, "plan": plan.method, "ratio": plan.ratio_r},
        layers=[{"layer_id": f"blocks.{block['block']}", "reconstruction_error": block["error"],
                 "attention_error": block["attention_error"],
                 "feedforward_error": block["feedforward_error"]}
                for block in evaluation["blocks"]],
        totals=totals,
        wall_times={"evaluation": time.perf_counter() - start},
        seed=args.seed,
    )
    write_report(report, args)


def cmd_compare(args: argparse.Namespace) -> None:
    start = time.perf_counter()
    model = load_model(args.model)
    calibration = load_calibration(args.calibration, model)
    cfg = quant_config(args)
    rows = pipeline.compare(model, calibration, cfg, methods=args.methods, ratios=args.ratios,
                            seed=args.seed, toy_ppl=args.toy_ppl,
                            ppl_sequences=args.ppl_sequences)
    report = pipeline.RunReport(
        config={"methods": ",".join(args.methods),
                "ratios": ",".join(str(ratio) for ratio in args.ratios), **cfg.as_dict()},
        layers=rows,
        wall_times={"compare": time.perf_counter() - start},
        seed=args.seed,
    )
    write_report(report, args)


def _magic(path: Path) -> bytes:
    with path.open("rb") as file:
        return file.read(8)


def describe(path: Path) -> dict[str, Any]:
    """Summary of a model, calibration, or packed file, after verifying the checksums."""
    magic = _magic(path)
    if magic == MODEL_MAGIC:
        manifest, payload = read_model_manifest(path)
        verify_regions(((e.name, e.offset, e.nbytes, e.checksum) for e in manifest.tensors),
                       payload)
        return {"kind": "model", "format_version": manifest.format_version,
                **manifest.shape_dict(),
                "tensors": [(e.name, e.role, e.rows, e.cols, e.checksum)
                            for e in manifest.tensors]}
    elif magic == CALIBRATION_MAGIC:
        manifest_dict, entries, _ = read_calibration_manifest(path)
        return {"kind": "calibration", "format_version": manifest_dict["format_version"],
                "source": manifest_dict.get("source", ""), "segments": len(entries),
                "tokens_per_segment": entries[0].rows if entries else 0}
    elif magic == PACKED_MAGIC:
        manifest, tensors, _ = load_packed_tensors(path)
        return {"kind": "packed", "format_version": manifest["format_version"],
                **manifest["shape"], "plan": manifest["plan"]["method"],
                "achieved_avg_bits": manifest["plan"]["achieved_avg_bits"],
                "size": f"{storage_size(path.stat().st_size):~}",
                "layers": [(t.layer_id, t.bits, t.rows, t.cols, len(t.scales)) for t in tensors]}
    raise ManifestError(f"'{path}' is not an attnquant file.")


def cmd_inspect(args: argparse.Namespace) -> None:
    summary = describe(args.path)
    for key, value in summary.items():
        if isinstance(value, list):
            sys.stdout.write(f"{key}:\n")
            for item in value:
                sys.stdout.write("  " + "\t".join(str(part) for part in item) + "\n")
        else:
            sys.stdout.write(f"{key}: {value}\n")


COMMANDS = {
    "generate": cmd_generate,
    "sensitivity": cmd_sensitivity,
    "plan": cmd_plan,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose, args.quiet)
    try:
        COMMANDS[args.command](args)
    except (DefinitenessError, NumericError) as exc:
        log.error(f"Numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ShapeError, PlanError, StoreError, OSError, ValueError) as exc:
        log.error(f"Invalid input: {exc}")
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
