from dataclasses import replace
import logging

import numpy as np
import pytest

from attnquant.errors import DefinitenessError, PlanError
from attnquant.linalg.dense import relative_frobenius
from attnquant.model.transformer import block_forward
from attnquant.quantization.gptq import QuantConfig
from attnquant.quantization.hessian import HessianState
from attnquant.store.model_file import CalibrationSet
from attnquant.store.synthetic import SyntheticConfig, generate_synthetic
from attnquant.tools import pipeline


CONFIG = SyntheticConfig(d_model=8, heads=2, blocks=2, seq_len=6, segments=4, vocab=16, seed=2)


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(CONFIG)


@pytest.fixture(scope="module")
def cfg() -> QuantConfig:
    return QuantConfig(group_size=4, block_size=4)


@pytest.fixture(scope="module")
def hessians(synthetic, cfg):
    model, calibration = synthetic
    return pipeline.collect_hessians(model, calibration, cfg)


class Test_layers:
    def test_layer_ids(self, synthetic):
        ids = pipeline.layer_ids(synthetic[0])
        assert len(ids) == 12
        assert ids == sorted(ids)
        assert "blocks.1.ffn2" in ids

    def test_param_counts(self, synthetic):
        counts = pipeline.param_counts(synthetic[0])
        assert counts["blocks.0.wq"] == 64
        assert counts["blocks.0.ffn1"] == counts["blocks.0.ffn2"] == 256

    def test_block_groups(self, synthetic):
        groups = pipeline.block_layer_groups(synthetic[0])
        assert groups[1] == ["blocks.1.wq", "blocks.1.wk", "blocks.1.wv", "blocks.1.wo",
                             "blocks.1.ffn1", "blocks.1.ffn2"]


class Test_propagate_calibration:
    def test_full_precision_stream(self, synthetic):
        model, calibration = synthetic
        activations = pipeline.propagate_calibration(model, calibration)
        x = calibration.batches[1].x
        h, y = block_forward(model.blocks[0], x, causal=True)
        assert np.array_equal(activations[0].inputs[1], x)
        assert np.allclose(activations[0].hidden[1], h)
        assert np.allclose(activations[1].inputs[1], y)

    def test_empty(self, synthetic):
        with pytest.raises(PlanError):
            pipeline.propagate_calibration(synthetic[0], CalibrationSet([]))


class Test_collect_hessians:
    def test_keys(self, synthetic, hessians):
        assert list(hessians) == pipeline.layer_ids(synthetic[0])
        assert all(state.nsamples == 4 for state in hessians.values())
        assert hessians["blocks.0.ffn2"].dim == 32

    def test_workers_do_not_matter(self, synthetic, cfg, hessians):
        model, calibration = synthetic
        threaded = pipeline.collect_hessians(model, calibration, replace(cfg, workers=3))
        for layer_id, state in hessians.items():
            assert np.array_equal(threaded[layer_id].h, state.h)

    def test_layerwise_inputs(self, synthetic, cfg):
        model, calibration = synthetic
        layerwise = pipeline.collect_hessians(model, calibration, replace(cfg, mode="layerwise"))
        expected = np.mean([2 * batch.x.T @ batch.x for batch in calibration.batches], axis=0)
        assert relative_frobenius(layerwise["blocks.0.wq"].h, expected) < 1e-12
        assert np.array_equal(layerwise["blocks.0.wq"].h, layerwise["blocks.0.wv"].h)

    def test_modes_agree_where_the_formula_is_shared(self, synthetic, cfg, hessians):
        model, calibration = synthetic
        layerwise = pipeline.collect_hessians(model, calibration, replace(cfg, mode="layerwise"))
        for block in range(2):
            for role in ("ffn1", "ffn2"):
                layer_id = f"blocks.{block}.{role}"
                assert np.array_equal(layerwise[layer_id].h, hessians[layer_id].h)
            # the identity seed reduces W^O to its effective input for n ≤ d_model
            layer_id = f"blocks.{block}.wo"
            assert relative_frobenius(hessians[layer_id].h, layerwise[layer_id].h) < 1e-10

    def test_gaussian_probes_are_seeded(self, synthetic, cfg):
        model, calibration = synthetic
        gaussian = replace(cfg, seed_kind="gaussian", probes=2)
        first = pipeline.collect_hessians(model, calibration, gaussian, seed=5)
        second = pipeline.collect_hessians(model, calibration, gaussian, seed=5)
        other = pipeline.collect_hessians(model, calibration, gaussian, seed=6)
        assert np.array_equal(first["blocks.1.wq"].h, second["blocks.1.wq"].h)
        assert not np.array_equal(first["blocks.1.wq"].h, other["blocks.1.wq"].h)

    def test_sensitivity_records(self, hessians):
        records = pipeline.sensitivity(hessians)
        assert [record.layer_id for record in records] == list(hessians)
        assert all(record.avg_trace > 0 for record in records)


class Test_make_plan:
    def test_trace(self, synthetic, hessians):
        plan = pipeline.make_plan(synthetic[0], pipeline.sensitivity(hessians), ratio=1.0)
        assert plan.achieved_avg_bits == 4.0

    def test_uniform(self, synthetic, hessians):
        plan = pipeline.make_plan(synthetic[0], [], "uniform", bits=2)
        assert set(plan.assignments.values()) == {2}

    def test_manual(self, synthetic, hessians):
        plan = pipeline.make_plan(synthetic[0], pipeline.sensitivity(hessians),
                                  "manual-blockwise", ratio=0.5)
        assert plan.bits_for("blocks.0.ffn2") == 4
        assert plan.bits_for("blocks.1.wq") == 2

    def test_needs_ratio(self, synthetic, hessians):
        with pytest.raises(PlanError):
            pipeline.make_plan(synthetic[0], pipeline.sensitivity(hessians))

    def test_needs_bits(self, synthetic):
        with pytest.raises(PlanError):
            pipeline.make_plan(synthetic[0], [], "uniform")


class Test_quantize_model:
    @pytest.fixture(scope="class")
    def plan(self, synthetic, hessians):
        return pipeline.make_plan(synthetic[0], pipeline.sensitivity(hessians), ratio=0.5)

    def test_layers_follow_plan(self, synthetic, hessians, plan, cfg):
        result = pipeline.quantize_model(synthetic[0], hessians, plan, cfg)
        assert [layer.layer_id for layer in result.layers] == sorted(plan.assignments)
        for layer in result.layers:
            assert layer.bits == plan.assignments[layer.layer_id]
        wq = next(layer for layer in result.layers if layer.layer_id == "blocks.0.wq")
        assert np.array_equal(result.model.blocks[0].attention.wq, wq.dequantize().T)
        total = sum(layer.recon_error for layer in result.layers)
        assert result.proxy_error == pytest.approx(total)

    def test_threads_do_not_matter(self, synthetic, hessians, plan, cfg):
        single = pipeline.quantize_model(synthetic[0], hessians, plan, cfg)
        threaded = pipeline.quantize_model(synthetic[0], hessians, plan, replace(cfg, workers=4))
        for first, second in zip(single.layers, threaded.layers):
            assert np.array_equal(first.codes, second.codes)

    def test_rtn_proxy_not_better(self, synthetic, hessians, plan, cfg):
        gptq = pipeline.quantize_model(synthetic[0], hessians, plan, cfg)
        rtn = pipeline.quantize_model(synthetic[0], hessians, plan, cfg, method="rtn")
        assert rtn.proxy_error >= gptq.proxy_error

    def test_missing_hessian(self, synthetic, hessians, plan, cfg):
        partial = {key: value for key, value in hessians.items() if key != "blocks.0.wk"}
        with pytest.raises(PlanError):
            pipeline.quantize_model(synthetic[0], partial, plan, cfg)

    def test_original_untouched(self, synthetic, hessians, plan, cfg):
        model = synthetic[0]
        before = model.blocks[0].attention.wq.copy()
        pipeline.quantize_model(model, hessians, plan, cfg)
        assert np.array_equal(model.blocks[0].attention.wq, before)


class Test_damping_retries:
    @pytest.fixture
    def state(self) -> HessianState:
        return HessianState(dim=2, h=np.diag([1.0, -0.5]), nsamples=1, layer_id="blocks.0.wq")

    def test_recovers(self, state, caplog):
        caplog.set_level(logging.WARNING, logger="attnquant")
        layer = pipeline._quantize_with_retries(np.ones((3, 2)), state, QuantConfig(bits=4))
        assert layer.layer_id == "blocks.0.wq"
        assert "Retry 3" in caplog.text

    def test_gives_up(self, state):
        with pytest.raises(DefinitenessError):
            pipeline._quantize_with_retries(np.ones((3, 2)), state,
                                            QuantConfig(bits=4, damp_retries=2))


class Test_evaluate:
    def test_identical_models(self, synthetic):
        model, calibration = synthetic
        evaluation = pipeline.evaluate(model, model, calibration)
        assert evaluation["reconstruction_error"] == 0
        assert [block["block"] for block in evaluation["blocks"]] == [0, 1]
        assert "ppl_original" not in evaluation

    def test_toy_perplexity(self, synthetic):
        model, calibration = synthetic
        evaluation = pipeline.evaluate(model, model, calibration, toy_ppl=True, ppl_sequences=2,
                                       ppl_length=4)
        assert evaluation["ppl_quantized"] == evaluation["ppl_original"]
        assert evaluation["ppl_original"] > 1

    def test_shape_mismatch(self, synthetic):
        model, calibration = synthetic
        other, _ = generate_synthetic(replace(CONFIG, blocks=1))
        with pytest.raises(PlanError):
            pipeline.evaluate(model, other, calibration)


class Test_run_quantization:
    @pytest.fixture(scope="class")
    def run(self, synthetic, cfg):
        model, calibration = synthetic
        return pipeline.run_quantization(model, calibration, cfg, ratio=0.75, seed=3)

    def test_report(self, run):
        result, report = run
        records = report.records()
        assert records[0]["record"] == "config"
        assert records[0]["seed"] == 3
        assert records[-1]["record"] == "totals"
        assert len([r for r in records if r["record"] == "layer"]) == 12
        assert report.totals["achieved_avg_bits"] == pytest.approx(result.plan.achieved_avg_bits)
        assert report.totals["proxy_error"] == pytest.approx(result.proxy_error)
        assert not any("wall" in key for record in records for key in record)

    def test_report_deterministic(self, run, synthetic, cfg):
        model, calibration = synthetic
        _, again = pipeline.run_quantization(model, calibration, cfg, ratio=0.75, seed=3)
        assert again.records() == run[1].records()

    def test_text(self, run):
        text = run[1].text()
        assert text.startswith("seed: 3\n")
        assert "blocks.0.ffn1" in text
        assert "wall time hessians" in text

    def test_layer_errors_are_true_errors(self, run):
        for layer in run[1].layers:
            assert layer["reconstruction_error"] >= 0

    def test_given_plan(self, synthetic, cfg):
        model, calibration = synthetic
        plan = pipeline.make_plan(model, [], "uniform", bits=4)
        result, report = pipeline.run_quantization(model, calibration, cfg, plan=plan)
        assert result.plan is plan
        assert report.totals["achieved_avg_bits"] == 4.0


class Test_compare:
    def test_grid(self, synthetic, cfg):
        model, calibration = synthetic
        rows = pipeline.compare(model, calibration, cfg, ratios=(0.5, 1.0))
        assert [(row["ratio"], row["method"]) for row in rows] == [
            (ratio, method) for ratio in (0.5, 1.0) for method in pipeline.METHODS
        ]
        at_full = {row["method"]: row for row in rows if row["ratio"] == 1.0}
        assert at_full["aptq"]["achieved_avg_bits"] == 4.0
        # all layers at 4 bit: both planners give the same plan
        assert (at_full["aptq"]["reconstruction_error"]
                == at_full["manual-blockwise"]["reconstruction_error"])

    def test_rtn_proxy(self, synthetic, cfg):
        model, calibration = synthetic
        rows = pipeline.compare(model, calibration, cfg, methods=("aptq", "rtn"), ratios=(0.5,))
        assert rows[1]["proxy_error"] >= rows[0]["proxy_error"]

    def test_unknown_method(self, synthetic, cfg):
        with pytest.raises(PlanError):
            pipeline.compare(*synthetic, cfg, methods=("other",))
