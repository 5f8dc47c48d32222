from dataclasses import replace

import numpy as np
import pytest

from attnquant.errors import ChecksumError, FormatVersionError, PlanError, StoreError
from attnquant.quantization.gptq import QuantConfig
from attnquant.quantization.planner import uniform_plan
from attnquant.store.model_file import read_container, write_container
from attnquant.store.packed_file import (
    GROUP_DTYPE,
    PACKED_MAGIC,
    PackedTensor,
    load_packed,
    load_packed_tensors,
    pack_codes,
    save_packed,
    unpack_codes,
)
from attnquant.store.synthetic import SyntheticConfig, generate_synthetic
from attnquant.tools.pipeline import layer_ids, param_counts, quantize_model


class Test_pack_codes:
    def test_word_layout(self):
        words = pack_codes(np.arange(8).reshape(1, 8), bits=4, group_size=8)
        assert words.tolist() == [0x76543210]

    def test_column_major(self):
        words = pack_codes(np.array([[1, 3], [2, 0]]), bits=4, group_size=2)
        assert words.tolist() == [0x0321]

    def test_two_bit_zeros(self):
        words = pack_codes(np.zeros((4, 8), dtype=int), bits=2, group_size=8)
        assert words.tolist() == [0, 0]

    def test_groups_start_new_words(self):
        words = pack_codes(np.full((2, 3), 15), bits=4, group_size=2)
        assert words.tolist() == [0xFFFF, 0xFF]

    def test_out_of_range(self):
        with pytest.raises(StoreError):
            pack_codes(np.array([[4]]), bits=2, group_size=1)

    def test_unsupported_bits(self):
        with pytest.raises(StoreError):
            pack_codes(np.array([[1]]), bits=3, group_size=1)

    def test_random_round_trips(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            bits = int(rng.choice([2, 4]))
            rows, cols = rng.integers(1, 10), rng.integers(1, 21)
            group_size = int(rng.integers(1, cols + 4))
            codes = rng.integers(0, 1 << bits, size=(rows, cols))
            words = pack_codes(codes, bits, group_size)
            assert np.array_equal(unpack_codes(words, bits, rows, cols, group_size), codes)

    def test_surplus_words(self):
        with pytest.raises(StoreError):
            unpack_codes(np.zeros(3, dtype=np.uint32), 4, 1, 8, 8)


def test_group_record_size():
    assert GROUP_DTYPE.itemsize == 5


class Test_packed_file:
    @pytest.fixture
    def quantized(self):
        model, _ = generate_synthetic(SyntheticConfig(d_model=8, heads=2, blocks=1, seq_len=4,
                                                      segments=2, vocab=10, seed=3))
        plan = uniform_plan(layer_ids(model), 2, param_counts(model))
        cfg = QuantConfig(group_size=4)
        return model, plan, quantize_model(model, {}, plan, cfg, method="rtn")

    @pytest.fixture
    def path(self, tmp_path, quantized):
        model, plan, result = quantized
        path = tmp_path / "model.aqp"
        save_packed(plan, result.layers, path, model)
        return path

    def test_codes_survive(self, path, quantized):
        _, _, result = quantized
        _, tensors, _ = load_packed_tensors(path)
        assert [tensor.layer_id for tensor in tensors] == sorted(layer.layer_id
                                                                 for layer in result.layers)
        for tensor, layer in zip(tensors, result.layers):
            assert np.array_equal(tensor.codes(), layer.codes)
            assert [int(zero) for zero in tensor.zero_points] == [g.zero_point
                                                                  for g in layer.groups]

    def test_dequantized_model(self, path, quantized):
        model, plan, result = quantized
        loaded, loaded_plan = load_packed(path)
        assert loaded_plan.assignments == plan.assignments
        assert loaded_plan.achieved_avg_bits == 2.0
        assert np.array_equal(loaded.embedding, model.embedding)
        assert np.allclose(loaded.blocks[0].attention.wv, result.model.blocks[0].attention.wv,
                           rtol=1e-6, atol=1e-7)
        assert np.allclose(loaded.blocks[0].feedforward.w1, result.model.blocks[0].feedforward.w1,
                           rtol=1e-6, atol=1e-7)

    def test_values_on_grid(self, path):
        _, tensors, _ = load_packed_tensors(path)
        for tensor in tensors:
            values = tensor.dequantize()
            for column in range(tensor.cols):
                group = column // tensor.group_size
                scale = np.float64(tensor.scales[group])
                assert np.array_equal(
                    values[:, column],
                    (tensor.codes()[:, column] - int(tensor.zero_points[group])) * scale,
                )

    def test_deterministic(self, tmp_path, path, quantized):
        model, plan, result = quantized
        other = tmp_path / "other.aqp"
        save_packed(plan, result.layers, other, model)
        assert other.read_bytes() == path.read_bytes()

    def test_packed_tensor_matches_layer(self, quantized):
        _, _, result = quantized
        layer = result.layers[0]
        packed = PackedTensor.from_layer(layer)
        assert packed.words.size == sum(
            -(-layer.rows * min(4, layer.cols - begin) // 16)
            for begin in range(0, layer.cols, 4)
        )

    def test_missing_layer(self, tmp_path, quantized):
        model, plan, result = quantized
        with pytest.raises(PlanError):
            save_packed(plan, result.layers[1:], tmp_path / "x.aqp", model)

    def test_bits_mismatch(self, tmp_path, quantized):
        model, plan, result = quantized
        plan = replace(plan, assignments={**plan.assignments, result.layers[0].layer_id: 4})
        with pytest.raises(PlanError):
            save_packed(plan, result.layers, tmp_path / "x.aqp", model)

    def test_unknown_version(self, path):
        manifest, payload = read_container(path, PACKED_MAGIC)
        manifest["format_version"] = 7
        write_container(path, PACKED_MAGIC, manifest, payload)
        with pytest.raises(FormatVersionError):
            load_packed(path)

    def test_corrupt_payload(self, path):
        content = bytearray(path.read_bytes())
        content[-1] ^= 0x01
        path.write_bytes(bytes(content))
        with pytest.raises(ChecksumError):
            load_packed(path)
