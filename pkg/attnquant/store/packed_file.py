"""
Packed quantized models.

Every quantized layer occupies one payload region: its group table followed by its code words.

- Group table: one record per column group, a little-endian float32 scale followed by an
  unsigned 8 bit zero point (5 bytes per group).
- Code words: little-endian uint32.
  Codes are taken group by group, column-major within each group, and each group starts a new
  word.
  Code ``i`` of a group sits at bit offset ``(i % per_word) · bits`` of word ``i // per_word``,
  16 codes per word at 2 bits, 8 codes per word at 4 bits.

Codes are stored in the quantizer orientation (``out × in``) and the embedding stays full
precision (float64).
"""

from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from ..errors import ManifestError, PlanError, StoreError
from ..model.transformer import ToyModel
from ..quantization.gptq import GroupQuantParams, QuantizedLayer
from ..quantization.hessian import SensitivityRecord
from ..quantization.planner import PrecisionPlan, average_bits
from .model_file import (
    FORMAT_VERSION,
    ModelManifest,
    PayloadBuilder,
    TensorEntry,
    model_from_matrices,
    parse_layer_name,
    read_container,
    read_matrix,
    verify_regions,
    write_container,
)


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


PACKED_MAGIC = b"AQPACK\x00\x00"
WORD_BITS = 32
WORD_DTYPE = np.dtype("<u4")
GROUP_DTYPE = np.dtype([("scale", "<f4"), ("zero", "u1")])


def codes_per_word(bits: int) -> int:
    if bits not in (2, 4):
        raise StoreError(f"Only 2 and 4 bit codes can be packed, got {bits}.")
    return WORD_BITS // bits


def group_count(cols: int, group_size: int) -> int:
    return math.ceil(cols / group_size)


def _pack_stream(values: np.ndarray, bits: int) -> np.ndarray:
    per_word = codes_per_word(bits)
    padded = np.zeros(math.ceil(values.size / per_word) * per_word, dtype=np.uint32)
    padded[: values.size] = values
    shifts = (np.arange(per_word, dtype=np.uint32) * bits).astype(np.uint32)
    return np.bitwise_or.reduce(padded.reshape(-1, per_word) << shifts, axis=1).astype(np.uint32)


def _unpack_stream(words: np.ndarray, bits: int, count: int) -> np.ndarray:
    per_word = codes_per_word(bits)
    shifts = (np.arange(per_word, dtype=np.uint32) * bits).astype(np.uint32)
    mask = np.uint32((1 << bits) - 1)
    values = (words.astype(np.uint32)[:, np.newaxis] >> shifts) & mask
    return values.reshape(-1)[:count]


def words_per_group(rows: int, group_cols: int, bits: int) -> int:
    return math.ceil(rows * group_cols / codes_per_word(bits))


def pack_codes(codes: np.ndarray, bits: int, group_size: int) -> np.ndarray:
    """Pack a code matrix into uint32 words.

    :raises StoreError: for codes outside ``[0, 2^bits − 1]``.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise StoreError(f"Codes have to be a matrix, got shape {codes.shape}.")
    if codes.size and (codes.min() < 0 or codes.max() > (1 << bits) - 1):
        raise StoreError(f"Codes outside of the {bits} bit range.")
    parts = []
    for begin in range(0, codes.shape[1], group_size):
        group = codes[:, begin:begin + group_size]
        parts.append(_pack_stream(group.reshape(-1, order="F").astype(np.uint32), bits))
    if not parts:
        return np.zeros(0, dtype=np.uint32)
    return np.concatenate(parts)


def unpack_codes(words: np.ndarray, bits: int, rows: int, cols: int, group_size: int
                 ) -> np.ndarray:
    """Inverse of :func:`pack_codes`."""
    words = np.asarray(words, dtype=np.uint32)
    codes = np.zeros((rows, cols), dtype=np.int64)
    position = 0
    for begin in range(0, cols, group_size):
        group_cols = min(group_size, cols - begin)
        count = words_per_group(rows, group_cols, bits)
        if position + count > words.size:
            raise StoreError("Not enough code words for the stated shape.")
        stream = _unpack_stream(words[position:position + count], bits, rows * group_cols)
        codes[:, begin:begin + group_cols] = stream.reshape(rows, group_cols, order="F")
        position += count
    if position != words.size:
        raise StoreError(f"{words.size - position} surplus code words.")
    return codes


@dataclass
class PackedTensor:
    """A quantized layer as stored in a packed file."""

    layer_id: str
    bits: int
    rows: int
    cols: int
    group_size: int
    words: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray

    @classmethod
    def from_layer(cls, layer: QuantizedLayer) -> "PackedTensor":
        return cls(
            layer_id=layer.layer_id,
            bits=layer.bits,
            rows=layer.rows,
            cols=layer.cols,
            group_size=layer.group_size,
            words=pack_codes(layer.codes, layer.bits, layer.group_size),
            scales=np.array([group.scale for group in layer.groups], dtype=np.float32),
            zero_points=np.array([group.zero_point for group in layer.groups], dtype=np.uint8),
        )

    def group_table(self) -> bytes:
        table = np.zeros(len(self.scales), dtype=GROUP_DTYPE)
        table["scale"] = self.scales
        table["zero"] = self.zero_points
        return table.tobytes()

    def codes(self) -> np.ndarray:
        return unpack_codes(self.words, self.bits, self.rows, self.cols, self.group_size)

    def to_layer(self) -> QuantizedLayer:
        return QuantizedLayer(
            codes=self.codes(),
            groups=[
                GroupQuantParams(scale=float(scale), zero_point=int(zero), group_index=index)
                for index, (scale, zero) in enumerate(zip(self.scales, self.zero_points))
            ],
            bits=self.bits,
            group_size=self.group_size,
            recon_error=float("nan"),
            layer_id=self.layer_id,
        )

    def dequantize(self) -> np.ndarray:
        """Weights in quantizer orientation (``out × in``)."""
        return self.to_layer().dequantize()


def _plan_dict(plan: PrecisionPlan) -> dict[str, Any]:
    return {
        "method": plan.method,
        "ratio_r": plan.ratio_r,
        "achieved_avg_bits": plan.achieved_avg_bits,
        "ranking": [
            {"layer_id": r.layer_id, "avg_trace": r.avg_trace, "param_count": r.param_count}
            for r in plan.ranking
        ],
    }


def save_packed(plan: PrecisionPlan, layers: Sequence[QuantizedLayer], path: Union[str, Path],
                model: ToyModel, metadata: Optional[dict[str, Any]] = None) -> int:
    """Write the quantized `layers` of `model` according to `plan`.

    :param model: the full precision model, supplying shape and embedding.
    :return: number of bytes written.
    :raises PlanError: if a planned layer is missing or its bits differ from the plan.
    """
    by_id = {layer.layer_id: layer for layer in layers}
    missing = sorted(set(plan.assignments) - set(by_id))
    if missing:
        raise PlanError(f"Quantized layers missing for {missing}.")
    unplanned = sorted(set(by_id) - set(plan.assignments))
    if unplanned:
        raise PlanError(f"Layers {unplanned} are not part of the plan.")
    builder = PayloadBuilder()
    embedding = builder.add_matrix("embedding", "embedding", model.embedding)
    entries = []
    for layer_id in sorted(by_id):
        layer = by_id[layer_id]
        if layer.bits != plan.assignments[layer_id]:
            raise PlanError(
                f"Layer '{layer_id}' has {layer.bits} bits, the plan demands "
                f"{plan.assignments[layer_id]}."
            )
        _, role = parse_layer_name(layer_id)
        packed = PackedTensor.from_layer(layer)
        table = packed.group_table()
        offset, nbytes, checksum = builder.add(table + packed.words.astype(WORD_DTYPE).tobytes())
        entries.append({
            "layer_id": layer_id,
            "role": role,
            "bits": layer.bits,
            "rows": layer.rows,
            "cols": layer.cols,
            "group_size": layer.group_size,
            "groups": len(layer.groups),
            "words": int(packed.words.size),
            "offset": offset,
            "nbytes": nbytes,
            "checksum": checksum,
        })
    shape = ModelManifest(
        d_model=model.d_model, heads=model.heads, d_ff=model.d_ff, blocks=len(model.blocks),
        vocab=model.vocab, tensors=[], activation=model.blocks[0].feedforward.activation,
    ).shape_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "packed",
        "shape": shape,
        "plan": _plan_dict(plan),
        "layers": entries,
        "tensors": [embedding.as_dict()],
        "metadata": metadata or {},
    }
    return write_container(path, PACKED_MAGIC, manifest, builder.payload())


def read_packed_manifest(path: Union[str, Path]) -> tuple[dict[str, Any], bytes]:
    manifest, payload = read_container(path, PACKED_MAGIC)
    if manifest.get("kind") != "packed":
        raise ManifestError(f"'{path}' does not contain a packed model.")
    return manifest, payload


def load_packed_tensors(path: Union[str, Path]
                        ) -> tuple[dict[str, Any], list[PackedTensor], np.ndarray]:
    """Return manifest, packed tensors (sorted by layer id), and the embedding."""
    manifest, payload = read_packed_manifest(path)
    try:
        layer_entries = manifest["layers"]
        embedding_entry = TensorEntry(**manifest["tensors"][0])
        regions = [(entry["layer_id"], entry["offset"], entry["nbytes"], entry["checksum"])
                   for entry in layer_entries]
    except (KeyError, IndexError, TypeError) as exc:
        raise ManifestError(f"Invalid packed manifest: {exc}") from exc
    regions.append((embedding_entry.name, embedding_entry.offset, embedding_entry.nbytes,
                    embedding_entry.checksum))
    verify_regions(regions, payload)
    tensors = []
    for entry in layer_entries:
        region = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        table_bytes = entry["groups"] * GROUP_DTYPE.itemsize
        if entry["groups"] != math.ceil(entry["cols"] / entry["group_size"]):
            raise ManifestError(f"Group count of '{entry['layer_id']}' does not fit its columns.")
        if len(region) != table_bytes + entry["words"] * WORD_DTYPE.itemsize:
            raise ManifestError(f"Region size of '{entry['layer_id']}' is inconsistent.")
        table = np.frombuffer(region[:table_bytes], dtype=GROUP_DTYPE)
        tensors.append(PackedTensor(
            layer_id=entry["layer_id"],
            bits=int(entry["bits"]),
            rows=int(entry["rows"]),
            cols=int(entry["cols"]),
            group_size=int(entry["group_size"]),
            words=np.frombuffer(region[table_bytes:], dtype=WORD_DTYPE).astype(np.uint32),
            scales=table["scale"].astype(np.float32),
            zero_points=table["zero"].astype(np.uint8),
        ))
    return manifest, tensors, read_matrix(embedding_entry, payload)


def load_packed(path: Union[str, Path]) -> tuple[ToyModel, PrecisionPlan]:
    """Load a packed file as dequantized model and its precision plan."""
    manifest, tensors, embedding = load_packed_tensors(path)
    shape = manifest["shape"]
    matrices = {tensor.layer_id: tensor.dequantize().T for tensor in tensors}
    matrices["embedding"] = embedding
    try:
        model_manifest = ModelManifest(
            d_model=int(shape["d_model"]), heads=int(shape["heads"]), d_ff=int(shape["d_ff"]),
            blocks=int(shape["blocks"]), vocab=int(shape["vocab"]),
            activation=str(shape.get("activation", "relu")), tensors=[],
            metadata=dict(manifest.get("metadata", {})),
        )
        model = model_from_matrices(model_manifest, matrices)
    except KeyError as exc:
        raise ManifestError(f"Packed file lacks tensor {exc}.") from exc
    plan_dict = manifest.get("plan", {})
    assignments = {tensor.layer_id: tensor.bits for tensor in tensors}
    counts = {tensor.layer_id: tensor.rows * tensor.cols for tensor in tensors}
    plan = PrecisionPlan(
        assignments=assignments,
        ratio_r=float(plan_dict.get("ratio_r", 0.0)),
        achieved_avg_bits=average_bits(assignments, counts),
        ranking=[SensitivityRecord(**record) for record in plan_dict.get("ranking", [])],
        param_counts=counts,
        method=str(plan_dict.get("method", "")),
    )
    log.debug(f"Loaded packed model '{path}' with {len(tensors)} quantized layers.")
    return model, plan
