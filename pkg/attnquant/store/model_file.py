"""
Full precision model files and calibration set files.

Layout of every file written by this package::

    magic (8 bytes) | manifest length (uint32, little-endian) | manifest (UTF-8 JSON) | payload

The manifest is JSON with sorted keys and holds a tensor table.
Each tensor entry names its payload region (``offset``, ``nbytes``, relative to the payload
start) and the 64 bit FNV-1a checksum of that region.
Tensors are stored as little-endian float64, row-major.
"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct
from typing import Any, Iterable, Optional, Union

import numpy as np

from ..errors import ChecksumError, FormatVersionError, ManifestError, ShapeError
from ..linalg.dense import DenseMatrix
from ..model.transformer import (
    AttentionLayerWeights,
    AttentionShape,
    CalibrationBatch,
    FeedForwardWeights,
    ToyModel,
    TransformerBlock,
)
from .checksum import hex_digest


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


FORMAT_VERSION = 1
MODEL_MAGIC = b"AQMODEL\x00"
CALIBRATION_MAGIC = b"AQCALIB\x00"
LENGTH_FORMAT = "<I"
FLOAT_DTYPE = np.dtype("<f8")

ATTENTION_ROLES = ("wq", "wk", "wv", "wo")
FEEDFORWARD_ROLES = ("ffn1", "ffn2")
WEIGHT_ROLES = ATTENTION_ROLES + FEEDFORWARD_ROLES


def layer_name(block: int, role: str) -> str:
    """Name of a weight matrix in files, also used as layer id."""
    return f"blocks.{block}.{role}"


def parse_layer_name(name: str) -> tuple[int, str]:
    try:
        prefix, block, role = name.split(".")
        if prefix != "blocks" or role not in WEIGHT_ROLES:
            raise ValueError
        return int(block), role
    except ValueError:
        raise ManifestError(f"'{name}' is not a valid layer name.") from None


@dataclass
class TensorEntry:
    """Entry of the tensor table."""

    name: str
    role: str
    rows: int
    cols: int
    offset: int
    nbytes: int
    checksum: str

    @property
    def end(self) -> int:
        return self.offset + self.nbytes

    def as_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class ModelManifest:
    """Shape and tensor table of a model file."""

    d_model: int
    heads: int
    d_ff: int
    blocks: int
    vocab: int
    tensors: list[TensorEntry]
    activation: str = "relu"
    format_version: int = FORMAT_VERSION
    metadata: dict[str, Any] = field(default_factory=dict)

    def shape_for(self, n: int) -> AttentionShape:
        return AttentionShape(n=n, d_model=self.d_model, heads=self.heads)

    def shape_dict(self) -> dict[str, Any]:
        return {
            "d_model": self.d_model,
            "heads": self.heads,
            "d_ff": self.d_ff,
            "blocks": self.blocks,
            "vocab": self.vocab,
            "activation": self.activation,
        }

    def as_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "kind": "model",
            "shape": self.shape_dict(),
            "tensors": [entry.as_dict() for entry in self.tensors],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, manifest: dict[str, Any]) -> "ModelManifest":
        try:
            shape = manifest["shape"]
            result = cls(
                d_model=int(shape["d_model"]),
                heads=int(shape["heads"]),
                d_ff=int(shape["d_ff"]),
                blocks=int(shape["blocks"]),
                vocab=int(shape["vocab"]),
                activation=str(shape.get("activation", "relu")),
                tensors=[TensorEntry(**entry) for entry in manifest["tensors"]],
                format_version=int(manifest["format_version"]),
                metadata=dict(manifest.get("metadata", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"Invalid model manifest: {exc}") from exc
        result.check_shape()
        return result

    def check_shape(self) -> None:
        """Cross-validate the shape against the tensor table.

        :raises ShapeError: on any inconsistency.
        """
        self.shape_for(1)
        if self.blocks < 1 or self.vocab < 1 or self.d_ff < 1:
            raise ShapeError("Blocks, vocabulary and feed-forward width have to be positive.")
        expected = {"embedding": (self.vocab, self.d_model)}
        for block in range(self.blocks):
            for role in ATTENTION_ROLES:
                expected[layer_name(block, role)] = (self.d_model, self.d_model)
            expected[layer_name(block, "ffn1")] = (self.d_model, self.d_ff)
            expected[layer_name(block, "ffn2")] = (self.d_ff, self.d_model)
        found = {entry.name: (entry.rows, entry.cols) for entry in self.tensors}
        if found.keys() != expected.keys():
            missing = sorted(expected.keys() - found.keys())
            extra = sorted(found.keys() - expected.keys())
            raise ShapeError(f"Tensor table mismatch, missing {missing}, unexpected {extra}.")
        for name, shape in expected.items():
            if found[name] != shape:
                raise ShapeError(f"Tensor '{name}' has shape {found[name]}, expected {shape}.")


def write_container(path: Union[str, Path], magic: bytes, manifest: dict[str, Any],
                    payload: bytes) -> int:
    """Write magic, manifest and payload, return the number of bytes written."""
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    content = magic + struct.pack(LENGTH_FORMAT, len(header)) + header + payload
    Path(path).write_bytes(content)
    log.info(f"Wrote {len(content)} bytes to '{path}'.")
    return len(content)


def read_container(path: Union[str, Path], magic: bytes) -> tuple[dict[str, Any], bytes]:
    """Return manifest and payload of a file.

    :raises ManifestError: if the file is not of the expected kind or the manifest is corrupt.
    :raises FormatVersionError: for an unknown format version.
    """
    content = Path(path).read_bytes()
    prefix = len(magic) + struct.calcsize(LENGTH_FORMAT)
    if len(content) < prefix or content[: len(magic)] != magic:
        raise ManifestError(f"'{path}' is not a {magic.rstrip(bytes(1)).decode()} file.")
    (length,) = struct.unpack(LENGTH_FORMAT, content[len(magic):prefix])
    if prefix + length > len(content):
        raise ManifestError(f"Manifest of '{path}' is truncated.")
    try:
        manifest = json.loads(content[prefix:prefix + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"Manifest of '{path}' does not parse: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError(f"Manifest of '{path}' is not a mapping.")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"'{path}' has format version {version}, only {FORMAT_VERSION} is supported."
        )
    return manifest, content[prefix + length:]


def verify_regions(regions: Iterable[tuple[str, int, int, str]], payload: bytes) -> None:
    """Check that payload regions do not overlap and match their checksums.

    :param regions: (name, offset, nbytes, checksum) per region.
    :raises ChecksumError: naming the first (by offset) bad region.
    """
    position = 0
    for name, offset, nbytes, checksum in sorted(regions, key=lambda region: region[1]):
        if offset < position or nbytes < 0:
            raise ManifestError(f"Region of '{name}' overlaps the previous one.")
        position = offset + nbytes
        if position > len(payload):
            raise ChecksumError(f"Payload of '{name}' is truncated.", name=name)
        if hex_digest(payload[offset:position]) != checksum:
            raise ChecksumError(f"Checksum mismatch of '{name}'.", name=name)


class PayloadBuilder:
    """Collect tensor regions of a payload."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []
        self.size = 0

    def add(self, data: bytes) -> tuple[int, int, str]:
        """Append `data`, return offset, length and checksum."""
        offset = self.size
        self._parts.append(data)
        self.size += len(data)
        return offset, len(data), hex_digest(data)

    def add_matrix(self, name: str, role: str, matrix: DenseMatrix) -> TensorEntry:
        matrix = np.ascontiguousarray(matrix, dtype=FLOAT_DTYPE)
        offset, nbytes, checksum = self.add(matrix.tobytes())
        return TensorEntry(name=name, role=role, rows=matrix.shape[0], cols=matrix.shape[1],
                           offset=offset, nbytes=nbytes, checksum=checksum)

    def payload(self) -> bytes:
        return b"".join(self._parts)


def read_matrix(entry: TensorEntry, payload: bytes) -> DenseMatrix:
    if entry.nbytes != entry.rows * entry.cols * FLOAT_DTYPE.itemsize:
        raise ManifestError(f"Size of '{entry.name}' does not match its shape.")
    region = payload[entry.offset:entry.end]
    return np.frombuffer(region, dtype=FLOAT_DTYPE).reshape(entry.rows, entry.cols).astype(
        np.float64
    )


def model_matrices(model: ToyModel) -> list[tuple[str, str, DenseMatrix]]:
    """(name, role, matrix) of all tensors in file order."""
    matrices = [("embedding", "embedding", model.embedding)]
    for index, block in enumerate(model.blocks):
        for role in ATTENTION_ROLES:
            matrices.append((layer_name(index, role), role, getattr(block.attention, role)))
        matrices.append((layer_name(index, "ffn1"), "ffn1", block.feedforward.w1))
        matrices.append((layer_name(index, "ffn2"), "ffn2", block.feedforward.w2))
    return matrices


def model_from_matrices(manifest: ModelManifest, matrices: dict[str, DenseMatrix]) -> ToyModel:
    blocks = []
    for index in range(manifest.blocks):
        attention = AttentionLayerWeights(
            heads=manifest.heads,
            **{role: matrices[layer_name(index, role)] for role in ATTENTION_ROLES},
        )
        feedforward = FeedForwardWeights(
            w1=matrices[layer_name(index, "ffn1")],
            w2=matrices[layer_name(index, "ffn2")],
            activation=manifest.activation,
        )
        blocks.append(TransformerBlock(attention=attention, feedforward=feedforward))
    return ToyModel(blocks=blocks, embedding=matrices["embedding"], heads=manifest.heads,
                    metadata=dict(manifest.metadata))


def build_manifest(model: ToyModel, builder: PayloadBuilder) -> ModelManifest:
    if not model.blocks:
        raise ShapeError("A model needs at least one block.")
    tensors = [builder.add_matrix(name, role, matrix)
               for name, role, matrix in model_matrices(model)]
    manifest = ModelManifest(
        d_model=model.d_model,
        heads=model.heads,
        d_ff=model.d_ff,
        blocks=len(model.blocks),
        vocab=model.vocab,
        activation=model.blocks[0].feedforward.activation,
        tensors=tensors,
        metadata=dict(model.metadata),
    )
    manifest.check_shape()
    return manifest


def save_model(model: ToyModel, path: Union[str, Path]) -> ModelManifest:
    """Write `model` to `path`, byte-identical for identical models."""
    builder = PayloadBuilder()
    manifest = build_manifest(model, builder)
    write_container(path, MODEL_MAGIC, manifest.as_dict(), builder.payload())
    return manifest


def read_model_manifest(path: Union[str, Path]) -> tuple[ModelManifest, bytes]:
    manifest_dict, payload = read_container(path, MODEL_MAGIC)
    if manifest_dict.get("kind") != "model":
        raise ManifestError(f"'{path}' does not contain a model.")
    return ModelManifest.from_dict(manifest_dict), payload


def load_model(path: Union[str, Path]) -> ToyModel:
    """Load a model file, verifying checksums and shapes.

    :raises ChecksumError: naming the first corrupt tensor.
    """
    manifest, payload = read_model_manifest(path)
    verify_regions(
        ((entry.name, entry.offset, entry.nbytes, entry.checksum) for entry in manifest.tensors),
        payload,
    )
    matrices = {entry.name: read_matrix(entry, payload) for entry in manifest.tensors}
    log.debug(f"Loaded model '{path}' with {manifest.blocks} blocks.")
    return model_from_matrices(manifest, matrices)


@dataclass
class CalibrationSet:
    """Calibration activations entering the first block.

    :param source: "synthetic(<seed>)" or "file(<path>)".
    """

    batches: list[CalibrationBatch]
    source: str = ""

    @property
    def n_segments(self) -> int:
        return len(self.batches)

    @property
    def tokens_per_segment(self) -> int:
        return self.batches[0].x.shape[0] if self.batches else 0

    @property
    def d_model(self) -> int:
        return self.batches[0].x.shape[1] if self.batches else 0

    def check_model(self, model: ToyModel) -> None:
        """Check, that every batch fits the model width."""
        for batch in self.batches:
            if batch.x.shape != (self.tokens_per_segment, model.d_model):
                raise ShapeError(
                    f"Calibration batch '{batch.id}' of shape {batch.x.shape} does not fit "
                    f"d_model={model.d_model}."
                )


def save_calibration(calibration: CalibrationSet, path: Union[str, Path]) -> int:
    builder = PayloadBuilder()
    entries = [builder.add_matrix(batch.id or f"segment.{index}", "calibration", batch.x)
               for index, batch in enumerate(calibration.batches)]
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration",
        "source": calibration.source,
        "tensors": [entry.as_dict() for entry in entries],
    }
    return write_container(path, CALIBRATION_MAGIC, manifest, builder.payload())


def read_calibration_manifest(path: Union[str, Path]
                              ) -> tuple[dict[str, Any], list[TensorEntry], bytes]:
    """Return manifest, verified tensor entries, and payload of a calibration file."""
    manifest, payload = read_container(path, CALIBRATION_MAGIC)
    if manifest.get("kind") != "calibration":
        raise ManifestError(f"'{path}' does not contain a calibration set.")
    try:
        entries = [TensorEntry(**entry) for entry in manifest["tensors"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"Invalid calibration manifest: {exc}") from exc
    verify_regions(((e.name, e.offset, e.nbytes, e.checksum) for e in entries), payload)
    return manifest, entries, payload


def load_calibration(path: Union[str, Path], model: Optional[ToyModel] = None
                     ) -> CalibrationSet:
    """Load a calibration file, optionally checking it against `model`."""
    manifest, entries, payload = read_calibration_manifest(path)
    calibration = CalibrationSet(
        batches=[CalibrationBatch(read_matrix(entry, payload), id=entry.name) for entry in entries],
        source=str(manifest.get("source") or f"file({Path(path).as_posix()})"),
    )
    if model is not None:
        calibration.check_model(model)
    return calibration
