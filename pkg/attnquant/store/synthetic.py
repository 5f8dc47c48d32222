"""
Deterministic synthetic models and calibration sets for desk-scale experiments.

All randomness derives from one integer seed, split into named streams by
:class:`numpy.random.SeedSequence`, such that the consumers are independent of each other.
"""

from dataclasses import dataclass, field
import logging
from typing import Optional

import numpy as np

from ..model.transformer import (
    AttentionLayerWeights,
    AttentionShape,
    CalibrationBatch,
    FeedForwardWeights,
    ToyModel,
    TransformerBlock,
)
from .model_file import CalibrationSet


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


STREAMS = ("model", "calibration", "evaluation", "probes")


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return the generator of the named stream of `seed`.

    :param keys: further integers splitting the stream, for example a block index.
    """
    if name not in STREAMS:
        raise ValueError(f"Unknown random stream '{name}', valid are {STREAMS}.")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(STREAMS.index(name), *keys))
    return np.random.default_rng(sequence)


@dataclass(frozen=True)
class SyntheticConfig:
    """Geometry of a synthetic model and its calibration set.

    :param d_ff: feed-forward width, ``4 · d_model`` if not given.
    :param seq_len: tokens per calibration segment.
    :param segments: number of calibration segments.
    """

    d_model: int = 32
    heads: int = 4
    d_ff: Optional[int] = None
    blocks: int = 4
    seq_len: int = 32
    segments: int = 16
    vocab: int = 64
    seed: int = 0
    activation: str = "relu"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        AttentionShape(n=self.seq_len, d_model=self.d_model, heads=self.heads)
        if min(self.blocks, self.segments, self.vocab) < 1:
            raise ValueError("Blocks, segments and vocabulary size have to be positive.")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model


def random_attention(rng: np.random.Generator, d_model: int, heads: int
                     ) -> AttentionLayerWeights:
    """Attention weights with entries of standard deviation ``1/√d_model``."""
    std = 1 / np.sqrt(d_model)
    return AttentionLayerWeights(
        heads=heads,
        **{role: rng.normal(0.0, std, (d_model, d_model)) for role in ("wq", "wk", "wv", "wo")},
    )


def random_feedforward(rng: np.random.Generator, d_model: int, d_ff: int,
                       activation: str = "relu") -> FeedForwardWeights:
    return FeedForwardWeights(
        w1=rng.normal(0.0, 1 / np.sqrt(d_model), (d_model, d_ff)),
        w2=rng.normal(0.0, 1 / np.sqrt(d_ff), (d_ff, d_model)),
        activation=activation,
    )


def generate_model(config: SyntheticConfig) -> ToyModel:
    rng = rng_stream(config.seed, "model")
    blocks = [
        TransformerBlock(
            attention=random_attention(rng, config.d_model, config.heads),
            feedforward=random_feedforward(rng, config.d_model, config.ff_width,
                                           config.activation),
        )
        for _ in range(config.blocks)
    ]
    embedding = rng.normal(0.0, 1.0, (config.vocab, config.d_model))
    metadata = {"seed": config.seed, "generator": "synthetic",
                "logit_scale": float(1 / np.sqrt(config.d_model))}
    metadata.update(config.metadata)
    return ToyModel(blocks=blocks, embedding=embedding, heads=config.heads, metadata=metadata)


def generate_calibration(config: SyntheticConfig, model: ToyModel) -> CalibrationSet:
    """Embedded uniform random token segments entering the first block."""
    rng = rng_stream(config.seed, "calibration")
    tokens = rng.integers(0, config.vocab, size=(config.segments, config.seq_len))
    batches = [
        CalibrationBatch(model.embedding[segment], id=f"segment.{index}")
        for index, segment in enumerate(tokens)
    ]
    return CalibrationSet(batches=batches, source=f"synthetic({config.seed})")


def generate_synthetic(config: SyntheticConfig) -> tuple[ToyModel, CalibrationSet]:
    """Return a seeded model and calibration set, identical for identical configs."""
    model = generate_model(config)
    calibration = generate_calibration(config, model)
    log.info(
        f"Generated synthetic model with {config.blocks} blocks, d_model={config.d_model}, "
        f"{config.heads} heads, seed {config.seed}."
    )
    return model, calibration
