"""
Minimal multi-head self-attention and feed-forward blocks.

The attention block computes ``F(W, X) = MultiHead(Q, K, V)`` with queries, keys, and values all
derived from the same input ``X`` (self-attention).
No rotary embeddings, dropout, or normalization happen inside ``F``.
"""

from dataclasses import dataclass, field
import logging
from typing import Callable, Union

import numpy as np

from ..errors import ShapeError
from ..linalg.dense import DenseMatrix, as_matrix, check_finite, softmax_rows


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda values: np.maximum(values, 0.0),
    "identity": lambda values: values,
}


@dataclass(frozen=True)
class AttentionShape:
    """Geometry of an attention block.

    :param n: sequence length in tokens.
    :param d_model: model width.
    :param heads: number of heads.
    """

    n: int
    d_model: int
    heads: int

    def __post_init__(self) -> None:
        if min(self.n, self.d_model, self.heads) < 1:
            raise ShapeError(f"All counts of {self} have to be at least 1.")
        if self.d_model % self.heads:
            raise ShapeError(
                f"d_model={self.d_model} is not divisible by the number of heads {self.heads}."
            )

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @property
    def d_v(self) -> int:
        return self.d_k


@dataclass
class AttentionLayerWeights:
    """The four projection matrices of an attention block, each ``d_model × d_model``.

    ``wq``, ``wk``, ``wv`` are partitioned by columns into head slices of width ``d_k``,
    ``wo`` is partitioned by rows.
    """

    wq: DenseMatrix
    wk: DenseMatrix
    wv: DenseMatrix
    wo: DenseMatrix
    heads: int

    def __post_init__(self) -> None:
        for role in ("wq", "wk", "wv", "wo"):
            matrix = as_matrix(getattr(self, role), role)
            check_finite(matrix, role)
            setattr(self, role, matrix)
        d_model = self.wq.shape[0]
        for role in ("wq", "wk", "wv", "wo"):
            if getattr(self, role).shape != (d_model, d_model):
                raise ShapeError(
                    f"{role} has shape {getattr(self, role).shape}, expected {(d_model, d_model)}."
                )
        if d_model % self.heads:
            raise ShapeError(f"d_model={d_model} is not divisible by {self.heads} heads.")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def head_columns(self, h: int) -> slice:
        """Column slice of head `h` in ``wq``, ``wk``, ``wv`` (row slice in ``wo``)."""
        if not 0 <= h < self.heads:
            raise ShapeError(f"Head index {h} out of range for {self.heads} heads.")
        return slice(h * self.d_k, (h + 1) * self.d_k)

    def shape_for(self, n: int) -> AttentionShape:
        return AttentionShape(n=n, d_model=self.d_model, heads=self.heads)

    def replace(self, **matrices: DenseMatrix) -> "AttentionLayerWeights":
        """Return a copy with some matrices exchanged."""
        values = {role: getattr(self, role) for role in ("wq", "wk", "wv", "wo")}
        values.update(matrices)
        return AttentionLayerWeights(heads=self.heads, **values)


@dataclass
class FeedForwardWeights:
    """Two-matrix feed-forward block ``activation(x·w1)·w2``."""

    w1: DenseMatrix
    w2: DenseMatrix
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.w1 = as_matrix(self.w1, "w1")
        self.w2 = as_matrix(self.w2, "w2")
        check_finite(self.w1, "w1")
        check_finite(self.w2, "w2")
        if self.w1.shape[1] != self.w2.shape[0] or self.w1.shape[0] != self.w2.shape[1]:
            raise ShapeError(f"Feed-forward shapes {self.w1.shape} and {self.w2.shape} mismatch.")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"Unknown activation '{self.activation}'.")

    @property
    def d_ff(self) -> int:
        return self.w1.shape[1]

    def replace(self, **matrices: DenseMatrix) -> "FeedForwardWeights":
        values = {"w1": self.w1, "w2": self.w2}
        values.update(matrices)
        return FeedForwardWeights(activation=self.activation, **values)


@dataclass
class CalibrationBatch:
    """Token activations ``x`` (``n × d_model``) feeding a block."""

    x: DenseMatrix
    id: str = ""

    def __post_init__(self) -> None:
        self.x = as_matrix(self.x, "calibration batch")
        check_finite(self.x, "calibration batch")


@dataclass
class AttentionIntermediates:
    """Intermediate values of one attention forward pass.

    :param scores: per head ``N_h`` (``n × n``, masked entries are ``-inf``).
    :param probabilities: per head ``P_h = softmax_rows(N_h)``.
    :param heads: per head ``head_h = P_h · X · W_h^V`` (``n × d_k``).
    :param concat: ``C``, horizontal concatenation of the heads in head order.
    :param output: ``C · W^O``.
    """

    x: DenseMatrix
    scores: list[DenseMatrix]
    probabilities: list[DenseMatrix]
    heads: list[DenseMatrix]
    concat: DenseMatrix
    output: DenseMatrix
    causal: bool = False


@dataclass
class TransformerBlock:
    """Residual block: ``h = x + attention(x)``, ``y = h + feedforward(h)``."""

    attention: AttentionLayerWeights
    feedforward: FeedForwardWeights


@dataclass
class ToyModel:
    """Stack of transformer blocks with an embedding table tied to the output head."""

    blocks: list[TransformerBlock]
    embedding: DenseMatrix
    heads: int
    metadata: dict = field(default_factory=dict)

    @property
    def d_model(self) -> int:
        return self.embedding.shape[1]

    @property
    def vocab(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_ff(self) -> int:
        return self.blocks[0].feedforward.d_ff if self.blocks else 4 * self.d_model


def _input_matrix(x: Union[CalibrationBatch, DenseMatrix]) -> DenseMatrix:
    if isinstance(x, CalibrationBatch):
        return x.x
    return as_matrix(x, "input")


def attention_intermediates(
    w: AttentionLayerWeights,
    x: Union[CalibrationBatch, DenseMatrix],
    causal: bool = False,
) -> AttentionIntermediates:
    """Run the attention forward pass and keep all intermediate values."""
    x_matrix = _input_matrix(x)
    n, d_model = x_matrix.shape
    if d_model != w.d_model:
        raise ShapeError(f"Input width {d_model} does not match d_model={w.d_model}.")
    scale = 1.0 / np.sqrt(w.d_k)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1) if causal else None
    queries = x_matrix @ w.wq
    keys = x_matrix @ w.wk
    values = x_matrix @ w.wv
    scores, probabilities, heads = [], [], []
    for h in range(w.heads):
        columns = w.head_columns(h)
        score = (queries[:, columns] @ keys[:, columns].T) * scale
        if mask is not None:
            score = np.where(mask, -np.inf, score)
        probability = softmax_rows(score)
        scores.append(score)
        probabilities.append(probability)
        heads.append(probability @ values[:, columns])
    concat = np.hstack(heads)
    output = concat @ w.wo
    check_finite(output, "attention output")
    return AttentionIntermediates(
        x=x_matrix,
        scores=scores,
        probabilities=probabilities,
        heads=heads,
        concat=concat,
        output=output,
        causal=causal,
    )


def attention_forward(
    w: AttentionLayerWeights,
    x: Union[CalibrationBatch, DenseMatrix],
    causal: bool = False,
) -> DenseMatrix:
    """Return ``MultiHead(X)`` of shape ``n × d_model``."""
    return attention_intermediates(w, x, causal=causal).output


def feedforward_hidden(w: FeedForwardWeights, x: DenseMatrix) -> DenseMatrix:
    """Return ``activation(x·w1)``, the input of ``w2``."""
    x = as_matrix(x, "input")
    if x.shape[1] != w.w1.shape[0]:
        raise ShapeError(f"Input width {x.shape[1]} does not match w1 {w.w1.shape}.")
    return ACTIVATIONS[w.activation](x @ w.w1)


def feedforward_forward(w: FeedForwardWeights, x: DenseMatrix) -> DenseMatrix:
    """Return ``activation(x·w1)·w2``."""
    result = feedforward_hidden(w, x) @ w.w2
    check_finite(result, "feed-forward output")
    return result


def block_forward(block: TransformerBlock, x: DenseMatrix, causal: bool = False
                  ) -> tuple[DenseMatrix, DenseMatrix]:
    """Return ``(h, y)`` of a residual block: the feed-forward input and the block output."""
    hidden = x + attention_forward(block.attention, x, causal=causal)
    return hidden, hidden + feedforward_forward(block.feedforward, hidden)


def model_hidden(model: ToyModel, x: DenseMatrix, causal: bool = True) -> DenseMatrix:
    """Propagate `x` through all blocks."""
    for block in model.blocks:
        _, x = block_forward(block, x, causal=causal)
    return x


def model_logits(model: ToyModel, tokens: np.ndarray, logit_scale: float = 1.0) -> DenseMatrix:
    """Return next-token logits for a token sequence, using the tied embedding as output head."""
    embedded = model.embedding[np.asarray(tokens, dtype=np.int64)]
    hidden = model_hidden(model, embedded, causal=True)
    return logit_scale * hidden @ model.embedding.T
