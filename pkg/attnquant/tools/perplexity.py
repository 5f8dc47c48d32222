"""
Toy perplexity of synthetic models.

Held-out sequences are sampled from the full precision model itself, such that it is the true
data distribution and a quantized model can only raise the expected negative log-likelihood.
"""

import logging
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from ..errors import NumericError, ShapeError
from ..model.transformer import ToyModel, model_logits


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


def logit_scale(model: ToyModel) -> float:
    return float(model.metadata.get("logit_scale", 1 / np.sqrt(model.d_model)))


def sample_sequences(model: ToyModel, count: int, length: int, rng: np.random.Generator
                     ) -> np.ndarray:
    """Sample `count` token sequences of `length` tokens autoregressively."""
    if count < 1 or length < 2:
        raise ShapeError("At least one sequence of two tokens is needed.")
    scale = logit_scale(model)
    sequences = np.zeros((count, length), dtype=np.int64)
    for sequence in sequences:
        sequence[0] = rng.integers(0, model.vocab)
        for position in range(1, length):
            logits = model_logits(model, sequence[:position], logit_scale=scale)[-1]
            sequence[position] = rng.choice(model.vocab, p=softmax(logits))
    return sequences


def sequence_nll(model: ToyModel, tokens: np.ndarray) -> np.ndarray:
    """Negative log-likelihood of every next token of one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logits = model_logits(model, tokens[:-1], logit_scale=logit_scale(model))
    nll = logsumexp(logits, axis=1) - logits[np.arange(len(tokens) - 1), tokens[1:]]
    if not np.all(np.isfinite(nll)):
        raise NumericError("Negative log-likelihood is not finite.")
    return nll


def perplexity(model: ToyModel, sequences: np.ndarray) -> float:
    """``exp(mean NLL)`` over all predicted tokens."""
    nll = np.concatenate([sequence_nll(model, sequence) for sequence in sequences])
    return float(np.exp(np.mean(nll)))


def toy_perplexity(original: ToyModel, quantized: Sequence[ToyModel], rng: np.random.Generator,
                   count: int = 16, length: int = 32) -> tuple[float, list[float]]:
    """Perplexity of the original and of every quantized model on the same sampled sequences."""
    sequences = sample_sequences(original, count, length, rng)
    original_ppl = perplexity(original, sequences)
    quantized_ppl = [perplexity(model, sequences) for model in quantized]
    log.info(f"Toy perplexity {original_ppl:.4f} (original), "
             + ", ".join(f"{value:.4f}" for value in quantized_ppl) + " (quantized).")
    return original_ppl, quantized_ppl
