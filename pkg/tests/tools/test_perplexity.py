import numpy as np
import pytest

from attnquant.errors import ShapeError
from attnquant.quantization.gptq import QuantConfig
from attnquant.store.synthetic import SyntheticConfig, generate_model, generate_synthetic
from attnquant.tools.perplexity import (
    logit_scale,
    perplexity,
    sample_sequences,
    sequence_nll,
    toy_perplexity,
)
from attnquant.tools.pipeline import evaluate, replace_weights, run_quantization


@pytest.fixture(scope="module")
def model():
    return generate_model(SyntheticConfig(d_model=8, heads=2, blocks=1, vocab=12, seed=7))


def test_logit_scale(model):
    assert logit_scale(model) == pytest.approx(1 / np.sqrt(8))


class Test_sample_sequences:
    def test_shape_and_range(self, model):
        sequences = sample_sequences(model, 3, 5, np.random.default_rng(0))
        assert sequences.shape == (3, 5)
        assert sequences.min() >= 0 and sequences.max() < 12

    def test_seeded(self, model):
        first = sample_sequences(model, 2, 4, np.random.default_rng(1))
        second = sample_sequences(model, 2, 4, np.random.default_rng(1))
        assert np.array_equal(first, second)

    def test_too_short(self, model):
        with pytest.raises(ShapeError):
            sample_sequences(model, 1, 1, np.random.default_rng(0))


def test_sequence_nll_positive(model):
    nll = sequence_nll(model, np.array([1, 4, 2, 7]))
    assert nll.shape == (3,)
    assert np.all(nll > 0)


def test_perplexity_bounded_by_vocabulary_for_flat_logits(model):
    flat = replace_weights(model, {})
    flat.embedding = np.zeros_like(model.embedding)
    assert perplexity(flat, np.array([[1, 2, 3]])) == pytest.approx(12.0)


def test_perturbed_model_is_worse(model):
    rng = np.random.default_rng(2)
    noisy = replace_weights(model, {
        f"blocks.0.{role}": getattr(model.blocks[0].attention, role) + rng.normal(0.0, 2.0, (8, 8))
        for role in ("wv", "wo")
    })
    original, (quantized,) = toy_perplexity(model, [noisy], np.random.default_rng(3), count=16,
                                            length=16)
    assert quantized > original


@pytest.mark.slow
def test_two_bit_quantization_raises_perplexity():
    worse = 0
    for seed in range(20):
        model, calibration = generate_synthetic(SyntheticConfig(
            d_model=16, heads=2, blocks=2, seq_len=8, segments=8, vocab=32, seed=seed))
        cfg = QuantConfig(group_size=16, block_size=16)
        result, _ = run_quantization(model, calibration, cfg, plan_kind="uniform", bits=2,
                                     seed=seed)
        evaluation = evaluate(model, result.model, calibration, toy_ppl=True, seed=seed)
        worse += evaluation["ppl_quantized"] >= evaluation["ppl_original"]
    assert worse >= 18
