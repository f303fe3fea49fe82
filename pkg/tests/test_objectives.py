import math

import numpy as np
import pytest
import torch

from blockdlm.model import BlockDiffusionLM, ModelConfig
from blockdlm.objectives import (
    LINEAR,
    MaskedBatch,
    NoiseSchedule,
    bdlm_loss,
    bdlm_loss_value,
    complementary_pair,
    corrupt,
    finite_difference_grads,
    max_relative_error,
    sft_loss_value,
)
from blockdlm.vocab import TokenVocabulary, text_sequence

VOCAB = TokenVocabulary(text_size=10, visual_size=0, special=("MASK",))


def tiny_model(seed=7, scale=0.25):
    cfg = ModelConfig(
        d_model=4, n_heads=2, n_layers=1, d_ff=8, vocab=VOCAB, block_size=2
    )
    model = BlockDiffusionLM(cfg)
    model.init_params(seed, scale=scale)
    return model


class FixedLogitsModel:
    """Duck-typed stand-in emitting the same logits row everywhere."""

    def __init__(self, row):
        self.row = torch.tensor(row, dtype=torch.float64)

    def forward(self, input_ids, positions, cache=None, prompt_len=0, attn_mask=None):
        n = len(list(input_ids))
        return self.row.expand(n, -1).clone(), None


# --- schedule ----------------------------------------------------------------


def test_linear_schedule_endpoints_and_weight():
    assert LINEAR.alpha(0.0) == 1.0
    assert LINEAR.alpha(1.0) == 0.0
    for t in (0.001, 0.25, 0.5, 1.0):
        assert abs(LINEAR.weight(t) - 1.0 / t) < 1e-12 / t


def test_schedule_domain_checks():
    with pytest.raises(ValueError):
        LINEAR.weight(0.0)
    with pytest.raises(ValueError):
        LINEAR.weight(1.5)
    with pytest.raises(ValueError):
        NoiseSchedule("cosine")


# --- corrupt -------------------------------------------------------------------


def test_corrupt_t1_masks_everything():
    rng = np.random.default_rng(0)
    x0 = text_sequence(list(range(8)), block_size=2)
    batch = corrupt(x0, 1.0, rng, VOCAB, prompt_len=2)
    assert batch.mask_flags == (False, False) + (True,) * 6
    assert all(i == VOCAB.mask_id for i in batch.corrupted.ids[2:])


def test_corrupt_never_touches_prompt():
    rng = np.random.default_rng(1)
    x0 = text_sequence(list(range(8)), block_size=2)
    for _ in range(1000):
        batch = corrupt(x0, 0.9, rng, VOCAB, prompt_len=4)
        assert not any(batch.mask_flags[:4])
        assert batch.corrupted.ids[:4] == x0.ids[:4]
        assert batch.masked_count >= 1


def test_corrupt_empirical_rate():
    rng = np.random.default_rng(2)
    x0 = text_sequence([3] * 10000, block_size=10000)
    batch = corrupt(x0, 0.5, rng, VOCAB)
    rate = batch.masked_count / 10000
    assert abs(rate - 0.5) < 0.02


def test_masked_batch_validation():
    x0 = text_sequence(list(range(4)), block_size=2)
    with pytest.raises(ValueError):
        MaskedBatch(x0, x0, 0.5, (True, False, False), prompt_len=0)
    with pytest.raises(ValueError):
        MaskedBatch(x0, x0, 0.5, (True, False, False, False), prompt_len=1)


# --- bdlm loss ------------------------------------------------------------------


def uniform_batch_v4():
    vocab4 = TokenVocabulary(text_size=3, visual_size=0, special=("MASK",))
    clean = text_sequence([0, 1, 2, 0], block_size=2)
    corrupted = clean.replace_ids([vocab4.mask_id, 1, 2, vocab4.mask_id])
    batch = MaskedBatch(clean, corrupted, t=0.5, mask_flags=(True, False, False, True))
    return vocab4, batch


def test_uniform_predictor_analytic_value():
    vocab4, batch = uniform_batch_v4()
    cfg = ModelConfig(d_model=4, n_heads=2, n_layers=1, d_ff=8, vocab=vocab4, block_size=2)
    model = BlockDiffusionLM(cfg)
    model.init_params(0, scale=0.0)
    with torch.no_grad():
        value = float(bdlm_loss_value(model, batch))
    assert abs(value - 4.0 * math.log(4.0)) < 1e-9


def test_perfect_predictor_loss_vanishes():
    _, batch = uniform_batch_v4()
    # near-one-hot logits at the true token (clean ids 0 and 0 at the masked slots)
    model = FixedLogitsModel([60.0, 0.0, 0.0, 0.0])
    value = float(bdlm_loss_value(model, batch))
    assert value < 1e-20


def test_loss_monotone_in_true_token_probability():
    _, batch = uniform_batch_v4()
    values = [
        float(bdlm_loss_value(FixedLogitsModel([margin, 0.0, 0.0, 0.0]), batch))
        for margin in (0.0, 0.5, 1.0, 2.0, 4.0)
    ]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_bdlm_rejects_unmasked_batch():
    x0 = text_sequence(list(range(4)), block_size=2)
    batch = MaskedBatch(x0, x0, 0.5, (False,) * 4)
    with pytest.raises(ValueError):
        bdlm_loss_value(tiny_model(), batch)


def test_bdlm_requires_block_alignment():
    x0 = text_sequence(list(range(5)), block_size=2)
    corrupted = x0.replace_ids([VOCAB.mask_id] + list(x0.ids[1:]))
    batch = MaskedBatch(x0, corrupted, 0.5, (True, False, False, False, False))
    with pytest.raises(ValueError):
        bdlm_loss_value(tiny_model(), batch)


def test_bdlm_gradients_match_finite_differences():
    model = tiny_model()
    rng = np.random.default_rng(0)
    x0 = text_sequence([int(v) for v in rng.integers(0, 10, size=4)], block_size=2)
    batch = corrupt(x0, 0.8, rng, VOCAB, prompt_len=2)
    _, grads = bdlm_loss(model, batch)
    numeric = finite_difference_grads(lambda: bdlm_loss_value(model, batch), model)
    assert max_relative_error(grads, numeric) < 1e-4


# --- sft loss --------------------------------------------------------------------


def test_sft_two_identical_samples_collapse():
    model = tiny_model()
    rng = np.random.default_rng(3)
    x0 = text_sequence([int(v) for v in rng.integers(0, 10, size=6)], block_size=2)
    batch = corrupt(x0, 0.6, rng, VOCAB, prompt_len=2)
    with torch.no_grad():
        one = float(sft_loss_value(model, [batch]))
        two = float(sft_loss_value(model, [batch, batch]))
    assert abs(one - two) < 1e-12


def test_sft_reweighting_sqrt_ratio():
    # equal per-token NLL: pre-normalization contributions scale as sqrt(m_j)
    vocab = TokenVocabulary(text_size=3, visual_size=0, special=("MASK",))
    model = FixedLogitsModel([0.0, 0.0, 0.0, 0.0])  # uniform: NLL = ln 4 per token
    t = 0.5

    def weighted_term(masked_count, length):
        clean = text_sequence([0] * (length + 1), block_size=length)
        ids = list(clean.ids)
        flags = [False] * (length + 1)
        for i in range(1, masked_count + 1):
            ids[i] = vocab.mask_id
            flags[i] = True
        batch = MaskedBatch(clean, clean.replace_ids(ids), t, tuple(flags), prompt_len=1)
        beta = 1.0 / math.sqrt(masked_count)
        from blockdlm.objectives import sample_nll

        return beta * LINEAR.weight(t) * float(sample_nll(model, batch))

    small = weighted_term(1, 100)
    large = weighted_term(100, 100)
    assert abs(large / small - math.sqrt(100)) < 1e-9


def test_sft_requires_prompt_and_non_empty():
    model = tiny_model()
    with pytest.raises(ValueError):
        sft_loss_value(model, [])
    x0 = text_sequence(list(range(4)), block_size=2)
    batch = corrupt(x0, 0.5, np.random.default_rng(0), VOCAB, prompt_len=0)
    with pytest.raises(ValueError):
        sft_loss_value(model, [batch])


def test_sft_skips_fully_clean_members():
    model = tiny_model()
    rng = np.random.default_rng(4)
    x0 = text_sequence([int(v) for v in rng.integers(0, 10, size=6)], block_size=2)
    primary, complement = complementary_pair(x0, 0.999, rng, VOCAB, prompt_len=2)
    # with t ~ 1 the primary almost surely masks everything
    assert complement.masked_count == 0
    with torch.no_grad():
        both = float(sft_loss_value(model, [primary, complement]))
        only = float(sft_loss_value(model, [primary]))
    assert abs(both - only) < 1e-12
    with pytest.raises(ValueError):
        sft_loss_value(model, [complement])


# --- complementary masking ---------------------------------------------------------


def test_complement_masks_xor_to_full_cover():
    rng = np.random.default_rng(5)
    x0 = text_sequence(list(range(10)), block_size=2)
    for _ in range(200):
        t = float(rng.uniform(0.05, 1.0))
        a, b = complementary_pair(x0, t, rng, VOCAB, prompt_len=2)
        for i in range(2):
            assert not a.mask_flags[i] and not b.mask_flags[i]
        for i in range(2, 10):
            assert a.mask_flags[i] != b.mask_flags[i]


def test_complement_pair_members_share_t():
    rng = np.random.default_rng(6)
    x0 = text_sequence(list(range(6)), block_size=2)
    a, b = complementary_pair(x0, 0.4, rng, VOCAB)
    assert a.t == b.t == 0.4
