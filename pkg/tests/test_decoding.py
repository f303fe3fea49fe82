import numpy as np
import pytest
import torch

from blockdlm.decoding import (
    GenerationError,
    GenerationResult,
    HighConfidenceModel,
    generate,
    greedy_commit,
)
from blockdlm.model import BlockDiffusionLM, ModelConfig
from blockdlm.sprint import FULL_PREFIX_RETENTION, PruneConfig, UnmaskMode, UnmaskPolicy
from blockdlm.vocab import Modality, TokenVocabulary, build_vocabulary, text_sequence


def toy_model(seed=42):
    vocab = build_vocabulary(200, 16, [256])
    cfg = ModelConfig(d_model=32, n_heads=4, n_layers=2, d_ff=64, vocab=vocab, block_size=4)
    model = BlockDiffusionLM(cfg)
    model.init_params(seed)
    return model


def prompt_for(model, length=6, seed=0):
    rng = np.random.default_rng(seed)
    return text_sequence(
        [int(x) for x in rng.integers(0, model.config.vocab.text_size, size=length)],
        model.config.block_size,
    )


def fixed_policy(steps):
    return UnmaskPolicy(tau=0.0, total_steps=steps, mode=UnmaskMode.FIXED)


def adaptive_policy(steps, tau):
    return UnmaskPolicy(tau=tau, total_steps=steps, mode=UnmaskMode.ADAPTIVE)


# --- greedy_commit -------------------------------------------------------------


def test_greedy_one_hot():
    vocab = TokenVocabulary(text_size=9, visual_size=0, special=("MASK",))
    logits = torch.zeros((1, 10), dtype=torch.float64)
    logits[0, 7] = 50.0
    ids, confs = greedy_commit(logits, vocab)
    assert ids == [7]
    assert confs[0] > 0.999999


def test_greedy_uniform_confidence():
    vocab = TokenVocabulary(text_size=9, visual_size=0, special=("MASK",))
    ids, confs = greedy_commit(torch.zeros((1, 10), dtype=torch.float64), vocab)
    assert confs[0] == pytest.approx(0.1, abs=1e-12)


def test_greedy_excludes_mask_and_size_tokens():
    vocab = build_vocabulary(4, 0, [256])  # ids: 4 text, then specials
    V = vocab.total_size
    logits = torch.zeros((1, V), dtype=torch.float64)
    logits[0, vocab.mask_id] = 10.0
    logits[0, vocab.special_id("imgsize_256")] = 9.0
    logits[0, 2] = 8.0
    ids, confs = greedy_commit(logits, vocab)
    assert ids == [2]
    # confidence is the full-softmax probability of the chosen id
    full = torch.softmax(logits[0], dim=-1)
    assert confs[0] == pytest.approx(float(full[2]), abs=1e-15)


def test_greedy_rejects_non_finite():
    vocab = TokenVocabulary(text_size=4, visual_size=0, special=("MASK",))
    bad = torch.full((1, 5), float("nan"), dtype=torch.float64)
    with pytest.raises(ValueError):
        greedy_commit(bad, vocab)


# --- generate: schedules and accounting ------------------------------------------


def test_fixed_schedule_nfe_and_acceptance_counts():
    model = toy_model()
    result = generate(
        model, prompt_for(model), n_blocks=1, block_size=4, steps=4, policy=fixed_policy(4)
    )
    assert result.nfe == 4
    assert result.per_block_steps == (4,)
    assert [len(a) for a in result.acceptances[0]] == [1, 1, 1, 1]


def test_bt_forward_passes_with_full_retention():
    # the B*T identity needs T <= L_B so each step has something to commit
    model = toy_model()
    result = generate(
        model,
        prompt_for(model),
        n_blocks=3,
        block_size=4,
        steps=3,
        policy=fixed_policy(3),
        prune=FULL_PREFIX_RETENTION,
    )
    assert result.nfe == 3 * 3
    assert result.per_block_steps == (3, 3, 3)


def test_zero_tau_single_step_blocks():
    model = toy_model()
    result = generate(
        model,
        prompt_for(model),
        n_blocks=3,
        block_size=4,
        steps=4,
        policy=adaptive_policy(4, tau=0.0),
    )
    assert result.nfe == 3
    assert result.per_block_steps == (1, 1, 1)


def test_noop_equivalence_against_baseline():
    model = toy_model()
    prompt = prompt_for(model)
    baseline = generate(
        model, prompt, n_blocks=3, block_size=4, steps=4, policy=fixed_policy(4)
    )
    sprint = generate(
        model,
        prompt,
        n_blocks=3,
        block_size=4,
        steps=4,
        policy=adaptive_policy(4, tau=1.5),
        prune=FULL_PREFIX_RETENTION,
    )
    assert baseline.tokens.ids == sprint.tokens.ids
    assert baseline.acceptances == sprint.acceptances
    assert baseline.nfe == sprint.nfe


def test_output_contains_no_mask_ids():
    model = toy_model()
    result = generate(
        model,
        prompt_for(model),
        n_blocks=3,
        block_size=4,
        steps=4,
        policy=adaptive_policy(4, tau=0.9),
        prune=PruneConfig(alpha=0.5, r_text=0.6, r_img=0.8, r_global=0.6),
    )
    assert model.config.vocab.mask_id not in result.tokens.ids
    result.tokens.validate_ids(model.config.vocab)


def test_commit_permanence_via_acceptance_log():
    model = toy_model()
    result = generate(
        model, prompt_for(model), n_blocks=2, block_size=4, steps=4, policy=fixed_policy(4)
    )
    for block_log in result.acceptances:
        committed = [p for step in block_log for p in step]
        assert len(committed) == len(set(committed)) == 4


def test_pruning_never_increases_attention_cost():
    model = toy_model()
    prompt = prompt_for(model, length=10)
    kwargs = dict(n_blocks=3, block_size=4, steps=4, policy=fixed_policy(4))
    full = generate(model, prompt, prune=FULL_PREFIX_RETENTION, **kwargs)
    pruned = generate(
        model, prompt, prune=PruneConfig(alpha=0.5, r_text=0.5, r_img=0.5, r_global=0.5), **kwargs
    )
    assert pruned.attended <= full.attended
    assert pruned.nfe == full.nfe


def test_generation_determinism():
    model = toy_model()
    prompt = prompt_for(model)
    kwargs = dict(
        n_blocks=2,
        block_size=4,
        steps=4,
        policy=adaptive_policy(4, tau=0.9),
        prune=FULL_PREFIX_RETENTION,
    )
    a = generate(model, prompt, **kwargs)
    b = generate(model, prompt, **kwargs)
    assert a.tokens.ids == b.tokens.ids
    assert a.nfe == b.nfe
    assert a.attended == b.attended


def test_generated_blocks_carry_requested_modality():
    model = toy_model()
    result = generate(
        model,
        prompt_for(model),
        n_blocks=2,
        block_size=4,
        steps=2,
        policy=adaptive_policy(2, tau=0.0),
        gen_modality=Modality.IMAGE,
    )
    mods = result.tokens.modalities()
    assert all(m is Modality.IMAGE for m in mods[-8:])


def test_model_fault_carries_block_and_step():
    model = toy_model()
    with torch.no_grad():
        model.layers[0].wq.weight[0, 0] = float("nan")
    with pytest.raises(GenerationError) as err:
        generate(
            model, prompt_for(model), n_blocks=1, block_size=4, steps=2, policy=fixed_policy(2)
        )
    assert err.value.block == 0
    assert err.value.step == 0


def test_argument_validation():
    model = toy_model()
    prompt = prompt_for(model)
    with pytest.raises(ValueError):
        generate(model, prompt, n_blocks=0, block_size=4, steps=4, policy=fixed_policy(4))
    with pytest.raises(ValueError):
        generate(model, prompt, n_blocks=1, block_size=4, steps=3, policy=fixed_policy(4))
    empty = text_sequence([], 4)
    with pytest.raises(ValueError):
        generate(model, empty, n_blocks=1, block_size=4, steps=4, policy=fixed_policy(4))


# --- the constructed high-confidence model ----------------------------------------


def test_high_confidence_model_speedup_shape():
    vocab = build_vocabulary(200, 16, [256])
    stub = HighConfidenceModel(vocab, block_size=8, margin=30.0)
    prompt = text_sequence([1, 2, 3, 4, 5], 8)
    fixed = generate(
        stub, prompt, n_blocks=2, block_size=8, steps=8, policy=fixed_policy(8)
    )
    adaptive = generate(
        stub, prompt, n_blocks=2, block_size=8, steps=8, policy=adaptive_policy(8, 0.95)
    )
    assert fixed.nfe == 16
    assert adaptive.nfe == 2
    assert fixed.tokens.ids == adaptive.tokens.ids
