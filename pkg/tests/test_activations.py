import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from actspill.activations import (
    ActivationProfile,
    activations_per_step,
    checkpointed_activations,
    flops_per_step,
    forward_flops,
    param_count,
    per_layer_activation_bytes,
)
from actspill.config import (
    ENCODER_DECODER,
    ModelConfig,
    ParallelismConfig,
)

TP2 = ParallelismConfig(tp_degree=2)


def test_param_count_canonical(bert_12k):
    m, _par = bert_12k
    # 12 * 3 * 12288^2 + 2 * 50257 * 12288, worked out by hand.
    assert param_count(m) == 6_670_934_016


def test_param_count_splits_into_layers_and_embeddings(bert_12k):
    m, _par = bert_12k
    embeddings = 2 * m.vocab_size * m.hidden_dim
    assert param_count(m) - embeddings == 12 * m.num_layers * m.hidden_dim ** 2
    assert param_count(replace(m, num_layers=0)) == embeddings


def test_param_count_layer_block():
    m = ModelConfig.from_hidden(8192, 4, vocab_size=1)
    assert param_count(m) - 2 * 8192 == 12 * 4 * 8192 ** 2 == 3_221_225_472


def test_activations_per_step_canonical(bert_12k):
    m, par = bert_12k
    # 1024 * 16 * 12288 * (10 + 24/2) * 3 layers at FP16.
    assert activations_per_step(m, par) == 13_287_555_072.0


def test_per_layer_zero_batch():
    m = ModelConfig.from_hidden(12288, 3, micro_batch=0)
    assert per_layer_activation_bytes(m, TP2, ActivationProfile()) == 0.0


@given(factor=st.sampled_from([2, 3, 5, 8]))
def test_per_layer_linear_in_batch_and_seq(factor):
    m = ModelConfig.from_hidden(4096, 2, seq_len=256, micro_batch=4)
    prof = ActivationProfile()
    base = per_layer_activation_bytes(m, TP2, prof)
    assert per_layer_activation_bytes(
        replace(m, micro_batch=m.micro_batch * factor), TP2, prof
    ) == factor * base
    assert per_layer_activation_bytes(
        replace(m, seq_len=m.seq_len * factor), TP2, prof
    ) == factor * base


def test_step_linear_in_microbatches(bert_12k):
    m, par = bert_12k
    base = activations_per_step(m, par)
    doubled = activations_per_step(m, replace(par, num_microbatches=2))
    assert doubled == 2 * base


@given(tp=st.sampled_from([1, 2, 4, 8]))
def test_tensor_parallel_shards_only_one_coefficient(tp):
    m = ModelConfig.from_hidden(8192, 4)
    prof = ActivationProfile()
    single = per_layer_activation_bytes(m, ParallelismConfig(), prof)
    sharded = per_layer_activation_bytes(m, ParallelismConfig(tp_degree=tp), prof)
    c1 = prof.shared_bytes_per_token_dim
    c2 = prof.sharded_bytes_per_token_dim
    assert sharded == pytest.approx(single * (c1 + c2 / tp) / (c1 + c2), rel=1e-12)


def test_pipeline_keeps_worst_stage_share():
    m = ModelConfig.from_hidden(12288, 3)
    whole = activations_per_step(m, TP2)
    split = activations_per_step(m, replace(TP2, pp_degree=2))
    # ceil(3/2) = 2 of 3 layers on the worst stage.
    assert split == pytest.approx(whole * 2 / 3, rel=1e-12)


def test_disabling_flash_attention_adds_score_matrices():
    m = ModelConfig.from_hidden(4096, 2, seq_len=512, micro_batch=4)
    flash = per_layer_activation_bytes(m, TP2, ActivationProfile())
    full = per_layer_activation_bytes(
        m, TP2, ActivationProfile(flash_attention=False)
    )
    scores = 2 * m.micro_batch * m.num_heads * m.seq_len ** 2 * m.bytes_per_element / 2
    assert full - flash == pytest.approx(scores, rel=1e-12)


def test_cross_attention_only_for_decoder_half():
    enc = ModelConfig.from_hidden(4096, 4, micro_batch=2)
    encdec = replace(enc, family=ENCODER_DECODER)
    prof = ActivationProfile()
    plain = per_layer_activation_bytes(enc, TP2, prof)
    crossed = per_layer_activation_bytes(enc, TP2, prof, cross_attention=True)
    extra_per_layer = (
        enc.seq_len * enc.micro_batch * enc.hidden_dim
        * prof.cross_attention_extra / TP2.tp_degree
    )
    assert crossed - plain == pytest.approx(extra_per_layer, rel=1e-12)
    # 2 of 4 layers are decoders.
    assert activations_per_step(encdec, TP2) == pytest.approx(
        activations_per_step(enc, TP2) + 2 * extra_per_layer, rel=1e-12
    )


def test_bigger_hidden_fewer_layers_means_less_bytes_per_flop():
    # Same 12*L*h^2 layer-parameter budget, so similar FLOPs, but the wider
    # shallower model produces fewer activation bytes per FLOP.
    par = TP2
    wide = ModelConfig.from_hidden(12288, 4, vocab_size=1)
    deep = ModelConfig.from_hidden(8192, 9, vocab_size=1)
    assert 4 * wide.hidden_dim ** 2 == 9 * deep.hidden_dim ** 2
    wide_ratio = activations_per_step(wide, par) / flops_per_step(wide, par)
    deep_ratio = activations_per_step(deep, par) / flops_per_step(deep, par)
    assert wide_ratio < deep_ratio


def test_checkpointed_canonical(bert_12k):
    m, par = bert_12k
    ck = checkpointed_activations(m, par)
    # 3 layer-boundary inputs (s*b*h*2/tp each) plus one live layer.
    assert ck.bytes == 5_033_164_800.0
    tokens = m.seq_len * m.micro_batch
    assert ck.asymptotic_scale == pytest.approx(
        math.sqrt(3) * m.hidden_dim * tokens, rel=1e-12
    )


def test_checkpointed_single_layer_equals_full(bert_12k):
    m, par = bert_12k
    one = replace(m, num_layers=1)
    ck = checkpointed_activations(one, par)
    boundary = m.seq_len * m.micro_batch * m.hidden_dim * m.bytes_per_element / 2
    assert ck.bytes == activations_per_step(one, par) + boundary


def test_checkpointing_saves_more_on_deeper_models(bert_12k):
    m, par = bert_12k
    ratios = []
    for layers in (2, 4, 8, 16):
        mm = replace(m, num_layers=layers)
        ratios.append(
            activations_per_step(mm, par) / checkpointed_activations(mm, par).bytes
        )
    assert ratios == sorted(ratios)
    assert all(r > 1 for r in ratios)


def test_flops_six_n_tokens(bert_12k):
    m, par = bert_12k
    tokens = m.seq_len * m.micro_batch
    assert flops_per_step(m, par) == 6.0 * param_count(m) * tokens
    assert forward_flops(m, par) == flops_per_step(m, par) / 3.0
