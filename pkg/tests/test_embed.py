import numpy as np
import pytest

from dualroute import autodiff as ad
from dualroute.embed import (
    SegmentedSequence,
    admissible,
    encode,
    encode_batch,
    encode_training_pair,
    extract_embedding,
    forward_with_traces,
    generate_trace,
    sample_tokens,
)
from dualroute.model import BackboneConfig, MicroTransformer
from dualroute.rng import make_rng

from conftest import perturb


def _items(corpus, n=6):
    pairs = corpus.pairs[:n]
    return [p.query_ids for p in pairs], [p.trace_query.token_ids for p in pairs]


def test_unit_norm(model, corpus):
    perturb(model)
    prompts, traces = _items(corpus)
    enc = encode_training_pair(model, prompts, traces)
    np.testing.assert_allclose(np.linalg.norm(enc.h_base.data, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(enc.h_cot.data, axis=1), 1.0, atol=1e-12)


def test_prompt_mask_equals_prompt_only_encoding_bitwise(model, corpus):
    perturb(model)
    for p in corpus.pairs[:20]:
        tr = p.trace_query.token_ids
        with_trace = encode_training_pair(model, [p.query_ids], [tr]).h_base.data
        base = encode_batch(model, [p.query_ids], "base")[0]
        np.testing.assert_array_equal(with_trace, base)


def test_empty_trace_gives_identical_embeddings(model, corpus):
    perturb(model)
    enc = encode_training_pair(model, [corpus.pairs[0].query_ids], [[]])
    np.testing.assert_array_equal(enc.h_base.data, enc.h_cot.data)


def test_nonempty_trace_changes_cot_embedding(model, corpus):
    perturb(model)
    p = next(x for x in corpus.pairs if x.difficulty == "hard")
    enc = encode_training_pair(model, [p.query_ids], [p.trace_query.token_ids])
    assert not np.allclose(enc.h_base.data, enc.h_cot.data)


def test_mask_monotonicity(model, corpus):
    prompts, traces = _items(corpus)
    tb = forward_with_traces(model, prompts, traces)
    m_prompt = admissible(tb.cache, "prompt")
    m_full = admissible(tb.cache, "full")
    assert np.all(m_full[m_prompt])
    assert m_full.sum() > m_prompt.sum()


def test_full_mask_without_cot_is_an_error(model):
    _, cache, _ = model.forward_reasoning([[4, 5, 6]])
    with pytest.raises(ValueError, match="cot"):
        extract_embedding(model, cache, "full")
    with pytest.raises(ValueError):
        extract_embedding(model, cache, "middle")


def test_single_probe_pool_is_the_probe_output():
    cfg = BackboneConfig(vocab_size=32, d_model=8, n_layers=1, n_heads=2, d_ffn=8, max_seq=16, k_probes=1,
                         lora_rank=1)
    m = MicroTransformer(cfg)
    _, cache, _ = m.forward_reasoning([[3, 4, 5]])
    states = m.probe_pass(cache.detach(), None).data[:, 0]
    emb = extract_embedding(m, cache, "prompt").data
    np.testing.assert_allclose(emb, states / np.linalg.norm(states, axis=1, keepdims=True), atol=1e-15)


def test_probe_permutation_leaves_embedding_unchanged(model, corpus):
    perturb(model)
    prompts, _ = _items(corpus, 3)
    a = encode_batch(model, prompts, "base")[0]
    model.probes.data = model.probes.data[::-1].copy()
    b = encode_batch(model, prompts, "base")[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_detach_boundary_both_directions(model, corpus):
    perturb(model)
    for p in model.adapter_params("reasoning") + model.adapter_params("embedding") + [model.probes]:
        p.requires_grad = True
    prompts, traces = _items(corpus)
    enc = encode_training_pair(model, prompts, traces)
    ad.backward((enc.h_base * enc.h_cot).sum())
    assert all(p.grad is None for p in model.adapter_params("reasoning"))
    assert any(p.grad is not None and np.any(p.grad) for p in model.adapter_params("embedding"))
    assert model.probes.grad is not None and np.any(model.probes.grad)


def test_adaptive_with_forced_off_gate_equals_base(model, corpus):
    perturb(model)
    prompts, _ = _items(corpus)
    base = encode_batch(model, prompts, "base")
    adapt = encode_batch(model, prompts, "adaptive", gate_override=-20.0)
    np.testing.assert_array_equal(base[0], adapt[0])
    assert not adapt[2].any()


def test_adaptive_with_forced_on_gate_equals_cot(model, corpus):
    perturb(model)
    prompts, _ = _items(corpus)
    cot = encode_batch(model, prompts, "cot", max_len=8)
    adapt = encode_batch(model, prompts, "adaptive", max_len=8, gate_override=20.0)
    np.testing.assert_array_equal(cot[0], adapt[0])
    assert [t.token_ids for t in cot[3]] == [t.token_ids for t in adapt[3]]


def test_gate_exactly_one_half_takes_cot(model, corpus):
    emb, route, trace = encode(model, corpus.pairs[0].query_ids, "adaptive", max_len=4)
    assert route.w == 0.5 and route.chose_cot
    assert emb.source_mode == "cot" and emb.trace_tokens == len(trace) > 0


def test_base_mode_reports_no_trace(model, corpus):
    emb, route, trace = encode(model, corpus.pairs[0].query_ids, "base")
    assert route is None and emb.trace_tokens == 0 and trace.is_empty
    assert abs(np.linalg.norm(emb.vector) - 1) < 1e-12


def test_unknown_mode(model):
    with pytest.raises(ValueError):
        encode_batch(model, [[4, 5]], "oracle")


def test_generation_stops_at_answer_close(model, corpus, monkeypatch):
    stop = model.stop_token
    calls = []

    def scripted(h):
        calls.append(1)
        out = np.zeros(h.shape[:-1] + (model.config.vocab_size,))
        out[..., 10 if len(calls) < 3 else stop] = 1.0
        return ad.Tensor(out)

    monkeypatch.setattr(model, "logits", scripted)
    trace, cache = generate_trace(model, corpus.pairs[0].query_ids, 20, 0.0, None)
    assert trace.token_ids == [10, 10, stop]
    assert cache.cot_lengths()[0] == 3


def test_generation_respects_max_len(model, corpus):
    trace, cache = generate_trace(model, corpus.pairs[0].query_ids, 5, 1.0, make_rng(0, "sampling"))
    assert 1 <= len(trace) <= 5
    assert cache.cot_lengths()[0] == len(trace)


def test_greedy_ties_pick_lowest_id():
    assert sample_tokens(np.array([[0.0, 2.0, 2.0, 1.0]]), 0.0, None).tolist() == [1]


def test_sampling_is_seeded_and_follows_distribution():
    logits = np.log(np.array([[0.7, 0.2, 0.1]]))
    rng = make_rng(0, "sampling")
    draws = np.array([sample_tokens(logits, 1.0, rng)[0] for _ in range(4000)])
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / 4000, [0.7, 0.2, 0.1], atol=0.03)
    again = make_rng(0, "sampling")
    assert sample_tokens(logits, 1.0, again)[0] == draws[0]


def test_segmented_sequence_validation():
    with pytest.raises(ValueError):
        SegmentedSequence([], [1], 4).validate(16)
    with pytest.raises(ValueError):
        SegmentedSequence([1] * 10, [2] * 4, 4).validate(16)
    SegmentedSequence([1] * 8, [2] * 4, 4).validate(16)
