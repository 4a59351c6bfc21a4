import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualroute import autodiff as ad
from dualroute.autodiff import Tensor
from dualroute.embed import encode_batch
from dualroute.grpo import (
    GlobalCache,
    RlHyper,
    RolloutGroup,
    build_cache,
    corpus_targets,
    embed_with_traces,
    gap_reward,
    gap_reward_from,
    group_advantages,
    grpo_loss,
    rl_step,
    sample_negatives,
    select_by_dispersion,
    variance_filter,
)
from dualroute.optim import AdamW
from dualroute.rng import make_rng
from dualroute.train import freeze_for_rl

from conftest import perturb


def _group(logits, actions, valid, adv, old=None, ref=None):
    lp = ad.log_softmax(logits)
    n, t = actions.shape
    taken = lp.data[np.arange(n)[:, None], np.arange(t)[None, :], actions]
    return RolloutGroup(
        [f"q{i}" for i in range(n)], actions, valid, lp,
        taken if old is None else old, lp.data.copy() if ref is None else ref, np.asarray(adv, float),
    )


def _random_case(seed, n=4, t=3, v=5):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(n, t, v)), requires_grad=True)
    actions = rng.integers(0, v, (n, t))
    valid = np.ones((n, t), bool)
    valid[0, 2:] = False
    valid[1, 1:] = False
    return rng, logits, actions, valid


# -- advantages ----------------------------------------------------------------

def test_advantage_example():
    np.testing.assert_allclose(group_advantages([1.0, 0.0]), [1.0, -1.0])
    np.testing.assert_allclose(group_advantages([1.0, 2.0, 3.0]), np.array([-1, 0, 1]) / np.sqrt(2 / 3))


def test_equal_rewards_give_zero_advantages():
    assert group_advantages([0.7] * 5).tolist() == [0.0] * 5
    assert group_advantages([1.0, 1.0 + 1e-12]).tolist() == [0.0, 0.0]


def test_single_rollout_group_rejected():
    with pytest.raises(ValueError):
        group_advantages([1.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10))
def test_advantages_sum_to_zero(rewards):
    a = group_advantages(rewards)
    assert abs(a.sum()) < 1e-9
    if np.std(rewards) >= 1e-8:
        assert abs(a.std() - 1.0) < 1e-6


# -- the clipped objective ------------------------------------------------------

def test_on_policy_at_reference_loss_is_zero():
    _, logits, actions, valid = _random_case(0)
    adv = group_advantages([0.1, 0.5, 0.2, 0.9])
    loss, diag = grpo_loss(_group(logits, actions, valid, adv), RlHyper())
    assert abs(loss.item()) < 1e-12
    assert abs(diag["kl"]) < 1e-12


def test_equal_rewards_give_zero_update():
    _, logits, actions, valid = _random_case(1)
    loss, _ = grpo_loss(_group(logits, actions, valid, group_advantages([0.3] * 4)), RlHyper())
    ad.backward(loss)
    assert np.abs(logits.grad).max() < 1e-14


def test_positive_advantage_raises_taken_logprob():
    _, logits, actions, valid = _random_case(2)
    adv = np.array([1.0, -1.0, 1.0, -1.0])
    loss, _ = grpo_loss(_group(logits, actions, valid, adv), RlHyper(kl_beta=0.0))
    ad.backward(loss)
    # descent direction on the taken logit of an unclipped, positive-advantage token
    assert logits.grad[0, 0, actions[0, 0]] < 0
    assert logits.grad[1, 0, actions[1, 0]] > 0


def test_clipping_stops_gradient_beyond_the_trust_region():
    _, logits, actions, valid = _random_case(3, n=2, t=1)
    lp = ad.log_softmax(logits).data
    taken = lp[np.arange(2), 0, actions[:, 0]][:, None]
    # ratio = e^0.5 > 1.2 with positive advantage, e^-0.5 < 0.8 with negative advantage
    g = _group(logits, actions, np.ones((2, 1), bool), [1.0, -1.0], old=taken - 0.5)
    g.old_logp[1] = taken[1] + 0.5
    loss, _ = grpo_loss(g, RlHyper(kl_beta=0.0))
    ad.backward(loss)
    assert np.abs(logits.grad).max() == 0.0


def test_token_mean_within_rollout_then_mean_over_rollouts():
    logits = Tensor(np.zeros((2, 3, 2)), requires_grad=True)
    actions = np.zeros((2, 3), int)
    valid = np.array([[True, False, False], [True, True, True]])
    taken = np.full((2, 3), np.log(0.5))
    # ratio 2 on every token: clipped to 1.2 for positive advantage
    g = _group(logits, actions, valid, [1.0, 1.0], old=taken - np.log(2.0))
    loss, _ = grpo_loss(g, RlHyper(kl_beta=0.0))
    assert abs(loss.item() + 1.2) < 1e-12


def test_grpo_loss_finite_differences():
    rng, logits, actions, valid = _random_case(4)
    lp = ad.log_softmax(logits).data
    taken = lp[np.arange(4)[:, None], np.arange(3)[None, :], actions]
    old = taken + rng.uniform(-0.1, 0.1, taken.shape)
    ref = ad.log_softmax(Tensor(rng.normal(size=logits.shape))).data
    adv = group_advantages(rng.normal(size=4))

    def f(x):
        return grpo_loss(_group(x, actions, valid, adv, old=old, ref=ref), RlHyper())[0]

    assert ad.check_gradient(f, logits) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_exact_kl_is_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(3, 2, 6)) * rng.uniform(0.1, 5))
    ref = ad.log_softmax(Tensor(rng.normal(size=(3, 2, 6)) * rng.uniform(0.1, 5))).data
    actions = rng.integers(0, 6, (3, 2))
    _, diag = grpo_loss(_group(logits, actions, np.ones((3, 2), bool), np.zeros(3), ref=ref), RlHyper())
    assert diag["kl"] >= -1e-12
    assert diag["entropy"] >= 0


def test_shape_errors():
    _, logits, actions, valid = _random_case(5)
    g = _group(logits, actions, valid, np.zeros(4))
    g.valid = np.zeros_like(valid)
    with pytest.raises(ValueError, match="at least one"):
        grpo_loss(g, RlHyper())
    g = _group(logits, actions, valid, np.zeros(4))
    g.old_logp = g.old_logp[:, :2]
    with pytest.raises(ValueError):
        grpo_loss(g, RlHyper())


# -- rewards and the cache -------------------------------------------------------

def test_gap_reward_examples():
    hq = np.array([1.0, 0.0, 0.0])
    negs = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert gap_reward_from(hq, hq, negs, 0.1) == 1.0
    # one close negative dominates the softmax weighting
    negs = np.array([[0.8, 0.6, 0.0], [0.0, 0.0, 1.0]])
    r = gap_reward_from(hq, hq, negs, 0.01)
    assert abs(r - 0.2) < 1e-10
    w = np.exp(np.array([0.8, 0.0]) / 1.0)
    assert abs(gap_reward_from(hq, hq, negs, 1.0) - (1 - (w @ [0.8, 0.0]) / w.sum())) < 1e-12


def _cache(n=6, d=4, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, d))
    return GlobalCache([f"t{i}" for i in range(n)], v / np.linalg.norm(v, axis=1, keepdims=True))


def test_cache_rejects_duplicates_and_is_read_only():
    with pytest.raises(ValueError):
        GlobalCache(["a", "a"], np.zeros((2, 3)))
    c = _cache()
    with pytest.raises(ValueError):
        c.vectors[0, 0] = 1.0


def test_negatives_exclude_positive_and_are_distinct():
    c = _cache(10)
    rng = make_rng(0, "negatives")
    for _ in range(50):
        rows = sample_negatives(c, "t3", 5, rng)
        assert len(set(rows.tolist())) == 5 and 3 not in rows
    assert sorted(sample_negatives(c, "t0", 256, rng).tolist()) == list(range(1, 10))


def test_missing_positive_is_an_error():
    with pytest.raises(KeyError):
        gap_reward(np.zeros(4), "nope", _cache(), RlHyper(), make_rng(0, "negatives"))


def test_empty_trace_reward_encoding_equals_base_encoding(model, corpus):
    perturb(model)
    prompts = [p.query_ids for p in corpus.pairs[:4]]
    a = embed_with_traces(model, prompts, [[]] * 4)
    b = encode_batch(model, prompts, "base")[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- selection -------------------------------------------------------------------

class _P:
    def __init__(self, d):
        self.difficulty = d


def test_select_by_dispersion_halves_each_stratum():
    pairs = [_P("easy")] * 5 + [_P("hard")] * 4
    disp = np.array([0.1, 0.5, 0.3, 0.5, 0.0, 0.9, 0.2, 0.8, 0.1])
    keep = select_by_dispersion(pairs, disp, 0.5)
    assert keep.tolist() == [False, True, False, True, False, True, False, True, False]
    with pytest.raises(ValueError):
        select_by_dispersion(pairs, disp, 0.0)


def test_variance_filter_keeps_more_dispersed_half(model, corpus):
    perturb(model, scale=0.3)
    model.snapshot_reference()
    pairs = corpus.pairs[:12]
    hyper = RlHyper(max_gen=6)
    kept, disp, keep = variance_filter(model, pairs, 3, 0.5, make_rng(0, "filter"), hyper)
    for kind in ("easy", "hard"):
        idx = [i for i, p in enumerate(pairs) if p.difficulty == kind]
        assert sum(keep[i] for i in idx) == len(idx) // 2
    assert disp[keep].mean() > disp[~keep].mean()
    assert len(kept) == keep.sum()
    with pytest.raises(ValueError):
        variance_filter(model, [], 3, 0.5, make_rng(0, "filter"), hyper)


# -- one policy step --------------------------------------------------------------

def _snapshot(model):
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def _rl_setup(model, corpus):
    perturb(model, scale=0.3)
    freeze_for_rl(model)
    cache = build_cache(model, corpus_targets(corpus))
    return cache, corpus.pairs[:2], RlHyper(group_size=3, max_gen=8, n_negatives=8)


def test_rl_step_updates_only_the_reasoning_adapter(model, corpus):
    cache, pairs, hyper = _rl_setup(model, corpus)
    before = _snapshot(model)
    opt = AdamW(model.adapter_params("reasoning"), 1e-2)
    stats = rl_step(model, opt, pairs, cache, hyper, make_rng(0, "sampling"))
    assert set(stats) == {"mean_gap_reward", "mean_fmt_reward", "mean_len", "kl", "entropy"}
    after = _snapshot(model)
    reasoning = {k for k, v in model.named_parameters().items()
                 if any(v is p for p in model.adapter_params("reasoning"))}
    for k in before:
        if k in reasoning:
            continue
        np.testing.assert_array_equal(before[k], after[k], err_msg=k)
    assert any(not np.array_equal(before[k], after[k]) for k in reasoning)


def test_rl_step_with_zero_lr_changes_nothing(model, corpus):
    cache, pairs, hyper = _rl_setup(model, corpus)
    before = _snapshot(model)
    rl_step(model, AdamW(model.adapter_params("reasoning"), 0.0), pairs, cache, hyper, make_rng(0, "sampling"))
    after = _snapshot(model)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_reward_environment_is_stationary(model, corpus):
    cache, pairs, hyper = _rl_setup(model, corpus)
    prompts = [p.query_ids for p in pairs]
    traces = [p.trace_query.token_ids for p in pairs]
    h0 = embed_with_traces(model, prompts, traces)
    opt = AdamW(model.adapter_params("reasoning"), 1e-2)
    for s in range(2):
        rl_step(model, opt, pairs, cache, hyper, make_rng(s, "sampling"))
    np.testing.assert_array_equal(embed_with_traces(model, prompts, traces), h0)
    np.testing.assert_array_equal(build_cache(model, corpus_targets(corpus)).vectors, cache.vectors)


def test_inbatch_negatives_need_two_positives(model, corpus):
    cache, pairs, hyper = _rl_setup(model, corpus)
    opt = AdamW(model.adapter_params("reasoning"), 1e-3)
    rl_step(model, opt, pairs, cache, hyper, make_rng(0, "sampling"), negatives="inbatch")
    with pytest.raises(ValueError):
        rl_step(model, opt, pairs[:1], cache, hyper, make_rng(0, "sampling"), negatives="inbatch")


def test_policy_logprobs_use_the_sampling_temperature(model, corpus):
    from dualroute.grpo import _rollout_logp

    perturb(model)
    prompts = [corpus.pairs[0].query_ids]
    traces = [corpus.pairs[0].trace_query.token_ids]
    plain, _, _ = _rollout_logp(model, prompts, traces, "reasoning")
    hot, _, _ = _rollout_logp(model, prompts, traces, "reasoning", 2.0)
    # log-probs differ from logits by a per-row constant, which the softmax ignores
    want = ad.log_softmax(Tensor(plain.data / 2.0)).data
    np.testing.assert_allclose(hot.data, want, atol=1e-12)


def test_rollouts_must_be_sampled():
    with pytest.raises(ValueError, match="temperature"):
        RlHyper(sample_temperature=0.0).validate()
