"""Embedding-guided group-relative policy optimization of the reasoning adapter.

Rewards come from a frozen embedder: a sampled trace is appended to its query,
encoded with the full mask, and scored against a static cache of target
embeddings. The cache and every reward encoding use the frozen reference
adapter for the reasoning pass, so a fixed (query, trace) pair scores the
same at every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embed import extract_embedding, forward_with_traces, generate_from
from .model import MicroTransformer
from .traces import format_reward

SIGMA_FLOOR = 1e-8
RL_COLUMNS = ("step", "mean_gap_reward", "mean_fmt_reward", "mean_len", "kl", "entropy")


@dataclass
class RlHyper:
    group_size: int = 8
    kl_beta: float = 0.1
    clip_eps: float = 0.2
    tau_r: float = 0.1
    n_negatives: int = 256
    max_gen: int = 32
    sample_temperature: float = 1.0

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.tau_r <= 0:
            raise ValueError("tau_r must be positive")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.max_gen < 1:
            raise ValueError("max_gen must be >= 1")
        if self.sample_temperature <= 0:
            raise ValueError("sample_temperature must be positive (rollouts are sampled)")


# ---------------------------------------------------------------------------
# frozen reward environment


@dataclass
class GlobalCache:
    ids: list[str]
    vectors: np.ndarray
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate target ids in cache")
        self.vectors.setflags(write=False)
        self.index = {t: i for i, t in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, target_id: str) -> np.ndarray:
        return self.vectors[self.index[target_id]]


def _reward_adapter(model: MicroTransformer) -> str:
    return "reference" if "reference" in model.adapters else "reasoning"


def embed_with_traces(model: MicroTransformer, prompts, traces, batch: int = 128) -> np.ndarray:
    """Full-mask embeddings of prompt+trace, prompt-mask where the trace is empty."""
    adapter = _reward_adapter(model)
    out = np.zeros((len(prompts), model.config.d_model))
    with ad.no_grad():
        for s in range(0, len(prompts), batch):
            p, t = prompts[s : s + batch], [list(x) for x in traces[s : s + batch]]
            tb = forward_with_traces(model, p, t, adapter)
            out[s : s + batch] = extract_embedding(model, tb.cache, "full", require_cot=False).data
    return out


def build_cache(model: MicroTransformer, targets) -> GlobalCache:
    """Encode ``(target_id, token_ids, trace_ids or None)`` triples once.

    Targets with an annotated trace use the full mask, the rest the prompt mask.
    """
    targets = list(targets)
    ids = [t[0] for t in targets]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate target ids in cache")
    vecs = embed_with_traces(model, [t[1] for t in targets], [t[2] or [] for t in targets])
    return GlobalCache(ids, vecs)


def corpus_targets(corpus):
    """Cache input triples for every target of a corpus, in sorted id order."""
    return [
        (tid, corpus.targets[tid], corpus.target_traces[tid].token_ids if tid in corpus.target_traces else None)
        for tid in sorted(corpus.targets)
    ]


def gap_reward_from(h_q: np.ndarray, h_pos: np.ndarray, negs: np.ndarray, tau_r: float) -> float:
    """cos(h_q, h+) minus the softmax(cos / tau_r)-weighted mean negative cosine."""
    sims = negs @ h_q
    p = ad.softmax_np(sims / tau_r)
    return float(h_pos @ h_q - p @ sims)


def sample_negatives(cache: GlobalCache, positive_id: str, n: int, rng) -> np.ndarray:
    """Row indices of up to ``n`` distinct negatives, positive excluded."""
    if len(cache) < 2:
        raise ValueError("cache needs at least two targets")
    pos = cache.index[positive_id]
    k = min(n, len(cache) - 1)
    pick = rng.choice(len(cache) - 1, size=k, replace=False)
    return pick + (pick >= pos)


def gap_reward(h_q: np.ndarray, positive_id: str, cache: GlobalCache, hyper: RlHyper, rng) -> float:
    if positive_id not in cache.index:
        raise KeyError(f"positive {positive_id!r} missing from cache")
    rows = sample_negatives(cache, positive_id, hyper.n_negatives, rng)
    return gap_reward_from(h_q, cache.row(positive_id), cache.vectors[rows], hyper.tau_r)


# ---------------------------------------------------------------------------
# advantages and the clipped objective


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rollouts")
    sigma = r.std()
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


@dataclass
class RolloutGroup:
    """Rollouts stacked as rows; several groups may share one instance.

    ``logp`` is the differentiable (rows, T, V) log-distribution of the
    policy at each generated position; ``old_logp`` the sampled tokens'
    log-probs under the behaviour policy and ``ref_logp`` the reference
    distribution (both constants).
    """

    query_ids: list[str]
    actions: np.ndarray
    valid: np.ndarray
    logp: Tensor
    old_logp: np.ndarray
    ref_logp: np.ndarray
    advantages: np.ndarray
    rewards: np.ndarray | None = None


def grpo_loss(group: RolloutGroup, hyper: RlHyper) -> tuple[Tensor, dict]:
    """Negated clipped surrogate plus ``beta`` times the exact per-token KL to the reference.

    Token terms are averaged within each rollout, then across rollouts.
    Returns the loss and ``{"kl", "entropy"}`` diagnostics.
    """
    n, t = group.actions.shape
    if group.logp.shape[:2] != (n, t) or group.old_logp.shape != (n, t) or group.ref_logp.shape != group.logp.shape:
        raise ValueError("log-prob shapes do not match the traces")
    if group.valid.shape != (n, t):
        raise ValueError("valid mask shape does not match the traces")
    lengths = group.valid.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("every rollout needs at least one generated token")
    b, s = np.nonzero(group.valid)
    weight = 1.0 / (lengths[b] * n)

    lp_full = group.logp[b, s]
    lp = lp_full[np.arange(len(b)), group.actions[b, s]]
    ratio = ad.exp(lp - Tensor(group.old_logp[b, s]))
    adv = Tensor(group.advantages[b])
    surr = ad.minimum(ratio * adv, ad.clip(ratio, 1 - hyper.clip_eps, 1 + hyper.clip_eps) * adv)

    p = ad.exp(lp_full)
    kl_tok = (p * (lp_full - Tensor(group.ref_logp[b, s]))).sum(axis=-1)
    w = Tensor(weight)
    surrogate = (surr * w).sum()
    kl = (kl_tok * w).sum()
    loss = ad.scale(surrogate, -1.0) + ad.scale(kl, hyper.kl_beta)

    pd = p.data
    entropy = float((-(pd * lp_full.data).sum(axis=-1) * weight).sum())
    return loss, {"kl": float(kl.data), "entropy": entropy}


# ---------------------------------------------------------------------------
# one policy step


def _rollout_logp(model: MicroTransformer, prompts, traces, adapter: str, temperature: float = 1.0):
    # the policy is the distribution rollouts are drawn from, temperature included
    tb = forward_with_traces(model, prompts, traces, adapter)
    logits = model.logits(tb.pred_hidden)
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    return ad.log_softmax(logits), tb.trace_ids, tb.trace_valid


def sample_rollouts(model: MicroTransformer, prompts, n_each: int, hyper: RlHyper, rng):
    """``n_each`` sampled traces per prompt from the reasoning adapter (row-major by prompt)."""
    rows = [list(p) for p in prompts for _ in range(n_each)]
    with ad.no_grad():
        _, cache, h_p = model.forward_reasoning(rows, "reasoning")
        first = model.logits(h_p).data
        ids, _ = generate_from(model, cache, first, hyper.max_gen, hyper.sample_temperature, rng, "reasoning")
    return rows, ids


def score_rollouts(model, rows, traces, positives, cache: GlobalCache, hyper: RlHyper, rng,
                   negatives: str = "cache", batch_positives=None):
    """Return (r_gap, r_fmt) per rollout.

    ``negatives="inbatch"`` scores against the other positives of the batch
    (``batch_positives``) instead of sampling the global cache.
    """
    h = embed_with_traces(model, rows, traces)
    r_gap = np.zeros(len(rows))
    for i, (hq, pos) in enumerate(zip(h, positives)):
        if negatives == "cache":
            r_gap[i] = gap_reward(hq, pos, cache, hyper, rng)
        elif negatives == "inbatch":
            others = [cache.index[x] for x in dict.fromkeys(batch_positives) if x != pos]
            if not others:
                raise ValueError("in-batch negatives need at least two distinct positives")
            r_gap[i] = gap_reward_from(hq, cache.row(pos), cache.vectors[others], hyper.tau_r)
        else:
            raise ValueError(f"unknown negatives source {negatives!r}")
    vocab = model.vocab
    r_fmt = np.array([format_reward(vocab.render(t)) for t in traces], dtype=np.float64)
    return r_gap, r_fmt


def rl_step(model: MicroTransformer, optimizer, pairs, cache: GlobalCache, hyper: RlHyper, rng,
            negatives: str = "cache", neg_rng=None) -> dict:
    """Sample G traces per query, score them, and take one step on the reasoning adapter.

    ``neg_rng`` (default ``rng``) drives negative sampling so generation
    randomness can be kept independent of the reward variant.
    """
    g = hyper.group_size
    rows, traces = sample_rollouts(model, [p.query_ids for p in pairs], g, hyper, rng)
    positives = [p.target_id for p in pairs for _ in range(g)]
    r_gap, r_fmt = score_rollouts(model, rows, traces, positives, cache, hyper, neg_rng or rng, negatives,
                                  [p.target_id for p in pairs])
    total = r_gap + r_fmt
    adv = np.concatenate([group_advantages(total[i : i + g]) for i in range(0, len(rows), g)])

    with ad.no_grad():
        ref_lp, _, _ = _rollout_logp(model, rows, traces, "reference", hyper.sample_temperature)
    lp, actions, valid = _rollout_logp(model, rows, traces, "reasoning", hyper.sample_temperature)
    b = np.arange(len(rows))[:, None]
    old = lp.data[b, np.arange(actions.shape[1])[None, :], actions]
    group = RolloutGroup([p.qid for p in pairs], actions, valid, lp, old, ref_lp.data, adv, total)
    loss, diag = grpo_loss(group, hyper)
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    return {
        "mean_gap_reward": float(r_gap.mean()),
        "mean_fmt_reward": float(r_fmt.mean()),
        "mean_len": float(np.mean([len(t) for t in traces])),
        "kl": diag["kl"],
        "entropy": diag["entropy"],
    }


# ---------------------------------------------------------------------------
# RL data selection


def rollout_dispersion(model: MicroTransformer, pairs, n_rollouts: int, hyper: RlHyper, rng,
                       chunk: int = 16) -> np.ndarray:
    """1 - mean pairwise cosine among ``n_rollouts`` sampled-trace embeddings per query."""
    if n_rollouts < 2:
        raise ValueError("n_rollouts must be >= 2")
    out = np.zeros(len(pairs))
    iu = np.triu_indices(n_rollouts, k=1)
    for s in range(0, len(pairs), chunk):
        part = pairs[s : s + chunk]
        rows, traces = sample_rollouts(model, [p.query_ids for p in part], n_rollouts, hyper, rng)
        h = embed_with_traces(model, rows, traces).reshape(len(part), n_rollouts, -1)
        for j in range(len(part)):
            sims = h[j] @ h[j].T
            out[s + j] = 1.0 - sims[iu].mean()
    return out


def select_by_dispersion(pairs, dispersion, keep_fraction: float):
    """Keep the top ``floor(keep_fraction * n)`` most dispersed pairs of each difficulty stratum."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    keep = np.zeros(len(pairs), dtype=bool)
    for kind in sorted({p.difficulty for p in pairs}):
        idx = np.array([i for i, p in enumerate(pairs) if p.difficulty == kind])
        order = idx[np.argsort(-np.asarray(dispersion)[idx], kind="stable")]
        keep[order[: int(np.floor(keep_fraction * len(idx)))]] = True
    return keep


def variance_filter(model: MicroTransformer, pairs, n_rollouts: int, keep_fraction: float, rng,
                    hyper: RlHyper | None = None):
    """Returns (kept pairs, dispersion per input pair, keep mask)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("variance filter needs a non-empty dataset")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    hyper = hyper or RlHyper()
    disp = rollout_dispersion(model, pairs, n_rollouts, hyper, rng)
    keep = select_by_dispersion(pairs, disp, keep_fraction)
    return [p for p, k in zip(pairs, keep) if k], disp, keep
