"""Stage 1 (supervised, contrastive, routing) and stage 2 (GRPO) training loops."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .embed import encode_training_pair
from .grpo import (
    GlobalCache,
    RlHyper,
    build_cache,
    corpus_targets,
    rl_step,
    sample_rollouts,
    score_rollouts,
    variance_filter,
)
from .model import MicroTransformer
from .objectives import (
    SftHyper,
    infonce,
    ntp_loss,
    positive_margins,
    routing_loss,
    routing_target,
    sft_total,
)
from .optim import AdamW
from .rng import make_rng
from .world import Corpus

SFT_COLUMNS = ("step", "loss", "ntp", "contrastive_base", "contrastive_cot", "routing", "trace_tokens", "grad_norm")


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# stage 1


@dataclass
class SftParts:
    total: ad.Tensor
    ntp: float
    l_base: float
    l_cot: float
    l_route: float
    trace_tokens: int


def _trace_ids(tr) -> list[int]:
    return [] if tr is None else list(tr.token_ids)


def routing_targets(q_base, q_cot, t_base, t_cot, hyper: SftHyper):
    """Soft gate targets for the query and target sides of a batch.

    Both variants of a side are scored against one bank, the other side's
    base embeddings, so the margin difference isolates what reasoning does
    to that input. An item whose trace is empty gets sigmoid(-delta/tau_g).
    """
    w_q = routing_target(positive_margins(q_cot, t_base), positive_margins(q_base, t_base), hyper.delta, hyper.tau_g)
    w_t = routing_target(positive_margins(t_cot, q_base), positive_margins(t_base, q_base), hyper.delta, hyper.tau_g)
    return w_q, w_t


def sft_loss(model: MicroTransformer, pairs, corpus: Corpus, hyper: SftHyper) -> SftParts:
    """Total stage-1 loss on a batch of annotated pairs.

    One reasoning pass covers queries and targets; the routing term averages
    the query-side and target-side gate losses.
    """
    b = len(pairs)
    prompts = [p.query_ids for p in pairs] + [p.target_ids for p in pairs]
    traces = [_trace_ids(p.trace_query) for p in pairs] + [
        _trace_ids(p.trace_target if p.trace_target is not None else corpus.target_traces.get(p.target_id))
        for p in pairs
    ]
    enc = encode_training_pair(model, prompts, traces)
    tb = enc.traced
    ntp, n_tok = ntp_loss(tb.pred_hidden, model.logits, tb.trace_ids, tb.trace_valid)

    qb, tgb = enc.h_base[:b], enc.h_base[b:]
    qc, tgc = enc.h_cot[:b], enc.h_cot[b:]
    l_base = infonce(qb, tgb, hyper.tau)
    l_cot = infonce(qc, tgc, hyper.tau)

    w_q, w_t = routing_targets(qb.data, qc.data, tgb.data, tgc.data, hyper)
    gl = enc.gate_logit
    l_route = ad.scale(routing_loss(gl[:b], w_q) + routing_loss(gl[b:], w_t), 0.5)
    total = sft_total(ntp, l_base, l_cot, l_route, hyper)
    return SftParts(total, float(ntp.data), float(l_base.data), float(l_cot.data), float(l_route.data), n_tok)


def build_model(config: RunConfig, vocab) -> MicroTransformer:
    model = MicroTransformer(config.backbone())
    model.bind_vocabulary(vocab)
    return model


def sft_parameters(model: MicroTransformer) -> list[ad.Tensor]:
    return model.adapter_params("reasoning") + model.adapter_params("embedding") + [model.probes] + model.gate_params()


def train_sft(config: RunConfig, corpus: Corpus, model: MicroTransformer | None = None, progress=None):
    """Optimize the stage-1 objective; returns ``(model, metric rows)``.

    Only pairs flagged clean are used. The backbone is never handed to the optimizer.
    """
    pairs = [p for p in corpus.pairs if p.clean]
    if not pairs:
        raise ValueError("no clean training pairs")
    model = model or build_model(config, corpus.vocab)
    params = sft_parameters(model)
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, config.learning_rate_sft, weight_decay=config.weight_decay, clip=config.grad_clip,
                warmup_steps=int(config.warmup_frac * config.sft_steps))
    hyper = config.sft_hyper()
    rng = make_rng(config.seed, "batches")
    bsz = min(config.batch_size, len(pairs))
    rows = []
    for step in range(config.sft_steps):
        idx = np.sort(rng.choice(len(pairs), size=bsz, replace=False))
        parts = sft_loss(model, [pairs[i] for i in idx], corpus, hyper)
        opt.zero_grad()
        ad.backward(parts.total)
        norm = opt.step()
        rows.append({
            "step": step, "loss": float(parts.total.data), "ntp": parts.ntp, "contrastive_base": parts.l_base,
            "contrastive_cot": parts.l_cot, "routing": parts.l_route, "trace_tokens": parts.trace_tokens,
            "grad_norm": norm,
        })
        if progress is not None:
            progress(step, rows[-1])
    return model, rows


# ---------------------------------------------------------------------------
# stage 2


def freeze_for_rl(model: MicroTransformer) -> None:
    """Snapshot the reference policy and freeze everything except the reasoning adapter."""
    model.snapshot_reference()
    for p in model.named_parameters().values():
        p.requires_grad = False
    for p in model.adapter_params("reasoning"):
        p.requires_grad = True


def heldout_rewards(model: MicroTransformer, pairs, cache: GlobalCache, hyper: RlHyper, seed: int,
                    n_samples: int = 4) -> dict:
    """Mean gap and format reward of sampled traces on held-out queries.

    Sampling and negatives come from a fixed evaluation stream, so two
    policies are compared on identical randomness.
    """
    rows, traces = sample_rollouts(model, [p.query_ids for p in pairs], n_samples, hyper, make_rng(seed, "eval"))
    positives = [p.target_id for p in pairs for _ in range(n_samples)]
    r_gap, r_fmt = score_rollouts(model, rows, traces, positives, cache, hyper, make_rng(seed, "eval-negatives"))
    return {"r_gap": float(r_gap.mean()), "r_fmt": float(r_fmt.mean()),
            "mean_len": float(np.mean([len(t) for t in traces]))}


@dataclass
class RlRun:
    model: MicroTransformer
    rows: list
    cache: GlobalCache
    kept: list
    dispersion: np.ndarray
    keep_mask: np.ndarray


def train_rl(config: RunConfig, corpus: Corpus, model: MicroTransformer, negatives: str | None = None,
             progress=None) -> RlRun:
    """GRPO on the reasoning adapter against a frozen embedder and a static target cache."""
    negatives = negatives or config.rl_negatives
    hyper = config.rl_hyper()
    freeze_for_rl(model)
    cache = build_cache(model, corpus_targets(corpus))
    pairs = [p for p in corpus.pairs if p.clean]
    missing = sorted({p.target_id for p in pairs} - set(cache.index))
    if missing:
        raise ValueError(f"cache lacks targets: {missing[:5]}")
    kept, disp, keep = variance_filter(model, pairs, config.n_rollouts, config.keep_fraction,
                                       make_rng(config.seed, "filter"), hyper)
    opt = AdamW(model.adapter_params("reasoning"), config.learning_rate_rl, weight_decay=config.weight_decay,
                clip=config.grad_clip)
    batch_rng = make_rng(config.seed, "batches")
    sample_rng = make_rng(config.seed, "sampling")
    neg_rng = make_rng(config.seed, "negatives")
    bsz = min(config.rl_batch_size, len(kept))
    rows = []
    for step in range(config.rl_steps):
        idx = np.sort(batch_rng.choice(len(kept), size=bsz, replace=False))
        m = rl_step(model, opt, [kept[i] for i in idx], cache, hyper, sample_rng, negatives, neg_rng)
        rows.append({"step": step, **m})
        if progress is not None:
            progress(step, rows[-1])
    return RlRun(model, rows, cache, kept, disp, keep)

