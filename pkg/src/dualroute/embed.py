"""Base / CoT-enhanced embeddings from one shared KV cache, and the inference modes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import COT, PAD, PROMPT, KVCache, MicroTransformer, pad_batch
from .traces import Trace, trace_from_ids

MASKS = ("prompt", "full")
MODES = ("base", "cot", "adaptive")


@dataclass
class SegmentedSequence:
    prompt_ids: list[int]
    cot_ids: list[int]
    k_probes: int

    def validate(self, max_seq: int) -> None:
        if not self.prompt_ids:
            raise ValueError("prompt must be non-empty")
        if len(self.prompt_ids) + len(self.cot_ids) + self.k_probes > max_seq:
            raise ValueError("sequence plus probes exceeds max_seq")


@dataclass
class Embedding:
    vector: np.ndarray
    source_mode: str
    trace_tokens: int


@dataclass
class RouteDecision:
    w: float
    chose_cot: bool


def admissible(cache: KVCache, mask: str) -> np.ndarray:
    """(batch, len) visibility of cached positions for the probes.

    ``prompt`` admits prompt positions only; ``full`` admits prompt and cot.
    """
    if mask == "prompt":
        return cache.segments == PROMPT
    if mask == "full":
        return cache.segments != PAD
    raise ValueError(f"unknown mask {mask!r}; expected one of {MASKS}")


def _truncate(cache: KVCache, n: int) -> KVCache:
    if n == len(cache):
        return cache
    out = KVCache(len(cache.keys), cache.batch)
    out.keys = [k[:, :, :n] for k in cache.keys]
    out.values = [v[:, :, :n] for v in cache.values]
    out.segments = cache.segments[:, :n]
    out.next_pos = cache.next_pos
    out.detached = cache.detached
    return out


def extract_embedding(model: MicroTransformer, cache: KVCache, mask: str = "prompt",
                      require_cot: bool = True) -> Tensor:
    """Unit-norm (batch, d) embeddings: mean of probe outputs over the admitted cache.

    The cache is always read detached, so no gradient reaches whatever
    produced it. Trailing columns nobody admits are cut off rather than
    masked, which makes the prompt-mask result identical to encoding the
    prompt alone.
    """
    if mask == "full" and require_cot and not np.any(cache.segments == COT):
        raise ValueError("full mask requested but the cache holds no cot positions")
    admit = admissible(cache, mask)
    cols = np.flatnonzero(admit.any(axis=0))
    if cols.size == 0:
        raise ValueError("no admissible cache positions")
    n = int(cols[-1]) + 1
    view = _truncate(cache, n).detach()
    admit = admit[:, :n]
    states = model.probe_pass(view, None if admit.all() else admit, adapter="embedding")
    return ad.normalize(states.mean(axis=1))


# ---------------------------------------------------------------------------
# teacher-forced encoding (training and cache building)


@dataclass
class TracedBatch:
    h_p: Tensor
    cache: KVCache
    trace_ids: np.ndarray
    trace_valid: np.ndarray
    pred_hidden: Tensor | None


def forward_with_traces(model: MicroTransformer, prompts, traces, adapter: str = "reasoning") -> TracedBatch:
    """One reasoning pass over prompt then trace; the cache covers both segments.

    ``pred_hidden[:, j]`` is the state that predicts trace token ``j``.
    """
    _, cache, h_p = model.forward_reasoning(prompts, adapter)
    t_ids, t_valid = pad_batch([list(t) for t in traces])
    if not t_valid.any():
        return TracedBatch(h_p, cache, t_ids, t_valid, None)
    hidden_t, cache = model.forward_segment(t_ids, t_valid, cache, COT, adapter)
    bsz = len(prompts)
    first = h_p.reshape(bsz, 1, model.config.d_model)
    pred = first if t_ids.shape[1] == 1 else ad.concat([first, hidden_t[:, :-1]], axis=1)
    return TracedBatch(h_p, cache, t_ids, t_valid, pred)


@dataclass
class PairEncoding:
    h_base: Tensor
    h_cot: Tensor
    gate_logit: Tensor
    traced: TracedBatch


def encode_training_pair(model: MicroTransformer, prompts, traces) -> PairEncoding:
    """Both embeddings and the gate logit from a single reasoning pass per item.

    ``prompts``/``traces`` are parallel lists (one entry per side and item).
    An empty trace gives ``h_cot == h_base``.
    """
    tb = forward_with_traces(model, prompts, traces, "reasoning")
    h_base = extract_embedding(model, tb.cache, "prompt")
    h_cot = extract_embedding(model, tb.cache, "full", require_cot=False)
    return PairEncoding(h_base, h_cot, model.gate_logit(tb.h_p), tb)


# ---------------------------------------------------------------------------
# inference


def encode_batch(model: MicroTransformer, items, mode: str, rng: np.random.Generator | None = None,
                 max_len: int = 32, temperature: float = 0.0, gate_override: float | None = None):
    """Encode token sequences under ``base``, ``cot`` or ``adaptive``.

    Returns ``(embeddings (n, d), w (n,), chose_cot (n,), traces)``. In base
    mode ``w`` is still reported but unused. ``gate_override`` replaces the
    gate logit (diagnostics and tests).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    items = [list(x) for x in items]
    n = len(items)
    with ad.no_grad():
        _, cache, h_p = model.forward_reasoning(items, "reasoning")
        logit = model.gate_logit(h_p).data
        if gate_override is not None:
            logit = np.full(n, float(gate_override))
        w = ad.sigmoid_np(logit)
        if mode == "base":
            chose = np.zeros(n, dtype=bool)
        elif mode == "cot":
            chose = np.ones(n, dtype=bool)
        else:
            chose = w >= 0.5
        out = np.zeros((n, model.config.d_model))
        traces: list[Trace] = [Trace() for _ in range(n)]
        base_rows = np.flatnonzero(~chose)
        cot_rows = np.flatnonzero(chose)
        if base_rows.size:
            sub = cache if base_rows.size == n else cache.rows(base_rows)
            out[base_rows] = extract_embedding(model, sub, "prompt").data
        if cot_rows.size:
            sub = cache if cot_rows.size == n else cache.rows(cot_rows)
            first = model.logits(Tensor(h_p.data[cot_rows])).data
            gen_ids, ext = generate_from(model, sub, first, max_len, temperature, rng, "reasoning")
            out[cot_rows] = extract_embedding(model, ext, "full", require_cot=False).data
            vocab_render = getattr(model, "vocab", None)
            for r, ids in zip(cot_rows, gen_ids):
                traces[r] = trace_from_ids(ids, vocab_render) if vocab_render is not None else Trace(ids)
    return out, w, chose, traces


def encode(model: MicroTransformer, item, mode: str, rng=None, max_len: int = 32, temperature: float = 0.0):
    """Single-item encode: ``(Embedding, RouteDecision | None, Trace)``."""
    vec, w, chose, traces = encode_batch(model, [item], mode, rng, max_len, temperature)
    emb = Embedding(vec[0], "cot" if chose[0] else "base", len(traces[0]))
    route = None if mode == "base" else RouteDecision(float(w[0]), bool(chose[0]))
    return emb, route, traces[0]


def sample_tokens(logits: np.ndarray, temperature: float, rng) -> np.ndarray:
    """Greedy (lowest id on ties) at temperature 0, else inverse-CDF sampling."""
    if temperature <= 0:
        return logits.argmax(axis=-1)
    p = ad.softmax_np(logits / temperature)
    u = rng.random(p.shape[0])
    c = np.cumsum(p, axis=-1)
    return np.minimum((c < (u * c[:, -1])[:, None]).sum(axis=-1), p.shape[-1] - 1)


def generate_from(model: MicroTransformer, cache: KVCache, first_logits: np.ndarray, max_len: int,
                  temperature: float, rng, adapter: str = "reasoning"):
    """Autoregressive decoding appended to ``cache`` as cot positions.

    Rows stop after emitting ``</answer>`` or after ``max_len`` tokens.
    Returns (token lists, extended cache). Must run under ``no_grad``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    stop = getattr(model, "stop_token", None)
    bsz = cache.batch
    active = np.ones(bsz, dtype=bool)
    out: list[list[int]] = [[] for _ in range(bsz)]
    logits = first_logits
    for _ in range(max_len):
        tok = sample_tokens(logits, temperature, rng)
        tok = np.where(active, tok, 0)
        for r in np.flatnonzero(active):
            out[r].append(int(tok[r]))
        hidden, cache = model.forward_segment(tok[:, None], active[:, None], cache, COT, adapter)
        if stop is not None:
            active = active & (tok != stop)
        if not active.any():
            break
        logits = model.logits(hidden[:, 0]).data
    return out, cache


def generate_trace(model: MicroTransformer, prompt, max_len: int, temperature: float, rng):
    """Single prompt: ``(Trace, extended KVCache)`` using the active adapter."""
    with ad.no_grad():
        _, cache, h_p = model.forward_reasoning([prompt], model.active)
        first = model.logits(h_p).data
        ids, cache = generate_from(model, cache, first, max_len, temperature, rng, model.active)
    vocab = getattr(model, "vocab", None)
    trace = trace_from_ids(ids[0], vocab) if vocab is not None else Trace(ids[0])
    return trace, cache
