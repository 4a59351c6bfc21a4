"""Retrieval evaluation under base, cot, adaptive and oracle modes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .embed import encode_batch
from .metrics import gold_ranks, hit_at_1, ndcg_at_k
from .model import MicroTransformer
from .world import Corpus

EVAL_MODES = ("base", "cot", "adaptive", "oracle")
ITEM_COLUMNS = ("mode", "qid", "difficulty", "rank", "hit_at_1", "ndcg_at_5", "query_tokens", "query_cot",
                "query_w", "target_tokens", "target_cot")


@dataclass
class ModeResult:
    mode: str
    n: int
    hit_at_1: float
    ndcg_at_5: float
    mean_reasoning_tokens: float
    mean_reasoning_tokens_target: float
    trigger_rate_query: float | None
    trigger_rate_target: float | None
    strata: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    modes: dict
    items: list

    def row(self, mode: str) -> ModeResult:
        return self.modes[mode]

    def to_json(self) -> str:
        return json.dumps({m: asdict(r) for m, r in self.modes.items()}, indent=2, sort_keys=True)

    def summary_rows(self) -> list[dict]:
        out = []
        for m, r in self.modes.items():
            out.append({
                "mode": m, "n": r.n, "hit_at_1": r.hit_at_1, "ndcg_at_5": r.ndcg_at_5,
                "mean_reasoning_tokens": r.mean_reasoning_tokens,
                "mean_reasoning_tokens_target": r.mean_reasoning_tokens_target,
                "trigger_rate_query": "" if r.trigger_rate_query is None else r.trigger_rate_query,
                "trigger_rate_target": "" if r.trigger_rate_target is None else r.trigger_rate_target,
            })
        return out


SUMMARY_COLUMNS = ("mode", "n", "hit_at_1", "ndcg_at_5", "mean_reasoning_tokens", "mean_reasoning_tokens_target",
                   "trigger_rate_query", "trigger_rate_target")


@dataclass
class _Encoded:
    vecs: np.ndarray
    w: np.ndarray
    chose: np.ndarray
    tokens: np.ndarray


def _encode_all(model, items, mode, batch, max_gen, gate_override=None) -> _Encoded:
    vecs, ws, chs, toks = [], [], [], []
    for s in range(0, len(items), batch):
        v, w, ch, tr = encode_batch(model, items[s : s + batch], mode, max_len=max_gen, gate_override=gate_override)
        vecs.append(v)
        ws.append(w)
        chs.append(ch)
        toks.append(np.array([len(t) for t in tr]))
    return _Encoded(np.concatenate(vecs), np.concatenate(ws), np.concatenate(chs), np.concatenate(toks))


def _summarize(mode, ranks, q, t, gold, strata_of, routed) -> ModeResult:
    hits = hit_at_1(ranks)
    ndcg = ndcg_at_k(ranks, 5)
    kinds = np.array(strata_of)
    strata = {}
    for k in sorted(set(strata_of)):
        sel = kinds == k
        strata[k] = {
            "n": int(sel.sum()),
            "hit_at_1": float(hits[sel].mean()),
            "ndcg_at_5": float(ndcg[sel].mean()),
            "mean_reasoning_tokens": float(q.tokens[sel].mean()),
            "trigger_rate_query": float(q.chose[sel].mean()) if routed else None,
        }
    return ModeResult(
        mode, len(ranks), float(hits.mean()), float(ndcg.mean()), float(q.tokens.mean()),
        float(t.tokens[gold].mean()),
        float(q.chose.mean()) if routed else None,
        float(t.chose.mean()) if routed else None,
        strata,
    )


def evaluate(model: MicroTransformer, corpus: Corpus, modes=EVAL_MODES, batch: int = 128,
             max_gen: int = 24, gate_override: float | None = None) -> EvalReport:
    """Rank every target for each query of ``corpus`` under each requested mode.

    Targets are encoded once per mode policy. Oracle picks, per query, the
    best rank among the base, cot and adaptive outcomes (fewest tokens on
    ties); it is a label-aware upper bound, not a deployable mode.
    ``gate_override`` fixes the adaptive gate logit (diagnostics).
    """
    modes = list(modes)
    bad = [m for m in modes if m not in EVAL_MODES]
    if bad:
        raise ValueError(f"unknown mode(s) {bad}; expected a subset of {EVAL_MODES}")
    if not corpus.pairs:
        raise ValueError("evaluation split is empty")
    tids = sorted(corpus.targets)
    col = {t: i for i, t in enumerate(tids)}
    gold = np.array([col[p.target_id] for p in corpus.pairs])
    kinds = [p.difficulty for p in corpus.pairs]
    needed = set(modes) - {"oracle"}
    if "oracle" in modes:
        needed |= {"base", "cot", "adaptive"}

    enc, ranks = {}, {}
    for m in ("base", "cot", "adaptive"):
        if m not in needed:
            continue
        go = gate_override if m == "adaptive" else None
        t = _encode_all(model, [corpus.targets[x] for x in tids], m, batch, max_gen, go)
        q = _encode_all(model, [p.query_ids for p in corpus.pairs], m, batch, max_gen, go)
        enc[m] = (q, t)
        ranks[m] = gold_ranks(q.vecs @ t.vecs.T, gold)

    results, items = {}, []
    for m in modes:
        if m == "oracle":
            stack = np.stack([ranks["base"], ranks["adaptive"], ranks["cot"]])
            cost = np.stack([enc[x][0].tokens for x in ("base", "adaptive", "cot")])
            pick = np.lexsort((cost, stack), axis=0)[0]
            r = stack[pick, np.arange(len(gold))]
            srcs = [enc[x] for x in ("base", "adaptive", "cot")]
            q = _Encoded(
                np.zeros((len(gold), 0)), np.zeros(len(gold)),
                np.array([srcs[k][0].chose[i] for i, k in enumerate(pick)]),
                np.array([srcs[k][0].tokens[i] for i, k in enumerate(pick)]),
            )
            t = enc["base"][1]
            results[m] = _summarize(m, r, q, t, gold, kinds, routed=False)
            tgt_tok = np.array([srcs[k][1].tokens[gold[i]] for i, k in enumerate(pick)])
            results[m].mean_reasoning_tokens_target = float(tgt_tok.mean())
        else:
            q, t = enc[m]
            r = ranks[m]
            results[m] = _summarize(m, r, q, t, gold, kinds, routed=(m == "adaptive"))
            tgt_tok = t.tokens[gold]
        hits, nd = hit_at_1(r), ndcg_at_k(r, 5)
        for i, p in enumerate(corpus.pairs):
            items.append({
                "mode": m, "qid": p.qid, "difficulty": p.difficulty, "rank": int(r[i]),
                "hit_at_1": float(hits[i]), "ndcg_at_5": float(nd[i]),
                "query_tokens": int(q.tokens[i]), "query_cot": int(q.chose[i]),
                "query_w": float(q.w[i]) if m != "oracle" else "",
                "target_tokens": int(tgt_tok[i]),
                "target_cot": int(enc[m][1].chose[gold[i]]) if m != "oracle" else "",
            })
    return EvalReport(results, items)


def route_stats(items) -> list[dict]:
    """Per-stratum query-side and target-side trigger rates from adaptive item rows."""
    rows = [r for r in items if r["mode"] == "adaptive"]
    if not rows:
        raise ValueError("no adaptive-mode rows to summarize")
    out = []
    for kind in sorted({r["difficulty"] for r in rows}) + ["all"]:
        sel = [r for r in rows if kind == "all" or r["difficulty"] == kind]
        out.append({
            "stratum": kind,
            "n": len(sel),
            "trigger_rate_query": float(np.mean([float(r["query_cot"]) for r in sel])),
            "trigger_rate_target": float(np.mean([float(r["target_cot"]) for r in sel])),
            "mean_query_tokens": float(np.mean([float(r["query_tokens"]) for r in sel])),
        })
    return out


ROUTE_COLUMNS = ("stratum", "n", "trigger_rate_query", "trigger_rate_target", "mean_query_tokens")
