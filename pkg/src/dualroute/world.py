"""Synthetic retrieval world with a rule-based teacher and judge.

Targets are documents naming one value per attribute slot (plus filler
words). Easy queries name the target's attributes directly. Hard queries name
a *different* attribute tuple followed by ``depth`` offset operators; applying
the operators slot-wise (value + offset mod values-per-slot) yields the
target. Because the surface tuple of a hard query is itself a document when
the tuple space is fully populated, a bag-of-tokens match retrieves the wrong
target unless the chain is resolved.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from itertools import product
from pathlib import Path

import numpy as np

from .rng import make_rng
from .traces import ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN, Trace, trace_from_ids

SPECIALS = ("<pad>", "<eos>", THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, ";", "<query>", "<doc>")
DATASET_SCHEMA = "dualroute.dataset"
DATASET_VERSION = 1
_TOKEN_RE = re.compile(r"<[^<>\s]*>|[^\s<]+")


class Vocabulary:
    """Fixed symbol table: specials, offset operators, attributes, fillers."""

    def __init__(self, n_attributes: int, n_slots: int, op_offsets, vocab_size: int):
        self.n_attributes = n_attributes
        self.n_slots = n_slots
        self.values_per_slot = n_attributes // n_slots
        self.op_offsets = tuple(int(o) for o in op_offsets)
        tokens = list(SPECIALS)
        tokens += [f"+{o}" for o in self.op_offsets]
        self.attr_base = len(tokens)
        tokens += [f"A{i}" for i in range(n_attributes)]
        self.filler_base = len(tokens)
        if vocab_size < len(tokens):
            raise ValueError(f"vocab_size {vocab_size} smaller than {len(tokens)} required tokens")
        tokens += [f"w{i}" for i in range(vocab_size - len(tokens))]
        self.tokens = tokens
        self._index = {t: i for i, t in enumerate(tokens)}
        self.pad = self._index["<pad>"]
        self.eos = self._index["<eos>"]
        self.think_open = self._index[THINK_OPEN]
        self.think_close = self._index[THINK_CLOSE]
        self.answer_open = self._index[ANSWER_OPEN]
        self.answer_close = self._index[ANSWER_CLOSE]
        self.sep = self._index[";"]
        self.query = self._index["<query>"]
        self.doc = self._index["<doc>"]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index[token]

    def render(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def encode(self, text: str) -> list[int]:
        return [self._index[t] for t in _TOKEN_RE.findall(text)]

    # attributes -------------------------------------------------------
    def attr_id(self, attr: int) -> int:
        return self.attr_base + attr

    def is_attr(self, token_id: int) -> bool:
        return self.attr_base <= token_id < self.attr_base + self.n_attributes

    def attr_of(self, token_id: int) -> int:
        return token_id - self.attr_base

    def op_of(self, token_id: int) -> int | None:
        k = token_id - len(SPECIALS)
        return self.op_offsets[k] if 0 <= k < len(self.op_offsets) else None

    def op_id(self, offset: int) -> int:
        return self._index[f"+{offset}"]

    def filler_ids(self) -> range:
        return range(self.filler_base, len(self.tokens))

    def tuple_to_attrs(self, values) -> list[int]:
        return [s * self.values_per_slot + v for s, v in enumerate(values)]

    def shift(self, attrs, offset: int) -> list[int]:
        m = self.values_per_slot
        return [(a // m) * m + (a % m + offset) % m for a in attrs]


@dataclass
class WorldSpec:
    n_attributes: int = 24
    n_targets: int = 512
    n_easy: int = 256
    n_hard: int = 256
    hard_rule_depth: int = 2
    teacher_noise: float = 0.0
    seed: int = 0
    n_slots: int = 3
    op_offsets: tuple[int, ...] = (1,)
    doc_fillers: int = 0
    target_answers: bool = False
    vocab_size: int = 512

    def validate(self) -> None:
        if self.n_targets < 2:
            raise ValueError("n_targets must be at least 2")
        if self.n_slots < 1 or self.n_attributes % self.n_slots:
            raise ValueError("n_attributes must be a positive multiple of n_slots")
        m = self.n_attributes // self.n_slots
        if m < 2:
            raise ValueError("need at least two values per slot")
        if self.n_targets > m**self.n_slots:
            raise ValueError(f"n_targets {self.n_targets} exceeds {m ** self.n_slots} distinct attribute sets")
        if self.n_easy + self.n_hard > self.n_targets:
            raise ValueError(
                f"{self.n_easy + self.n_hard} queries need distinct targets but only {self.n_targets} exist"
            )
        if self.n_hard and self.hard_rule_depth < 1:
            raise ValueError("hard queries need hard_rule_depth >= 1")
        if not 0.0 <= self.teacher_noise <= 1.0:
            raise ValueError("teacher_noise must lie in [0, 1]")
        if not self.op_offsets or any(o % m == 0 for o in self.op_offsets):
            raise ValueError("op_offsets must be non-empty and non-zero modulo values per slot")
        if self.n_hard and all(sum(c) % m == 0 for c in product(self.op_offsets, repeat=self.hard_rule_depth)):
            raise ValueError("every op_offsets chain of hard_rule_depth wraps to a zero shift")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.n_attributes, self.n_slots, self.op_offsets, self.vocab_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_offsets"] = list(self.op_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown WorldSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "op_offsets" in d:
            d["op_offsets"] = tuple(d["op_offsets"])
        return cls(**d)


@dataclass
class RetrievalPair:
    qid: str
    query_ids: list[int]
    target_id: str
    target_ids: list[int]
    difficulty: str
    trace_query: Trace | None = None
    trace_target: Trace | None = None
    clean: bool = True


@dataclass
class Corpus:
    spec: WorldSpec
    vocab: Vocabulary
    pairs: list[RetrievalPair]
    targets: dict[str, list[int]]
    target_traces: dict[str, Trace] = field(default_factory=dict)

    def pair(self, qid: str) -> RetrievalPair:
        for p in self.pairs:
            if p.qid == qid:
                return p
        raise KeyError(qid)

    def target_ids(self) -> list[str]:
        return list(self.targets)

    def subset(self, pairs) -> "Corpus":
        return Corpus(self.spec, self.vocab, list(pairs), self.targets, self.target_traces)


# ---------------------------------------------------------------------------
# generation and rule resolution


def generate_corpus(spec: WorldSpec) -> Corpus:
    """Deterministic corpus for ``spec``; traces are attached by :func:`annotate`."""
    spec.validate()
    vocab = spec.vocabulary()
    rng = make_rng(spec.seed, "data")
    m, s = vocab.values_per_slot, spec.n_slots
    picks = rng.choice(m**s, size=spec.n_targets, replace=False)
    all_tuples = list(product(range(m), repeat=s))
    fillers = np.array(list(vocab.filler_ids()))

    targets: dict[str, list[int]] = {}
    target_attrs: list[list[int]] = []
    for n, k in enumerate(picks):
        attrs = vocab.tuple_to_attrs(all_tuples[int(k)])
        body = [vocab.attr_id(a) for a in attrs]
        if len(fillers):
            for _ in range(spec.doc_fillers):
                body.insert(int(rng.integers(0, len(body) + 1)), int(rng.choice(fillers)))
        targets[f"t{n:04d}"] = [vocab.doc] + body
        target_attrs.append(attrs)

    n_q = spec.n_easy + spec.n_hard
    chosen = rng.permutation(spec.n_targets)[:n_q]
    kinds = np.array(["easy"] * spec.n_easy + ["hard"] * spec.n_hard)
    kinds = kinds[rng.permutation(n_q)]
    tids = list(targets)
    pairs = []
    for n, (t, kind) in enumerate(zip(chosen, kinds)):
        attrs = target_attrs[int(t)]
        if kind == "easy":
            q = [vocab.query] + [vocab.attr_id(a) for a in attrs]
        else:
            ops = [int(rng.choice(spec.op_offsets)) for _ in range(spec.hard_rule_depth)]
            while sum(ops) % m == 0:  # a chain that wraps to the identity would not be hard
                ops = [int(rng.choice(spec.op_offsets)) for _ in range(spec.hard_rule_depth)]
            surface = vocab.shift(attrs, -sum(ops))
            q = [vocab.query] + [vocab.attr_id(a) for a in surface] + [vocab.op_id(o) for o in ops]
        tid = tids[int(t)]
        pairs.append(RetrievalPair(f"q{n:04d}", q, tid, list(targets[tid]), str(kind)))
    return Corpus(spec, vocab, pairs, targets)


def resolution_chain(tokens, vocab: Vocabulary) -> list[list[int]]:
    """Attribute lists after each operator in order; empty for operator-free inputs."""
    attrs = [vocab.attr_of(t) for t in tokens if vocab.is_attr(t)]
    chain = []
    for t in tokens:
        off = vocab.op_of(t)
        if off is not None:
            attrs = vocab.shift(attrs, off)
            chain.append(attrs)
    return chain


def resolve(tokens, vocab: Vocabulary) -> frozenset[int]:
    """Attribute set an item denotes after applying its operator chain."""
    chain = resolution_chain(tokens, vocab)
    if chain:
        return frozenset(chain[-1])
    return frozenset(vocab.attr_of(t) for t in tokens if vocab.is_attr(t))


def brute_force_matches(corpus: Corpus, query_ids) -> list[str]:
    """Every target whose attribute set equals the resolved query (exhaustive scan)."""
    want = resolve(query_ids, corpus.vocab)
    return [tid for tid, toks in corpus.targets.items() if resolve(toks, corpus.vocab) == want]


# ---------------------------------------------------------------------------
# teacher


def _answer_attrs(tokens, vocab: Vocabulary) -> list[int]:
    return sorted(resolve(tokens, vocab))


def teach(tokens, vocab: Vocabulary, noise: float, noise_rng: np.random.Generator) -> Trace:
    """Structured trace for a single item; reads nothing but ``tokens``."""
    chain = resolution_chain(tokens, vocab)
    answer = _answer_attrs(tokens, vocab)
    if noise > 0 and noise_rng.random() < noise:
        k = int(noise_rng.integers(len(answer)))
        m = vocab.values_per_slot
        answer = list(answer)
        answer[k] = vocab.shift([answer[k]], int(noise_rng.integers(1, m)))[0]
        answer.sort()
    ids = [vocab.think_open]
    for i, step in enumerate(chain):
        if i:
            ids.append(vocab.sep)
        ids += [vocab.attr_id(a) for a in step]
    ids += [vocab.think_close, vocab.answer_open]
    ids += [vocab.attr_id(a) for a in answer]
    ids.append(vocab.answer_close)
    return trace_from_ids(ids, vocab)


def target_teach(tokens, spec: WorldSpec, noise_rng: np.random.Generator) -> Trace:
    """Target-side template. Documents already list their attributes, so by
    default the teacher writes nothing; ``spec.target_answers`` asks for an
    empty-think trace that restates them instead."""
    vocab = spec.vocabulary()
    if not spec.target_answers and not resolution_chain(tokens, vocab):
        return trace_from_ids([], vocab)
    return teach(tokens, vocab, spec.teacher_noise, noise_rng)


def rule_teacher(pair: RetrievalPair, side: str, noise_rng: np.random.Generator, corpus: Corpus) -> Trace:
    if side == "query":
        return teach(pair.query_ids, corpus.vocab, corpus.spec.teacher_noise, noise_rng)
    if side == "target":
        return target_teach(pair.target_ids, corpus.spec, noise_rng)
    raise ValueError(f"side must be 'query' or 'target', got {side!r}")


def annotate(corpus: Corpus) -> Corpus:
    """Attach teacher traces to both sides of every pair and to every gallery target."""
    rng = make_rng(corpus.spec.seed, "teacher")
    for p in corpus.pairs:
        p.trace_query = rule_teacher(p, "query", rng, corpus)
        p.trace_target = rule_teacher(p, "target", rng, corpus)
    by_target = {p.target_id: p.trace_target for p in corpus.pairs}
    for tid, toks in corpus.targets.items():
        tr = by_target.get(tid)
        corpus.target_traces[tid] = tr if tr is not None else target_teach(toks, corpus.spec, rng)
    return corpus


# ---------------------------------------------------------------------------
# judge

JUDGE_MODES = ("strict", "hallucination_only", "skip")
DEFAULT_JUDGE_MODES = {"hard": ("strict", "skip"), "easy": ("hallucination_only", "hallucination_only")}


def _steps(ids, vocab: Vocabulary) -> list[list[int]]:
    steps, cur = [], []
    for t in ids:
        if t == vocab.sep:
            steps.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur or steps:
        steps.append(cur)
    return steps


def judge(tokens, trace: Trace | None, mode: str, vocab: Vocabulary) -> tuple[bool, str]:
    """Judge a trace for the item ``tokens``; see :func:`rule_judge`."""
    if mode not in JUDGE_MODES:
        raise ValueError(f"unknown judge mode {mode!r}")
    if mode == "skip":
        return True, "skipped"
    if trace is None or trace.is_empty:
        return True, "empty trace is clean"
    if not trace.well_formed:
        return False, "malformed"
    think, answer = trace.think_ids, trace.answer_ids
    if mode == "strict":
        chain = resolution_chain(tokens, vocab)
        got_steps = [[t for t in s] for s in _steps(think, vocab)]
        want_steps = [[vocab.attr_id(a) for a in step] for step in chain]
        if got_steps != want_steps:
            return False, "reasoning steps do not follow the rule chain"
        if not all(vocab.is_attr(t) for t in answer):
            return False, "answer contains non-attribute tokens"
        if frozenset(vocab.attr_of(t) for t in answer) != resolve(tokens, vocab) or len(answer) != len(set(answer)):
            return False, "answer does not match the resolved attributes"
        return True, "answer matches"
    # hallucination_only
    if not all(vocab.is_attr(t) or t == vocab.sep for t in think):
        return False, "reasoning mentions unknown symbols"
    if not answer or not all(vocab.is_attr(t) for t in answer):
        return False, "answer contains non-attribute tokens"
    relevant = resolve(tokens, vocab) | {vocab.attr_of(t) for t in tokens if vocab.is_attr(t)}
    if not any(vocab.attr_of(t) in relevant for t in answer):
        return False, "answer unrelated to the input"
    return True, "no hallucination"


def rule_judge(pair: RetrievalPair, trace: Trace | None, mode: str, vocab: Vocabulary, side: str = "query"):
    """``(is_correct, reason)`` for one side of a pair under a validation mode.

    strict: think steps equal the rule chain and the answer set equals the
    resolved gold. hallucination_only: only attribute symbols, answer
    non-empty with at least one token relevant to the input. skip: pass.
    Empty traces are clean under every mode.
    """
    tokens = pair.query_ids if side == "query" else pair.target_ids
    return judge(tokens, trace, mode, vocab)


def filter_corpus(corpus: Corpus, modes: dict | None = None) -> tuple[Corpus, dict]:
    """Mark and keep pairs whose non-skipped sides pass; stats per difficulty stratum."""
    modes = modes or DEFAULT_JUDGE_MODES
    counts: dict[str, list[int]] = {}
    kept = []
    for p in corpus.pairs:
        q_mode, t_mode = modes[p.difficulty]
        ok_q, _ = rule_judge(p, p.trace_query, q_mode, corpus.vocab, "query")
        ok_t, _ = rule_judge(p, p.trace_target, t_mode, corpus.vocab, "target")
        p.clean = ok_q and ok_t
        c = counts.setdefault(p.difficulty, [0, 0])
        c[0] += 1
        c[1] += int(p.clean)
        if p.clean:
            kept.append(p)
    stats = {
        k: {"total": v[0], "clean": v[1], "clean_pct": 100.0 * v[1] / v[0]} for k, v in sorted(counts.items())
    }
    total = sum(v[0] for v in counts.values())
    stats["overall"] = {
        "total": total,
        "clean": len(kept),
        "clean_pct": 100.0 * len(kept) / total if total else 0.0,
    }
    return corpus.subset(kept), stats


def split_by_qid(corpus: Corpus, eval_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Stratified train/eval split on qid; no qid lands on both sides."""
    rng = make_rng(seed, "split")
    train, held = [], []
    for kind in sorted({p.difficulty for p in corpus.pairs}):
        group = [p for p in corpus.pairs if p.difficulty == kind]
        order = rng.permutation(len(group))
        n_eval = int(round(eval_fraction * len(group)))
        held += [group[i] for i in order[:n_eval]]
        train += [group[i] for i in order[n_eval:]]
    key = lambda p: p.qid  # noqa: E731
    return corpus.subset(sorted(train, key=key)), corpus.subset(sorted(held, key=key))


# ---------------------------------------------------------------------------
# dataset file


def _trace_out(tr: Trace | None):
    return None if tr is None else tr.token_ids


def write_dataset(path, corpus: Corpus) -> None:
    """UTF-8 JSON lines: a schema header, one record per pair, then gallery-only targets."""
    path = Path(path)
    paired = {p.target_id for p in corpus.pairs}
    with path.open("w", encoding="utf-8") as fh:
        header = {"schema": DATASET_SCHEMA, "version": DATASET_VERSION, "world": corpus.spec.to_dict()}
        fh.write(json.dumps(header) + "\n")
        for p in corpus.pairs:
            rec = {
                "qid": p.qid,
                "query_ids": p.query_ids,
                "target_id": p.target_id,
                "target_ids": p.target_ids,
                "trace_query": _trace_out(p.trace_query),
                "trace_target": _trace_out(p.trace_target),
                "difficulty": p.difficulty,
                "clean": p.clean,
            }
            fh.write(json.dumps(rec) + "\n")
        for tid, toks in corpus.targets.items():
            if tid in paired:
                continue
            rec = {"record": "target", "target_id": tid, "target_ids": toks,
                   "trace_target": _trace_out(corpus.target_traces.get(tid))}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> Corpus:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"{path}: not a dataset file (schema {header.get('schema')!r})")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        spec = WorldSpec.from_dict(header["world"])
        vocab = spec.vocabulary()

        def tr(ids):
            return None if ids is None else trace_from_ids(ids, vocab)

        pairs, targets, traces = [], {}, {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("record") == "target":
                targets[rec["target_id"]] = rec["target_ids"]
                if rec.get("trace_target") is not None:
                    traces[rec["target_id"]] = tr(rec["trace_target"])
                continue
            p = RetrievalPair(
                rec["qid"], rec["query_ids"], rec["target_id"], rec["target_ids"], rec["difficulty"],
                tr(rec["trace_query"]), tr(rec["trace_target"]), bool(rec["clean"]),
            )
            pairs.append(p)
            targets[p.target_id] = p.target_ids
            if p.trace_target is not None:
                traces[p.target_id] = p.trace_target
    ordered = dict(sorted(targets.items()))
    return Corpus(spec, vocab, pairs, ordered, traces)
