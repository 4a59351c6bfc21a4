"""A tour of the synthetic retrieval world.

Easy queries name their document's attributes outright. Hard queries name a
decoy tuple plus operator tokens; resolving the operators lands on the real
document. The rule teacher writes the resolution as a think/answer trace and
the rule judge decides which pairs are clean enough to train on.

    python demos/01_world_and_traces.py
"""

from dualroute.rng import make_rng
from dualroute.traces import format_reward
from dualroute.world import WorldSpec, annotate, brute_force_matches, filter_corpus, generate_corpus, teach

spec = WorldSpec(n_attributes=12, n_slots=3, n_targets=64, n_easy=16, n_hard=16, vocab_size=48,
                 op_offsets=(1, 2), teacher_noise=0.3)
corpus = annotate(generate_corpus(spec))
v = corpus.vocab

print("vocabulary:", len(v.tokens), "tokens;", v.values_per_slot, "values in each of", spec.n_slots, "slots\n")

for kind in ("easy", "hard"):
    p = next(x for x in corpus.pairs if x.difficulty == kind)
    print(f"[{kind}] query    {v.render(p.query_ids)}")
    print(f"       gold doc  {v.render(p.target_ids)}   ({p.target_id})")
    print(f"       trace     {p.trace_query.text}")
    print(f"       matcher   {brute_force_matches(corpus, p.query_ids)}")
    print()

print("documents need no reasoning, so their trace is empty:", repr(corpus.target_traces[corpus.pairs[0].target_id].text))

_, stats = filter_corpus(corpus)
print("\njudge with 30% answer noise (strict on hard queries, hallucination-only on easy ones):")
for k, s in stats.items():
    print(f"  {k:8s} {s['clean']:3d}/{s['total']:<3d} clean ({s['clean_pct']:.1f}%)")

hard = next(x for x in corpus.pairs if x.difficulty == "hard")
noisy = teach(hard.query_ids, v, 1.0, make_rng(1, "teacher"))
print("\na corrupted hard trace:", noisy.text)

print("\nformat reward on a few strings:")
for s in ["<think></think><answer>A1</answer>", " <think>a</think>\n<answer>b</answer> ",
          "<answer>b</answer>", "<think>a</think><answer>b</answer><answer>c</answer>"]:
    print(f"  {format_reward(s)}  {s!r}")
