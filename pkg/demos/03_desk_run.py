"""Stage 1 end to end at desk scale, then the four inference modes.

Generates the default world, trains the two adapters, the probes and the
gate, and evaluates on the held-out queries. Expect several minutes on one
CPU core; pass ``--steps N`` for a shorter (and weaker) run.

    python demos/03_desk_run.py [--steps 300]
"""

import argparse
import time

from dualroute.config import RunConfig
from dualroute.evaluate import evaluate, route_stats
from dualroute.train import train_sft
from dualroute.world import annotate, filter_corpus, generate_corpus, split_by_qid

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=None)
args = ap.parse_args()

cfg = RunConfig() if args.steps is None else RunConfig(sft_steps=args.steps)
corpus = annotate(generate_corpus(cfg.world_spec()))
filter_corpus(corpus)
train, held = split_by_qid(corpus, cfg.eval_fraction, cfg.seed)
print(f"{len(train.pairs)} training pairs, {len(held.pairs)} held-out queries, {len(corpus.targets)} targets")

t0 = time.time()


def show(step, row):
    if step % 100 == 0 or step == cfg.sft_steps - 1:
        print(f"  step {step:4d}  ntp {row['ntp']:.3f}  base {row['contrastive_base']:.3f}  "
              f"cot {row['contrastive_cot']:.3f}  route {row['routing']:.3f}  ({time.time() - t0:.0f}s)")


model, _ = train_sft(cfg, train, progress=show)
report = evaluate(model, held, batch=cfg.eval_batch, max_gen=cfg.max_gen)

print(f"\n{'mode':9s} {'Hit@1':>6s} {'NDCG@5':>7s} {'easy':>6s} {'hard':>6s} {'tokens':>7s}")
for m, r in report.modes.items():
    print(f"{m:9s} {r.hit_at_1:6.3f} {r.ndcg_at_5:7.3f} {r.strata['easy']['hit_at_1']:6.3f} "
          f"{r.strata['hard']['hit_at_1']:6.3f} {r.mean_reasoning_tokens:7.2f}")

print("\nwho thinks (adaptive mode):")
for r in route_stats(report.items):
    print(f"  {r['stratum']:5s} query {100 * r['trigger_rate_query']:5.1f}%  target {100 * r['trigger_rate_target']:5.1f}%")
