"""Stage 2: GRPO on the reasoning adapter, global-cache vs in-batch negatives.

Starts both runs from the same stage-1 checkpoint with the same seeds and
reports held-out gap and format rewards before and after. Pass a checkpoint
written by ``dualroute train-sft`` to skip stage 1:

    dualroute gen-data && dualroute train-sft
    python demos/04_rl_negatives.py --checkpoint runs/desk/sft.npz
"""

import argparse

from dualroute.config import RunConfig
from dualroute.grpo import build_cache, corpus_targets
from dualroute.model import MicroTransformer
from dualroute.train import freeze_for_rl, heldout_rewards, train_rl, train_sft
from dualroute.world import annotate, filter_corpus, generate_corpus, split_by_qid

ap = argparse.ArgumentParser()
ap.add_argument("--checkpoint")
ap.add_argument("--steps", type=int, default=None)
args = ap.parse_args()

cfg = RunConfig() if args.steps is None else RunConfig(rl_steps=args.steps)
corpus = annotate(generate_corpus(cfg.world_spec()))
filter_corpus(corpus)
train, held = split_by_qid(corpus, cfg.eval_fraction, cfg.seed)

if args.checkpoint:
    path = args.checkpoint
else:
    print("no checkpoint given: running stage 1 first (several minutes)")
    path = "/tmp/dualroute_demo_sft.npz"
    train_sft(cfg, train)[0].save(path)

for negatives in ("cache", "inbatch"):
    model = MicroTransformer.load(path)
    model.bind_vocabulary(corpus.vocab)
    freeze_for_rl(model)
    # the same frozen cache scores both variants on the held-out split
    cache = build_cache(model, corpus_targets(corpus))
    hyper = cfg.rl_hyper()
    before = heldout_rewards(model, held.pairs, cache, hyper, cfg.seed)
    run = train_rl(cfg, train, model, negatives=negatives)
    after = heldout_rewards(model, held.pairs, cache, hyper, cfg.seed)
    print(f"{negatives:8s} kept {len(run.kept)} of {len(run.keep_mask)} pairs after the variance filter")
    print(f"         held-out R_gap {before['r_gap']:.4f} -> {after['r_gap']:.4f}   "
          f"R_fmt {before['r_fmt']:.3f} -> {after['r_fmt']:.3f}   final KL {run.rows[-1]['kl']:.4f}")
