"""Command line: gen-data, train-sft, train-rl, eval, route-stats.

Every subcommand takes ``--config`` (a key = value file), ``--seed`` and
``--out`` (output directory) plus repeatable ``--set key=value`` overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config, parse_config
from .evaluate import EVAL_MODES, ITEM_COLUMNS, ROUTE_COLUMNS, SUMMARY_COLUMNS, evaluate, route_stats
from .grpo import RL_COLUMNS
from .model import MicroTransformer
from .train import SFT_COLUMNS, heldout_rewards, read_csv, train_rl, train_sft, write_csv
from .world import annotate, filter_corpus, generate_corpus, read_dataset, split_by_qid, write_dataset

SFT_CHECKPOINT = "sft.npz"
RL_CHECKPOINT = "rl.npz"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if over:
        merged = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in over.items())
        cfg = parse_config(merged)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.out is not None:
        cfg = cfg.with_overrides(out_dir=args.out)
    return cfg


def _dataset_path(cfg: RunConfig, args) -> Path:
    return Path(getattr(args, "data", None) or cfg.dataset)


def _load_split(cfg: RunConfig, args):
    corpus = read_dataset(_dataset_path(cfg, args))
    return split_by_qid(corpus, cfg.eval_fraction, cfg.seed)


def _load_model(path, vocab) -> MicroTransformer:
    model = MicroTransformer.load(path)
    model.bind_vocabulary(vocab)
    return model


def cmd_gen_data(cfg: RunConfig, args) -> int:
    corpus = annotate(generate_corpus(cfg.world_spec()))
    _, stats = filter_corpus(corpus)
    path = _dataset_path(cfg, args)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, corpus)
    print(json.dumps({"dataset": str(path), "targets": len(corpus.targets), "filter": stats}, indent=2))
    return 0


def cmd_train_sft(cfg: RunConfig, args) -> int:
    train, _ = _load_split(cfg, args)
    every = max(1, cfg.sft_steps // 20)

    def progress(step, row):
        if step % every == 0 or step == cfg.sft_steps - 1:
            print(f"sft step {step}: loss {row['loss']:.4f} ntp {row['ntp']:.4f} "
                  f"base {row['contrastive_base']:.4f} cot {row['contrastive_cot']:.4f} route {row['routing']:.4f}",
                  flush=True)

    model, rows = train_sft(cfg, train, progress=progress if not args.quiet else None)
    cfg.out.mkdir(parents=True, exist_ok=True)
    model.save(cfg.out / SFT_CHECKPOINT, extra={"stage": "sft", "config": cfg.to_text()})
    write_csv(cfg.out / "sft_metrics.csv", SFT_COLUMNS, rows)
    print(f"wrote {cfg.out / SFT_CHECKPOINT} and {cfg.out / 'sft_metrics.csv'}")
    return 0


def cmd_train_rl(cfg: RunConfig, args) -> int:
    train, held = _load_split(cfg, args)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out / SFT_CHECKPOINT
    model = _load_model(ckpt, train.vocab)
    every = max(1, cfg.rl_steps // 20)

    def progress(step, row):
        if step % every == 0 or step == cfg.rl_steps - 1:
            print(f"rl step {step}: gap {row['mean_gap_reward']:.4f} fmt {row['mean_fmt_reward']:.3f} "
                  f"len {row['mean_len']:.1f} kl {row['kl']:.5f} entropy {row['entropy']:.4f}", flush=True)

    run = train_rl(cfg, train, model, progress=progress if not args.quiet else None)
    model.save(cfg.out / RL_CHECKPOINT, extra={"stage": "rl", "config": cfg.to_text()})
    write_csv(cfg.out / "rl_metrics.csv", RL_COLUMNS, run.rows)
    sel = [{"qid": p.qid, "difficulty": p.difficulty, "dispersion": float(d), "kept": int(k)}
           for p, d, k in zip([p for p in train.pairs if p.clean], run.dispersion, run.keep_mask)]
    write_csv(cfg.out / "rl_filter.csv", ("qid", "difficulty", "dispersion", "kept"), sel)
    held_r = heldout_rewards(model, held.pairs, run.cache, cfg.rl_hyper(), cfg.seed)
    print(json.dumps({"checkpoint": str(cfg.out / RL_CHECKPOINT), "kept": len(run.kept), "heldout": held_r},
                     indent=2))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _, held = _load_split(cfg, args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in EVAL_MODES]
    if bad:
        raise ValueError(f"unknown mode(s): {', '.join(bad)}")
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out / SFT_CHECKPOINT
    model = _load_model(ckpt, held.vocab)
    report = evaluate(model, held, modes, batch=cfg.eval_batch, max_gen=cfg.max_gen)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "eval_report.json").write_text(report.to_json() + "\n")
    write_csv(cfg.out / "eval_summary.csv", SUMMARY_COLUMNS, report.summary_rows())
    write_csv(cfg.out / "eval_items.csv", ITEM_COLUMNS, report.items)
    print(report.to_json())
    return 0


def cmd_route_stats(cfg: RunConfig, args) -> int:
    items_path = Path(args.items) if args.items else cfg.out / "eval_items.csv"
    rows = route_stats(read_csv(items_path))
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "route_stats.csv", ROUTE_COLUMNS, rows)
    for r in rows:
        print(f"{r['stratum']:>6}  n={r['n']:<4d} query {100 * r['trigger_rate_query']:5.1f}%  "
              f"target {100 * r['trigger_rate_target']:5.1f}%  tokens/query {r['mean_query_tokens']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualroute", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate, annotate and judge the synthetic corpus")
    p.add_argument("--data", help="dataset path (default: config 'dataset')")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-sft", parents=[common], help="stage-1 training")
    p.add_argument("--data")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_sft)

    p = sub.add_parser("train-rl", parents=[common], help="stage-2 GRPO on the reasoning adapter")
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="SFT checkpoint (default: OUT/sft.npz)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics per inference mode")
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/sft.npz)")
    p.add_argument("--modes", default=",".join(EVAL_MODES), help="comma list of base,cot,adaptive,oracle")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route-stats", parents=[common], help="per-stratum trigger rates from eval items")
    p.add_argument("--items", help="eval_items.csv (default: OUT/eval_items.csv)")
    p.set_defaults(func=cmd_route_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        return args.func(cfg, args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"dualroute {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
