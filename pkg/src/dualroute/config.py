"""Run configuration: one flat ``key = value`` file, every key defaulted.

Lines starting with ``#`` and blank lines are ignored. Values are parsed
according to the field's type; tuples are comma separated. Unknown keys are
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .grpo import RlHyper
from .model import BackboneConfig
from .objectives import SftHyper
from .world import WorldSpec


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic world
    n_attributes: int = 24
    n_slots: int = 3
    n_targets: int = 512
    n_easy: int = 256
    n_hard: int = 256
    hard_rule_depth: int = 2
    op_offsets: tuple = (1, 2)
    doc_fillers: int = 0
    target_answers: bool = False
    teacher_noise: float = 0.0
    eval_fraction: float = 0.25
    # backbone
    vocab_size: int = 512
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    max_seq: int = 512
    k_probes: int = 16
    lora_rank: int = 8
    lora_alpha: float = 16.0
    emb_std: float = 0.5
    # SFT objective
    tau: float = 0.02
    lambda_base: float = 1.0
    lambda_cot: float = 1.0
    lambda_route: float = 1.0
    delta: float = 0.02
    tau_g: float = 0.05
    # RL
    group_size: int = 8
    kl_beta: float = 0.1
    clip_eps: float = 0.2
    tau_r: float = 0.1
    n_negatives: int = 256
    max_gen: int = 24
    sample_temperature: float = 1.5
    n_rollouts: int = 8
    keep_fraction: float = 0.5
    rl_batch_size: int = 8
    rl_negatives: str = "cache"
    # schedule and optimizer
    batch_size: int = 32
    sft_steps: int = 1500
    rl_steps: int = 200
    learning_rate_sft: float = 3e-3
    learning_rate_rl: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_frac: float = 0.05
    eval_batch: int = 128
    # paths
    dataset: str = "data/dataset.jsonl"
    out_dir: str = "runs/desk"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1 or self.rl_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.sft_steps < 0 or self.rl_steps < 0:
            raise ValueError("step counts must be >= 0")
        if not 0 < self.eval_fraction < 1:
            raise ValueError("eval_fraction must lie in (0, 1)")
        if self.rl_negatives not in ("cache", "inbatch"):
            raise ValueError("rl_negatives must be 'cache' or 'inbatch'")
        self.sft_hyper().validate()
        self.rl_hyper().validate()
        self.backbone().validate()

    # -- views ------------------------------------------------------------
    def world_spec(self) -> WorldSpec:
        return WorldSpec(
            n_attributes=self.n_attributes, n_targets=self.n_targets, n_easy=self.n_easy, n_hard=self.n_hard,
            hard_rule_depth=self.hard_rule_depth, teacher_noise=self.teacher_noise, seed=self.seed,
            n_slots=self.n_slots, op_offsets=tuple(self.op_offsets), doc_fillers=self.doc_fillers, target_answers=self.target_answers,
            vocab_size=self.vocab_size,
        )

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_ffn=self.d_ffn, max_seq=self.max_seq, k_probes=self.k_probes, lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha, emb_std=self.emb_std, seed=self.seed,
        )

    def sft_hyper(self) -> SftHyper:
        return SftHyper(self.tau, self.lambda_base, self.lambda_cot, self.lambda_route, self.delta, self.tau_g)

    def rl_hyper(self) -> RlHyper:
        return RlHyper(self.group_size, self.kl_beta, self.clip_eps, self.tau_r, self.n_negatives,
                       self.max_gen, self.sample_temperature)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    # -- io -----------------------------------------------------------------
    def with_overrides(self, **kw) -> "RunConfig":
        _check_keys(kw)
        return replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _check_keys(keys) -> None:
    bad = sorted(set(keys) - set(_FIELDS))
    if bad:
        raise ValueError(f"unknown config keys: {', '.join(bad)}")


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            flag = raw.lower()
            if flag not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError
            return flag in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        _check_keys([key])
        values[key] = _coerce(key, val)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
