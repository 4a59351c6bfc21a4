import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from dualroute.config import RunConfig  # noqa: E402
from dualroute.model import MicroTransformer  # noqa: E402
from dualroute.world import annotate, filter_corpus, generate_corpus  # noqa: E402

TINY = dict(
    n_attributes=12, n_slots=3, n_targets=64, n_easy=16, n_hard=16, vocab_size=48,
    d_model=16, n_layers=2, n_heads=2, d_ffn=32, max_seq=64, k_probes=4, lora_rank=2, lora_alpha=4.0,
    batch_size=8, sft_steps=4, rl_steps=2, rl_batch_size=2, group_size=4, n_rollouts=3, n_negatives=16,
    max_gen=16, eval_batch=32,
)


def tiny_config(**kw) -> RunConfig:
    return RunConfig(**{**TINY, **kw})


def perturb(model: MicroTransformer, seed: int = 0, scale: float = 0.3) -> MicroTransformer:
    """Give every trainable tensor non-trivial values so gradient tests are not degenerate."""
    rng = np.random.default_rng(seed)
    for which in ("reasoning", "embedding"):
        for a, b in model.adapters[which].values():
            a.data = rng.normal(0, scale, a.shape)
            b.data = rng.normal(0, scale, b.shape)
    for t in model.gate_params():
        t.data = rng.normal(0, scale, t.shape)
    return model


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def corpus(cfg):
    c = annotate(generate_corpus(cfg.world_spec()))
    filter_corpus(c)
    return c


@pytest.fixture
def model(cfg, corpus):
    m = MicroTransformer(cfg.backbone())
    m.bind_vocabulary(corpus.vocab)
    return m


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {line}")
