"""One cache, two embeddings.

A query runs once through the reasoning adapter; the trace is appended to
the same KV cache. The embedding probes then read that cache twice: under
the prompt mask (base embedding) and under the full mask (cot embedding).
Because trailing non-admitted columns are cut before the probe pass, the
base embedding is bit-for-bit the one you get when no trace exists at all.

The gate reads the last prompt state, detached, and says whether to think.

    python demos/02_dual_masks_and_gate.py
"""

import numpy as np

from dualroute import autodiff as ad
from dualroute.embed import encode_batch, encode_training_pair
from dualroute.model import BackboneConfig, MicroTransformer
from dualroute.world import WorldSpec, annotate, generate_corpus

spec = WorldSpec(n_attributes=12, n_slots=3, n_targets=64, n_easy=8, n_hard=8, vocab_size=48)
corpus = annotate(generate_corpus(spec))
model = MicroTransformer(BackboneConfig(vocab_size=48, d_model=32, n_layers=2, n_heads=4, d_ffn=64, max_seq=64,
                                        k_probes=4, lora_rank=4))
model.bind_vocabulary(corpus.vocab)

# give the adapters something other than their zero start so the demo is not trivial
rng = np.random.default_rng(0)
for name in ("reasoning", "embedding"):
    for a, b in model.adapters[name].values():
        b.data = rng.normal(0, 0.2, b.shape)

pairs = [p for p in corpus.pairs if p.difficulty == "hard"][:4]
prompts = [p.query_ids for p in pairs]
traces = [p.trace_query.token_ids for p in pairs]

enc = encode_training_pair(model, prompts, traces)
alone = encode_batch(model, prompts, "base")[0]
print("cache segments of the first row (1 prompt, 2 trace, 0 pad):")
print(" ", enc.traced.cache.segments[0].tolist())
print("base embedding == prompt-only encoding, bitwise:", np.array_equal(enc.h_base.data, alone))
print("cos(base, cot) per query:", np.round((enc.h_base.data * enc.h_cot.data).sum(1), 3).tolist())

# detachment: the contrastive signal never reaches the reasoning adapter
for p in model.named_parameters().values():
    p.requires_grad = True
ad.backward((enc.h_base * enc.h_cot).sum())
reach = any(p.grad is not None and np.any(p.grad) for p in model.adapter_params("reasoning"))
print("embedding-side loss reaches the reasoning adapter:", reach)

_, _, h_p = model.forward_reasoning(prompts)
print("gate scores before training:", model.gate_score(h_p).data.round(3).tolist(),
      "(w >= 0.5 means think first)")
