"""Miniature decoder-only transformer with two switchable LoRA adapters.

The backbone (token/position embeddings, attention and feed-forward
projections, norm gains) is frozen at initialization. Adapters add a scaled
low-rank product ``(alpha / r) * x @ A @ B`` to every attention and
feed-forward projection; ``B`` starts at zero so an untrained adapter leaves
the backbone's output bit-for-bit unchanged.

Sequences are processed in segments against a :class:`KVCache`: a prompt
segment, then (teacher-forced or sampled) trace tokens labelled ``cot``.
The embedding path appends ``K`` learnable probe vectors that read the cache
under a visibility mask; probes carry no positional embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, detach
from .rng import make_rng

PAD, PROMPT, COT = 0, 1, 2
PROJECTIONS = ("q", "k", "v", "o", "up", "down")
ADAPTERS = ("reasoning", "embedding", "reference")
CHECKPOINT_FORMAT = "dualroute.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
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
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.k_probes < 1:
            raise ValueError("k_probes must be >= 1")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown BackboneConfig keys: {sorted(bad)}")
        return cls(**d)


class KVCache:
    """Per-layer keys/values of processed positions plus a segment label per position.

    ``keys[l]``/``values[l]`` have shape (batch, heads, length, head_dim).
    ``segments`` is (batch, length) with PAD/PROMPT/COT labels; ``next_pos``
    holds each row's next absolute position. With ``detached`` set, readers
    receive gradient-free copies.
    """

    def __init__(self, n_layers: int, batch: int):
        self.keys: list[Tensor | None] = [None] * n_layers
        self.values: list[Tensor | None] = [None] * n_layers
        self.segments = np.zeros((batch, 0), dtype=np.int8)
        self.next_pos = np.zeros(batch, dtype=np.int64)
        self.detached = False

    def __len__(self) -> int:
        return self.segments.shape[1]

    @property
    def batch(self) -> int:
        return self.segments.shape[0]

    def prompt_lengths(self) -> np.ndarray:
        return (self.segments == PROMPT).sum(axis=1)

    def cot_lengths(self) -> np.ndarray:
        return (self.segments == COT).sum(axis=1)

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        k, v = self.keys[i], self.values[i]
        if self.detached:
            return detach(k), detach(v)
        return k, v

    def detach(self) -> "KVCache":
        """Shallow copy whose readers see constants."""
        out = KVCache(len(self.keys), self.batch)
        out.keys, out.values = list(self.keys), list(self.values)
        out.segments, out.next_pos = self.segments, self.next_pos
        out.detached = True
        return out

    def rows(self, idx) -> "KVCache":
        """Cache restricted to a subset of batch rows (values only, no graph)."""
        idx = np.asarray(idx)
        out = KVCache(len(self.keys), len(idx))
        out.keys = [Tensor(k.data[idx]) for k in self.keys]
        out.values = [Tensor(v.data[idx]) for v in self.values]
        out.segments = self.segments[idx]
        out.next_pos = self.next_pos[idx]
        out.detached = self.detached
        return out


def pad_batch(seqs, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns (ids, valid)."""
    n = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), max(n, 1)), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), max(n, 1)), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


class MicroTransformer:
    """Frozen backbone, reasoning/embedding/reference adapters, probes and gate."""

    def __init__(self, config: BackboneConfig):
        config.validate()
        self.config = config
        c = config
        rng = make_rng(c.seed, "init")
        d, f = c.d_model, c.d_ffn
        self.backbone: dict[str, Tensor] = {}
        self.backbone["tok_emb"] = Tensor(rng.normal(0.0, c.emb_std, (c.vocab_size, d)))
        self.backbone["pos_emb"] = Tensor(rng.normal(0.0, c.emb_std, (c.max_seq, d)))
        resid_scale = 1.0 / math.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            p = f"layers.{i}."
            self.backbone[p + "norm1"] = Tensor(np.ones(d))
            self.backbone[p + "norm2"] = Tensor(np.ones(d))
            for name, shape, std in (
                ("q", (d, d), 1 / math.sqrt(d)),
                ("k", (d, d), 1 / math.sqrt(d)),
                ("v", (d, d), 1 / math.sqrt(d)),
                ("o", (d, d), resid_scale / math.sqrt(d)),
                ("up", (d, f), 1 / math.sqrt(d)),
                ("down", (f, d), resid_scale / math.sqrt(f)),
            ):
                self.backbone[p + name] = Tensor(rng.normal(0.0, std, shape))
        self.backbone["final_norm"] = Tensor(np.ones(d))

        self.adapters: dict[str, dict[str, tuple[Tensor, Tensor]]] = {}
        for which in ("reasoning", "embedding"):
            self.adapters[which] = self._init_adapter(rng)
        self.lora_scale = c.lora_alpha / c.lora_rank

        self.probes = Tensor(rng.normal(0.0, c.emb_std, (c.k_probes, d)), requires_grad=True)
        self.gate = {
            "w1": Tensor(rng.normal(0.0, 1 / math.sqrt(d), (d, d)), requires_grad=True),
            "b1": Tensor(np.zeros(d), requires_grad=True),
            "w2": Tensor(np.zeros((d, 1)), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }
        self.active = "reasoning"
        self.vocab = None
        self.stop_token: int | None = None

    def bind_vocabulary(self, vocab) -> None:
        """Attach a vocabulary so generation stops at ``</answer>`` and traces render."""
        if len(vocab) > self.config.vocab_size:
            raise ValueError("vocabulary larger than the model's vocab_size")
        self.vocab = vocab
        self.stop_token = vocab.id("</answer>")

    def _init_adapter(self, rng) -> dict[str, tuple[Tensor, Tensor]]:
        c = self.config
        out = {}
        for i in range(c.n_layers):
            for name in PROJECTIONS:
                w = self.backbone[f"layers.{i}.{name}"]
                a = Tensor(rng.normal(0.0, 0.02, (w.shape[0], c.lora_rank)), requires_grad=True)
                b = Tensor(np.zeros((c.lora_rank, w.shape[1])), requires_grad=True)
                out[f"layers.{i}.{name}"] = (a, b)
        return out

    # -- adapter bookkeeping ------------------------------------------
    def set_active_adapter(self, which: str) -> None:
        if which not in self.adapters:
            raise ValueError(f"unknown adapter {which!r}; available: {sorted(self.adapters)}")
        self.active = which

    def snapshot_reference(self) -> None:
        """Freeze a copy of the reasoning adapter as the reference policy."""
        self.adapters["reference"] = {
            k: (Tensor(a.data.copy()), Tensor(b.data.copy())) for k, (a, b) in self.adapters["reasoning"].items()
        }

    def adapter_params(self, which: str) -> list[Tensor]:
        return [t for pair in self.adapters[which].values() for t in pair]

    def gate_params(self) -> list[Tensor]:
        return list(self.gate.values())

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        for which, ad_ in self.adapters.items():
            for k, (a, b) in ad_.items():
                out[f"{which}.{k}.A"] = a
                out[f"{which}.{k}.B"] = b
        out["probes"] = self.probes
        for k, v in self.gate.items():
            out[f"gate.{k}"] = v
        return out

    def freeze(self, params) -> None:
        for p in params:
            p.requires_grad = False

    # -- building blocks ------------------------------------------------
    def _linear(self, x: Tensor, name: str, adapter: str | None) -> Tensor:
        out = x @ self.backbone[name]
        if adapter is not None:
            a, b = self.adapters[adapter][name]
            out = out + ad.scale((x @ a) @ b, self.lora_scale)
        return out

    def _heads(self, x: Tensor) -> Tensor:
        bsz, t, _ = x.shape
        h = self.config.n_heads
        return x.reshape(bsz, t, h, self.config.d_model // h).transpose(0, 2, 1, 3)

    def _merge(self, x: Tensor) -> Tensor:
        bsz, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(bsz, t, h * dh)

    def _block(self, i, x, past_k, past_v, blocked, adapter):
        """One pre-norm layer. ``blocked`` is True where attention is disallowed."""
        p = f"layers.{i}."
        h = ad.rms_norm(x, self.backbone[p + "norm1"])
        q = self._heads(self._linear(h, p + "q", adapter))
        k = self._heads(self._linear(h, p + "k", adapter))
        v = self._heads(self._linear(h, p + "v", adapter))
        keys = k if past_k is None else ad.concat([past_k, k], axis=2)
        vals = v if past_v is None else ad.concat([past_v, v], axis=2)
        dh = self.config.d_model // self.config.n_heads
        scores = ad.scale(q @ keys.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
        if blocked is not None:
            scores = ad.masked_fill(scores, blocked, -np.inf)
        att = ad.softmax(scores) @ vals
        x = x + self._linear(self._merge(att), p + "o", adapter)
        h2 = ad.rms_norm(x, self.backbone[p + "norm2"])
        x = x + self._linear(ad.gelu(self._linear(h2, p + "up", adapter)), p + "down", adapter)
        return x, k, v

    # -- reasoning path -------------------------------------------------
    def forward_segment(self, ids: np.ndarray, valid: np.ndarray, cache: KVCache | None,
                        segment: int = PROMPT, adapter: str | None = "active") -> tuple[Tensor, KVCache]:
        """Run new tokens (batch, T) causally against ``cache``; returns final-normed hidden states.

        Rows are right-padded: ``valid`` marks real tokens. Keys written for
        padding get the PAD label and are never attended to.
        """
        if adapter == "active":
            adapter = self.active
        ids = np.asarray(ids, dtype=np.int64)
        valid = np.asarray(valid, dtype=bool)
        bsz, t = ids.shape
        if cache is None:
            cache = KVCache(self.config.n_layers, bsz)
        past = len(cache)
        pos = cache.next_pos[:, None] + np.arange(t)[None, :]
        if np.any(pos[valid] >= self.config.max_seq):
            raise ValueError(f"sequence exceeds max_seq={self.config.max_seq}")
        pos = np.minimum(pos, self.config.max_seq - 1)
        x = self.backbone["tok_emb"][ids] + self.backbone["pos_emb"][pos]

        causal = np.tril(np.ones((t, t), dtype=bool))
        allowed_new = causal[None, :, :] & valid[:, None, :]
        allowed_old = np.broadcast_to((cache.segments != PAD)[:, None, :], (bsz, t, past))
        allowed = np.concatenate([allowed_old, allowed_new], axis=2)
        blocked = ~allowed[:, None, :, :]

        new_keys, new_vals = [], []
        for i in range(self.config.n_layers):
            pk, pv = (None, None) if past == 0 else cache.layer(i)
            x, k, v = self._block(i, x, pk, pv, blocked, adapter)
            new_keys.append(k)
            new_vals.append(v)
        hidden = ad.rms_norm(x, self.backbone["final_norm"])

        out = KVCache(self.config.n_layers, bsz)
        for i in range(self.config.n_layers):
            if past == 0:
                out.keys[i], out.values[i] = new_keys[i], new_vals[i]
            else:
                out.keys[i] = ad.concat([cache.keys[i], new_keys[i]], axis=2)
                out.values[i] = ad.concat([cache.values[i], new_vals[i]], axis=2)
        out.segments = np.concatenate([cache.segments, np.where(valid, segment, PAD).astype(np.int8)], axis=1)
        out.next_pos = cache.next_pos + valid.sum(axis=1)
        out.detached = cache.detached
        return hidden, out

    def logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.backbone["tok_emb"].transpose()

    def forward_reasoning(self, prompts, adapter: str | None = "active"):
        """Prefill prompts; returns (hidden, cache, h_p) with h_p the last prompt position's state."""
        seqs = [list(p) for p in prompts]
        if any(len(s) == 0 for s in seqs):
            raise ValueError("prompt must be non-empty")
        ids, valid = pad_batch(seqs)
        hidden, cache = self.forward_segment(ids, valid, None, PROMPT, adapter)
        last = valid.sum(axis=1) - 1
        h_p = hidden[np.arange(len(seqs)), last]
        return hidden, cache, h_p

    # -- gate -------------------------------------------------------------
    def gate_logit(self, h_p: Tensor) -> Tensor:
        """Scalar logit per row; the input is detached so only gate weights learn from it."""
        g = self.gate
        h = ad.tanh(detach(h_p) @ g["w1"] + g["b1"])
        return (h @ g["w2"] + g["b2"]).reshape(h_p.shape[0])

    def gate_score(self, h_p: Tensor) -> Tensor:
        return ad.sigmoid(self.gate_logit(h_p))

    # -- probe path -------------------------------------------------------
    def probe_pass(self, cache: KVCache, admit: np.ndarray | None, adapter: str | None = "embedding") -> Tensor:
        """Run the K probes over ``cache``; returns final-normed probe states (batch, K, d).

        ``admit`` (batch, len(cache)) selects visible cached positions; None
        admits all. Probes always see each other, never the reverse.
        """
        bsz = cache.batch
        kp = self.config.k_probes
        x = ad.broadcast_to(self.probes.reshape(1, kp, self.config.d_model), (bsz, kp, self.config.d_model))
        blocked = None
        if admit is not None:
            allowed = np.concatenate([admit, np.ones((bsz, kp), dtype=bool)], axis=1)
            blocked = ~allowed[:, None, None, :]
        for i in range(self.config.n_layers):
            pk, pv = cache.layer(i)
            x, _, _ = self._block(i, x, pk, pv, blocked, adapter)
        return ad.rms_norm(x, self.backbone["final_norm"])

    # -- checkpoints ------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def save(self, path, extra: dict | None = None) -> None:
        params = self.state_dict()
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "active": self.active,
            "shapes": {k: list(v.shape) for k, v in params.items()},
            "extra": extra or {},
        }
        arrays = {f"p:{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "MicroTransformer":
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: not a checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            model = cls(BackboneConfig.from_dict(meta["config"]))
            if "reference.layers.0.q.A" in meta["shapes"]:
                model.snapshot_reference()
            named = model.named_parameters()
            if set(named) != set(meta["shapes"]):
                raise ValueError(f"{path}: parameter set mismatch")
            for k, t in named.items():
                arr = z[f"p:{k}"]
                if list(arr.shape) != meta["shapes"][k] or arr.shape != t.shape:
                    raise ValueError(f"{path}: shape mismatch for {k}")
                t.data = np.array(arr, dtype=np.float64)
            model.active = meta.get("active", "reasoning")
        model.checkpoint_extra = meta.get("extra", {})
        return model
