"""Training losses: next-token prediction, InfoNCE, and the routing target."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SftHyper:
    tau: float = 0.02
    lambda_base: float = 1.0
    lambda_cot: float = 1.0
    lambda_route: float = 1.0
    delta: float = 0.0
    tau_g: float = 0.1

    def validate(self) -> None:
        if self.tau <= 0 or self.tau_g <= 0:
            raise ValueError("temperatures must be positive")
        if min(self.lambda_base, self.lambda_cot, self.lambda_route) < 0:
            raise ValueError("loss weights must be non-negative")


def ntp_loss(pred_hidden: Tensor | None, logits_fn, targets: np.ndarray, valid: np.ndarray) -> tuple[Tensor, int]:
    """Token-averaged negative log-likelihood of the trace tokens.

    ``logits_fn`` maps hidden states to vocabulary logits. Normalized by the
    total number of valid trace tokens in the batch; returns ``(0, 0)`` when
    there are none.
    """
    n = int(valid.sum())
    if n == 0 or pred_hidden is None:
        return Tensor(0.0), 0
    b, t = np.nonzero(valid)
    h = pred_hidden[b, t]
    lp = ad.log_softmax(logits_fn(h))
    picked = lp[np.arange(n), targets[b, t]]
    return ad.scale(picked.sum(), -1.0 / n), n


def infonce(queries: Tensor, targets: Tensor, tau: float) -> Tensor:
    """One-directional InfoNCE over in-batch negatives; rows are unit vectors."""
    if queries.shape[0] == 0:
        raise ValueError("InfoNCE needs a non-empty batch")
    if queries.shape != targets.shape:
        raise ad.ShapeError(f"query/target shapes differ: {queries.shape} vs {targets.shape}")
    sims = ad.scale(queries @ targets.transpose(), 1.0 / tau)
    lp = ad.log_softmax(sims)
    n = queries.shape[0]
    return ad.scale(lp[np.arange(n), np.arange(n)].sum(), -1.0 / n)


def positive_margins(own: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """``m_i = cos(own_i, bank_i) - max_{j != i} cos(own_i, bank_j)`` for every row.

    With a single row there is no negative and the max is taken as -1.
    """
    sims = own @ bank.T
    pos = np.diag(sims).copy()
    if sims.shape[0] == 1:
        return pos + 1.0
    off = sims.copy()
    np.fill_diagonal(off, -np.inf)
    return pos - off.max(axis=1)


def positive_margin(i: int, own: np.ndarray, bank: np.ndarray) -> float:
    """Margin of row ``i`` (``own`` is its vector, ``bank`` the opposite-side batch)."""
    sims = bank @ own
    others = np.delete(sims, i)
    return float(sims[i] - (others.max() if others.size else -1.0))


def routing_target(m_cot, m_base, delta: float = 0.0, tau_g: float = 0.1):
    """Soft label for the gate: sigmoid((m_cot - m_base - delta) / tau_g)."""
    if tau_g <= 0:
        raise ValueError("tau_g must be positive")
    return ad.sigmoid_np((np.asarray(m_cot) - np.asarray(m_base) - delta) / tau_g)


def routing_loss(gate_logit: Tensor, w_hat: np.ndarray) -> Tensor:
    """Binary cross-entropy between sigmoid(gate_logit) and soft targets, from logits."""
    n = gate_logit.shape[0]
    per = ad.softplus(gate_logit) - gate_logit * Tensor(np.asarray(w_hat, dtype=np.float64))
    return ad.scale(per.sum(), 1.0 / n)


def sft_total(ntp: Tensor, l_base: Tensor, l_cot: Tensor, l_route: Tensor, h: SftHyper) -> Tensor:
    return (
        ntp
        + ad.scale(l_base, h.lambda_base)
        + ad.scale(l_cot, h.lambda_cot)
        + ad.scale(l_route, h.lambda_route)
    )
