"""Classification, consistency, entropy and combined DA/DG objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import TARGET
from .tensor import Tensor


class LossContractError(ValueError):
    """A loss received inputs its objective forbids (e.g. target data in DG)."""


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_e: float = 0.1
    lambda_t: float = 0.1

    def __post_init__(self):
        for name in ("lambda_c", "lambda_e", "lambda_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


def cross_entropy(logprobs, labels, domain_tags=None) -> Tensor:
    """Mean of ``-logprob[label]`` over the batch."""
    logprobs = T.as_tensor(logprobs)
    labels = np.asarray(labels)
    b, k = logprobs.shape
    if domain_tags is not None and np.any(np.asarray(domain_tags) == TARGET):
        raise LossContractError("cross_entropy received target-domain samples; target labels are unavailable")
    if labels.shape != (b,):
        raise T.ShapeError(f"cross_entropy: expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, k), dtype=logprobs.dtype)
    onehot[np.arange(b), labels] = 1
    return T.scalar_mul(T.tsum(T.mul(logprobs, onehot)), -1.0 / b)


def kl_consistency(logprobs_clean, logprobs_aug) -> Tensor:
    """Mean KL(p_clean || p_aug); the clean side is treated as a constant."""
    clean = T.as_tensor(logprobs_clean)
    aug = T.as_tensor(logprobs_aug)
    if clean.shape != aug.shape:
        raise T.ShapeError(f"kl_consistency: shapes {clean.shape} and {aug.shape} differ")
    lp = clean.data
    p = np.exp(lp)
    b = lp.shape[0]
    # p * log p with 0 log 0 = 0
    with np.errstate(invalid="ignore"):
        self_term = float(np.sum(np.where(p > 0, p * lp, 0.0)))
    cross = T.tsum(T.mul(aug, p.astype(aug.dtype)))
    return T.scalar_mul(T.sub(np.asarray(self_term, dtype=aug.dtype), cross), 1.0 / b)


class PLogP(T.Function):
    """Elementwise ``exp(lp) * lp`` with ``0 log 0 = 0`` at ``lp = -inf``."""

    kind = "plogp"

    def forward(self, lp):
        self.p = np.exp(lp)
        self.lp = np.where(self.p > 0, lp, 0.0).astype(lp.dtype)
        return self.p * self.lp

    def backward(self, grad):
        return grad * self.p * (self.lp + 1)


def entropy_min(logprobs_target) -> Tensor:
    """Mean Shannon entropy ``-sum_k p_k log p_k`` of the predictions."""
    lp = T.as_tensor(logprobs_target)
    b = lp.shape[0]
    return T.scalar_mul(T.tsum(PLogP.apply(lp)), -1.0 / b)


def total_loss(mode: str, parts: dict, weights: LossWeights, domain_tags=None) -> Tensor:
    """L_m + lc*L_c + le*L_e (DA only) + lt*L_adv; missing parts count as zero.

    ``domain_tags`` are the tags of every sample that fed the unsupervised
    terms; DG mode rejects any target tag and DA mode requires one.
    """
    mode = mode.upper()
    if mode not in ("DA", "DG"):
        raise ValueError(f"mode must be DA or DG, got {mode!r}")
    if domain_tags is not None:
        has_target = bool(np.any(np.asarray(domain_tags) == TARGET))
        if mode == "DG" and has_target:
            raise LossContractError("DG objective received target-domain samples")
        if mode == "DA" and not has_target:
            raise LossContractError("DA objective needs a target-domain batch")
    if mode == "DG" and parts.get("l_e") is not None:
        raise LossContractError("entropy term is defined on target data and has no place in DG")
    total = T.as_tensor(parts["l_m"])
    for key, lam in (("l_c", weights.lambda_c), ("l_e", weights.lambda_e), ("l_adv", weights.lambda_t)):
        term = parts.get(key)
        if term is None:
            continue
        total = T.add(total, T.scalar_mul(term, lam))
    return total
