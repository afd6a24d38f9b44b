"""Training objective: full-sequence loss, masked prefix loss and latency cost.

For one example with prefixes x_1..x_n (x_n the full utterance)::

    total = full + gamma * prefix + lambda_ * latency

``full`` is the summed token cross-entropy on x_n. ``prefix`` sums, over the
proper prefixes, each prefix's token cross-entropies weighted by a mask that
drops every token from the first wait decision onwards. ``latency`` charges
(i - j) * P(wait at token j of prefix i).

The hard wait mask is piecewise constant, so it passes no gradient to the wait
head. ``soft_relaxation`` replaces it by the probability that no wait occurred
up to and including token j, which is differentiable and equals the hard mask
whenever the wait probabilities are exactly 0 or 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .encoder import DTYPE, PrefixOutputs, wait_probability

MASK_MODES = ("soft_relaxation", "hard_stop_gradient", "off")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.9
    lambda_: float = 1e-3
    wait_threshold: float = 0.5
    mask_mode: str = "soft_relaxation"

    def __post_init__(self):
        if self.gamma < 0 or self.lambda_ < 0:
            raise ValueError("gamma and lambda_ must be non-negative")
        if not 0.0 < self.wait_threshold < 1.0:
            raise ValueError("wait_threshold must lie in (0, 1)")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    @property
    def uses_wait_head(self) -> bool:
        return self.lambda_ > 0 or (self.gamma > 0 and self.mask_mode == "soft_relaxation")


@dataclass
class LossBreakdown:
    """Loss terms of one example (or a mean over examples).

    Terms are 0-d tensors while training so ``total`` can be backpropagated;
    ``detach`` turns them into plain floats.
    """

    full: float | torch.Tensor
    prefix: float | torch.Tensor
    latency: float | torch.Tensor
    total: float | torch.Tensor

    def detach(self) -> "LossBreakdown":
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        return LossBreakdown(f(self.full), f(self.prefix), f(self.latency), f(self.total))

    def as_dict(self) -> dict[str, float]:
        d = self.detach()
        return {"full": d.full, "prefix": d.prefix, "latency": d.latency, "total": d.total}


@dataclass(frozen=True)
class Mask:
    weights: np.ndarray
    first_wait: int | None  # 0-based index of the first wait, None when nothing waits


def _tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def cross_entropy_per_token(disfluency_logits, labels) -> torch.Tensor:
    logits = _tensor(disfluency_logits)
    labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    return -torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]


def full_loss(outputs: PrefixOutputs, labels) -> torch.Tensor:
    return cross_entropy_per_token(outputs.disfluency_logits, labels).sum()


def compute_mask(wait_probs, threshold: float = 0.5) -> Mask:
    probs = np.asarray(wait_probs.detach() if torch.is_tensor(wait_probs) else wait_probs, dtype=float)
    over = np.flatnonzero(probs > threshold)
    k = int(over[0]) if over.size else None
    weights = np.ones(len(probs))
    if k is not None:
        weights[k:] = 0.0
    return Mask(weights, k)


def soft_mask_weights(wait_probs) -> torch.Tensor:
    """w_j = prod_{l <= j} (1 - p_l): probability that no wait happened by token j."""
    return torch.cumprod(1.0 - _tensor(wait_probs), dim=-1)


def _mask_weights(wait_probs: torch.Tensor, config: LossConfig) -> torch.Tensor:
    if config.mask_mode == "soft_relaxation":
        return soft_mask_weights(wait_probs)
    if config.mask_mode == "hard_stop_gradient":
        return torch.as_tensor(compute_mask(wait_probs, config.wait_threshold).weights, dtype=DTYPE)
    return torch.ones_like(wait_probs)


def prefix_loss(prefix_outputs: Sequence[PrefixOutputs], labels, config: LossConfig) -> torch.Tensor:
    """Masked cross-entropy summed over the proper prefixes x_1..x_{n-1}."""
    labels = list(labels)
    if len(prefix_outputs) != len(labels) - 1:
        raise ValueError(f"expected {len(labels) - 1} proper prefixes, got {len(prefix_outputs)}")
    total = torch.zeros((), dtype=DTYPE)
    for i, out in enumerate(prefix_outputs, start=1):
        if len(out) != i:
            raise ValueError(f"prefix {i} has {len(out)} rows")
        ce = cross_entropy_per_token(out.disfluency_logits, labels[:i])
        total = total + (_mask_weights(wait_probability(out), config) * ce).sum()
    return total


def latency_cost(wait_probs_per_prefix: Sequence) -> torch.Tensor:
    """sum_i sum_{j <= i} (i - j) * p_wait[i][j] over the proper prefixes."""
    total = torch.zeros((), dtype=DTYPE)
    for i, probs in enumerate(wait_probs_per_prefix, start=1):
        p = _tensor(probs)
        if p.shape != (i,):
            raise ValueError(f"prefix {i} supplies {tuple(p.shape)} probabilities")
        steps = torch.arange(i - 1, -1, -1, dtype=DTYPE)
        total = total + (steps * p).sum()
    return total


def total_loss(all_outputs: Sequence[PrefixOutputs], labels, config: LossConfig) -> LossBreakdown:
    """Loss of one example given outputs for every prefix x_1..x_n, in order."""
    labels = list(labels)
    if len(all_outputs) != len(labels):
        raise ValueError(f"expected {len(labels)} prefix outputs, got {len(all_outputs)}")
    proper = all_outputs[:-1]
    full = full_loss(all_outputs[-1], labels)
    pre = prefix_loss(proper, labels, config)
    lat = latency_cost([wait_probability(o) for o in proper])
    return LossBreakdown(full, pre, lat, full + config.gamma * pre + config.lambda_ * lat)


def batch_loss_terms(disfluency_logits: torch.Tensor, wait_logits: torch.Tensor,
                     prefix_lengths: torch.Tensor, utterance_index: torch.Tensor,
                     utterance_lengths: torch.Tensor, labels: torch.Tensor,
                     config: LossConfig):
    """Vectorised ``total_loss`` over a padded batch holding every prefix of several utterances.

    Row r of the logits is prefix ``prefix_lengths[r]`` of utterance
    ``utterance_index[r]``; ``labels`` is (rows, width) gold labels padded with
    zeros. Returns per-utterance (full, prefix, latency, total) tensors.
    """
    width = disfluency_logits.shape[1]
    n_utt = utterance_lengths.shape[0]
    cols = torch.arange(width)
    valid = (cols[None, :] < prefix_lengths[:, None]).to(DTYPE)
    ce = -torch.log_softmax(disfluency_logits, dim=-1).gather(-1, labels[..., None])[..., 0] * valid
    p_wait = torch.softmax(wait_logits, dim=-1)[..., 1]
    is_full = prefix_lengths == utterance_lengths[utterance_index]
    proper = (~is_full).to(DTYPE)[:, None]

    if config.mask_mode == "soft_relaxation":
        weights = torch.cumprod(1.0 - p_wait, dim=1)
    elif config.mask_mode == "hard_stop_gradient":
        waited = (p_wait.detach() > config.wait_threshold).to(torch.int64) * valid.to(torch.int64)
        weights = (torch.cumsum(waited, dim=1) == 0).to(DTYPE)
    else:
        weights = torch.ones_like(p_wait)

    steps = (prefix_lengths[:, None] - 1 - cols[None, :]).to(DTYPE)
    full_rows = (ce * (1.0 - proper)).sum(dim=1)
    prefix_rows = (weights * ce * proper).sum(dim=1)
    latency_rows = (steps * p_wait * valid * proper).sum(dim=1)

    def per_utt(rows):
        return torch.zeros(n_utt, dtype=DTYPE).index_add(0, utterance_index, rows)

    full, pre, lat = per_utt(full_rows), per_utt(prefix_rows), per_utt(latency_rows)
    return full, pre, lat, full + config.gamma * pre + config.lambda_ * lat
