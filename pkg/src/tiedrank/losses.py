"""Training objectives: bidirectional triplet hinge and the symmetric
contrastive cross-entropy, combined as an unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


@dataclass
class LossConfig:
    margin: float = 1.0
    use_contrastive: bool = True
    use_ranking: bool = True
    negative_strategy: str = "all_in_batch"  # "all_in_batch" | "random_one"
    ranking_bidirectional: bool = True

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if not (self.use_contrastive or self.use_ranking):
            raise ConfigError("at least one loss must be enabled")
        if self.negative_strategy not in ("all_in_batch", "random_one"):
            raise ConfigError(f"unknown negative_strategy {self.negative_strategy!r}")


def _off_diag_mask(b: int, dtype) -> Tensor:
    return Tensor((np.ones((b, b)) - np.eye(b)).astype(dtype))


def _one_negative_mask(b: int, rng, dtype) -> Tensor:
    # one uniformly drawn negative per anchor row
    m = np.zeros((b, b), dtype=dtype)
    for i in range(b):
        j = int(rng.integers(0, b - 1))
        m[i, j if j < i else j + 1] = 1.0
    return Tensor(m)


def triplet_ranking_loss(r_a: Tensor, r_t: Tensor, margin: float = 1.0,
                         negative_strategy: str = "all_in_batch",
                         bidirectional: bool = True,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dot-product hinge loss over in-batch negatives.

    Row i of r_t pairs with row i of r_a. For caption anchors the hinge is
    max(0, margin - s(T_i, A_i) + s(T_i, A_j)) averaged over j != i; audio
    anchors mirror it; the two directions are averaged.
    """
    b = r_a.shape[0]
    if b < 2:
        raise ContractError("triplet_ranking_loss needs a batch of at least 2")
    if r_a.shape != r_t.shape:
        raise ContractError(f"paired shapes differ: {r_a.shape} vs {r_t.shape}")
    dtype = r_a.data.dtype
    s = ad.matmul(r_t, ad.transpose(r_a))  # s[i, j] = dot(T_i, A_j)
    pos = ad.diag_part(s)
    if negative_strategy == "all_in_batch":
        mask_t = _off_diag_mask(b, dtype)
        mask_a = mask_t
        per_anchor = float(b - 1)
    else:
        if rng is None:
            raise ContractError("random_one strategy needs an rng")
        mask_t = _one_negative_mask(b, rng, dtype)
        mask_a = _one_negative_mask(b, rng, dtype)
        per_anchor = 1.0

    def direction(sim: Tensor, mask: Tensor) -> Tensor:
        # hinge per (anchor i, negative j), masked, averaged per anchor then
        # over anchors
        diffs = ad.add(ad.add_col(sim, ad.scale(pos, -1.0)), margin)
        hinges = ad.mul(ad.relu(diffs), mask)
        return ad.div_scalar(ad.sum_all(hinges), b * per_anchor)

    loss = direction(s, mask_t)
    if bidirectional:
        loss_audio = direction(ad.transpose(s), mask_a)
        loss = ad.scale(ad.add(loss, loss_audio), 0.5)
    return loss


def contrastive_loss(c_a: Tensor, c_t: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric cross-entropy over scaled cosine similarities; labels on
    the diagonal. Rows must arrive unit-normalized."""
    b = c_a.shape[0]
    if b < 2:
        raise ContractError("contrastive_loss needs a batch of at least 2")
    if c_a.shape != c_t.shape:
        raise ContractError(f"paired shapes differ: {c_a.shape} vs {c_t.shape}")
    for name, c in (("C_A", c_a), ("C_T", c_t)):
        norms = np.linalg.norm(c.data, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ContractError(f"{name} rows are not unit-normalized")
    logits = ad.mul(ad.matmul(c_t, ad.transpose(c_a)), ad.exp(logit_scale))

    def ce_mean_diag(lg: Tensor) -> Tensor:
        return ad.scale(ad.div_scalar(ad.sum_all(ad.diag_part(ad.log_softmax(lg, axis=-1))), b), -1.0)

    loss_t = ce_mean_diag(logits)
    loss_a = ce_mean_diag(ad.transpose(logits))
    return ad.scale(ad.add(loss_t, loss_a), 0.5)


def combined_loss(r_a: Tensor, r_t: Tensor, c_a: Tensor, c_t: Tensor,
                  logit_scale: Tensor, config: LossConfig,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Unweighted sum of the enabled objectives."""
    parts = []
    if config.use_ranking:
        parts.append(triplet_ranking_loss(
            r_a, r_t, margin=config.margin,
            negative_strategy=config.negative_strategy,
            bidirectional=config.ranking_bidirectional, rng=rng))
    if config.use_contrastive:
        parts.append(contrastive_loss(c_a, c_t, logit_scale))
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return total
