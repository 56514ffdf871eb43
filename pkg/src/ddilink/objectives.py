"""The three training loss terms and their hyperparameter-free sum.

* ce_loss: binary cross-entropy over pair predictions, computed from
  logits in log-sum-exp form so saturated predictions stay finite.
* kl_loss: divergence of each pair's latent posterior from the unit
  Gaussian, averaged over pairs and over latent dimensions.
* ss_loss: edge-existence cross-entropy for the attention layer over a
  random subsample of positive and negative edges.

The total is the plain unweighted sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError, DiffNode

logger = logging.getLogger(__name__)

__all__ = ["NumericError", "LossBreakdown", "ce_loss", "kl_loss", "ss_loss", "total_loss"]

_PROB_FLOOR = 1e-12


class NumericError(ArithmeticError):
    """A loss component became non-finite."""


@dataclass
class LossBreakdown:
    """Scalar values of the three terms and their sum, plus the sum as a
    graph node for backpropagation."""

    ce: float
    kl: float
    ss: float
    total: float
    node: DiffNode


def ce_loss(logits: DiffNode, labels) -> DiffNode:
    """Mean binary cross-entropy from logits.

    Uses softplus(z) - z*y, which equals -[y log s(z) + (1-y) log(1-s(z))]
    but never evaluates log near zero.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.size == 0:
        raise ContractError("ce_loss over an empty batch")
    if logits.value.shape != y.shape:
        raise nd.DimensionError(f"logits {logits.value.shape} vs labels {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("labels must be 0 or 1")
    y_node = DiffNode(y)
    return nd.mean_all(nd.sub(nd.softplus(logits), nd.mul(logits, y_node)))


def kl_loss(mu: DiffNode, log_sigma: DiffNode) -> DiffNode:
    """KL(N(mu, sigma^2) || N(0, I)) with sigma = exp(log_sigma).

    Per element: (mu^2 + sigma^2 - 2 log_sigma - 1) / 2, averaged over the
    batch and over the latent dimensions. Zero exactly when mu = 0 and
    log_sigma = 0, positive elsewhere.
    """
    if mu.value.shape != log_sigma.value.shape:
        raise nd.DimensionError(f"mu {mu.value.shape} vs log_sigma {log_sigma.value.shape}")
    sigma_sq = nd.exp(nd.scale(log_sigma, 2.0))
    terms = nd.add(nd.mul(mu, mu), nd.shift(nd.sub(sigma_sq, nd.scale(log_sigma, 2.0)), -1.0))
    return nd.scale(nd.mean_all(terms), 0.5)


def ss_loss(edge_prob: DiffNode, labels, p_e: float, seed: int) -> DiffNode:
    """Edge-existence BCE over a Bernoulli(p_e) subsample of the candidates.

    ``edge_prob`` holds probabilities (positive edges labeled 1, sampled
    non-edges labeled 0). Each candidate is kept independently with
    probability p_e; if nothing survives the subsample the loss is zero
    for this iteration (logged).
    """
    if not 0.0 < p_e <= 1.0:
        raise ContractError(f"p_e must be in (0, 1], got {p_e}")
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if edge_prob.value.shape != y.shape:
        raise nd.DimensionError(f"edge_prob {edge_prob.value.shape} vs labels {y.shape}")
    if p_e >= 1.0:
        keep = np.arange(y.size)
    else:
        keep = np.flatnonzero(np.random.default_rng(seed).random(y.size) < p_e)
    if keep.size == 0:
        logger.warning("ss_loss subsample is empty this iteration (p_e=%s, %d candidates)", p_e, y.size)
        return DiffNode(np.zeros((1, 1)))
    prob = nd.clip(nd.gather_rows(edge_prob, keep), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    y_node = DiffNode(y[keep])
    one_minus_y = DiffNode(1.0 - y[keep])
    pos_term = nd.mul(y_node, nd.log(prob))
    neg_term = nd.mul(one_minus_y, nd.log(nd.shift(nd.scale(prob, -1.0), 1.0)))
    return nd.scale(nd.mean_all(nd.add(pos_term, neg_term)), -1.0)


def total_loss(ce: DiffNode, kl: DiffNode, ss: DiffNode) -> LossBreakdown:
    """Unweighted sum of the three terms; rejects non-finite components."""
    for name, node in (("ce", ce), ("kl", kl), ("ss", ss)):
        if node.value.size != 1:
            raise ContractError(f"{name} loss must be scalar, got shape {node.value.shape}")
        if not np.isfinite(node.value[0, 0]):
            raise NumericError(f"loss component {name} is non-finite: {node.value[0, 0]}")
    node = nd.add(nd.add(ce, kl), ss)
    return LossBreakdown(
        ce=float(ce.value[0, 0]),
        kl=float(kl.value[0, 0]),
        ss=float(ss.value[0, 0]),
        total=float(node.value[0, 0]),
        node=node,
    )
