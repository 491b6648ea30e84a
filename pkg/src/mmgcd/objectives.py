"""Stage-2 loss primitives.

All functions are pure and differentiable torch ops. Logit-consuming losses
take raw (cosine) logits and apply their own temperature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_balance: float = 0.35
    lambda_cico: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lambda_balance <= 1.0:
            raise ValueError("lambda_balance must lie in [0, 1]")
        if self.lambda_cico < 0 or self.epsilon < 0:
            raise ValueError("lambda_cico and epsilon must be non-negative")


@dataclass(frozen=True)
class TemperatureSet:
    tau_c: float = 0.07
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_t_warmup: float = 0.07
    tau_t_warmup_epochs: int = 30

    def __post_init__(self):
        if min(self.tau_c, self.tau_s, self.tau_t, self.tau_t_warmup) <= 0:
            raise ValueError("temperatures must be positive")
        if self.tau_t > self.tau_s or self.tau_t_warmup > self.tau_s:
            raise ValueError("teacher temperature must not exceed the student temperature")

    def teacher_at(self, epoch: int) -> float:
        """Linear warmup from ``tau_t_warmup`` to ``tau_t`` over the first epochs."""
        if self.tau_t_warmup_epochs <= 0 or epoch >= self.tau_t_warmup_epochs:
            return self.tau_t
        frac = epoch / self.tau_t_warmup_epochs
        return self.tau_t_warmup + frac * (self.tau_t - self.tau_t_warmup)


@dataclass
class AnchorSet:
    visual: torch.Tensor
    text: torch.Tensor
    classes: list

    def __len__(self):
        return len(self.classes)


def softmax_t(logits, tau):
    return F.softmax(logits / tau, dim=-1)


def _zero_like_graph(t):
    # keeps the result attached to the autograd graph
    return t.sum() * 0.0


def supervised_contrastive(h, h_prime, labels, tau_c):
    """Supervised contrastive loss over the labeled subset.

    For anchor i the positives are the *other* same-label items q; each term is
    ``-log(exp(h_i.h'_q/tau) / sum_{n != i} exp(h_i.h'_n/tau))``. Anchors
    without positives are skipped.
    """
    labels = torch.as_tensor(labels)
    n = h.shape[0]
    if n == 0:
        raise ValueError("empty labeled subset")
    sim = h @ h_prime.T / tau_c
    eye = torch.eye(n, dtype=torch.bool, device=h.device)
    lse = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(dim=1)
    has = n_pos > 0
    if not bool(has.any()):
        warnings.warn("supervised_contrastive: no anchor has a positive; returning 0", RuntimeWarning)
        return _zero_like_graph(sim)
    # -log p_iq = lse_i - s_iq, averaged over the positives of each anchor
    per_anchor = (pos * (lse[:, None] - sim.masked_fill(~pos, 0.0))).sum(dim=1)
    per_anchor = per_anchor[has] / n_pos[has]
    return per_anchor.mean()


def self_contrastive(h, h_prime, tau_c, exclude_positive=False):
    """InfoNCE between the two views of each item.

    The positive stays in the denominator unless ``exclude_positive``.
    """
    n = h.shape[0]
    if n == 0:
        raise ValueError("self_contrastive needs at least one item")
    sim = h @ h_prime.T / tau_c
    pos = sim.diagonal()
    if exclude_positive:
        if n < 2:
            raise ValueError("exclude_positive needs at least two items")
        eye = torch.eye(n, dtype=torch.bool, device=h.device)
        sim = sim.masked_fill(eye, float("-inf"))
    return (torch.logsumexp(sim, dim=1) - pos).mean()


def supervised_ce(logits, labels, tau_s):
    labels = torch.as_tensor(labels, dtype=torch.long)
    K = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    return F.cross_entropy(logits / tau_s, labels)


def self_distill(p, p_prime, tau_t, tau_s, detach_teacher=True):
    """Cross-entropy from the sharpened teacher view to the student view."""
    teacher = softmax_t(p_prime, tau_t)
    if detach_teacher:
        teacher = teacher.detach()
    return -(teacher * F.log_softmax(p / tau_s, dim=-1)).sum(dim=1).mean()


def entropy(probs):
    """Shannon entropy (nats) of a probability vector, with 0 log 0 = 0."""
    return -(probs * torch.log(probs.clamp_min(1e-300))).sum(dim=-1)


def mean_entropy_regularizer(p_v, p_t, tau_s):
    """Entropy of the batch-and-modality mean prediction."""
    probs = torch.cat([softmax_t(p_v, tau_s), softmax_t(p_t, tau_s)], dim=0)
    return entropy(probs.mean(dim=0))


def compute_anchors(z_v, z_tl, labels) -> Optional[AnchorSet]:
    """Per-class mean visual/text features of the labeled subset, unit-normalized.

    Returns ``None`` when there are no labeled rows; callers skip CICO then.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return None
    classes = sorted(int(c) for c in torch.unique(labels))
    onehot = (labels[:, None] == torch.tensor(classes)[None, :]).to(z_v.dtype)
    counts = onehot.sum(dim=0)[:, None]
    pv = (onehot.T @ z_v) / counts
    pt = (onehot.T @ z_tl) / counts
    return AnchorSet(F.normalize(pv, dim=-1), F.normalize(pt, dim=-1), classes)


def symmetric_kl(s_v, s_t):
    """``(1/2n) sum_i [KL(s_t||s_v) + KL(s_v||s_t)]`` for row-stochastic inputs."""
    log_v, log_t = torch.log(s_v), torch.log(s_t)
    kl_tv = (s_t * (log_t - log_v)).sum(dim=1)
    kl_vt = (s_v * (log_v - log_t)).sum(dim=1)
    return 0.5 * (kl_tv + kl_vt).mean()


def instance_relations(z, anchors):
    """Softmax over cosine similarities between items and anchors (no temperature)."""
    return F.softmax(F.normalize(z, dim=-1) @ anchors.T, dim=-1)


def cico_loss(z_v, z_tl, anchors: AnchorSet):
    """Symmetric KL between each item's visual and text anchor relationships."""
    if anchors is None or len(anchors) == 0:
        raise ValueError("cico_loss needs at least one anchor")
    s_v = instance_relations(z_v, anchors.visual)
    s_t = instance_relations(z_tl, anchors.text)
    if len(anchors) == 1:
        return _zero_like_graph(s_v)
    return symmetric_kl(s_v, s_t)


def max_entropy(K: int) -> float:
    return math.log(K)
