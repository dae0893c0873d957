"""Variational multi-task information-bottleneck objectives.

Both objectives are Monte Carlo estimates over a mini-batch with a single
reparameterised draw per sample: weighted task negative log-likelihoods plus
a trade-off weight times the closed-form KL divergence between the diagonal
Gaussian feature posterior and a standard normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .channel import LinkConfig
from .models import AuxiliaryNetwork, Downstream, Upstream, ViewDecoder, aux_forward, view_decoder_forward
from .numerics import ContractError, Tensor, as_tensor
from .pipeline import (DownstreamNoise, UpstreamNoise, draw_downstream_noise, draw_upstream_noise,
                       edge_forward, upstream_forward, users_forward)


# per-kind weights; classification stands in for the second segmentation task
TASK_WEIGHTS = {"segmentation": 1.0, "classification": 2.0, "saliency": 5.0}


@dataclass
class LossWeights:
    alpha: tuple = (1.0, 5.0, 2.0)   # segmentation, saliency, classification
    gamma: tuple = (1.0, 5.0, 2.0)
    beta: float = 1e-7
    eta: float = 1e-7

    def __post_init__(self):
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be non-negative")
        if any(a < 0 for a in self.alpha) or any(g < 0 for g in self.gamma):
            raise ValueError("task weights must be non-negative")

    def resized(self, m_users: int) -> "LossWeights":
        """Repeat task weights round-robin for ``m_users`` users."""
        a = tuple(self.alpha[i % len(self.alpha)] for i in range(m_users))
        g = tuple(self.gamma[i % len(self.gamma)] for i in range(m_users))
        return LossWeights(a, g, self.beta, self.eta)

    @classmethod
    def for_tasks(cls, kinds: Sequence[str], beta: float = 1e-7, eta: float = 1e-7) -> "LossWeights":
        w = tuple(TASK_WEIGHTS[k] for k in kinds)
        return cls(w, w, beta, eta)


@dataclass
class LossBreakdown:
    total: float
    per_task: list[float]
    kl_term: float
    task_weights: list[float] = field(default_factory=list)
    tradeoff: float = 0.0

    def recomposed(self) -> float:
        return float(sum(w * t for w, t in zip(self.task_weights, self.per_task)) + self.tradeoff * self.kl_term)

    @property
    def weighted_task(self) -> float:
        return float(sum(w * t for w, t in zip(self.task_weights, self.per_task)))


@dataclass
class Batch:
    views: np.ndarray              # (B, N, view_dim)
    labels: list[np.ndarray]       # one per user
    kinds: list[str]
    sample_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return self.views.shape[0]


def make_batch(arrays, idx, kinds: Sequence[str]) -> Batch:
    idx = np.asarray(idx)
    return Batch(arrays.views[idx], [arrays.labels(k, idx) for k in kinds], list(kinds), idx)


# ---------------------------------------------------------------- components

def kl_gaussian_vs_standard(mu, sigma) -> Tensor:
    """Sum over entries of KL(N(mu, sigma^2) || N(0, 1))."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ContractError("sigma must be positive")
    quad = (mu * mu + sigma * sigma - 1.0) * 0.5
    return (quad - nx.log(sigma)).sum()


def kl_batch_mean(mu: Tensor, sigma: Tensor) -> Tensor:
    return kl_gaussian_vs_standard(mu, sigma) * (1.0 / mu.shape[0])


def task_loss(y, logits, task_kind: str) -> Tensor:
    """Mean per-element negative log-likelihood for one task."""
    logits = as_tensor(logits)
    y = np.asarray(y)
    if task_kind in ("segmentation", "classification"):
        if y.ndim != logits.ndim - 1:
            raise ValueError("label layout does not match logits")
        classes = logits.shape[-3] if task_kind == "segmentation" else logits.shape[-1]
        if y.size and (y.min() < 0 or y.max() >= classes):
            raise ValueError("label out of class range")
        axis = logits.ndim - 3 if task_kind == "segmentation" else logits.ndim - 1
        logp = nx.log_softmax(logits, axis=axis)
        return -nx.gather_mean(logp, y, axis=axis)
    if task_kind == "saliency":
        if np.any((y != 0) & (y != 1)):
            raise ValueError("saliency labels must be binary")
        x = logits.reshape(y.shape)
        # binary cross-entropy with logits: softplus(x) - y*x
        return nx.mean(nx.softplus(x) - x * y.astype(float))
    raise ValueError(f"unknown task kind {task_kind!r}")


def _check_batch(batch: Batch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


# ---------------------------------------------------------------- objectives

def vmib_upstream(batch: Batch, up: Upstream, aux: AuxiliaryNetwork, weights: LossWeights,
                  links: LinkConfig, rng: np.random.Generator | None = None,
                  noise: UpstreamNoise | None = None) -> tuple[Tensor, LossBreakdown]:
    _check_batch(batch)
    if noise is None:
        noise = draw_upstream_noise(rng, len(batch), up, links)
    w, mus, sigmas = upstream_forward(up, batch.views, noise)
    preds = aux_forward(w, aux, up.l_p)
    task_terms = [task_loss(y, p, k) for y, p, k in zip(batch.labels, preds, batch.kinds)]
    kl = kl_batch_mean(mus[0], sigmas[0])
    for mu, sigma in zip(mus[1:], sigmas[1:]):
        kl = kl + kl_batch_mean(mu, sigma)
    total = kl * weights.beta
    for a, t in zip(weights.alpha, task_terms):
        total = total + t * a
    bd = LossBreakdown(total.item(), [t.item() for t in task_terms], kl.item(),
                       list(weights.alpha[:len(task_terms)]), weights.beta)
    return total, bd


def vmib_downstream(batch: Batch, up: Upstream, down: Downstream, weights: LossWeights,
                    links: LinkConfig, rng: np.random.Generator | None = None,
                    up_noise: UpstreamNoise | None = None, down_noise: DownstreamNoise | None = None,
                    w: list | None = None) -> tuple[Tensor, LossBreakdown]:
    """Downstream objective; the device encoders run without recording gradients."""
    _check_batch(batch)
    if w is None:
        if up_noise is None:
            up_noise = draw_upstream_noise(rng, len(batch), up, links)
        with nx.no_grad():
            w, _, _ = upstream_forward(up, batch.views, up_noise)
        w = [Tensor(t.data) for t in w]
    if down_noise is None:
        down_noise = draw_downstream_noise(rng, len(batch), down, links)
    streams, mus, sigmas = edge_forward(down, w, up.l_p, down_noise.eps_s)
    preds = users_forward(down, streams, down_noise)
    task_terms = [task_loss(y, p, k) for y, p, k in zip(batch.labels, preds, batch.kinds)]
    kl = kl_batch_mean(mus[0], sigmas[0])
    for mu, sigma in zip(mus[1:], sigmas[1:]):
        kl = kl + kl_batch_mean(mu, sigma)
    total = kl * weights.eta
    for g, t in zip(weights.gamma, task_terms):
        total = total + t * g
    bd = LossBreakdown(total.item(), [t.item() for t in task_terms], kl.item(),
                       list(weights.gamma[:len(task_terms)]), weights.eta)
    return total, bd


def reconstruction_loss(batch: Batch, up: Upstream, view_decoders: Sequence[ViewDecoder], beta: float,
                        links: LinkConfig, rng: np.random.Generator | None = None,
                        noise: UpstreamNoise | None = None) -> tuple[Tensor, LossBreakdown]:
    """Source-reconstruction objective: per-view MSE after the uplink plus beta * KL."""
    _check_batch(batch)
    if noise is None:
        noise = draw_upstream_noise(rng, len(batch), up, links)
    w, mus, sigmas = upstream_forward(up, batch.views, noise)
    terms = []
    for n, dec in enumerate(view_decoders):
        rec = view_decoder_forward(w[n], dec, up.l_p)
        diff = rec - batch.views[:, n]
        terms.append(nx.mean(diff * diff))
    kl = kl_batch_mean(mus[0], sigmas[0])
    for mu, sigma in zip(mus[1:], sigmas[1:]):
        kl = kl + kl_batch_mean(mu, sigma)
    total = kl * beta
    for t in terms:
        total = total + t * (1.0 / len(terms))
    per = [t.item() for t in terms]
    bd = LossBreakdown(total.item(), per, kl.item(), [1.0 / len(terms)] * len(terms), beta)
    return total, bd
