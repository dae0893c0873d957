"""Forward passes through the full chain plus the noise they consume.

Noise is drawn up front into small containers so that a loss can be
re-evaluated with identical randomness (finite-difference checks) and so
that inference can address every draw by (seed, realization, sample, stage,
index) keys, which is what lets the TCP deployment reproduce in-process
evaluation exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import LinkConfig, LinkDraw, draw_link, keyed_rng
from .models import (Downstream, Upstream, cae_forward, decoder_forward, ece_forward, ese_forward,
                     reparameterize, sfe_forward)
from .numerics import Tensor

STAGE_UPLINK = 1
STAGE_DOWNLINK = 2
STAGE_LATENT_Z = 3
STAGE_LATENT_S = 4

WIRE_DTYPE = np.float32


@dataclass
class UpstreamNoise:
    links: list[LinkDraw]          # one per device
    eps_z: list[np.ndarray] | None  # (B, C_f, G_f, G_f) per device, None = use the mean


@dataclass
class DownstreamNoise:
    links: list[LinkDraw]           # one per user
    eps_s: list[np.ndarray] | None  # (B, dim_k) per edge stream
    snr_db: np.ndarray              # per-user average SNR used


def draw_upstream_noise(rng: np.random.Generator, batch: int, up: Upstream, links: LinkConfig) -> UpstreamNoise:
    arch = up.arch
    k_u = arch.k_u(up.l_p)
    draws = [draw_link(batch, k_u, snr, links.uplink_rician_a, rng, links.equalize, links.noiseless_uplink)
             for snr in links.uplink_snr_db]
    grid = (batch, arch.feat_channels, arch.feat_grid, arch.feat_grid)
    eps = [rng.standard_normal(grid) for _ in range(arch.n_views)]
    return UpstreamNoise(draws, eps)


def draw_downstream_noise(rng: np.random.Generator, batch: int, down: Downstream,
                          links: LinkConfig) -> DownstreamNoise:
    m_users = len(down.decoders)
    if links.downlink_snr_db is not None:
        snr = np.asarray(links.downlink_snr_db, dtype=float)
        if snr.size == 1:
            snr = np.full(m_users, snr.reshape(-1)[0])
    else:
        lo, hi = links.downlink_snr_range
        snr = rng.uniform(lo, hi, size=m_users)
    eps = [rng.standard_normal((batch, d)) for d in down.stream_dims]
    draws = [draw_link(batch, down.stream_dims[down.user_stream[m]], snr[m], links.downlink_rician_b, rng,
                       links.equalize, links.noiseless_downlink) for m in range(m_users)]
    return DownstreamNoise(draws, eps, snr)


def _stack(draws: Sequence[LinkDraw]) -> LinkDraw:
    return LinkDraw(np.concatenate([d.h for d in draws]), np.concatenate([d.noise for d in draws]),
                    draws[0].equalize)


def keyed_upstream_noise(seed: int, realization: int, sample_ids: Sequence[int], up: Upstream,
                         links: LinkConfig, stochastic: bool = True) -> UpstreamNoise:
    arch = up.arch
    k_u = arch.k_u(up.l_p)
    draws = [_stack([uplink_draw(seed, realization, sid, n, k_u, links) for sid in sample_ids])
             for n in range(arch.n_views)]
    eps = None
    if stochastic:
        grid = (arch.feat_channels, arch.feat_grid, arch.feat_grid)
        eps = [np.stack([latent_eps(seed, realization, sid, STAGE_LATENT_Z, n, grid) for sid in sample_ids])
               for n in range(arch.n_views)]
    return UpstreamNoise(draws, eps)


def keyed_downstream_noise(seed: int, realization: int, sample_ids: Sequence[int], down: Downstream,
                           links: LinkConfig, stochastic: bool = True) -> DownstreamNoise:
    m_users = len(down.decoders)
    snr = np.broadcast_to(np.asarray(links.downlink_snr_db, dtype=float), (m_users,))
    draws = [_stack([downlink_draw(seed, realization, sid, m, down.stream_dims[down.user_stream[m]], snr[m],
                                   links) for sid in sample_ids]) for m in range(m_users)]
    eps = None
    if stochastic:
        eps = [np.stack([latent_eps(seed, realization, sid, STAGE_LATENT_S, k, (d,)) for sid in sample_ids])
               for k, d in enumerate(down.stream_dims)]
    return DownstreamNoise(draws, eps, np.asarray(snr))


def latent_eps(seed: int, realization: int, sample_id: int, stage: int, index: int, shape) -> np.ndarray:
    return keyed_rng(seed, realization, sample_id, stage, index).standard_normal(shape)


def uplink_draw(seed, realization, sample_id, n, n_entries, links: LinkConfig) -> LinkDraw:
    return draw_link(1, n_entries, links.uplink_snr_db[n], links.uplink_rician_a,
                     keyed_rng(seed, realization, sample_id, STAGE_UPLINK, n), links.equalize,
                     links.noiseless_uplink)


def downlink_draw(seed, realization, sample_id, m, n_entries, snr_db, links: LinkConfig) -> LinkDraw:
    return draw_link(1, n_entries, snr_db, links.downlink_rician_b,
                     keyed_rng(seed, realization, sample_id, STAGE_DOWNLINK, m), links.equalize,
                     links.noiseless_downlink)


# ---------------------------------------------------------------- forward passes

def encode_device(up: Upstream, n: int, views_n, eps: np.ndarray | None):
    """Device ``n``: views -> (mu, sigma) -> z -> transmit-ready e."""
    mu, sigma = sfe_forward(views_n, up.encoders[n])
    z = mu if eps is None else reparameterize(mu, sigma, eps=eps)
    return cae_forward(z, up.l_p), mu, sigma


def upstream_forward(up: Upstream, views: np.ndarray, noise: UpstreamNoise, wire: bool = False):
    """Return received features w (one per device) and the IB statistics."""
    ws, mus, sigmas = [], [], []
    for n in range(up.arch.n_views):
        eps = None if noise.eps_z is None else noise.eps_z[n]
        e, mu, sigma = encode_device(up, n, views[:, n], eps)
        if wire:
            e = Tensor(e.data.astype(WIRE_DTYPE))
        ws.append(noise.links[n].apply(e))
        mus.append(mu)
        sigmas.append(sigma)
    return ws, mus, sigmas


def edge_forward(down: Downstream, w: Sequence, l_p: int, eps_s: list[np.ndarray] | None):
    """Edge server: re-encode the gathered features into one broadcast stream (or M unicast streams)."""
    outs, mus, sigmas = [], [], []
    for k, edge in enumerate(down.edges):
        mu, sigma = ese_forward(w, edge, l_p)
        s = mu if eps_s is None else reparameterize(mu, sigma, eps=eps_s[k])
        outs.append(ece_forward(s))
        mus.append(mu)
        sigmas.append(sigma)
    return outs, mus, sigmas


def users_forward(down: Downstream, streams: Sequence[Tensor], noise: DownstreamNoise, wire: bool = False):
    preds = []
    for m, dec in enumerate(down.decoders):
        o = streams[down.user_stream[m]]
        if wire:
            o = Tensor(o.data.astype(WIRE_DTYPE))
        v = noise.links[m].apply(o)
        preds.append(decoder_forward(v, dec))
    return preds
