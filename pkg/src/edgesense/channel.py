"""Block-fading complex channel with AWGN, power normalisation and SNR helpers.

Real feature tensors are carried as complex symbols by pairing consecutive
entries in row-major order. Features are normalised to unit mean-square per
real entry, and receiver noise is added with variance ``sigma**2`` per real
entry, so the per-symbol SNR is ``E|h|^2 / sigma^2`` exactly as configured.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, _make, as_tensor, complex_gain, concat, rms_normalize

UPLINK = "uplink"
DOWNLINK = "downlink"


class DegenerateChannelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    avg_snr_db: float = 0.0
    rician_a: float = 0.0
    direction: str = UPLINK

    def __post_init__(self):
        if self.rician_a < 0:
            raise ValueError("rician_a must be non-negative")
        if self.direction not in (UPLINK, DOWNLINK):
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.isfinite(self.avg_snr_db):
            raise ValueError("avg_snr_db must be finite")


@dataclass(frozen=True)
class ChannelRealization:
    h_real: float
    h_imag: float
    noise_sigma: float
    seed: int = 0

    @property
    def h(self) -> complex:
        return complex(self.h_real, self.h_imag)


def snr_to_sigma(avg_snr_db: float) -> float:
    return float(10.0 ** (-np.asarray(avg_snr_db, dtype=float) / 20.0))


def rician_params(a: float) -> tuple[float, float]:
    """Mean (line of sight) and per-component std of CN(sqrt(a/(a+1)), 1/(a+1))."""
    los = np.sqrt(a / (a + 1.0))
    comp_std = np.sqrt(1.0 / (2.0 * (a + 1.0)))
    return float(los), float(comp_std)


def sample_coefficient(spec: ChannelSpec, rng: np.random.Generator, size=None):
    los, std = rician_params(spec.rician_a)
    re = los + std * rng.standard_normal(size)
    im = std * rng.standard_normal(size)
    return re + 1j * im


def realize(spec: ChannelSpec, seed: int) -> ChannelRealization:
    rng = np.random.default_rng(seed)
    h = complex(sample_coefficient(spec, rng))
    return ChannelRealization(h.real, h.imag, snr_to_sigma(spec.avg_snr_db), seed)


def power_normalize(z, per_sample: bool = False) -> Tensor:
    """Scale to unit mean-square entry (per leading sample when ``per_sample``)."""
    return rms_normalize(as_tensor(z), batch_axis=per_sample)


def _padded_len(n: int) -> int:
    return n + (n % 2)


def equalized_noise(n_entries: int, h: complex, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Noise seen after perfect-CSI equalisation, eps/h, as interleaved reals."""
    if h == 0:
        raise DegenerateChannelError("channel coefficient is exactly zero")
    m = _padded_len(n_entries) // 2
    eps = sigma * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
    eq = eps / h
    return np.stack([eq.real, eq.imag], axis=-1).reshape(-1)[:n_entries]


def transmit(signal, realization: ChannelRealization, equalize: bool = True,
             rng: np.random.Generator | None = None) -> Tensor:
    """Send one block through ``h * x + eps`` and (optionally) divide by ``h``.

    Noise comes from ``rng`` or, if omitted, from the realization's seed.
    """
    signal = as_tensor(signal)
    h = realization.h
    if h == 0:
        raise DegenerateChannelError("channel coefficient is exactly zero")
    if rng is None:
        rng = np.random.default_rng([realization.seed, 1])
    n = signal.size
    flat = signal.reshape(n)
    if equalize:
        noise = equalized_noise(n, h, realization.noise_sigma, rng)
        return (flat + noise).reshape(signal.shape)
    padded = flat
    if n % 2:
        padded = concat([flat, Tensor(np.zeros(1))])
    faded = complex_gain(padded, h.real, h.imag)
    noise = realization.noise_sigma * rng.standard_normal(padded.size)
    out = faded + noise
    if n % 2:
        out = _slice_first(out, n)
    return out.reshape(signal.shape)


def _slice_first(t: Tensor, n: int) -> Tensor:
    def backward(g):
        full = np.zeros(t.shape)
        full[:n] = g
        return (full,)

    return _make(t.data[:n].copy(), (t,), backward, "slice", 0)


@dataclass
class LinkDraw:
    """Per-sample channel draws for one link over a batch."""

    h: np.ndarray          # (B,) complex
    noise: np.ndarray      # (B, K) additive term (equalised or raw)
    equalize: bool

    def apply(self, signal: Tensor) -> Tensor:
        if self.equalize:
            return signal + self.noise
        return complex_gain(signal, self.h.real, self.h.imag) + self.noise


def draw_link(batch: int, n_entries: int, snr_db, rician_a: float, rng: np.random.Generator,
              equalize: bool = True, noiseless: bool = False) -> LinkDraw:
    """Draw one block realisation per sample (block fading) plus its noise."""
    if n_entries % 2:
        raise ValueError("batched links need an even number of entries")
    snr_db = np.broadcast_to(np.asarray(snr_db, dtype=float), (batch,))
    spec = ChannelSpec(0.0, rician_a)
    h = np.atleast_1d(sample_coefficient(spec, rng, size=batch))
    if np.any(h == 0):
        raise DegenerateChannelError("channel coefficient is exactly zero")
    sigma = 10.0 ** (-snr_db / 20.0)
    if noiseless:
        sigma = np.zeros(batch)
    m = n_entries // 2
    eps = sigma[:, None] * (rng.standard_normal((batch, m)) + 1j * rng.standard_normal((batch, m)))
    if equalize:
        eq = eps / h[:, None]
    else:
        eq = eps
    noise = np.stack([eq.real, eq.imag], axis=-1).reshape(batch, n_entries)
    return LinkDraw(h, noise, equalize)


def keyed_rng(*keys: int) -> np.random.Generator:
    """Independent generator addressed by integer keys (seed, realization, sample, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def draw_link_keyed(keys: Sequence[int], n_entries: int, snr_db: float, rician_a: float,
                    equalize: bool = True, noiseless: bool = False) -> LinkDraw:
    """Single-sample draw whose randomness depends only on ``keys``."""
    return draw_link(1, n_entries, snr_db, rician_a, keyed_rng(*keys), equalize, noiseless)


def empirical_snr(clean, received, h) -> float:
    """SNR in dB of ``received`` relative to ``clean``, noise referred through |h|^2."""
    clean = np.asarray(clean.data if isinstance(clean, Tensor) else clean, dtype=float)
    received = np.asarray(received.data if isinstance(received, Tensor) else received, dtype=float)
    if clean.shape != received.shape:
        raise ValueError("shape mismatch")
    gain = np.abs(np.asarray(h)) ** 2
    err = (received - clean) ** 2
    if err.ndim and np.ndim(gain):
        gain = np.reshape(gain, gain.shape + (1,) * (err.ndim - np.ndim(gain)))
    noise = np.mean(err * gain)
    if noise == 0:
        return float("inf")
    return float(10.0 * np.log10(np.mean(clean ** 2) / noise))


@dataclass
class LinkConfig:
    """Channel settings for a whole deployment (N uplinks, M downlinks)."""

    uplink_snr_db: tuple = (0.0, 0.0, 0.0, 0.0)
    uplink_rician_a: float = 1.0
    downlink_snr_db: tuple | None = None          # fixed per-user SNRs, or
    downlink_snr_range: tuple = (-5.0, 15.0)      # sampled uniformly per batch
    downlink_rician_b: float = 0.0
    equalize: bool = True
    noiseless_uplink: bool = False
    noiseless_downlink: bool = False

    def uplink_specs(self) -> list[ChannelSpec]:
        return [ChannelSpec(s, self.uplink_rician_a, UPLINK) for s in self.uplink_snr_db]

    @property
    def mean_uplink_snr_db(self) -> float:
        return float(np.mean(self.uplink_snr_db))
