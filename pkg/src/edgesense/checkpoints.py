"""Model bundles on disk.

A bundle is one parameter checkpoint holding any of three prefixed groups:
``up.`` (device encoders), ``down.`` (edge encoder(s) and user decoders) and
``aux.`` (the variational decoders used only while training the devices).
Structural metadata rides along as small ``meta.*`` arrays so that loading
needs nothing beyond the architecture config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ArchConfig, Downstream, Upstream
from .numerics import load_checkpoint, save_checkpoint


@dataclass
class Bundle:
    up: Upstream | None = None
    down: Downstream | None = None
    aux: dict | None = None


def bundle_arrays(bundle: Bundle) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {}
    if bundle.up is not None:
        named["meta.up.l_p"] = np.array([bundle.up.l_p])
        named["meta.up.trained"] = np.array([1.0 if bundle.up.trained else 0.0])
        named.update(bundle.up.state_dict("up."))
    if bundle.down is not None:
        named["meta.down.stream_dims"] = np.array(bundle.down.stream_dims)
        named["meta.down.user_stream"] = np.array(bundle.down.user_stream)
        named.update(bundle.down.state_dict("down."))
    if bundle.aux:
        named.update({k if k.startswith("aux.") else "aux." + k: v for k, v in bundle.aux.items()})
    return named


def save_bundle(path, bundle: Bundle) -> None:
    save_checkpoint(path, bundle_arrays(bundle))


def load_bundle(path, arch: ArchConfig) -> Bundle:
    named = load_checkpoint(path)
    out = Bundle()
    if "meta.up.l_p" in named:
        up = Upstream(arch, None, int(named["meta.up.l_p"][0]))
        up.load_state_dict(named, "up.")
        up.trained = bool(named["meta.up.trained"][0])
        out.up = up
    if "meta.down.stream_dims" in named:
        dims = [int(d) for d in named["meta.down.stream_dims"]]
        users = [int(u) for u in named["meta.down.user_stream"]]
        if len(users) != arch.m_users:
            raise ValueError(f"checkpoint serves {len(users)} users, config has {arch.m_users}")
        down = Downstream(arch, None, dims, users)
        down.load_state_dict(named, "down.")
        out.down = down
    aux = {k: v for k, v in named.items() if k.startswith("aux.")}
    out.aux = aux or None
    return out
