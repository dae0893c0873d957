"""Learnable codecs for the sensing-device -> edge -> user chain.

Geometry at desk scale: each device sees a 3x12x12 crop; its semantic
encoder emits mean/std grids of ``C_f x G_f x G_f`` (one cell per 2x2 pixel
patch). Channel-aware pooling shrinks the grid to ``l_p x l_p`` before power
normalisation. The edge server upsamples every received grid back to
``G_f``, places the views on the 8x8 scene grid, fuses them and emits
``K^s`` = C_s x 4 x 4 re-encoded entries broadcast to every user.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .channel import power_normalize
from .numerics import ContractError, DimensionError, ParamLayer, Tensor, as_tensor, dense_forward

SIGMA_FLOOR = 1e-6


# ---------------------------------------------------------------- configuration

@dataclass
class TaskSpec:
    kind: str               # segmentation | saliency | classification
    num_classes: int
    out_grid: int = 16

    @property
    def out_shape(self) -> tuple[int, ...]:
        if self.kind == "segmentation":
            return (self.num_classes, self.out_grid, self.out_grid)
        if self.kind == "saliency":
            return (1, self.out_grid, self.out_grid)
        if self.kind == "classification":
            return (self.num_classes,)
        raise ValueError(f"unknown task kind {self.kind!r}")

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))


def default_task(kind: str) -> TaskSpec:
    return {
        "segmentation": TaskSpec("segmentation", 4),
        "saliency": TaskSpec("saliency", 1),
        "classification": TaskSpec("classification", 3),
    }[kind]


DESK_CAP_TABLE = ((-10.0, 6), (-5.0, 5), (0.0, 4), (5.0, 3), (10.0, 2))
FULLSCALE_CAP_TABLE = ((-10.0, 8), (-5.0, 7), (0.0, 6), (5.0, 5), (10.0, 4))


@dataclass
class ArchConfig:
    n_views: int = 4
    view_shape: tuple[int, ...] = (3, 12, 12)
    feat_channels: int = 32
    feat_grid: int = 6
    hidden: int = 64
    edge_hidden: int = 64
    dec_hidden: int = 64
    edge_grid: int = 4
    tasks: list[TaskSpec] = field(default_factory=lambda: [default_task(k) for k in
                                                          ("segmentation", "saliency", "classification")])
    cap_table: tuple = DESK_CAP_TABLE
    sigma_bias_init: float = -2.0
    scene_side: int = 16
    view_offsets: tuple = ((0, 0), (0, 4), (4, 0), (4, 4))

    def __post_init__(self):
        side = self.view_shape[-1]
        if side % self.feat_grid:
            raise ValueError(f"view side {side} is not a multiple of the feature grid {self.feat_grid}")
        if len(self.view_offsets) != self.n_views:
            raise ValueError("need one view offset per view")
        if any(r % self.patch or c % self.patch for r, c in self.view_offsets):
            raise ValueError("view offsets must align with feature cells")
        if self.scene_side % self.patch or self.scene_cells % self.edge_grid:
            raise ValueError("scene grid does not tile the edge grid")
        if any(t.kind != "classification" and t.out_grid % self.edge_grid for t in self.tasks):
            raise ValueError("task output grid does not tile the edge grid")

    @property
    def patch(self) -> int:
        """Pixels per feature cell along one axis."""
        return self.view_shape[-1] // self.feat_grid

    @property
    def scene_cells(self) -> int:
        return self.scene_side // self.patch

    def stream_channels(self, dim: int) -> int:
        cells = self.edge_grid ** 2
        if dim < cells or dim % cells:
            raise ValueError(f"stream of {dim} entries does not tile the {self.edge_grid}x{self.edge_grid} edge grid")
        return dim // cells

    @property
    def view_dim(self) -> int:
        return int(np.prod(self.view_shape))

    @property
    def k_z(self) -> int:
        return self.feat_channels * self.feat_grid ** 2

    @property
    def k_s(self) -> int:
        return self.feat_channels * self.edge_grid ** 2

    @property
    def m_users(self) -> int:
        return len(self.tasks)

    def k_u(self, l_p: int) -> int:
        return self.feat_channels * l_p ** 2


# ---------------------------------------------------------------- channel-aware pooling

class CapTable:
    """Ordered (SNR threshold in dB, pooling size) pairs."""

    def __init__(self, entries: Sequence[tuple[float, int]]):
        if not entries:
            raise ValueError("CAP table must not be empty")
        entries = sorted((float(t), int(lp)) for t, lp in entries)
        sizes = [lp for _, lp in entries]
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("pool sizes must not increase with SNR")
        if min(sizes) < 1:
            raise ValueError("pool sizes must be >= 1")
        self.entries = entries

    def validate_for(self, feat_grid: int) -> None:
        if max(lp for _, lp in self.entries) > feat_grid:
            raise ValueError(f"pool size exceeds feature grid {feat_grid}")


def cap_select(table, mean_uplink_snr_db: float) -> int:
    """Pool size of the highest threshold not above the given SNR."""
    if not isinstance(table, CapTable):
        table = CapTable(table)
    chosen = table.entries[0][1]
    for thr, lp in table.entries:
        if thr <= mean_uplink_snr_db:
            chosen = lp
    return chosen


def compression_ratio(l_p: int, channels: int = 512, input_shape=(3, 384, 384)) -> float:
    return channels * l_p ** 2 / float(np.prod(input_shape))


def reduced_fraction(l_p: int, l_max: int = 8) -> float:
    return 1.0 - (l_p / l_max) ** 2


# ---------------------------------------------------------------- module plumbing

class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in self.__dict__.items():
            for key, t in _walk(val, prefix + name):
                out[key] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        named = self.named_parameters(prefix)
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, t in named.items():
            if state[k].shape != t.data.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=nx.DTYPE)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _walk(val, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, ParamLayer):
        yield f"{name}.weight", val.weights
        yield f"{name}.bias", val.bias
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".").items()
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            if isinstance(item, (ParamLayer, Module)):
                yield from _walk(item, f"{name}.{i}")


def param_checksum(module: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, t in module.named_parameters().items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- grid plumbing
#
# Every learnable map below is a dense layer. Grid-shaped tensors are kept
# channels-first (B, C, H, W) between stages; inside a stage they are moved
# channels-last so one shared dense layer acts on every cell.

def _channels_last(x: Tensor) -> Tensor:
    return nx.transpose(x, (0, 2, 3, 1))


def _channels_first(x: Tensor) -> Tensor:
    return nx.transpose(x, (0, 3, 1, 2))


def to_cells(x: Tensor, f: int) -> Tensor:
    """(B, C, H, W) -> (B, H/f, W/f, C*f*f): each f x f block becomes one cell vector."""
    b, c, h, w = x.shape
    if h % f or w % f:
        raise DimensionError(f"grid {h}x{w} is not divisible by {f}")
    t = x.reshape(b, c, h // f, f, w // f, f)
    return nx.transpose(t, (0, 2, 4, 1, 3, 5)).reshape(b, h // f, w // f, c * f * f)


def from_cells(y: Tensor, channels: int, f: int) -> Tensor:
    """Inverse of :func:`to_cells`: (B, h, w, C*f*f) -> (B, C, h*f, w*f)."""
    b, h, w, d = y.shape
    if d != channels * f * f:
        raise DimensionError(f"cell vector of {d} entries is not {channels}x{f}x{f}")
    t = y.reshape(b, h, w, channels, f, f)
    return nx.transpose(t, (0, 3, 1, 4, 2, 5)).reshape(b, channels, h * f, w * f)


def _std_head(h: Tensor, layer: ParamLayer) -> Tensor:
    return dense_forward(h, layer, "softplus") + SIGMA_FLOOR


# ---------------------------------------------------------------- device side

class SemanticEncoder(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, name: str = "sfe"):
        self.arch = arch
        cell_in = arch.view_shape[0] * arch.patch ** 2
        self.backbone = [ParamLayer(cell_in, arch.hidden, rng, f"{name}.backbone0"),
                         ParamLayer(arch.hidden, arch.hidden, rng, f"{name}.backbone1")]
        self.ibm = ParamLayer(arch.hidden, arch.feat_channels, rng, f"{name}.ibm")
        self.ibs = ParamLayer(arch.hidden, arch.feat_channels, rng, f"{name}.ibs",
                              bias_init=arch.sigma_bias_init)


def sfe_forward(view, encoder: SemanticEncoder) -> tuple[Tensor, Tensor]:
    """Mean and std grids (C_f, G_f, G_f) for a view or a batch of views."""
    arch = encoder.arch
    x = as_tensor(view)
    single = x.shape in (tuple(arch.view_shape), (arch.view_dim,))
    if single:
        x = x.reshape(1, arch.view_dim)
    elif x.ndim < 2 or x.shape[0] * arch.view_dim != x.size:
        raise DimensionError(f"view of shape {x.shape} does not match {arch.view_shape}")
    x = x.reshape((x.shape[0],) + tuple(arch.view_shape))
    h = to_cells(x, arch.patch)
    for layer in encoder.backbone:
        h = dense_forward(h, layer, "relu")
    mu = _channels_first(dense_forward(h, encoder.ibm))
    sigma = _channels_first(_std_head(h, encoder.ibs))
    if single:
        grid = (arch.feat_channels, arch.feat_grid, arch.feat_grid)
        return mu.reshape(grid), sigma.reshape(grid)
    return mu, sigma


def reparameterize(mu, sigma, rng: np.random.Generator | None = None, eps: np.ndarray | None = None,
                   strict: bool = True) -> Tensor:
    """``mu + sigma * eps`` with ``eps ~ N(0, I)`` (drawn from ``rng`` unless given)."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise DimensionError("mu and sigma shapes differ")
    bad = (sigma.data <= 0) if strict else (sigma.data < 0)
    if np.any(bad) or np.any(~np.isfinite(sigma.data)):
        raise ContractError("sigma must be positive")
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps


def cae_forward(z, l_p: int) -> Tensor:
    """Channel-aware encoder: adaptive pool to ``l_p`` then unit power per sample."""
    z = as_tensor(z)
    if z.ndim not in (3, 4):
        raise DimensionError("expected (C, G, G) or (B, C, G, G)")
    g = z.shape[-1]
    if not isinstance(l_p, (int, np.integer)) or not 1 <= l_p <= g:
        raise ValueError(f"invalid pool size {l_p} for grid {g}")
    pooled = nx.avg_pool2d(z, int(l_p))
    if z.ndim == 3:
        return power_normalize(pooled.reshape(pooled.size))
    return power_normalize(pooled.reshape(z.shape[0], -1), per_sample=True)


# ---------------------------------------------------------------- edge side

def es_receive_upsample(w_n, l_p: int, channels: int, out_grid: int) -> Tensor:
    """Nearest-neighbour upsample of received ``(…, C*l_p*l_p)`` back to ``C x G x G``."""
    w_n = as_tensor(w_n)
    per = w_n.shape[-1]
    if per % channels or int(round(np.sqrt(per // channels))) ** 2 != per // channels:
        raise DimensionError(f"{per} entries are not {channels} square grids")
    side = int(round(np.sqrt(per // channels)))
    if side != l_p:
        raise DimensionError(f"received grid side {side} != pool size {l_p}")
    lead = w_n.shape[:-1]
    grid = w_n.reshape(lead + (channels, side, side))
    return nx.upsample_nearest(grid, out_grid)


def fuse_views(w: Sequence, arch: ArchConfig, l_p: int) -> Tensor:
    """Upsample every received view and place it on the scene grid: (B, N*C_f, S, S)."""
    if len(w) != arch.n_views:
        raise DimensionError(f"expected {arch.n_views} view features, got {len(w)}")
    w = [as_tensor(t) for t in w]
    if w[0].ndim == 1:
        w = [t.reshape(1, t.size) for t in w]
    placed = []
    for t, (r, c) in zip(w, arch.view_offsets):
        g = es_receive_upsample(t, l_p, arch.feat_channels, arch.feat_grid)
        placed.append(nx.embed_grid(g, arch.scene_cells, r // arch.patch, c // arch.patch))
    return nx.concat(placed, axis=1)


class EdgeTrunk(Module):
    """Per scene-cell fusion, then a 2x2 -> 1 cell merge down to the edge grid."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, name: str):
        f = arch.scene_cells // arch.edge_grid
        self.fusion = ParamLayer(arch.n_views * arch.feat_channels, arch.edge_hidden, rng, f"{name}.fusion")
        self.merge = ParamLayer(arch.edge_hidden * f * f, arch.edge_hidden, rng, f"{name}.merge")


def trunk_forward(w: Sequence, trunk: EdgeTrunk, arch: ArchConfig, l_p: int) -> Tensor:
    """Hidden features on the edge grid, channels-last: (B, E, E, edge_hidden)."""
    x = _channels_last(fuse_views(w, arch, l_p))
    h = _channels_first(dense_forward(x, trunk.fusion, "relu"))
    h = to_cells(h, arch.scene_cells // arch.edge_grid)
    return dense_forward(h, trunk.merge, "relu")


class EdgeEncoder(Module):
    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, out_dim: int | None = None,
                 name: str = "ese"):
        self.arch = arch
        self.out_dim = arch.k_s if out_dim is None else int(out_dim)
        self.out_channels = arch.stream_channels(self.out_dim)
        self.trunk = EdgeTrunk(arch, rng, name)
        self.ibm = ParamLayer(arch.edge_hidden, self.out_channels, rng, f"{name}.ibm")
        self.ibs = ParamLayer(arch.edge_hidden, self.out_channels, rng, f"{name}.ibs",
                              bias_init=arch.sigma_bias_init)


def _flat(grid_cl: Tensor) -> Tensor:
    g = _channels_first(grid_cl)
    return g.reshape(g.shape[0], -1)


def ese_forward(w: Sequence, encoder: EdgeEncoder, l_p: int) -> tuple[Tensor, Tensor]:
    single = as_tensor(w[0]).ndim == 1 if len(w) else False
    h = trunk_forward(w, encoder.trunk, encoder.arch, l_p)
    mu = _flat(dense_forward(h, encoder.ibm))
    sigma = _flat(_std_head(h, encoder.ibs))
    if single:
        return mu.reshape(encoder.out_dim), sigma.reshape(encoder.out_dim)
    return mu, sigma


def ece_forward(s) -> Tensor:
    s = as_tensor(s)
    return power_normalize(s, per_sample=s.ndim > 1)


# ---------------------------------------------------------------- user side

class TaskDecoder(Module):
    """Dense tasks decode each edge-grid cell into its pixel block; classification reads the whole stream."""

    def __init__(self, in_dim: int, task: TaskSpec, hidden: int, rng: np.random.Generator | None,
                 name: str = "dec", grid: int = 4):
        self.task = task
        self.in_dim = int(in_dim)
        self.grid = int(grid)
        if task.kind == "classification":
            self.l1 = ParamLayer(self.in_dim, hidden, rng, f"{name}.l1")
            self.l2 = ParamLayer(hidden, task.out_size, rng, f"{name}.l2")
            return
        if self.in_dim % self.grid ** 2 or task.out_grid % self.grid:
            raise DimensionError(f"{self.in_dim} entries do not tile a {self.grid}x{self.grid} grid")
        self.block = task.out_grid // self.grid
        self.l1 = ParamLayer(self.in_dim // self.grid ** 2, hidden, rng, f"{name}.l1")
        self.l2 = ParamLayer(hidden, task.out_shape[0] * self.block ** 2, rng, f"{name}.l2")


def decoder_forward(v, decoder: TaskDecoder) -> Tensor:
    v = as_tensor(v)
    single = v.ndim == 1
    if v.shape[-1] != decoder.in_dim:
        raise DimensionError(f"decoder expects {decoder.in_dim} entries, got {v.shape[-1]}")
    if single:
        v = v.reshape(1, v.size)
    task = decoder.task
    if task.kind == "classification":
        out = dense_forward(dense_forward(v, decoder.l1, "relu"), decoder.l2)
    else:
        g = decoder.grid
        cells = _channels_last(v.reshape(v.shape[0], decoder.in_dim // g ** 2, g, g))
        y = dense_forward(dense_forward(cells, decoder.l1, "relu"), decoder.l2)
        out = from_cells(y, task.out_shape[0], decoder.block)
    if single:
        return out.reshape(task.out_shape)
    return out


class AuxiliaryNetwork(Module):
    """Stand-in for edge encoder plus decoders used only while fitting the device encoders."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, name: str = "aux"):
        self.arch = arch
        self.trunk = EdgeTrunk(arch, rng, name)
        self.proj = ParamLayer(arch.edge_hidden, arch.feat_channels, rng, f"{name}.proj")
        self.heads = [TaskDecoder(arch.k_s, t, arch.dec_hidden, rng, f"{name}.head{m}", arch.edge_grid)
                      for m, t in enumerate(arch.tasks)]


def aux_trunk(w: Sequence, aux: AuxiliaryNetwork, l_p: int) -> Tensor:
    return _flat(dense_forward(trunk_forward(w, aux.trunk, aux.arch, l_p), aux.proj))


def aux_forward(w: Sequence, aux: AuxiliaryNetwork, l_p: int) -> list[Tensor]:
    feat = aux_trunk(w, aux, l_p)
    return [decoder_forward(feat, head) for head in aux.heads]


class ViewDecoder(Module):
    """Reconstruction decoder used by the source-reconstruction (DeepJSCC-style) baseline."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, name: str = "rec"):
        self.arch = arch
        self.l1 = ParamLayer(arch.feat_channels, arch.hidden, rng, f"{name}.l1")
        self.l2 = ParamLayer(arch.hidden, arch.view_shape[0] * arch.patch ** 2, rng, f"{name}.l2")


def view_decoder_forward(w_n, dec: ViewDecoder, l_p: int) -> Tensor:
    arch = dec.arch
    w_n = as_tensor(w_n)
    if w_n.ndim == 1:
        w_n = w_n.reshape(1, w_n.size)
    up = _channels_last(es_receive_upsample(w_n, l_p, arch.feat_channels, arch.feat_grid))
    y = dense_forward(dense_forward(up, dec.l1, "relu"), dec.l2)
    rec = from_cells(y, arch.view_shape[0], arch.patch)
    return rec.reshape(rec.shape[0], -1)


# ---------------------------------------------------------------- bundles

class Upstream(Module):
    """The N semantic encoders (theta) plus their operating pool size."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None, l_p: int):
        CapTable(arch.cap_table).validate_for(arch.feat_grid)
        if not 1 <= l_p <= arch.feat_grid:
            raise ValueError(f"pool size {l_p} outside [1, {arch.feat_grid}]")
        self.arch = arch
        self.l_p = int(l_p)
        self.encoders = [SemanticEncoder(arch, rng, f"sfe{n}") for n in range(arch.n_views)]
        self.trained = False


class Downstream(Module):
    """Edge encoder(s) plus user decoders.

    ``user_stream[m]`` names the edge stream user ``m`` listens to: a single
    stream for broadcast, one stream per user for unicast.
    """

    def __init__(self, arch: ArchConfig, rng: np.random.Generator | None,
                 stream_dims: Sequence[int] | None = None, user_stream: Sequence[int] | None = None):
        self.arch = arch
        if stream_dims is None:
            stream_dims = [arch.k_s]
            user_stream = [0] * arch.m_users
        if user_stream is None or len(user_stream) != arch.m_users:
            raise ValueError("user_stream must map every user to a stream")
        self.stream_dims = [int(d) for d in stream_dims]
        self.user_stream = [int(s) for s in user_stream]
        self.edges = [EdgeEncoder(arch, rng, d, f"ese{k}") for k, d in enumerate(self.stream_dims)]
        self.decoders = [TaskDecoder(self.stream_dims[self.user_stream[m]], t, arch.dec_hidden, rng, f"dec{m}",
                                     arch.edge_grid)
                         for m, t in enumerate(arch.tasks)]

    @property
    def broadcast(self) -> bool:
        return len(self.edges) == 1

    @classmethod
    def unicast(cls, arch: ArchConfig, rng, dims: Sequence[int]) -> "Downstream":
        if len(dims) != arch.m_users:
            raise ValueError("need one feature dimension per user")
        return cls(arch, rng, dims, list(range(arch.m_users)))
