"""Spatial-temporal and channel interaction-aggregation-update blocks.

All operations take a leading batch axis: a video feature map is
(B, T, H, W, D), part features are (B, T, N, D). Relation maps relate
the T*N parts of each sequence: spatial relations within a frame,
temporal relations between a part's instances across frames, assembled
into a block-sparse (T*N, T*N) matrix where everything else is exactly
zero. Each row of that matrix therefore has N + T - 1 positions that
may be nonzero (its own frame plus the same part in the other frames).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation, DimensionError
from .tensor import BatchNormStats, Tensor, batch_norm, _apply

RELATION_MODES = ("full", "spatial_only", "temporal_only")
ARRANGEMENTS = ("ciau_stiau", "stiau_ciau", "parallel")
BLOCK_KINDS = ("iau", "stiau", "ciau")
PART_MODES = ("attention", "equal_patch")


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


# ---------------------------------------------------------------------------
# part division
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """1x1-convolution weights of the part division unit."""
    w: Tensor   # (D, N)
    b: Tensor   # (N,)


def part_division(f: Tensor, params: Optional[AttentionParams] = None,
                  mode: str = "attention", parts: int = 4):
    """Split each frame into N part features.

    attention mode: sigmoid attention maps pool the feature map per part,
    p = sum_hw(A * f) / (H*W). equal_patch mode: N horizontal strips,
    average-pooled (requires H divisible by N).

    Returns (attention maps or None, part features (B, T, N, D)).
    """
    B, Tn, H, W, D = f.shape
    if mode == "attention":
        if params is None:
            raise ConfigurationError("attention mode needs attention parameters")
        n = params.w.shape[1]
        a = T.sigmoid(T.conv1x1(f, params.w, params.b))        # (B,T,H,W,N)
        a_rows = T.transpose(T.reshape(a, (B, Tn, H * W, n)), (0, 1, 3, 2))
        f_rows = T.reshape(f, (B, Tn, H * W, D))
        p = T.matmul(a_rows, f_rows) * (1.0 / (H * W))          # (B,T,N,D)
        return a, p
    if mode == "equal_patch":
        if H % parts != 0:
            raise ConfigurationError(
                f"equal_patch needs height divisible by {parts} parts, got H={H}")
        strips = T.reshape(f, (B, Tn, parts, H // parts, W, D))
        return None, T.mean_(strips, axis=(3, 4))
    raise ConfigurationError(f"unknown part division mode {mode!r}")


# ---------------------------------------------------------------------------
# interaction
# ---------------------------------------------------------------------------

def _pairwise_relations(p: Tensor, u: Tensor, w_r: Tensor) -> Tensor:
    """Relation scalars for all ordered pairs along axis 2 of (B, G, M, D)."""
    B, G, M, D = p.shape
    diff = T.absolute(T.sub(T.reshape(p, (B, G, M, 1, D)),
                            T.reshape(p, (B, G, 1, M, D))))
    ub = T.broadcast_to(T.reshape(u, (B, 1, 1, 1, D)), (B, G, M, M, D))
    cat = T.concat([diff, ub], axis=-1)                        # (B,G,M,M,2D)
    flat = T.matmul(T.reshape(cat, (B * G * M * M, 2 * D)),
                    T.reshape(w_r, (2 * D, 1)))
    return T.reshape(flat, (B, G, M, M))


def spatial_interaction(p: Tensor, u: Tensor, w_r: Tensor) -> Tensor:
    """Per-frame part-pair relations (B, T, N, N); symmetric by construction.

    The diagonal is evaluated like any pair (zero feature difference
    concatenated with the global descriptor), which is what makes each
    part relate to N + T - 1 parts overall.
    """
    return _pairwise_relations(p, u, w_r)


def temporal_interaction(p: Tensor, u: Tensor, w_r: Tensor) -> Optional[Tensor]:
    """Per-part frame-pair relations (B, N, T, T); None when T == 1."""
    if p.shape[1] == 1:
        return None
    return _pairwise_relations(T.transpose(p, (0, 2, 1, 3)), u, w_r)


def relation_mask(t: int, n: int, relations: str = "full",
                  include_self: bool = True) -> np.ndarray:
    """Boolean (T*N, T*N) mask of positions allowed to be nonzero."""
    if relations not in RELATION_MODES:
        raise ConfigurationError(f"unknown relation mode {relations!r}")
    idx = np.arange(t * n)
    frame = idx // n
    part = idx % n
    same_frame = frame[:, None] == frame[None, :]
    same_part = part[:, None] == part[None, :]
    if relations == "full":
        mask = same_frame | same_part
    elif relations == "spatial_only":
        mask = same_frame.copy()
    else:
        mask = same_part.copy()
    if not include_self:
        np.fill_diagonal(mask, False)
    return mask


def assemble_relation(s: Optional[Tensor], tt: Optional[Tensor], t: int, n: int,
                      relations: str = "full", include_self: bool = True):
    """Scatter spatial and temporal relations into (B, T*N, T*N).

    Flattened part index is frame-major: i = frame * N + part. Same-frame
    entries come from the spatial maps (including the diagonal), same-part
    cross-frame entries from the temporal maps, everything else is zero.

    Returns (relation map tensor, structural mask array).
    """
    spatial_used = relations in ("full", "spatial_only")
    temporal_used = relations in ("full", "temporal_only") and tt is not None
    if spatial_used:
        if s is None:
            raise ContractViolation("spatial relations required but missing")
        if s.shape[1:] != (t, n, n):
            raise ContractViolation(f"expected {t} spatial maps of {n}x{n}, got {s.shape}")
    if tt is not None and tt.shape[1:] != (n, t, t):
        raise ContractViolation(f"expected {n} temporal maps of {t}x{t}, got {tt.shape}")
    if relations == "temporal_only" and tt is None:
        raise ContractViolation("temporal_only needs T >= 2")

    B = s.shape[0] if s is not None else tt.shape[0]
    mask = relation_mask(t, n, relations, include_self)
    dtype = (s or tt).data.dtype
    data = np.zeros((B, t * n, t * n), dtype=dtype)
    if temporal_used:
        for j in range(n):
            data[:, j::n, j::n] = tt.data[:, j]
    if spatial_used:
        for i in range(t):
            blk = slice(i * n, (i + 1) * n)
            data[:, blk, blk] = s.data[:, i]
    data = data * mask

    inputs = [x for x in (s, tt) if x is not None]

    def rule(g):
        gm = g * mask
        gs = gtt = None
        if spatial_used:
            gs = np.stack([gm[:, i * n:(i + 1) * n, i * n:(i + 1) * n]
                           for i in range(t)], axis=1)
        if temporal_used:
            gtt = np.stack([gm[:, j::n, j::n] for j in range(n)], axis=1)
            if spatial_used:
                # diagonal flows through the spatial maps
                di = np.arange(t)
                gtt[:, :, di, di] = 0.0
        grads = []
        if s is not None:
            grads.append(gs)
        if tt is not None:
            grads.append(gtt)
        return tuple(grads)

    return _apply(data, inputs, rule), mask


def normalize_relation(r: Tensor, mask: np.ndarray) -> Tensor:
    """Row-normalize over structurally active positions; zeros stay exact."""
    return T.masked_softmax(r, mask, axis=-1)


# ---------------------------------------------------------------------------
# aggregation and update
# ---------------------------------------------------------------------------

def aggregate(r_norm: Tensor, p: Tensor) -> Tensor:
    """Mix part features with the normalized relation map: (B, T, N, D)."""
    B, Tn, N, D = p.shape
    z = T.matmul(r_norm, T.reshape(p, (B, Tn * N, D)))
    return T.reshape(z, (B, Tn, N, D))


def part_update(p: Tensor, z: Tensor, w_pu: Tensor) -> Tensor:
    """Project [part, context] pairs back to D dims per part."""
    B, Tn, N, D = p.shape
    cat = T.reshape(T.concat([p, z], axis=-1), (B * Tn * N, 2 * D))
    return T.reshape(T.matmul(cat, w_pu), (B, Tn, N, D))


def frame_update(p_hat: Tensor, u: Tensor, w_fu: Tensor) -> Tensor:
    """Per-frame feature from mean updated parts and the global descriptor."""
    B, Tn, N, D = p_hat.shape
    mp = T.mean_(p_hat, axis=2)                                 # (B,T,D)
    ub = T.broadcast_to(T.reshape(u, (B, 1, D)), (B, Tn, D))
    cat = T.reshape(T.concat([mp, ub], axis=-1), (B * Tn, 2 * D))
    return T.reshape(T.matmul(cat, w_fu), (B, Tn, D))


# ---------------------------------------------------------------------------
# channel path
# ---------------------------------------------------------------------------

def channel_interaction(f: Tensor):
    """Row-softmaxed Gram matrix of per-frame channel features.

    Returns (C (B, T*D, T*D), channel rows (B, T*D, H*W)).
    """
    B, Tn, H, W, D = f.shape
    rows = T.reshape(T.transpose(f, (0, 1, 4, 2, 3)), (B, Tn * D, H * W))
    gram = T.matmul(rows, T.transpose(rows, (0, 2, 1)))
    return T.softmax(gram, axis=-1), rows


def channel_aggregate(c: Tensor, rows: Tensor, shape) -> Tensor:
    """Mix channel rows with the relation map, back to (B, T, H, W, D)."""
    B, Tn, H, W, D = shape
    z = T.matmul(c, rows)                                       # (B,TD,HW)
    return T.transpose(T.reshape(z, (B, Tn, D, H, W)), (0, 1, 3, 4, 2))


def channel_update(z: Tensor, w_cu: Tensor, b_cu: Tensor) -> Tensor:
    return T.conv1x1(z, w_cu, b_cu)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

@dataclass
class StiauResult:
    e_frames: Tensor                 # (B, T, D)
    e_broadcast: Tensor              # (B, T, H, W, D)
    attention: Optional[Tensor]      # (B, T, H, W, N) in attention mode
    parts: Tensor                    # (B, T, N, D)
    spatial: Optional[Tensor]        # (B, T, N, N)
    temporal: Optional[Tensor]       # (B, N, T, T)
    relation: Tensor                 # (B, TN, TN)
    relation_norm: Tensor            # (B, TN, TN)
    mask: np.ndarray                 # (TN, TN)
    u: Tensor                        # (B, D)
    parts_updated: Tensor            # (B, T, N, D)
    context: Tensor                  # (B, T, N, D)


class StiauModule:
    """Part division, spatial-temporal interaction, aggregation and update."""

    def __init__(self, channels: int, parts: int, rng: np.random.Generator,
                 part_mode: str = "attention", relations: str = "full",
                 shared_projector: bool = True, include_self: bool = True,
                 dtype=np.float32):
        if part_mode not in PART_MODES:
            raise ConfigurationError(f"unknown part mode {part_mode!r}")
        if relations not in RELATION_MODES:
            raise ConfigurationError(f"unknown relation mode {relations!r}")
        if parts < 2:
            raise ConfigurationError(f"relations need at least 2 parts, got {parts}")
        D = channels
        self.channels = D
        self.parts = parts
        self.part_mode = part_mode
        self.relations = relations
        self.shared_projector = shared_projector
        self.include_self = include_self
        self.w_r = _uniform(rng, 2 * D, 2 * D, dtype)
        self.w_r_temporal = None if shared_projector else _uniform(rng, 2 * D, 2 * D, dtype)
        if part_mode == "attention":
            self.attention = AttentionParams(
                w=_uniform(rng, (D, parts), D, dtype),
                b=Tensor(np.zeros(parts, dtype=dtype), requires_grad=True))
        else:
            self.attention = None
        self.w_pu = _uniform(rng, (2 * D, D), 2 * D, dtype)
        self.w_fu = _uniform(rng, (2 * D, D), 2 * D, dtype)

    def named_params(self) -> dict[str, Tensor]:
        out = {"w_r": self.w_r, "w_pu": self.w_pu, "w_fu": self.w_fu}
        if self.w_r_temporal is not None:
            out["w_r_temporal"] = self.w_r_temporal
        if self.attention is not None:
            out["w_a"] = self.attention.w
            out["b_a"] = self.attention.b
        return out

    def forward(self, f: Tensor) -> StiauResult:
        B, Tn, H, W, D = f.shape
        if D != self.channels:
            raise DimensionError(f"stiau built for {self.channels} channels, got {D}")
        a, p = part_division(f, self.attention, self.part_mode, self.parts)
        u = T.mean_(f, axis=(1, 2, 3))                          # (B,D)
        w_rt = self.w_r if self.shared_projector else self.w_r_temporal
        s = spatial_interaction(p, u, self.w_r)
        tt = temporal_interaction(p, u, w_rt)
        r, mask = assemble_relation(s, tt, Tn, self.parts,
                                    self.relations, self.include_self)
        r_norm = normalize_relation(r, mask)
        z = aggregate(r_norm, p)
        p_hat = part_update(p, z, self.w_pu)
        e = frame_update(p_hat, u, self.w_fu)                   # (B,T,D)
        e_b = T.broadcast_to(T.reshape(e, (B, Tn, 1, 1, D)), (B, Tn, H, W, D))
        return StiauResult(e, e_b, a, p, s, tt, r, r_norm, mask, u, p_hat, z)


@dataclass
class CiauResult:
    e_channels: Tensor               # (B, T, H, W, D)
    relation: Tensor                 # (B, TD, TD)
    aggregated: Tensor               # (B, T, H, W, D)


class CiauModule:
    """Channel interaction, aggregation, and 1x1 update."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        D = channels
        self.channels = D
        self.w_cu = _uniform(rng, (D, D), D, dtype)
        self.b_cu = Tensor(np.zeros(D, dtype=dtype), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {"w_cu": self.w_cu, "b_cu": self.b_cu}

    def forward(self, f: Tensor) -> CiauResult:
        if f.shape[-1] != self.channels:
            raise DimensionError(f"ciau built for {self.channels} channels, got {f.shape[-1]}")
        c, rows = channel_interaction(f)
        z = channel_aggregate(c, rows, f.shape)
        return CiauResult(channel_update(z, self.w_cu, self.b_cu), c, z)


class BatchNorm:
    """Batch normalization layer owning its affine params and statistics."""

    def __init__(self, channels: int, gamma_init: float = 1.0,
                 momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.full(channels, gamma_init, dtype=dtype),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = BatchNormStats(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats,
                          training, self.momentum, self.eps)

    def named_params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}


@dataclass
class BlockTrace:
    """Intermediates exposed for supervision and diagnostics."""
    attention: Optional[Tensor] = None
    stiau: Optional[StiauResult] = None
    ciau: Optional[CiauResult] = None


class IauBlock:
    """Residual block wrapping the channel and/or spatial-temporal modules.

    Both normalization layers start with zero scale, so a freshly built
    block is an exact identity and training opens it up gradually.
    """

    def __init__(self, channels: int, parts: int, rng: np.random.Generator,
                 kind: str = "iau", arrangement: str = "ciau_stiau",
                 part_mode: str = "attention", relations: str = "full",
                 shared_projector: bool = True, include_self: bool = True,
                 dtype=np.float32):
        if kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {kind!r}")
        if arrangement not in ARRANGEMENTS:
            raise ConfigurationError(f"unknown arrangement {arrangement!r}")
        self.kind = kind
        self.arrangement = arrangement
        self.channels = channels
        self.stiau = None if kind == "ciau" else StiauModule(
            channels, parts, rng, part_mode, relations,
            shared_projector, include_self, dtype)
        self.ciau = None if kind == "stiau" else CiauModule(channels, rng, dtype)
        self.bn_s = None if kind == "ciau" else BatchNorm(channels, 0.0, dtype=dtype)
        self.bn_c = None if kind == "stiau" else BatchNorm(channels, 0.0, dtype=dtype)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, mod in (("stiau", self.stiau), ("ciau", self.ciau),
                            ("bn_s", self.bn_s), ("bn_c", self.bn_c)):
            if mod is not None:
                for k, v in mod.named_params().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, bn in (("bn_s", self.bn_s), ("bn_c", self.bn_c)):
            if bn is not None:
                for k, v in bn.named_buffers().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def forward(self, f: Tensor, training: bool):
        trace = BlockTrace()
        if self.kind == "stiau":
            st = self.stiau.forward(f)
            trace.stiau, trace.attention = st, st.attention
            return T.add(self.bn_s.forward(st.e_broadcast, training), f), trace
        if self.kind == "ciau":
            ci = self.ciau.forward(f)
            trace.ciau = ci
            return T.add(self.bn_c.forward(ci.e_channels, training), f), trace

        if self.arrangement == "ciau_stiau":
            ci = self.ciau.forward(f)
            y1 = T.add(self.bn_c.forward(ci.e_channels, training), f)
            st = self.stiau.forward(y1)
            y = T.add(self.bn_s.forward(st.e_broadcast, training), y1)
        elif self.arrangement == "stiau_ciau":
            st = self.stiau.forward(f)
            y1 = T.add(self.bn_s.forward(st.e_broadcast, training), f)
            ci = self.ciau.forward(y1)
            y = T.add(self.bn_c.forward(ci.e_channels, training), y1)
        else:  # parallel: one residual around the summed module outputs
            st = self.stiau.forward(f)
            ci = self.ciau.forward(f)
            e = T.add(ci.e_channels, st.e_broadcast)
            y = T.add(self.bn_s.forward(e, training), f)
        trace.stiau, trace.ciau, trace.attention = st, ci, st.attention
        return y, trace
