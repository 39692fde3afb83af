"""Closed-form interaction-cost and parameter accounting per block shape.

Interaction MACs count the multiply-accumulates spent building the
relation structure itself (relation entries times dot-product length),
which is where the block shapes differ: part relations cost
T*N*(N+T-1)*2D while dense position-pair affinities cost (T*H*W)^2*D.
Parameter counts enumerate the weight tensors of each shape. Non-local
and squeeze-excitation are accounted at their conventional shapes
(bottleneck D/2 convs, reduction-16 gating) for comparison only.
"""
from __future__ import annotations

from .errors import ConfigurationError

KINDS = ("stiau", "ciau", "iau", "nonlocal_shape", "se_shape")


def count_ops_and_params(t: int, h: int, w: int, d: int, n: int,
                         kind: str = "iau",
                         shared_projector: bool = True) -> tuple[int, int]:
    """Return (interaction MAC count, parameter count) for one block."""
    if min(t, h, w, d, n) <= 0:
        raise ConfigurationError(f"dims must be positive, got {(t, h, w, d, n)}")
    if kind not in KINDS:
        raise ConfigurationError(f"unknown block kind {kind!r}")

    def stiau() -> tuple[int, int]:
        macs = t * n * (n + t - 1) * 2 * d
        params = 2 * d + (d * n + n) + 2 * d * d + 2 * d * d
        if not shared_projector:
            params += 2 * d
        return macs, params

    def ciau() -> tuple[int, int]:
        return (t * d) ** 2 * (h * w), d * d + d

    if kind == "stiau":
        return stiau()
    if kind == "ciau":
        return ciau()
    if kind == "iau":
        ms, ps = stiau()
        mc, pc = ciau()
        return ms + mc, ps + pc
    if kind == "nonlocal_shape":
        return (t * h * w) ** 2 * d, 4 * d * (d // 2)
    inner = max(d // 16, 1)
    return 2 * d * inner, 2 * d * inner + inner + d
