"""Edge feature adaptive balancing and adjusting (EFABA).

Two halves:

* the edge clue detector turns the two shallowest encoder stages into a
  single-channel edge attention map ``e_att`` (Sobel gating, refinement,
  cross-stage fusion);
* the feature balance adjuster uses ``e_att`` to build a 7x7 spatial
  attention per stage and rebalances each of the first three stages through
  a residual spatial gate followed by channel attention.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .layers import Initializer, ParamStore, cbr, channel_attention, conv
from .tensor import ShapeError, Tensor

SOBEL_KX = ops.SOBEL_X
SOBEL_KY = ops.SOBEL_Y


@dataclass
class EfabaOutputs:
    features: tuple[Tensor, Tensor, Tensor]
    edge: Tensor | None


def init_efaba(init: Initializer, channels: tuple[int, int, int], use_ecd: bool = True,
               prefix: str = "efaba") -> None:
    if use_ecd:
        for i, c in enumerate(channels[:2], start=1):
            init.conv(f"{prefix}.ecd{i}.refine", c, c, 3)
            init.cbr(f"{prefix}.ecd{i}.fuse", 1, c, 1)
        init.cbr(f"{prefix}.att.branch1", 1, 1, 1)
        init.cbr(f"{prefix}.att.branch2", 1, 1, 1)
        init.conv(f"{prefix}.att.out", 1, 2, 1)
    for i, c in enumerate(channels, start=1):
        init.conv(f"{prefix}.faba{i}.sa", 1, 1, 7)
        init.se(f"{prefix}.faba{i}.ct", c)


def sobel_magnitude(x: Tensor) -> Tensor:
    return ops.sobel_magnitude(x)


def edge_gate(f: Tensor) -> Tensor:
    """Basic edge features: sigmoid of the Sobel magnitude, times the features."""
    return ops.mul(ops.sigmoid(ops.sobel_magnitude(f)), f)


def edge_fuse(e: Tensor, f: Tensor, P: ParamStore, name: str) -> Tensor:
    """Refine ``e`` with a 3x3 conv, add ``f`` back, reduce to one channel with a 1x1 CBR."""
    if e.shape != f.shape:
        raise ShapeError(f"edge_fuse: edge {e.shape} vs feature {f.shape}")
    refined = conv(e, P, f"{name}.refine")
    return cbr(ops.add(refined, f), P, f"{name}.fuse")


def edge_attention(e1f: Tensor, e2f: Tensor, P: ParamStore, prefix: str = "efaba") -> Tensor:
    n, _, h1, w1 = e1f.shape
    h2, w2 = e2f.shape[2:]
    if (h1, w1) != (2 * h2, 2 * w2):
        raise ShapeError(f"edge_attention: stage extents {h1}x{w1} and {h2}x{w2} are not 2:1")
    b1 = cbr(e1f, P, f"{prefix}.att.branch1")
    b2 = cbr(ops.upsample_bilinear(e2f, h1, w1), P, f"{prefix}.att.branch2")
    return ops.sigmoid(conv(ops.concat_channels([b1, b2]), P, f"{prefix}.att.out"))


def spatial_attention(e_att: Tensor | None, f: Tensor, P: ParamStore, name: str) -> Tensor:
    """sigmoid(conv7x7(channel_max(e_att * f))), with ``e_att`` resized to f's extent.

    ``e_att=None`` drops the edge product (the edge-detector ablation).
    """
    h, w = f.shape[2:]
    x = f
    if e_att is not None:
        x = ops.mul(ops.resize_bilinear(e_att, h, w), f)
    return ops.sigmoid(conv(ops.channel_max(x), P, f"{name}.sa"))


def faba_balance(sat: Tensor, f: Tensor, P: ParamStore, name: str,
                 force_gate_ones: bool = False) -> Tensor:
    """f * CT((sat + 1) * f), CT being squeeze-excitation recalibration."""
    aligned = ops.mul(ops.add(sat, 1.0), f)
    return ops.mul(f, channel_attention(aligned, P, f"{name}.ct", force_gate_ones))


def efaba_forward(f1: Tensor, f2: Tensor, f3: Tensor, P: ParamStore, use_ecd: bool = True,
                  prefix: str = "efaba") -> EfabaOutputs:
    feats = (f1, f2, f3)
    for i in range(2):
        a, b = feats[i], feats[i + 1]
        if a.shape[0] != b.shape[0] or a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ShapeError(f"efaba: stage {i + 1} {a.shape} and stage {i + 2} {b.shape} "
                             "violate the stride-2 pyramid")
    e_att = None
    if use_ecd:
        fused = [edge_fuse(edge_gate(f), f, P, f"{prefix}.ecd{i}")
                 for i, f in enumerate((f1, f2), start=1)]
        e_att = edge_attention(fused[0], fused[1], P, prefix)
    out = []
    for i, f in enumerate(feats, start=1):
        sat = spatial_attention(e_att, f, P, f"{prefix}.faba{i}")
        out.append(faba_balance(sat, f, P, f"{prefix}.faba{i}"))
    return EfabaOutputs(tuple(out), e_att)
