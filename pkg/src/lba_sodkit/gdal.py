"""Global distributed affinity learning (GDAL).

An image-level descriptor of the deepest encoder stage is redistributed to
the three shallower stages through two branches:

explicit
    descriptor -> per-stage projection -> broadcast -> spatial attention,
    then an association map ``sigmoid(f_i * attention)`` modulates ``f_i``
    before squeeze-excitation.
implicit
    a spatial softmax over the descriptor-modulated deepest stage yields a
    (C_i x C_i) semantic assignment matrix that mixes the channels of
    ``f_i``; an upsampled projection of the deepest stage is added back.

The two branch outputs are concatenated and fused by a 3x3 and a 1x1 CBR.
"""
from __future__ import annotations

from . import ops
from .layers import Initializer, ParamStore, cbr, channel_attention, conv, fc
from .tensor import ShapeError, Tensor


def init_gdal(init: Initializer, channels: tuple[int, int, int, int], use_eal: bool = True,
              use_ial: bool = True, prefix: str = "gdal") -> None:
    if not (use_eal or use_ial):
        raise ValueError("GDAL needs at least one branch")
    c4 = channels[3]
    init.fc(f"{prefix}.fc", c4, c4)
    n_branches = int(use_eal) + int(use_ial)
    for i, c in enumerate(channels[:3], start=1):
        if use_eal:
            init.conv(f"{prefix}.exp{i}.proj", c, c4, 1)
            init.conv(f"{prefix}.exp{i}.sa", 1, 1, 7)
            init.se(f"{prefix}.exp{i}.se", c)
        if use_ial:
            init.conv(f"{prefix}.imp{i}.proj", c, c4, 1)
            init.cbr(f"{prefix}.imp{i}.skip", c, c4, 1)
        init.cbr(f"{prefix}.fuse{i}.c3", c, n_branches * c, 3)
        init.cbr(f"{prefix}.fuse{i}.c1", c, c, 1)


def image_descriptor(f4: Tensor, P: ParamStore, prefix: str = "gdal") -> Tensor:
    """FC(GAP(f4)), shape (n, C4, 1, 1)."""
    if f4.ndim != 4:
        raise ShapeError(f"image_descriptor: expected rank-4 input, got {f4.shape}")
    return fc(ops.global_avg_pool(f4), P, f"{prefix}.fc")


def explicit_affinity(f: Tensor, desc: Tensor, P: ParamStore, name: str) -> Tensor:
    h, w = f.shape[2:]
    proj = conv(desc, P, f"{name}.proj")
    grid = ops.resize_bilinear(proj, h, w)
    st = ops.sigmoid(conv(ops.channel_max(grid), P, f"{name}.sa"))
    assoc = ops.sigmoid(ops.mul(f, st))
    return channel_attention(ops.mul(assoc, f), P, f"{name}.se")


def descriptor_projection(f4: Tensor, desc: Tensor, P: ParamStore, name: str) -> Tensor:
    """Channel-align the descriptor-weighted deepest stage: (n, C_i, H4, W4)."""
    return conv(ops.mul(f4, desc), P, f"{name}.proj")


def implicit_attention(desc_proj: Tensor) -> Tensor:
    """Softmax over the spatial positions of each channel: (n, C_i, H4*W4)."""
    return ops.softmax_lastdim(ops.flatten_spatial(desc_proj))


def semantic_assignment(m: Tensor, desc_proj_flat: Tensor) -> Tensor:
    """(n, C_i, C_i) = desc_proj_flat @ m^T."""
    if m.shape != desc_proj_flat.shape:
        raise ShapeError(f"semantic_assignment: attention {m.shape} vs descriptor {desc_proj_flat.shape}")
    return ops.bmm(desc_proj_flat, ops.transpose(m))


def implicit_affinity(a: Tensor, f: Tensor, f4: Tensor | None, P: ParamStore | None, name: str) -> Tensor:
    """reshape(a @ flatten(f)) + CBR1x1(upsample(f4)).

    ``f4=None`` drops the skip term.
    """
    n, c, h, w = f.shape
    if a.shape != (n, c, c):
        raise ShapeError(f"implicit_affinity: assignment {a.shape} vs feature channels {c}")
    mixed = ops.unflatten_spatial(ops.bmm(a, ops.flatten_spatial(f)), h, w)
    if f4 is None:
        return mixed
    skip = cbr(ops.upsample_bilinear(f4, h, w), P, f"{name}.skip")
    return ops.add(mixed, skip)


def gdal_fuse(parts: list[Tensor], P: ParamStore, name: str) -> Tensor:
    """CBR1x1(CBR3x3(concat(parts))), implicit part first and explicit second."""
    for t in parts[1:]:
        if t.shape != parts[0].shape:
            raise ShapeError(f"gdal_fuse: {t.shape} vs {parts[0].shape}")
    x = parts[0] if len(parts) == 1 else ops.concat_channels(parts)
    return cbr(cbr(x, P, f"{name}.c3"), P, f"{name}.c1")


def gdal_forward(f1: Tensor, f2: Tensor, f3: Tensor, f4: Tensor, P: ParamStore,
                 use_eal: bool = True, use_ial: bool = True,
                 prefix: str = "gdal") -> tuple[Tensor, Tensor, Tensor]:
    feats = (f1, f2, f3, f4)
    for i in range(3):
        a, b = feats[i], feats[i + 1]
        if a.shape[0] != b.shape[0] or a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ShapeError(f"gdal: stage {i + 1} {a.shape} and stage {i + 2} {b.shape} "
                             "violate the stride-2 pyramid")
    desc = image_descriptor(f4, P, prefix)
    out = []
    for i, f in enumerate(feats[:3], start=1):
        parts = []
        if use_ial:
            dp = descriptor_projection(f4, desc, P, f"{prefix}.imp{i}")
            m = implicit_attention(dp)
            a = semantic_assignment(m, ops.flatten_spatial(dp))
            parts.append(implicit_affinity(a, f, f4, P, f"{prefix}.imp{i}"))
        if use_eal:
            parts.append(explicit_affinity(f, desc, P, f"{prefix}.exp{i}"))
        out.append(gdal_fuse(parts, P, f"{prefix}.fuse{i}"))
    return tuple(out)
