"""Cost volume construction, regularization and geometry lookup.

Disparity here is measured in pixels at the resolution of the feature
maps the volume was built from (quarter resolution in the full model).
All correlation ops accept either [C,H,W] or [B,C,H,W] feature tensors
and return volumes shaped [G,D,H,W] or [B,G,D,H,W] accordingly.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

VOLUME_KINDS = ("corr", "geometry", "all_pairs", "pooled")


@dataclass
class CostVolume:
    """A matching-cost tensor plus a tag saying how it was produced.

    kind "corr" is a raw group-wise correlation volume, "geometry" is a
    regularized single-channel volume, "all_pairs" is the unregularized
    single-channel correlation, "pooled" marks a disparity-downsampled
    copy of either single-channel kind.
    """

    data: torch.Tensor
    kind: str

    def __post_init__(self):
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.data.dim() not in (4, 5):
            raise ValueError("volume data must be [G,D,H,W] or [B,G,D,H,W]")

    @property
    def batched(self) -> bool:
        return self.data.dim() == 5

    @property
    def max_disp(self) -> int:
        return self.data.shape[-3]


def _as_batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {tuple(x.shape)}")


def _check_pair(f_left: torch.Tensor, f_right: torch.Tensor):
    if f_left.shape != f_right.shape:
        raise ValueError(
            f"feature shapes differ: {tuple(f_left.shape)} vs {tuple(f_right.shape)}"
        )


def group_correlation(f_left, f_right, groups: int, max_disp: int) -> CostVolume:
    """Group-wise correlation volume.

    Channels are split into `groups` chunks; each output entry is the
    inner product of corresponding chunks at horizontal offset d,
    scaled by groups / C. Offsets that would read left of the right
    image border are zero.
    """
    _check_pair(f_left, f_right)
    fl, squeeze = _as_batched(f_left)
    fr, _ = _as_batched(f_right)
    b, c, h, w = fl.shape
    if groups < 1 or c % groups != 0:
        raise ValueError(f"channel count {c} not divisible by groups {groups}")
    if not 1 <= max_disp <= w:
        raise ValueError(f"max_disp {max_disp} out of range for width {w}")
    gl = fl.view(b, groups, c // groups, h, w)
    gr = fr.view(b, groups, c // groups, h, w)
    scale = groups / c
    out = fl.new_zeros(b, groups, max_disp, h, w)
    for d in range(max_disp):
        if d == 0:
            out[:, :, 0] = (gl * gr).sum(2) * scale
        else:
            out[:, :, d, :, d:] = (gl[..., d:] * gr[..., :-d]).sum(2) * scale
    if squeeze:
        out = out.squeeze(0)
    return CostVolume(out, "corr")


def all_pairs_correlation(f_left, f_right, max_disp: int) -> CostVolume:
    """Plain correlation over all channels, single output channel."""
    _check_pair(f_left, f_right)
    fl, squeeze = _as_batched(f_left)
    fr, _ = _as_batched(f_right)
    b, c, h, w = fl.shape
    if not 1 <= max_disp <= w:
        raise ValueError(f"max_disp {max_disp} out of range for width {w}")
    out = fl.new_zeros(b, 1, max_disp, h, w)
    for d in range(max_disp):
        if d == 0:
            out[:, 0, 0] = (fl * fr).sum(1)
        else:
            out[:, 0, d, :, d:] = (fl[..., d:] * fr[..., :-d]).sum(1)
    if squeeze:
        out = out.squeeze(0)
    return CostVolume(out, "all_pairs")


def soft_argmin_disparity(volume: CostVolume) -> torch.Tensor:
    """Softmax the geometry volume over disparity, return the expectation.

    Output lies in [0, D-1] and is differentiable in the volume.
    """
    if volume.kind != "geometry":
        raise ValueError(f"soft argmin expects a geometry volume, got {volume.kind!r}")
    data = volume.data
    if data.shape[-4] != 1:
        raise ValueError("geometry volume must have a single channel")
    scores = data.squeeze(-4)
    weights = torch.softmax(scores, dim=-3)
    d = torch.arange(weights.shape[-3], dtype=weights.dtype, device=weights.device)
    return (weights * d.view(-1, 1, 1)).sum(-3)


def pool_volume(volume: CostVolume) -> CostVolume:
    """Average adjacent disparity planes; an odd trailing plane is kept as is.

    Output has ceil(D / 2) planes and kind "pooled". Spatial dims are
    untouched.
    """
    if volume.kind == "pooled":
        raise ValueError("volume is already pooled")
    data = volume.data
    d = data.shape[-3]
    if d < 2:
        raise ValueError("need at least two disparity planes to pool")
    even = d - d % 2
    paired = (data[..., 0:even:2, :, :] + data[..., 1:even:2, :, :]) / 2
    if d % 2:
        paired = torch.cat([paired, data[..., -1:, :, :]], dim=-3)
    return CostVolume(paired, "pooled")


class VolumeRegularizer(nn.Module):
    """3D conv hourglass mapping a correlation volume to a geometry volume.

    Two stride-2 downsampling blocks, two transposed-conv upsampling
    blocks with additive skips, then a 1-channel projection. Keeps the
    D,H,W extent of the input.
    """

    def __init__(self, in_groups: int, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.conv_in = self._block(in_groups, c, stride=1)
        self.down1 = self._block(c, 2 * c, stride=2)
        self.down2 = self._block(2 * c, 4 * c, stride=2)
        self.up1 = nn.Sequential(
            nn.ConvTranspose3d(4 * c, 2 * c, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm3d(2 * c),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose3d(2 * c, c, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm3d(c),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Conv3d(c, 1, 3, padding=1)

    @staticmethod
    def _block(c_in, c_out, stride):
        return nn.Sequential(
            nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            nn.InstanceNorm3d(c_out),
            nn.ReLU(inplace=True),
        )

    @staticmethod
    def _match(x, ref):
        # transposed convs round odd extents up; crop back to the skip's shape
        return x[..., : ref.shape[-3], : ref.shape[-2], : ref.shape[-1]]

    def forward(self, volume: CostVolume) -> CostVolume:
        if volume.kind != "corr":
            raise ValueError(f"regularizer expects a corr volume, got {volume.kind!r}")
        x = volume.data
        squeeze = not volume.batched
        if squeeze:
            x = x.unsqueeze(0)
        f0 = self.conv_in(x)
        f1 = self.down1(f0)
        f2 = self.down2(f1)
        u1 = self._match(self.up1(f2), f1) + f1
        u2 = self._match(self.up2(u1), f0) + f0
        out = self.project(u2)
        if squeeze:
            out = out.squeeze(0)
        return CostVolume(out, "geometry")


def _sample_disparity(planes: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """Linearly interpolate [B,D,H,W] along D at real-valued query [B,H,W].

    Queries outside [0, D-1] clamp to the end planes.
    """
    d = planes.shape[1]
    q = query.clamp(0, d - 1)
    lo = q.floor().long()
    hi = (lo + 1).clamp(max=d - 1)
    frac = q - lo.to(q.dtype)
    v_lo = planes.gather(1, lo.unsqueeze(1)).squeeze(1)
    v_hi = planes.gather(1, hi.unsqueeze(1)).squeeze(1)
    return v_lo * (1 - frac) + v_hi * frac


class GeometryLookup:
    """Samples geometry features around a disparity hypothesis.

    Caches the regularized volume, the all-pairs volume and their once
    disparity-pooled copies; a call gathers (2r+1) linearly
    interpolated planes from each of the four sources and stacks them
    into 4*(2r+1) channels. Pooled sources are addressed at half the
    query disparity.
    """

    def __init__(self, geometry: CostVolume, all_pairs: CostVolume, radius: int = 4):
        if geometry.kind != "geometry":
            raise ValueError(f"expected geometry volume, got {geometry.kind!r}")
        if all_pairs.kind != "all_pairs":
            raise ValueError(f"expected all_pairs volume, got {all_pairs.kind!r}")
        if radius < 0:
            raise ValueError("radius must be non-negative")
        if geometry.data.shape[-3:] != all_pairs.data.shape[-3:]:
            raise ValueError("geometry and all_pairs volumes disagree on D,H,W")
        self.radius = radius
        self.batched = geometry.batched

        def flat(vol: CostVolume):
            x = vol.data
            if x.shape[-4] != 1:
                raise ValueError("lookup sources must be single channel")
            x = x.squeeze(-4)
            return x.unsqueeze(0) if x.dim() == 3 else x

        self.sources = [
            (flat(geometry), 1.0),
            (flat(all_pairs), 1.0),
            (flat(pool_volume(geometry)), 0.5),
            (flat(pool_volume(all_pairs)), 0.5),
        ]

    @property
    def out_channels(self) -> int:
        return 4 * (2 * self.radius + 1)

    def __call__(self, disparity: torch.Tensor) -> torch.Tensor:
        squeeze = disparity.dim() == 2
        d = disparity.unsqueeze(0) if squeeze else disparity
        if d.dim() == 4:
            if d.shape[1] != 1:
                raise ValueError("disparity must have a single channel")
            d = d.squeeze(1)
        if d.shape[-2:] != self.sources[0][0].shape[-2:]:
            raise ValueError("disparity resolution does not match the volumes")
        feats = []
        for planes, scale in self.sources:
            for off in range(-self.radius, self.radius + 1):
                feats.append(_sample_disparity(planes, d * scale + off))
        out = torch.stack(feats, dim=1)
        return out.squeeze(0) if squeeze else out


def lookup_geometry(geometry: CostVolume, all_pairs: CostVolume, disparity, radius: int = 4):
    """One-shot form of GeometryLookup for callers that do not iterate."""
    return GeometryLookup(geometry, all_pairs, radius)(disparity)
