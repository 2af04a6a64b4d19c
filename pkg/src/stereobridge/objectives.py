"""Training objectives, evaluation metrics and ground-truth infilling."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    """Weights and knobs of the composite objective."""

    init_weight: float = 1.0
    diff_weight: float = 0.5
    gamma: float = 0.9
    ssim_window: int = 7

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim window must be odd and positive")


def _masked_mean(values: torch.Tensor, mask: Optional[torch.Tensor]):
    if mask is None:
        return values.mean()
    mask = mask.to(dtype=torch.bool)
    if mask.shape != values.shape:
        raise ValueError("mask shape does not match values")
    n = mask.sum()
    if n == 0:
        raise ValueError("mask selects no pixels")
    return (values * mask).sum() / n


def smooth_l1(x: torch.Tensor) -> torch.Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 beyond; continuous with matching slope."""
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def loss_initial(disp_init: torch.Tensor, disp_gt: torch.Tensor, mask=None) -> torch.Tensor:
    """Smooth-L1 between the volume-derived field and ground truth."""
    if disp_init.shape != disp_gt.shape:
        raise ValueError("prediction and ground truth must share a shape")
    return _masked_mean(smooth_l1(disp_init - disp_gt), mask)


def loss_pixel(
    disp_seq: Sequence[torch.Tensor],
    disp_gt: torch.Tensor,
    gamma: float = 0.9,
    mask=None,
) -> torch.Tensor:
    """Exponentially weighted L1 over the refinement sequence.

    Step i of N carries weight gamma^(N - i) with i counted from 1, so
    the last prediction gets gamma^0 = 1 and earlier ones decay.
    """
    n = len(disp_seq)
    if n == 0:
        raise ValueError("empty prediction sequence")
    total = disp_gt.new_zeros(())
    for i, disp in enumerate(disp_seq, start=1):
        if disp.shape != disp_gt.shape:
            raise ValueError("prediction and ground truth must share a shape")
        total = total + gamma ** (n - i) * _masked_mean((disp - disp_gt).abs(), mask)
    return total


def ssim_mean(
    a: torch.Tensor, b: torch.Tensor, window: int = 7, data_range: float = 1.0
) -> torch.Tensor:
    """Mean structural similarity over all fully valid sliding windows.

    Uniform window weighting, biased (divide by window area) moment
    estimates, standard constants C1 = (0.01 L)^2, C2 = (0.03 L)^2 with
    L = data_range.
    """
    if a.shape != b.shape:
        raise ValueError("inputs must share a shape")
    if a.dim() == 2:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    if a.dim() == 3:
        a = a.unsqueeze(1)
        b = b.unsqueeze(1)
    if min(a.shape[-2:]) < window:
        raise ValueError("image smaller than the ssim window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    kernel = a.new_ones(1, 1, window, window) / (window * window)
    mu_a = F.conv2d(a, kernel)
    mu_b = F.conv2d(b, kernel)
    mu_aa = F.conv2d(a * a, kernel)
    mu_bb = F.conv2d(b * b, kernel)
    mu_ab = F.conv2d(a * b, kernel)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return (num / den).mean()


def loss_structural(
    disp: torch.Tensor, disp_gt: torch.Tensor, window: int = 7, data_range: float = 1.0
) -> torch.Tensor:
    """1 - mean SSIM between the final field and dense ground truth.

    Expects dense (infilled) ground truth; identical inputs give 0.
    """
    return 1.0 - ssim_mean(disp, disp_gt, window=window, data_range=data_range)


def total_loss(l_init, l_pixel, l_structural, weights: LossWeights) -> torch.Tensor:
    """init_weight * L_init + L_pixel + diff_weight * L_structural."""
    for part in (l_init, l_pixel, l_structural):
        if not torch.isfinite(torch.as_tensor(part)).all():
            raise ValueError("non-finite loss component")
    return weights.init_weight * l_init + l_pixel + weights.diff_weight * l_structural


@dataclass
class MetricReport:
    """Aggregate disparity error measures; percentages run 0..100."""

    epe: float
    bad3: float
    d1_all: float
    pixels: int
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, float]:
        out = {
            "epe": self.epe,
            "bad3": self.bad3,
            "d1_all": self.d1_all,
            "pixels": float(self.pixels),
        }
        out.update(self.extras)
        return out

    def to_flat(self) -> str:
        return "\n".join(f"{k}={v:.6f}" for k, v in self.to_dict().items())


def compute_metrics(
    disp: torch.Tensor, disp_gt: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> MetricReport:
    """End-point error, >3px rate, and the combined >3px-and->5% rate."""
    if disp.shape != disp_gt.shape:
        raise ValueError("prediction and ground truth must share a shape")
    if mask is None:
        mask = torch.ones_like(disp_gt, dtype=torch.bool)
    mask = mask.to(dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask selects no pixels")
    err = (disp - disp_gt).abs()[mask]
    gt = disp_gt[mask]
    epe = err.mean().item()
    bad3 = (err > 3.0).float().mean().item() * 100.0
    d1 = ((err > 3.0) & (err > 0.05 * gt.abs())).float().mean().item() * 100.0
    return MetricReport(epe=epe, bad3=bad3, d1_all=d1, pixels=n)


def infill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid pixels with the nearest valid value.

    Euclidean distance on the pixel grid; ties resolve to the valid
    pixel with the lowest row-major index, which makes the result
    deterministic and the operation idempotent.
    """
    values = np.asarray(values)
    valid = np.asarray(valid, dtype=bool)
    if values.shape != valid.shape or values.ndim != 2:
        raise ValueError("values and valid must be matching 2d arrays")
    if not valid.any():
        raise ValueError("no valid pixels to infill from")
    if valid.all():
        return values.copy()
    out = values.copy()
    src = np.argwhere(valid)  # row-major sorted
    dst = np.argwhere(~valid)
    src_flat = values[valid]
    # chunk the distance matrix; argmin keeps the first (lowest row-major) tie
    chunk = max(1, 2_000_000 // max(1, len(src)))
    for start in range(0, len(dst), chunk):
        d = dst[start : start + chunk]
        dy = d[:, 0:1].astype(np.int64) - src[:, 0].astype(np.int64)
        dx = d[:, 1:2].astype(np.int64) - src[:, 1].astype(np.int64)
        nearest = np.argmin(dy * dy + dx * dx, axis=1)
        out[d[:, 0], d[:, 1]] = src_flat[nearest]
    return out
