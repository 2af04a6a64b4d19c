"""Time-conditioned multi-scale recurrent update operator.

One update consumes geometry features sampled at the current disparity
hypothesis, the hypothesis itself and a pseudo-time embedding, runs a
three-level GRU stack (1/16 and 1/8 context-conditioned, 1/4 also
time-conditioned), and decodes a velocity field plus a convex
upsampling mask from the finest hidden state.
"""

import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ContextPyramid


class TimeEncoder(nn.Module):
    """Embed a scalar pseudo time t in [0, 1].

    t passes through a learnable affine map, then a sinusoidal
    embedding whose two halves are sin and cos over geometrically
    spaced frequencies, then two (gelu, linear) blocks. Output width is
    `dim`; the same t always maps to the same vector.
    """

    def __init__(self, dim: int = 128, max_period: float = 10000.0):
        super().__init__()
        if dim % 2:
            raise ValueError("time embedding width must be even")
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half) / half)
        self.register_buffer("freqs", freqs)
        self.affine = nn.Linear(1, 1)
        # start as the plain sinusoidal embedding; the affine map then learns
        nn.init.ones_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor(float(t), device=self.freqs.device)
        if (t < 0).any() or (t > 1).any():
            raise ValueError("pseudo time must lie in [0, 1]")
        shape = t.shape
        t = t.reshape(-1, 1).to(self.freqs.dtype)
        phase = self.affine(t) * self.freqs
        emb = torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1)
        out = self.fc2(F.gelu(self.fc1(F.gelu(emb))))
        return out.reshape(*shape, self.dim)


class MotionEncoder(nn.Module):
    """Fuse geometry features and the disparity hypothesis.

    Two conv branches (1x1 then 3x3 for geometry, 7x7 then 3x3 for
    disparity); the time embedding is added to each branch output
    before the raw disparity is concatenated back on. Output channels:
    2 * channels + 1.
    """

    def __init__(self, geometry_channels: int, channels: int = 128):
        super().__init__()
        self.channels = channels
        self.conv_g1 = nn.Conv2d(geometry_channels, channels, 1)
        self.conv_g2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_d1 = nn.Conv2d(1, channels, 7, padding=3)
        self.conv_d2 = nn.Conv2d(channels, channels, 3, padding=1)

    @property
    def out_channels(self) -> int:
        return 2 * self.channels + 1

    def forward(self, geometry, disparity, t_emb: Optional[torch.Tensor] = None):
        if disparity.shape[1] != 1:
            raise ValueError("disparity input must have a single channel")
        g = self.conv_g2(F.relu(self.conv_g1(geometry)))
        d = self.conv_d2(F.relu(self.conv_d1(disparity)))
        if t_emb is not None:
            if t_emb.shape[-1] != self.channels:
                raise ValueError("time embedding width must match motion channels")
            bias = t_emb.reshape(-1, self.channels, 1, 1)
            g = g + bias
            d = d + bias
        return torch.cat([g, d, disparity], dim=1)


def agent_attention_core(q, k, v, agents):
    """softmax(Q A^T) softmax(A K^T) V on token matrices.

    q, k, v: [..., N, C]; agents: [..., M, C]. Each output token is a
    convex combination of convex combinations of value rows, so it lies
    in the convex hull of v.
    """
    left = torch.softmax(q @ agents.transpose(-1, -2), dim=-1)
    right = torch.softmax(agents @ k.transpose(-1, -2), dim=-1)
    return left @ (right @ v)


def agent_attention_matmul_flops(n_tokens: int, n_agents: int, channels: int) -> int:
    """Multiply count of the four attention matmuls (projections excluded)."""
    return 2 * n_tokens * n_agents * channels + 2 * n_agents * n_tokens * channels


class AgentAttention(nn.Module):
    """Token attention routed through a small pooled agent set.

    Queries are average-pooled to a sqrt(n_agents) grid to form agent
    tokens, bringing the cost down from quadratic to linear in the
    token count. Off by default in the update operator.
    """

    def __init__(self, channels: int, num_agents: int = 49):
        super().__init__()
        grid = int(round(math.sqrt(num_agents)))
        if grid * grid != num_agents or num_agents < 1:
            raise ValueError("num_agents must be a positive perfect square")
        self.grid = grid
        self.num_agents = num_agents
        self.to_q = nn.Conv2d(channels, channels, 1, bias=False)
        self.to_k = nn.Conv2d(channels, channels, 1, bias=False)
        self.to_v = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q_map = self.to_q(x)
        agents = F.adaptive_avg_pool2d(q_map, (self.grid, self.grid))
        q = q_map.reshape(b, c, h * w).transpose(1, 2)
        k = self.to_k(x).reshape(b, c, h * w).transpose(1, 2)
        v = self.to_v(x).reshape(b, c, h * w).transpose(1, 2)
        a = agents.reshape(b, c, self.num_agents).transpose(1, 2)
        out = agent_attention_core(q, k, v, a)
        return out.transpose(1, 2).reshape(b, c, h, w)


class ConvGRU(nn.Module):
    """Convolutional GRU with additive per-gate context."""

    def __init__(self, hidden_dim: int, input_dim: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv_update = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)
        self.conv_reset = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)
        self.conv_cand = nn.Conv2d(hidden_dim + input_dim, hidden_dim, kernel_size, padding=pad)

    def _gate_bias(self, which: int, gates, t_emb):
        bias = 0.0
        if gates is not None:
            bias = bias + gates[which]
        if t_emb is not None:
            bias = bias + t_emb.reshape(-1, t_emb.shape[-1], 1, 1)
        return bias

    def forward(self, h, x, gates=None, t_emb: Optional[torch.Tensor] = None):
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.conv_update(hx) + self._gate_bias(0, gates, t_emb))
        r = torch.sigmoid(self.conv_reset(hx) + self._gate_bias(1, gates, t_emb))
        cand = torch.cat([r * h, x], dim=1)
        h_tilde = torch.tanh(self.conv_cand(cand) + self._gate_bias(2, gates, t_emb))
        return (1 - z) * h + z * h_tilde


def time_gru_step(gru: ConvGRU, h, x, gates, t_emb):
    """One time-conditioned GRU update; t_emb enters every gate pre-activation."""
    return gru(h, x, gates=gates, t_emb=t_emb)


def pool2x(x):
    return F.avg_pool2d(x, 3, stride=2, padding=1)


def interp(x, like):
    return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=True)


class VelocityHead(nn.Module):
    def __init__(self, hidden_dim: int, mid: int = 128):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden_dim, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, 1, 3, padding=1)

    def forward(self, h):
        return self.conv2(F.relu(self.conv1(h)))


class UpsampleMaskHead(nn.Module):
    """Logits for 4x convex upsampling: 9 weights per output subpixel."""

    def __init__(self, hidden_dim: int, mid: int = 128, factor: int = 4):
        super().__init__()
        self.factor = factor
        self.conv1 = nn.Conv2d(hidden_dim, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, 9 * factor * factor, 1)

    def forward(self, h):
        return self.conv2(F.relu(self.conv1(h)))


def normalize_upsample_mask(logits: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Softmax the 9 candidate weights for every output subpixel."""
    b, c, h, w = logits.shape
    if c != 9 * factor * factor:
        raise ValueError(f"expected {9 * factor * factor} mask channels, got {c}")
    mask = logits.reshape(b, 9, factor * factor, h, w)
    mask = torch.softmax(mask, dim=1)
    return mask.reshape(b, c, h, w)


def upsample_disparity(disparity: torch.Tensor, mask: torch.Tensor, factor: int = 4):
    """Convex 4x upsampling of a coarse disparity field.

    `mask` must already be softmax-normalized over its 9-way candidate
    axis; each full-resolution value is a convex combination of the 3x3
    coarse neighborhood, scaled by `factor` to convert the disparity
    units. Accepts [H,W] with [9*f*f,H,W] or the batched forms.
    """
    squeeze = disparity.dim() == 2
    if squeeze:
        disparity = disparity.unsqueeze(0)
        mask = mask.unsqueeze(0)
    if disparity.dim() == 3:
        disparity = disparity.unsqueeze(1)
    b, _, h, w = disparity.shape
    m = mask.reshape(b, 9, factor * factor, h, w)
    sums = m.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("upsample mask is not normalized over its 9 candidates")
    # replicate-pad so border outputs stay convex in real neighbors
    padded = F.pad(disparity * factor, (1, 1, 1, 1), mode="replicate")
    patches = F.unfold(padded, 3)
    patches = patches.reshape(b, 9, 1, h, w)
    up = (m * patches).sum(dim=1)
    up = up.reshape(b, factor, factor, h, w)
    up = up.permute(0, 3, 1, 4, 2).reshape(b, 1, h * factor, w * factor)
    return up.squeeze(0).squeeze(0) if squeeze else up


class MultiLevelUpdater(nn.Module):
    """Three-level recurrent operator producing velocity and mask.

    Coarse-to-fine pass: the 1/16 GRU sees the pooled 1/8 state, the
    1/8 GRU sees the pooled 1/4 state and the upsampled 1/16 state, the
    1/4 GRU sees the motion features and the upsampled 1/8 state and is
    the only level receiving the time embedding inside its gates.
    """

    def __init__(
        self,
        hidden_dim: int = 128,
        geometry_channels: int = 36,
        use_agent_attention: bool = False,
        num_agents: int = 49,
        head_dim: int = 128,
        factor: int = 4,
    ):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.motion = MotionEncoder(geometry_channels, hidden_dim)
        self.refine = AgentAttention(self.motion.out_channels, num_agents) if use_agent_attention else None
        x_dim = self.motion.out_channels
        self.gru16 = ConvGRU(hidden_dim, hidden_dim)
        self.gru8 = ConvGRU(hidden_dim, hidden_dim * 2)
        self.gru4 = ConvGRU(hidden_dim, x_dim + hidden_dim)
        self.velocity_head = VelocityHead(hidden_dim, head_dim)
        self.mask_head = UpsampleMaskHead(hidden_dim, head_dim, factor)

    def forward(
        self,
        hidden: Sequence[torch.Tensor],
        pyramid: ContextPyramid,
        geometry: torch.Tensor,
        disparity: torch.Tensor,
        t_emb: Optional[torch.Tensor] = None,
    ) -> Tuple[List[torch.Tensor], torch.Tensor, torch.Tensor]:
        h4, h8, h16 = hidden
        h16 = self.gru16(h16, pool2x(h8), gates=pyramid.gates[2])
        h8 = self.gru8(h8, torch.cat([pool2x(h4), interp(h16, h8)], dim=1), gates=pyramid.gates[1])
        x = self.motion(geometry, disparity, t_emb)
        if self.refine is not None:
            x = self.refine(x)
        h4 = time_gru_step(self.gru4, h4, torch.cat([x, interp(h8, h4)], dim=1), pyramid.gates[0], t_emb)
        velocity = self.velocity_head(h4)
        mask_logits = self.mask_head(h4)
        return [h4, h8, h16], velocity, mask_logits
