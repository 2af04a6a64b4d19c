"""Feature extraction, context encoding and channel self-attention."""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def smish(x: torch.Tensor) -> torch.Tensor:
    """x * tanh(ln(1 + sigmoid(x))). Smooth, non-monotone, smish(0) = 0."""
    return x * torch.tanh(torch.log1p(torch.sigmoid(x)))


class Smish(nn.Module):
    def forward(self, x):
        return smish(x)


class ChannelSelfAttention(nn.Module):
    """Self-attention across channels with a learnable temperature.

    Queries, keys and values come from a 1x1 pointwise conv followed by
    a 3x3 depthwise conv. Attention is a CxC matrix: softmax over keys
    of (Q_hat K_hat^T) / alpha, applied to values, so every output
    channel is a convex mix of value channels. The output projection is
    zero-initialized, making the block start as the identity via its
    residual path. Complexity is linear in H*W.
    """

    def __init__(self, channels: int, use_smish: bool = True):
        super().__init__()
        self.channels = channels
        self.use_smish = use_smish
        self.to_qkv = nn.Conv2d(channels, channels * 3, 1, bias=False)
        self.mix_qkv = nn.Conv2d(
            channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=False
        )
        self.project = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(math.sqrt(channels))))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """[B,C,C] channel attention, rows summing to one."""
        b, c, h, w = x.shape
        q, k, _ = self.mix_qkv(self.to_qkv(x)).chunk(3, dim=1)
        q = q.reshape(b, c, h * w)
        k = k.reshape(b, c, h * w)
        alpha = self.log_alpha.exp()
        return torch.softmax(q @ k.transpose(1, 2) / alpha, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.mix_qkv(self.to_qkv(x)).chunk(3, dim=1)
        q = q.reshape(b, c, h * w)
        k = k.reshape(b, c, h * w)
        v = v.reshape(b, c, h * w)
        alpha = self.log_alpha.exp()
        attn = torch.softmax(q @ k.transpose(1, 2) / alpha, dim=-1)
        out = (attn @ v).reshape(b, c, h, w)
        out = self.project(out) + x
        return smish(out) if self.use_smish else out


class GatedFeedForward(nn.Module):
    """Channel-expanding gated feed-forward block with a residual path.

    Off by default in the context network; when enabled its output
    projection starts at zero so the block begins as the identity.
    """

    def __init__(self, channels: int, expansion: float = 2.0):
        super().__init__()
        hidden = int(channels * expansion)
        self.expand = nn.Conv2d(channels, hidden * 2, 1, bias=False)
        self.mix = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project = nn.Conv2d(hidden, channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x):
        gate, value = self.mix(self.expand(x)).chunk(2, dim=1)
        return self.project(smish(gate) * value) + x


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(c_out)
        self.norm2 = nn.InstanceNorm2d(c_out)
        self.relu = nn.ReLU(inplace=True)
        if stride == 1 and c_in == c_out:
            self.shortcut = None
        else:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.relu(self.norm2(self.conv2(y)))
        s = x if self.shortcut is None else self.shortcut(x)
        return self.relu(y + s)


class FeatureEncoder(nn.Module):
    """Shared-weight matching features at quarter resolution.

    Four conv blocks with instance norm, stride schedule (2,2,1,1),
    then two 1x1 heads: one for the group-correlation volume and one
    for the all-pairs volume. Input H and W must be divisible by 4.
    """

    def __init__(self, out_channels: int = 32):
        super().__init__()
        c = out_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
        )
        self.layer1 = ResidualBlock(c, c, stride=2)
        self.layer2 = ResidualBlock(c, c, stride=1)
        self.layer3 = ResidualBlock(c, c, stride=1)
        self.head_group = nn.Conv2d(c, c, 1)
        self.head_all = nn.Conv2d(c, c, 1)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if image.dim() != 4:
            raise ValueError("expected [B,3,H,W] images")
        h, w = image.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} not divisible by 4")
        x = self.layer3(self.layer2(self.layer1(self.stem(image))))
        return self.head_group(x), self.head_all(x)


@dataclass
class ContextPyramid:
    """Per-scale recurrent state initializers and gate contexts.

    Index 0 is 1/4 resolution, 1 is 1/8, 2 is 1/16. `hidden` holds
    tanh-squashed initial states; `gates` holds per-scale
    (update, reset, candidate) additive gate contexts.
    """

    hidden: List[torch.Tensor]
    gates: List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]

    def __post_init__(self):
        if len(self.hidden) != 3 or len(self.gates) != 3:
            raise ValueError("pyramid must carry exactly three scales")


class ContextNetwork(nn.Module):
    """Context encoder for the recurrent update operator.

    A small residual trunk downsamples the left image to 1/4, where an
    optional channel self-attention block (and an optional gated
    feed-forward block) refines the features; two further stride-2
    stages produce the 1/8 and 1/16 levels. Each level feeds a tanh
    head for the initial hidden state and a 3x-width head whose relu
    output splits into the three gate contexts.
    """

    def __init__(
        self,
        channels: int = 128,
        use_attention: bool = True,
        use_smish: bool = True,
        use_ffn: bool = False,
    ):
        super().__init__()
        c = channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(c // 2),
            nn.ReLU(inplace=True),
            ResidualBlock(c // 2, c, stride=2),
            ResidualBlock(c, c, stride=1),
        )
        self.attention = ChannelSelfAttention(c, use_smish) if use_attention else None
        self.ffn = GatedFeedForward(c) if use_ffn else None
        self.down8 = ResidualBlock(c, c, stride=2)
        self.down16 = ResidualBlock(c, c, stride=2)
        self.hidden_heads = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in range(3))
        self.gate_heads = nn.ModuleList(nn.Conv2d(c, 3 * c, 3, padding=1) for _ in range(3))

    def forward(self, left: torch.Tensor) -> ContextPyramid:
        if left.dim() != 4:
            raise ValueError("expected [B,3,H,W] images")
        h, w = left.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"image size {h}x{w} not divisible by 16")
        x4 = self.trunk(left)
        if self.attention is not None:
            x4 = self.attention(x4)
        if self.ffn is not None:
            x4 = self.ffn(x4)
        x8 = self.down8(x4)
        x16 = self.down16(x8)
        hidden, gates = [], []
        for i, x in enumerate((x4, x8, x16)):
            hidden.append(torch.tanh(self.hidden_heads[i](x)))
            gates.append(tuple(F.relu(self.gate_heads[i](x)).chunk(3, dim=1)))
        return ContextPyramid(hidden=hidden, gates=gates)
