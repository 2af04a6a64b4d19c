"""Full stereo matcher: volumes, context, bridge-style refinement loop."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ContextNetwork, ContextPyramid, FeatureEncoder
from .updater import MultiLevelUpdater, TimeEncoder, normalize_upsample_mask, upsample_disparity
from .volume import (
    GeometryLookup,
    VolumeRegularizer,
    all_pairs_correlation,
    group_correlation,
    soft_argmin_disparity,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size network."""

    feature_channels: int = 32
    groups: int = 4
    max_disp: int = 48  # disparity planes at quarter resolution
    hidden_channels: int = 128
    context_channels: int = 128
    regularizer_channels: int = 16
    head_channels: int = 128
    lookup_radius: int = 4
    num_agents: int = 49
    use_time: bool = True
    use_context_attention: bool = True
    use_smish: bool = True
    use_ffn: bool = False
    use_agent_attention: bool = False

    def __post_init__(self):
        if self.feature_channels % self.groups:
            raise ValueError("feature channels must divide by the group count")
        if self.hidden_channels != self.context_channels:
            raise ValueError("gate contexts must match the recurrent width")
        if self.max_disp < 2:
            raise ValueError("need at least two disparity planes")


@dataclass
class MatchState:
    """Everything the update loop needs, built once per pair."""

    lookup: GeometryLookup
    pyramid: ContextPyramid
    hidden: List[torch.Tensor]
    disp_init: torch.Tensor  # [B,1,H/4,W/4], quarter-resolution units


class StereoMatcher(nn.Module):
    """Iterative matcher driven by a time-conditioned update operator.

    A correlation volume regularized by a 3D hourglass yields the
    initial disparity field; the recurrent operator then predicts a
    velocity toward the ground-truth field at pseudo times t = k/N and
    a convex upsampling mask for the full-resolution output.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.features = FeatureEncoder(cfg.feature_channels)
        self.context = ContextNetwork(
            cfg.context_channels,
            use_attention=cfg.use_context_attention,
            use_smish=cfg.use_smish,
            use_ffn=cfg.use_ffn,
        )
        self.regularizer = VolumeRegularizer(cfg.groups, cfg.regularizer_channels)
        geometry_channels = 4 * (2 * cfg.lookup_radius + 1)
        self.updater = MultiLevelUpdater(
            hidden_dim=cfg.hidden_channels,
            geometry_channels=geometry_channels,
            use_agent_attention=cfg.use_agent_attention,
            num_agents=cfg.num_agents,
            head_dim=cfg.head_channels,
        )
        self.time_encoder = TimeEncoder(cfg.hidden_channels) if cfg.use_time else None

    def prepare(self, left: torch.Tensor, right: torch.Tensor) -> MatchState:
        """Run encoders and volume construction once for a pair."""
        if left.shape != right.shape:
            raise ValueError("left/right shapes differ")
        f_group_l, f_all_l = self.features(left)
        f_group_r, f_all_r = self.features(right)
        corr = group_correlation(f_group_l, f_group_r, self.cfg.groups, self.cfg.max_disp)
        geometry = self.regularizer(corr)
        all_pairs = all_pairs_correlation(f_all_l, f_all_r, self.cfg.max_disp)
        disp_init = soft_argmin_disparity(geometry).unsqueeze(1)
        pyramid = self.context(left)
        lookup = GeometryLookup(geometry, all_pairs, self.cfg.lookup_radius)
        return MatchState(
            lookup=lookup,
            pyramid=pyramid,
            hidden=list(pyramid.hidden),
            disp_init=disp_init,
        )

    def embed_time(self, t, batch: int) -> Optional[torch.Tensor]:
        if self.time_encoder is None:
            return None
        t_vec = torch.full((batch,), float(t), device=self._device())
        return self.time_encoder(t_vec)

    def _device(self):
        return next(self.parameters()).device

    def update_step(self, state: MatchState, disparity: torch.Tensor, t: float):
        """One operator application at pseudo time t; mutates the hidden state.

        Returns (velocity, mask_logits), both at quarter resolution.
        """
        t_emb = self.embed_time(t, disparity.shape[0])
        geometry = state.lookup(disparity)
        state.hidden, velocity, mask_logits = self.updater(
            state.hidden, state.pyramid, geometry, disparity, t_emb
        )
        return velocity, mask_logits

    def forward(
        self,
        left: torch.Tensor,
        right: torch.Tensor,
        iters: int = 8,
        update_rule: str = "cumulative",
        state: Optional[MatchState] = None,
    ) -> Dict[str, object]:
        """Full refinement pass with N = iters update steps.

        Returns quarter- and full-resolution initial fields, the
        full-resolution prediction sequence and the final field. Pass a
        prepared `state` to reuse encoder work; its hidden list is
        consumed by the rollout.
        """
        if iters < 1:
            raise ValueError("need at least one update step")
        if update_rule not in ("euler", "cumulative"):
            raise ValueError(f"unknown update rule {update_rule!r}")
        if state is None:
            state = self.prepare(left, right)
        disp = state.disp_init
        seq_quarter: List[torch.Tensor] = []
        seq_full: List[torch.Tensor] = []
        for k in range(iters):
            velocity, mask_logits = self.update_step(state, disp, k / iters)
            if update_rule == "euler":
                disp = disp + velocity / iters
            else:
                disp = state.disp_init + velocity
            mask = normalize_upsample_mask(mask_logits)
            seq_quarter.append(disp)
            seq_full.append(upsample_disparity(disp, mask))
        init_full = F.interpolate(
            state.disp_init * 4.0, scale_factor=4, mode="bilinear", align_corners=True
        )
        return {
            "disp_init": state.disp_init,
            "disp_init_full": init_full,
            "seq_quarter": seq_quarter,
            "seq_full": seq_full,
            "disp_final": seq_full[-1],
        }
