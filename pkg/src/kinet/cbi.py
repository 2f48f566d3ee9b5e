"""Cross Branch Integration: gate the action map with scene and human maps."""

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError
from .ops import relu


class CrossBranchIntegration(nn.Module):
    """Fuses auxiliary feature maps into the action map, preserving its shape.

    The 1x1 reduction starts as ``[I | 0 | 0]`` so a fresh module with zero
    auxiliary inputs returns the action map unchanged.
    """

    def __init__(self, channels, bn_momentum=0.1):
        super().__init__()
        self.channels = channels
        self.bn_scene = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.bn_human = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.reduce = nn.Conv2d(3 * channels, channels, kernel_size=1, bias=True)
        self.reset_parameters()

    def reset_parameters(self):
        for bn in (self.bn_scene, self.bn_human):
            bn.reset_parameters()
        with torch.no_grad():
            self.reduce.weight.zero_()
            idx = torch.arange(self.channels)
            self.reduce.weight[idx, idx, 0, 0] = 1.0
            self.reduce.bias.zero_()

    def forward(self, action, scene, human):
        return cbi_forward(action, scene, human, self)


def cbi_forward(action, scene, human, params):
    if action.dim() != 4:
        raise ShapeError(f"cbi: expected rank-4 action map, got shape {tuple(action.shape)}")
    if scene.shape != action.shape or human.shape != action.shape:
        raise ShapeError(
            "cbi: inputs must share a shape; got action "
            f"{tuple(action.shape)}, scene {tuple(scene.shape)}, human {tuple(human.shape)}"
        )
    if action.shape[1] != params.channels:
        raise ShapeError(
            f"cbi: module built for {params.channels} channels, got {action.shape[1]}"
        )
    gate_scene = relu(params.bn_scene(scene))
    gate_human = relu(params.bn_human(human))
    fused = action + action * gate_scene + action * gate_human
    return F.conv2d(torch.cat([fused, scene, human], dim=1), params.reduce.weight, params.reduce.bias)
