"""Seeded parameter initialisation that never touches the global torch RNG."""
import math

import torch
import torch.nn as nn


@torch.no_grad()
def seeded_init_(module: nn.Module, seed: int, gain: float = 1.0):
    """He-style normal init for every conv/linear weight, zero biases, from one seeded stream."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            m.weight.copy_(torch.randn(m.weight.shape, generator=g) * gain / math.sqrt(fan_in))
            if m.bias is not None:
                m.bias.zero_()
    return module
