# lbsim/rl/networks.py
"""
Fully connected tanh networks (float64) and per-tunnel simplex squashing.
"""
from __future__ import annotations

from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from ..errors import NetworkShapeError

DTYPE = torch.float64
HIDDEN = (1024, 1024, 1024)
LOG_FLOOR = 1e-12


class Mlp(nn.Module):
    """
    tanh hidden layers, linear output. The output layer's init is scaled by
    `output_scale` (0.01 for policy heads keeps early splits near uniform).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = HIDDEN,
                 output_scale: float = 1.0, generator: Optional[torch.Generator] = None):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:]))
        gain = nn.init.calculate_gain("tanh")
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            nn.init.orthogonal_(layer.weight, gain=output_scale if last else gain,
                                generator=generator)
            nn.init.zeros_(layer.bias)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_features

    @property
    def hidden(self) -> tuple:
        return tuple(layer.out_features for layer in self.layers[:-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def as_tensor(x: Union[np.ndarray, torch.Tensor, Sequence[float]]) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def forward(net: Mlp, x: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """Shape-checked forward pass."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != net.in_dim:
        raise NetworkShapeError(
            f"Input has trailing dimension {tuple(x.shape)[-1:] or ()}, network expects {net.in_dim}")
    return net(x)


def backward(net: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss w.r.t. every parameter of `net`."""
    if loss.ndim != 0:
        raise NetworkShapeError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(names, params, grads)
    }


def tunnel_softmax(logits: torch.Tensor, offsets: Sequence[int]) -> torch.Tensor:
    """Softmax inside each tunnel's slice of the last dimension."""
    parts = [torch.softmax(logits[..., a:b], dim=-1) for a, b in zip(offsets[:-1], offsets[1:])]
    return torch.cat(parts, dim=-1)


def centered_logits(split: torch.Tensor, offsets: Sequence[int], mean: torch.Tensor) -> torch.Tensor:
    """
    Logits whose tunnel softmax equals `split`, shifted per tunnel to be the
    closest such vector to `mean` in L2.
    """
    logs = torch.log(split.clamp_min(LOG_FLOOR))
    parts = []
    for a, b in zip(offsets[:-1], offsets[1:]):
        seg = logs[..., a:b]
        shift = (mean[..., a:b] - seg).mean(dim=-1, keepdim=True)
        parts.append(seg + shift)
    return torch.cat(parts, dim=-1)
