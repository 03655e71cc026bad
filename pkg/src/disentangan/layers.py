"""Small building blocks shared by the generator and the critic."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize
from torch.nn.utils.parametrizations import spectral_norm

INIT_STD = 0.02


def init_normal_(module: nn.Module, std: float = INIT_STD) -> None:
    """N(0, std) for every weight tensor, zeros for biases, identity for norms."""
    for m in module.modules():
        if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear, GroupedLinear)):
            # ``m.weight`` of a parametrized layer is a derived tensor; initialise the stored one
            nn.init.normal_(raw_weight(m), 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def maybe_sn(layer: nn.Module, enabled: bool, n_power_iterations: int = 1) -> nn.Module:
    if enabled:
        return spectral_norm(layer, n_power_iterations=n_power_iterations)
    return layer


def raw_weight(layer: nn.Module) -> torch.Tensor:
    """The trainable weight, bypassing any spectral-norm parametrization.

    Reading ``layer.weight`` on a spectral-normalized module in training mode
    advances its power iteration, which must not happen outside a forward pass.
    """
    if parametrize.is_parametrized(layer, "weight"):
        return layer.parametrizations.weight.original
    return layer.weight


@torch.no_grad()
def restart_power_iteration(layer: nn.Module, n_iterations: int = 15) -> None:
    """Draw fresh singular-vector estimates and refine them against the current weight.

    Needed after the stored weight is overwritten, since the estimates were
    fitted to the old one.
    """
    sn = layer.parametrizations.weight[0]
    w = raw_weight(layer).flatten(1)
    u = F.normalize(torch.randn_like(sn._u), dim=0, eps=sn.eps)
    v = F.normalize(torch.randn_like(sn._v), dim=0, eps=sn.eps)
    for _ in range(n_iterations):
        v = F.normalize(w.T @ u, dim=0, eps=sn.eps)
        u = F.normalize(w @ v, dim=0, eps=sn.eps)
    sn._u.copy_(u)
    sn._v.copy_(v)


def is_spectral_normalized(layer: nn.Module) -> bool:
    return parametrize.is_parametrized(layer, "weight")


class GroupedLinear(nn.Module):
    """``groups`` independent affine maps, each from its own slice of the input.

    Input ``(B, groups, in_per_group)`` -> output ``(B, groups, out_per_group)``.
    """

    def __init__(self, groups: int, in_per_group: int, out_per_group: int = 1, bias: bool = True):
        super().__init__()
        self.groups = groups
        self.in_per_group = in_per_group
        self.out_per_group = out_per_group
        self.weight = nn.Parameter(torch.empty(groups, out_per_group, in_per_group))
        self.bias = nn.Parameter(torch.zeros(groups, out_per_group)) if bias else None
        nn.init.kaiming_uniform_(self.weight.view(groups * out_per_group, in_per_group), a=math.sqrt(5))

    def forward(self, x):
        out = torch.einsum("bgi,goi->bgo", x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def extra_repr(self):
        return f"groups={self.groups}, in_per_group={self.in_per_group}, out_per_group={self.out_per_group}"


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
