"""Adversarial, code-reconstruction and kernel-orthogonality losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .critic import QMode, QPrediction
from .errors import ModeError
from .latent import CodeKind, LatentCode

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    gamma: float = 1.0
    ortho_weight: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.gamma, self.ortho_weight) < 0:
            raise ValueError("loss weights must be nonnegative")


def _nonempty(name, t):
    if t.numel() == 0:
        raise ValueError(f"{name} is empty")


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    _nonempty("real_scores", real_scores)
    _nonempty("fake_scores", fake_scores)
    return F.relu(1 - real_scores).mean() + F.relu(1 + fake_scores).mean()


def g_adv_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    _nonempty("fake_scores", fake_scores)
    return -fake_scores.mean()


def _code_values(c):
    return c.values if isinstance(c, LatentCode) else c


def mi_loss_det(pred: QPrediction, c) -> torch.Tensor:
    if pred.mode != QMode.DETERMINISTIC:
        raise ModeError("L1 reconstruction needs a deterministic Q")
    target = _code_values(c).to(pred.logits.dtype)
    return (pred.c_hat - target).abs().mean()


def gaussian_nll(mu: torch.Tensor, sigma: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean per-element negative log density of ``target`` under N(mu, sigma^2)."""
    if torch.any(sigma <= 0):
        raise ModeError("sigma must be strictly positive")
    return (torch.log(sigma) + (target - mu) ** 2 / (2 * sigma**2) + HALF_LOG_2PI).mean()


def mi_loss_prob(pred: QPrediction, c) -> torch.Tensor:
    if pred.mode != QMode.PROBABILISTIC or pred.sigma is None:
        raise ModeError("Gaussian NLL needs a probabilistic Q")
    return gaussian_nll(pred.mu, pred.sigma, _code_values(c).to(pred.logits.dtype))


def mi_loss(pred: QPrediction, c) -> torch.Tensor:
    if pred.mode == QMode.PROBABILISTIC:
        return mi_loss_prob(pred, c)
    return mi_loss_det(pred, c)


def onehot_ce_loss(pred, c: LatentCode) -> torch.Tensor:
    """Softmax cross-entropy of Q's logits against the hot index.

    ``pred`` is a QPrediction (its pre-sigmoid logits are used in both modes)
    or a raw ``(B, d)`` logit tensor.
    """
    if not isinstance(c, LatentCode) or c.kind != CodeKind.ONE_HOT:
        raise ValueError("cross-entropy target must be a one-hot LatentCode")
    logits = pred.logits if isinstance(pred, QPrediction) else pred
    return F.cross_entropy(logits, c.hot_index.to(logits.device))


def _layer_pair_cosines(k: torch.Tensor, signed: bool) -> torch.Tensor:
    n = k.shape[0]
    if n < 2:
        raise ValueError("need at least two kernels per layer")
    k = k.reshape(n, -1)
    norms = k.norm(dim=1, keepdim=True)
    # zero-norm kernels become zero rows and so contribute 0 to every pair
    unit = torch.where(norms > 0, k / norms.clamp_min(torch.finfo(k.dtype).tiny), torch.zeros_like(k))
    cos = unit @ unit.T
    iu = torch.triu_indices(n, n, offset=1, device=k.device)
    pairs = cos[iu[0], iu[1]]
    return pairs if signed else pairs.abs()


def orthogonal_reg(kernels: Sequence[torch.Tensor], signed: bool = False) -> torch.Tensor:
    """Sum over layers of the mean pairwise |cosine| between kernels of that layer.

    ``kernels`` holds one ``(n_kernels, k)`` matrix per layer.
    """
    if len(kernels) == 0:
        raise ValueError("no kernel layers given")
    return sum(_layer_pair_cosines(k, signed).mean() for k in kernels)


def mean_pairwise_cosine(kernels: Sequence[torch.Tensor], signed: bool = False) -> torch.Tensor:
    """Single mean of |cosine| over all within-layer pairs of all layers."""
    pairs = torch.cat([_layer_pair_cosines(k, signed) for k in kernels])
    return pairs.mean()


def total_mi_objective(pred: QPrediction, c: LatentCode, weights: LossWeights) -> torch.Tensor:
    loss = weights.lam * mi_loss(pred, c)
    if c.kind == CodeKind.ONE_HOT:
        loss = loss + weights.gamma * onehot_ce_loss(pred, c)
    return loss
