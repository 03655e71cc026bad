"""Evaluation: perceptual diversity, majority-vote disentanglement score,
total-correlation estimation and two Q diagnostics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .critic import Critic, QMode, q_grouped_kernels
from .data import FactorDataset, fixed_factor_indices
from .errors import DegenerateEncoderError, ModeError
from .latent import sample_noise, sample_onehot_code, sample_uniform_code
from .objectives import mean_pairwise_cosine


@dataclass
class MetricReport:
    name: str
    score: float
    dispersion: float = 0.0
    n_samples: int = 1
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not self.dispersion >= 0:
            raise ValueError("dispersion must be nonnegative")

    def to_text(self) -> str:
        lines = [f"name = {self.name}", f"score = {self.score!r}", f"dispersion = {self.dispersion!r}",
                 f"n_samples = {self.n_samples}", f"config = {json.dumps(self.config, sort_keys=True)}"]
        return "\n".join(lines) + "\n"

    def append_csv(self, path) -> None:
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["name", "score", "dispersion", "n_samples", "config"])
            w.writerow([self.name, repr(self.score), repr(self.dispersion), self.n_samples,
                        json.dumps(self.config, sort_keys=True)])


class _EvalMode:
    """Put modules in eval mode for the duration of a block, then restore them."""

    def __init__(self, *modules):
        self.modules = [m for m in modules if isinstance(m, nn.Module)]

    def __enter__(self):
        self.flags = [m.training for m in self.modules]
        for m in self.modules:
            m.eval()

    def __exit__(self, *exc):
        for m, flag in zip(self.modules, self.flags):
            m.train(flag)


# -- perceptual extractors --------------------------------------------------

class IdentityExtractor:
    """Flattens images; used for oracle checks."""

    def __init__(self, feature_dim: Optional[int] = None):
        self.feature_dim = feature_dim

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return images.reshape(images.shape[0], -1)


class FactorClassifier(nn.Module):
    """Small CNN predicting every factor class; its penultimate layer is the feature map."""

    def __init__(self, in_channels: int, factor_sizes, feature_dim: int = 128):
        super().__init__()
        self.factor_sizes = tuple(factor_sizes)
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, 32, 4, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(32, 64, 4, 2, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(64, 64, 3, 1, 1), nn.LeakyReLU(0.1),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
            nn.Linear(64 * 16, feature_dim), nn.LeakyReLU(0.1),
        )
        self.heads = nn.Linear(feature_dim, sum(self.factor_sizes))

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return torch.split(self.heads(self.body(x)), self.factor_sizes, dim=1)


class ClassifierExtractor:
    def __init__(self, model: FactorClassifier):
        self.model = model.eval()
        self.feature_dim = model.feature_dim

    @torch.no_grad()
    def __call__(self, images):
        return self.model.features(images)


def train_classifier_extractor(dataset: FactorDataset, seed: int = 0, steps: int = 300,
                               batch_size: int = 64, lr: float = 1e-3) -> Tuple[ClassifierExtractor, float]:
    """Fit a :class:`FactorClassifier` on the dataset's factor labels.

    Returns the frozen extractor and its mean per-factor training accuracy on
    the last batch.
    """
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FactorClassifier(dataset.channels, dataset.factor_sizes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    acc = 0.0
    for _ in range(steps):
        idx = rng.integers(0, len(dataset), batch_size)
        x = dataset.get_images(idx)
        y = torch.from_numpy(dataset.factor_classes[idx])
        logits = model(x)
        loss = sum(F.cross_entropy(lg, y[:, f]) for f, lg in enumerate(logits))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        acc = float(np.mean([(lg.argmax(1) == y[:, f]).float().mean().item() for f, lg in enumerate(logits)]))
    return ClassifierExtractor(model), acc


# -- perceptual diversity ---------------------------------------------------

def _as_generate(gen):
    if isinstance(gen, nn.Module):
        def run(c, z):
            return gen(c, z)
        return run, gen
    return gen, None


def perceptual_diversity(gen, extractor: Callable, n: int, d: int, rng: torch.Generator, *,
                         n_z: int = 1, k: float = 1.0, literal: bool = False,
                         batch_size: int = 64) -> MetricReport:
    """Average feature L1 distance between two generations with swapped extreme codes.

    Per repeat: draw ``c ~ U(0,1)^d``, distinct indices ``i, j`` and one ``z``;
    ``c1`` sets ``c[i]`` low and ``c[j]`` high, ``c2`` the reverse. Low/high are
    0 and 1 by default (the training range) or ``-k`` and ``+k`` with
    ``literal=True``. The L1 distance is the mean absolute difference over
    feature elements.
    """
    if d < 2:
        raise ValueError("need d >= 2 to pick two distinct dimensions")
    if n < 1:
        raise ValueError("n must be positive")
    lo, hi = (-k, k) if literal else (0.0, 1.0)
    run, module = _as_generate(gen)
    per_sample = []
    with _EvalMode(module), torch.no_grad():
        done = 0
        while done < n:
            b = min(batch_size, n - done)
            c = torch.rand(b, d, generator=rng)
            i = torch.randint(0, d, (b,), generator=rng)
            j = torch.randint(0, d - 1, (b,), generator=rng)
            j = j + (j >= i).long()
            z = torch.randn(b, n_z, generator=rng)
            rows = torch.arange(b)
            c1, c2 = c.clone(), c.clone()
            c1[rows, i], c1[rows, j] = lo, hi
            c2[rows, i], c2[rows, j] = hi, lo
            f1 = extractor(run(c1, z)).reshape(b, -1).double()
            f2 = extractor(run(c2, z)).reshape(b, -1).double()
            per_sample.append((f1 - f2).abs().mean(dim=1))
            done += b
    vals = torch.cat(per_sample).numpy()
    return MetricReport("perceptual_diversity", float(vals.mean()), float(vals.std()), n,
                        {"d": d, "k": k, "literal": literal, "range": [lo, hi]})


# -- majority-vote disentanglement score ------------------------------------

def _encode_all(encode, dataset: FactorDataset, idx, chunk=256) -> np.ndarray:
    out = []
    for s in range(0, len(idx), chunk):
        rep = encode(dataset.get_images(idx[s:s + chunk]))
        out.append(rep.detach().cpu().numpy() if torch.is_tensor(rep) else np.asarray(rep))
    return np.concatenate(out).astype(np.float64)


def _kim_votes(encode, dataset, n_votes, L, rng, global_std, active):
    votes = np.zeros((len(active), dataset.num_factors), dtype=np.int64)
    for _ in range(n_votes):
        f = int(rng.integers(dataset.num_factors))
        _, idx = fixed_factor_indices(dataset, f, L, rng)
        reps = _encode_all(encode, dataset, idx)[:, active] / global_std[active]
        dim = int(np.argmin(reps.var(axis=0, ddof=1)))
        votes[dim, f] += 1
    return votes


def kim_score(encode: Callable, dataset: FactorDataset, rng: np.random.Generator, *,
              n_train_votes: int = 800, n_eval_votes: int = 800, L: int = 100,
              n_std_samples: int = 10000, collapse_threshold: float = 0.05,
              repeats: int = 1) -> MetricReport:
    """Majority-vote score: the least-varying normalised dimension under one
    fixed factor votes for that factor; the vote map is fit on the first set of
    votes and scored on the second."""
    if dataset.num_factors < 2 or min(dataset.factor_sizes) < 2:
        raise ValueError("need at least two factors with at least two classes each")
    n = len(dataset)
    idx = np.arange(n) if n <= n_std_samples else rng.choice(n, n_std_samples, replace=False)
    reps = _encode_all(encode, dataset, idx)
    std = reps.std(axis=0, ddof=1)
    if not np.all(np.isfinite(std)) or std.max() <= 0:
        raise DegenerateEncoderError("encoder output has no variance")
    active = np.flatnonzero(std >= collapse_threshold * std.max())
    if len(active) == 0:
        raise DegenerateEncoderError("all encoder dimensions collapsed")

    scores = []
    for _ in range(repeats):
        train = _kim_votes(encode, dataset, n_train_votes, L, rng, std, active)
        test = _kim_votes(encode, dataset, n_eval_votes, L, rng, std, active)
        mapping = train.argmax(axis=1)
        seen = train.sum(axis=1) > 0
        correct = test[np.arange(len(active)), mapping][seen].sum()
        scores.append(correct / test.sum())
    scores = np.asarray(scores, dtype=np.float64)
    return MetricReport("kim", float(scores.mean()), float(scores.std()), repeats,
                        {"n_train_votes": n_train_votes, "n_eval_votes": n_eval_votes, "L": L,
                         "active_dims": active.tolist(), "collapse_threshold": collapse_threshold})


# -- total correlation ------------------------------------------------------

def _gaussian_log_density(z, mu, sigma):
    """``[i, k, j] = log N(z[i, j]; mu[k, j], sigma[k, j]^2)``."""
    z, mu, sigma = z[:, None, :], mu[None, :, :], sigma[None, :, :]
    return -0.5 * ((z - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * math.log(2 * math.pi)


def tc_log_weights(batch: int, dataset_size: int, weighting: str = "stratified") -> torch.Tensor:
    """``(B, B)`` log importance weights for q(z_i) = sum_k w[i, k] q(z_i | x_k).

    ``stratified``: weight 1/N on the posterior that produced z_i and
    (N-1)/(N(B-1)) on the other B-1. ``mws``: 1/(N B) everywhere.
    """
    N, B = dataset_size, batch
    if weighting == "mws":
        return torch.full((B, B), -math.log(N * B), dtype=torch.float64)
    if weighting != "stratified":
        raise ValueError(f"unknown weighting {weighting!r}")
    w = torch.full((B, B), math.log(N - 1) - math.log(N * (B - 1)), dtype=torch.float64)
    w.fill_diagonal_(-math.log(N))
    return w


def tc_estimate(mu: torch.Tensor, sigma: torch.Tensor, z: torch.Tensor, dataset_size: int,
                weighting: str = "stratified") -> float:
    """Minibatch estimate of E[log q(z) - sum_j log q(z_j)] for factorised
    Gaussian posteriors ``N(mu_k, diag(sigma_k^2))`` and one sample ``z_i`` per
    posterior."""
    B = mu.shape[0]
    if B < 2:
        raise ValueError("need a batch of at least 2 posteriors")
    if dataset_size < B:
        raise ValueError("dataset_size must be at least the batch size")
    mu, sigma, z = (t.detach().to(torch.float64) for t in (mu, sigma, z))
    logp = _gaussian_log_density(z, mu, sigma)                    # (B, B, d)
    logw = tc_log_weights(B, dataset_size, weighting)[:, :, None]  # (B, B, 1)
    log_qz = torch.logsumexp(logp.sum(dim=2, keepdim=True) + logw, dim=1)[:, 0]
    log_qzj = torch.logsumexp(logp + logw, dim=1).sum(dim=1)
    return float((log_qz - log_qzj).mean())


def tc_from_critic(critic: Critic, images: torch.Tensor, dataset_size: int, rng: torch.Generator,
                   weighting: str = "stratified") -> float:
    if critic.config.q_mode != QMode.PROBABILISTIC:
        raise ModeError("TC estimation needs a probabilistic Q")
    with _EvalMode(critic), torch.no_grad():
        pred = critic.extract_code(images)
    z = pred.mu + pred.sigma * torch.randn(pred.mu.shape, generator=rng, dtype=pred.mu.dtype)
    return tc_estimate(pred.mu, pred.sigma, z, dataset_size, weighting)


# -- Q diagnostics -----------------------------------------------------------

def onehot_l1_probe(gen, critic: Critic, n: int, rng: torch.Generator,
                    batch_size: int = 256) -> Tuple[float, float]:
    """Mean L1 between sampled and recovered codes, for uniform and one-hot codes."""
    if critic.config.q_mode != QMode.DETERMINISTIC:
        raise ModeError("the L1 probe needs a deterministic Q")
    d, n_z = gen.config.d, gen.config.n_z
    totals = {"uniform": 0.0, "onehot": 0.0}
    with _EvalMode(gen, critic), torch.no_grad():
        for key, sampler in (("uniform", sample_uniform_code), ("onehot", sample_onehot_code)):
            done = 0
            while done < n:
                b = min(batch_size, n - done)
                c = sampler(d, rng, b)
                z = sample_noise(n_z, rng, b)
                c_hat = critic.extract_code(gen(c, z)).c_hat
                totals[key] += float((c_hat - c.values).abs().mean(dim=1).double().sum())
                done += b
    return totals["uniform"] / n, totals["onehot"] / n


def q_cosine_report(critic: Critic) -> float:
    with torch.no_grad():
        return float(mean_pairwise_cosine(q_grouped_kernels(critic)))
