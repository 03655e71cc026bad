"""Adversarial training with alternating code sampling.

Each iteration performs three sequential updates: D on the hinge loss, G on
the adversarial loss, then G together with the Q-exclusive weights on the code
reconstruction objective plus the kernel-orthogonality penalty.
"""
from __future__ import annotations

import csv
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .critic import Critic, build_critic, q_grouped_kernels
from .data import BatchStream, FactorDataset
from .errors import NonFiniteLossError
from .generator import Generator, build_generator
from .latent import CodeKind, sample_code, sample_noise, schedule_kind
from .metrics import onehot_l1_probe, q_cosine_report
from .objectives import g_adv_loss, hinge_d_loss, mi_loss, onehot_ce_loss, orthogonal_reg

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "kind", "loss_d", "loss_g", "loss_mi_cont", "loss_ce", "ortho_reg",
               "q_cos", "sigma_t", "l1_uniform", "l1_onehot")


def instance_noise_sigma(config: TrainConfig, iteration: int) -> float:
    """Linearly annealed standard deviation of the noise added to D's inputs."""
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    end = config.effective_anneal_end
    if end <= 0:
        return 0.0
    return config.instance_noise_sigma0 * max(0.0, 1.0 - iteration / end)


def configure_determinism(strict: bool) -> None:
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    critic: Critic
    opt_d: torch.optim.Optimizer
    opt_g: torch.optim.Optimizer
    rng: torch.Generator
    iteration: int = 0
    stream: Optional[BatchStream] = None
    running: dict = field(default_factory=dict)
    snapshot_dir: Optional[Path] = None

    @classmethod
    def create(cls, config: TrainConfig) -> "TrainState":
        init_rng = torch.Generator().manual_seed(config.seed)
        gen = build_generator(config.generator_config(), init_rng)
        critic = build_critic(config.critic_config(), init_rng)
        gen.train()
        critic.train()
        betas = (config.adam_beta1, config.adam_beta2)
        opt_d = torch.optim.Adam(critic.d_parameters(), lr=config.learning_rate, betas=betas)
        opt_g = torch.optim.Adam(list(gen.parameters()) + list(critic.q_parameters()),
                                 lr=config.learning_rate, betas=betas)
        rng = torch.Generator().manual_seed(config.seed + 1)
        return cls(config, gen, critic, opt_d, opt_g, rng)


def _update_running(running: dict, values: dict, decay: float = 0.99) -> None:
    for k, v in values.items():
        if isinstance(v, float) and math.isfinite(v):
            running[k] = v if k not in running else decay * running[k] + (1 - decay) * v


def _check_finite(state: TrainState, name: str, value: torch.Tensor) -> None:
    if torch.isfinite(value):
        return
    path = None
    if state.snapshot_dir is not None:
        path = state.snapshot_dir / f"nonfinite_{state.iteration + 1:07d}"
        ckpt_io.save_checkpoint(state, path)
    raise NonFiniteLossError(f"{name} became {value.item()} at iteration {state.iteration + 1}", path)


def _noisy(x: torch.Tensor, sigma: float, rng: torch.Generator) -> torch.Tensor:
    if sigma <= 0:
        return x
    return x + sigma * torch.randn(x.shape, generator=rng, dtype=x.dtype)


def train_step(state: TrainState, real_batch: torch.Tensor) -> dict:
    """Run one iteration in place and return its loss values."""
    cfg = state.config
    G, D = state.generator, state.critic
    B = real_batch.shape[0]
    if real_batch.shape[1:] != (cfg.img_channels, cfg.img_size, cfg.img_size):
        raise ValueError(f"real batch has shape {tuple(real_batch.shape)}")
    i = state.iteration + 1
    kind = schedule_kind(cfg.schedule, i)
    z = sample_noise(cfg.n_z, state.rng, B)
    c = sample_code(kind, cfg.d, state.rng, B)
    sigma = instance_noise_sigma(cfg, i)
    weights = cfg.loss_weights

    # D update
    with torch.no_grad():
        fake = G(c, z)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d = hinge_d_loss(D.discriminate(_noisy(real_batch, sigma, state.rng)),
                          D.discriminate(_noisy(fake, sigma, state.rng)))
    _check_finite(state, "loss_d", loss_d)
    loss_d.backward()
    state.opt_d.step()

    # G adversarial update
    state.opt_g.zero_grad(set_to_none=True)
    loss_g = g_adv_loss(D.discriminate(_noisy(G(c, z), sigma, state.rng)))
    _check_finite(state, "loss_g", loss_g)
    loss_g.backward()
    state.opt_g.step()

    # G + Q update on code recovery
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    pred = D.extract_code(G(c, z))
    rec = mi_loss(pred, c)
    loss_mi = weights.lam * rec
    ce = None
    if kind == CodeKind.ONE_HOT:
        ce = onehot_ce_loss(pred, c)
        loss_mi = loss_mi + weights.gamma * ce
    ortho = None
    if weights.ortho_weight > 0:
        ortho = orthogonal_reg(q_grouped_kernels(D), signed=cfg.ortho_signed)
        loss_mi = loss_mi + weights.ortho_weight * ortho
    _check_finite(state, "loss_mi", loss_mi)
    loss_mi.backward()
    state.opt_g.step()
    if cfg.mi_updates_trunk:
        # only trunk parameters carry gradient here, so only they move
        state.opt_d.step()
    state.opt_d.zero_grad(set_to_none=True)

    state.iteration = i
    out = {
        "iteration": i,
        "kind": kind.value,
        "loss_d": loss_d.item(),
        "loss_g": loss_g.item(),
        "loss_mi_cont": rec.item(),
        "loss_ce": ce.item() if ce is not None else float("nan"),
        "ortho_reg": ortho.item() if ortho is not None else float("nan"),
        "sigma_t": sigma,
    }
    _update_running(state.running, out)
    return out


class _Prefetcher:
    """Loads batches on a background thread through a bounded queue."""

    def __init__(self, dataset: FactorDataset, stream: BatchStream, depth: int = 4):
        self.q = queue.Queue(maxsize=depth)
        self.dataset, self.stream = dataset, stream
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        while not self.stop.is_set():
            batch = self.dataset.get_images(self.stream.next_indices())
            while not self.stop.is_set():
                try:
                    self.q.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self):
        return self.q.get()

    def close(self):
        self.stop.set()
        self.thread.join(timeout=5)


def _write_row(writer, fh, row):
    writer.writerow({k: row.get(k, "") for k in LOG_COLUMNS})
    fh.flush()


def train(config: TrainConfig, dataset: FactorDataset, run_dir, resume_from=None,
          state: Optional[TrainState] = None) -> tuple:
    """Train until ``config.iterations``; returns ``(final checkpoint path, logged rows)``.

    The metrics CSV lives at ``run_dir/metrics.csv`` and snapshots under
    ``run_dir/checkpoints``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    configure_determinism(config.strict)
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is None and config.anneal_end_iter is None:
        # pin the noise schedule so a resumed run with more iterations keeps it
        config = config.replace(anneal_end_iter=config.effective_anneal_end)
    if state is None:
        state = ckpt_io.load_checkpoint(resume_from) if resume_from else TrainState.create(config)
    state.config = config if resume_from is None else state.config.replace(iterations=config.iterations)
    state.snapshot_dir = ckpt_dir
    if state.stream is None:
        state.stream = BatchStream(len(dataset), config.batch_size, np.random.default_rng(config.seed + 2))
    probe_rng_seed = config.seed + 3

    metrics_path = run_dir / "metrics.csv"
    new_file = not metrics_path.exists() or resume_from is None
    rows: List[dict] = []
    prefetch = None if config.strict else _Prefetcher(dataset, state.stream)
    fh = metrics_path.open("w" if new_file else "a", newline="")
    try:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if new_file:
            writer.writeheader()
        last = None
        while state.iteration < config.iterations:
            t0 = time.perf_counter()
            batch = prefetch.get() if prefetch else dataset.get_images(state.stream.next_indices())
            out = train_step(state, batch)
            elapsed = time.perf_counter() - t0
            i = state.iteration
            if config.log_every and i % config.log_every == 0:
                out["q_cos"] = q_cosine_report(state.critic)
                if config.probe_every and i % config.probe_every == 0 and config.q_mode == "deterministic":
                    probe_rng = torch.Generator().manual_seed(probe_rng_seed)
                    out["l1_uniform"], out["l1_onehot"] = onehot_l1_probe(
                        state.generator, state.critic, config.probe_samples, probe_rng)
                rows.append(out)
                _write_row(writer, fh, out)
                log.info("iter %d  d=%.4f g=%.4f mi=%.4f  (%.2fs/step)", i, out["loss_d"], out["loss_g"],
                         out["loss_mi_cont"], elapsed)
            if config.snapshot_every and i % config.snapshot_every == 0:
                last = ckpt_io.save_checkpoint(state, ckpt_dir / f"ckpt_{i:07d}")
        if last is None or not str(last).endswith(f"{state.iteration:07d}"):
            last = ckpt_io.save_checkpoint(state, ckpt_dir / f"ckpt_{state.iteration:07d}")
    except OSError:
        try:
            ckpt_io.save_checkpoint(state, ckpt_dir / f"abort_{state.iteration:07d}")
        except OSError:
            log.exception("could not write abort snapshot")
        raise
    finally:
        fh.close()
        if prefetch:
            prefetch.close()
    return last, rows


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
