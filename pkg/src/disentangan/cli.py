"""Command-line entry points: ``train``, ``traverse``, ``eval`` and ``data``.

Exit codes: 0 success, 1 runtime failure, 2 usage or unmet precondition.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .checkpoint import load_models, read_metadata
from .config import TrainConfig
from .critic import QMode
from .errors import CheckpointError, DatasetFormatError, ModeError, NonFiniteLossError
from .generator import latent_traversal
from .metrics import (IdentityExtractor, MetricReport, kim_score, onehot_l1_probe, perceptual_diversity,
                      q_cosine_report, tc_from_critic, train_classifier_extractor)
from .trainer import TrainState, configure_determinism, train

log = logging.getLogger("disentangan")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEPARATOR_PX = 2


class UsageError(Exception):
    """A precondition the user can fix by changing the command line."""


# -- datasets ---------------------------------------------------------------

def load_training_dataset(config: TrainConfig, path=None) -> data_mod.FactorDataset:
    """The dataset a config names, served at its image size and channel count."""
    path = path or config.dataset_path
    if config.dataset == "dsprites":
        path = Path(path) if path else data_mod.default_data_dir() / data_mod.DSPRITES_FILENAME
        if not path.exists():
            raise UsageError(f"dSprites archive not found at {path}; run `disentangan data fetch-dsprites` "
                             f"or set {data_mod.DATA_DIR_ENV}")
        return data_mod.load_dsprites(path, config.img_channels, config.img_size)
    if config.dataset != "synth":
        raise UsageError(f"unknown dataset {config.dataset!r}")
    if path:
        ds = data_mod.load_archive(path)
    else:
        ds = data_mod.synth_factors(data_mod.parse_synth_spec(config.synth_spec), config.img_size)
    if ds.img_size != config.img_size:
        raise UsageError(f"dataset images are {ds.img_size} px, config expects {config.img_size}")
    return ds.with_channels(config.img_channels)


# -- train --------------------------------------------------------------------

_FLAG_TO_KEY = {
    "seed": "seed", "iters": "iterations", "batch": "batch_size", "lam": "lam", "gamma": "gamma",
    "ortho_weight": "ortho_weight", "onehot_period": "onehot_period", "q_mode": "q_mode",
    "dataset": "dataset", "data_path": "dataset_path", "img_size": "img_size",
    "width_divisor": "width_divisor", "log_every": "log_every", "snapshot_every": "snapshot_every",
    "probe_every": "probe_every", "synth_spec": "synth_spec",
}


def resolve_train_config(args) -> TrainConfig:
    """Config file values overridden by any flag given on the command line."""
    base = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    changes = {key: getattr(args, flag) for flag, key in _FLAG_TO_KEY.items()
               if getattr(args, flag) is not None}
    if args.no_onehot:
        changes["disable_onehot"] = True
    if args.no_ortho:
        changes["disable_ortho"] = True
    if args.no_competefree:
        changes["disable_competefree_g"] = True
    if args.no_strict:
        changes["strict"] = False
    config = TrainConfig.from_flat({**base.to_flat(), **changes})
    return config.replace(anneal_end_iter=config.effective_anneal_end)


def cmd_train(args) -> int:
    try:
        config = resolve_train_config(args)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not args.force:
            raise UsageError(f"{out} already exists; pass --force to replace it")
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    dataset = load_training_dataset(config)
    if config.batch_size > len(dataset):
        raise UsageError(f"batch size {config.batch_size} exceeds the {len(dataset)} images available")
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("checkpoints", "traversals", "reports"):
        (out / sub).mkdir(exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    print(config.to_text(), end="")
    try:
        last, _ = train(config, dataset, out)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}; snapshot at {exc.snapshot_path}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"final checkpoint: {last}")
    return EXIT_OK


# -- traverse -------------------------------------------------------------------

def parse_dims(text: str, d: int) -> list:
    dims = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            dims.extend(range(int(a), int(b) + 1))
        elif part:
            dims.append(int(part))
    bad = [k for k in dims if not 0 <= k < d]
    if not dims or bad:
        raise UsageError(f"dims must be in [0, {d}); got {text!r}")
    return dims


def traversal_grid(gen, dims, steps: int, z_seed: int) -> np.ndarray:
    """``uint8`` grid with one row per code dimension and one column per value in [0, 1]."""
    cfg = gen.config
    rng = torch.Generator().manual_seed(z_seed)
    c_base = torch.rand(1, cfg.d, generator=rng)
    z = torch.randn(1, cfg.n_z, generator=rng)
    values = np.linspace(0.0, 1.0, steps)
    s, gap = cfg.img_size, SEPARATOR_PX
    grid = np.full((len(dims) * s + (len(dims) - 1) * gap, steps * s + (steps - 1) * gap, cfg.img_channels),
                   255, dtype=np.uint8)
    for r, dim in enumerate(dims):
        for col, img in enumerate(latent_traversal(gen, c_base, z, dim, values)):
            tile = (img.permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
            y, x = r * (s + gap), col * (s + gap)
            grid[y:y + s, x:x + s] = tile
    return grid


def cmd_traverse(args) -> int:
    gen, _, config = load_models(args.ckpt)
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    dims = parse_dims(args.dims, config.d) if args.dims else list(range(min(5, config.d)))
    grid = traversal_grid(gen, dims, args.steps, args.z_seed)
    iteration = read_metadata(args.ckpt)["iteration"]
    out = Path(args.out) if args.out else _run_dir(args.ckpt) / "traversals" / f"traverse_{iteration:07d}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(grid[..., 0] if grid.shape[2] == 1 else grid)
    img.save(out, format="PNG")
    print(out)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def _run_dir(ckpt) -> Path:
    p = Path(ckpt).resolve().parent
    return p.parent if p.name == "checkpoints" else p


def _encoder(critic):
    def encode(x):
        with torch.no_grad():
            return critic.extract_code(x).c_hat
    return encode


def cmd_eval(args) -> int:
    metric = args.metric
    torch_rng = torch.Generator().manual_seed(args.seed)
    np_rng = np.random.default_rng(args.seed)
    configure_determinism(True)

    if args.oracle_encoder:
        if metric != "kim":
            raise UsageError("--oracle-encoder only applies to --metric kim")
        config = TrainConfig(dataset=args.dataset or "synth", img_size=args.img_size or 32)
        gen = critic = None
    elif args.ckpt:
        gen, critic, config = load_models(args.ckpt)
    elif args.random_init:
        config = TrainConfig(seed=args.seed, img_size=args.img_size or 64,
                             q_mode=args.q_mode or "det", width_divisor=args.width_divisor or 1)
        state = TrainState.create(config)
        gen, critic = state.generator.eval(), state.critic.eval()
    else:
        raise UsageError("--ckpt is required (or --random-init / --oracle-encoder)")
    if args.dataset:
        config = config.replace(dataset=args.dataset)

    extra = {"metric": metric, "seed": args.seed, "ckpt": str(args.ckpt) if args.ckpt else None}
    if args.ckpt:
        extra["iteration"] = read_metadata(args.ckpt)["iteration"]

    if metric == "tc" and critic is not None and critic.config.q_mode != QMode.PROBABILISTIC:
        raise UsageError("tc needs a probabilistic Q; this model was trained with --q-mode det")
    if metric == "l1probe" and critic.config.q_mode != QMode.DETERMINISTIC:
        raise UsageError("l1probe needs a deterministic Q; this model was trained with --q-mode prob")

    if metric == "cosq":
        report = MetricReport("q_cosine", q_cosine_report(critic), 0.0, 1, extra)
    elif metric == "l1probe":
        n = args.n or 1000
        l1_u, l1_o = onehot_l1_probe(gen, critic, n, torch_rng)
        report = MetricReport("l1probe_onehot", l1_o, 0.0, n, {**extra, "l1_uniform": l1_u})
    elif metric == "kim":
        ds = load_training_dataset(config, args.data_path)
        if args.oracle_encoder:
            ds = data_mod.factor_value_dataset(ds)
            encode = lambda x: x.reshape(len(x), -1)  # noqa: E731
        else:
            encode = _encoder(critic)
        report = kim_score(encode, ds, np_rng, repeats=args.repeats)
        report.config.update(extra)
    elif metric == "pdiv":
        n = args.n or 1000
        if args.extractor == "classifier":
            ds = load_training_dataset(config, args.data_path)
            extractor, acc = train_classifier_extractor(ds, seed=args.seed)
            extra["extractor_accuracy"] = acc
        else:
            extractor = IdentityExtractor()
        report = perceptual_diversity(gen, extractor, n, config.d, torch_rng, n_z=config.n_z)
        report.config.update({**extra, "extractor": args.extractor})
    elif metric == "tc":
        ds = load_training_dataset(config, args.data_path)
        n = min(args.n or 256, len(ds))
        idx = np_rng.choice(len(ds), n, replace=False)
        value = tc_from_critic(critic, ds.get_images(idx), len(ds), torch_rng)
        report = MetricReport("total_correlation", value, 0.0, n, extra)
    else:  # argparse restricts the choices
        raise UsageError(f"unknown metric {metric!r}")

    if args.out:
        out = Path(args.out)
    elif args.ckpt:
        out = _run_dir(args.ckpt) / "reports" / f"{report.name}.csv"
    else:
        out = Path("reports") / f"{report.name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.append_csv(out)
    print(report.to_text(), end="")
    return EXIT_OK


# -- data ---------------------------------------------------------------------------

def cmd_data(args) -> int:
    if args.action == "fetch-dsprites":
        try:
            path = data_mod.fetch_dsprites(args.dest, expected_sha256=args.sha256)
        except OSError as exc:
            print(f"download failed: {exc}", file=sys.stderr)
            return EXIT_FAILURE
        print(f"{path}  sha256={data_mod.sha256_file(path)}")
        return EXIT_OK
    if args.action == "synth":
        try:
            spec = data_mod.parse_synth_spec(args.spec)
            ds = data_mod.synth_factors(spec, args.img_size)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        out = Path(args.out) if args.out else data_mod.default_data_dir() / "synth.npz"
        out.parent.mkdir(parents=True, exist_ok=True)
        data_mod.save_archive(ds, out)
        print(f"{out}: {len(ds)} images, factors {dict(zip(ds.factor_names, ds.factor_sizes))}")
        return EXIT_OK
    # verify
    problems = data_mod.verify_archive(args.path)
    if problems:
        for p in problems:
            print(f"FAIL {p}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"ok {args.path}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disentangan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model into a run directory")
    t.add_argument("--config", help="flat 'key = value' config file; flags override it")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--ortho-weight", type=float)
    t.add_argument("--onehot-period", type=int)
    t.add_argument("--q-mode", choices=["det", "prob"])
    t.add_argument("--no-onehot", action="store_true")
    t.add_argument("--no-ortho", action="store_true")
    t.add_argument("--no-competefree", action="store_true")
    t.add_argument("--dataset", choices=["dsprites", "synth"])
    t.add_argument("--data-path")
    t.add_argument("--synth-spec")
    t.add_argument("--img-size", type=int)
    t.add_argument("--width-divisor", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--snapshot-every", type=int)
    t.add_argument("--probe-every", type=int)
    t.add_argument("--no-strict", action="store_true", help="allow nondeterministic kernels and prefetching")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--force", action="store_true", help="replace an existing run directory")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("traverse", help="write a latent traversal grid")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--dims", help="e.g. '0-4' or '0,2,5' (default: first five)")
    v.add_argument("--steps", type=int, default=8)
    v.add_argument("--z-seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_traverse)

    e = sub.add_parser("eval", help="compute a metric and append it to a report CSV")
    e.add_argument("--metric", required=True, choices=["kim", "pdiv", "tc", "cosq", "l1probe"])
    e.add_argument("--ckpt")
    e.add_argument("--dataset", choices=["dsprites", "synth"])
    e.add_argument("--data-path")
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--out")
    e.add_argument("--extractor", choices=["identity", "classifier"], default="identity")
    e.add_argument("--oracle-encoder", action="store_true",
                   help="score the ground-truth factors instead of a model (kim only)")
    e.add_argument("--random-init", action="store_true", help="evaluate a freshly initialised model")
    e.add_argument("--img-size", type=int)
    e.add_argument("--width-divisor", type=int)
    e.add_argument("--q-mode", choices=["det", "prob"])
    e.set_defaults(func=cmd_eval)

    dp = sub.add_parser("data", help="dataset management")
    dsub = dp.add_subparsers(dest="action", required=True)
    f = dsub.add_parser("fetch-dsprites")
    f.add_argument("--dest", help=f"directory (default ${data_mod.DATA_DIR_ENV} or ~/.cache/disentangan)")
    f.add_argument("--sha256", help="expected digest")
    s = dsub.add_parser("synth")
    s.add_argument("--spec", default="x=8,y=8,size=4,brightness=4")
    s.add_argument("--img-size", type=int, default=32)
    s.add_argument("--out")
    vf = dsub.add_parser("verify")
    vf.add_argument("path")
    dp.set_defaults(func=cmd_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ModeError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, DatasetFormatError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (RuntimeError, OSError) as exc:
        log.debug("failure", exc_info=True)
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
