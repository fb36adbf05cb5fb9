"""Loss, cosine-restart schedule, Adam loop, and resumable checkpoints."""

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .data import ReflectionTriple, augment, random_crop
from .errors import ConfigError, ShapeError, TrainingError
from .metrics import ssim_value
from .network import (
    CHECKPOINT_SCHEMA_VERSION,
    ModelConfig,
    _check_metadata,
    _read_archive,
    assign_model_arrays,
    build_model,
    model_arrays,
    _write_archive,
)
from .errors import CheckpointError


@dataclass
class TrainConfig:
    """Optimizer, schedule, and loop settings; every field may be overridden
    for small-scale runs."""

    lr0: float = 1e-4
    periods: tuple = (100000, 100000, 100000)
    restart_weights: tuple = (1.0, 0.5, 0.25)
    eta_min: float = 1e-7
    total_iters: int = 300000
    batch_per_device: int = 1
    patch: int = 512
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    augment: bool = True
    ssim_weight: float = 0.0

    def __post_init__(self):
        self.periods = tuple(int(p) for p in self.periods)
        self.restart_weights = tuple(float(w) for w in self.restart_weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.periods) != len(self.restart_weights):
            raise ConfigError(
                f"{len(self.periods)} periods but "
                f"{len(self.restart_weights)} restart weights")
        if any(p <= 0 for p in self.periods):
            raise ConfigError(f"periods must be positive, got {self.periods}")
        if sum(self.periods) != self.total_iters:
            raise ConfigError(
                f"sum(periods) = {sum(self.periods)} != total_iters = "
                f"{self.total_iters}")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be non-negative")
        if self.batch_per_device < 1:
            raise ConfigError("batch_per_device must be at least 1")
        if self.patch < 1:
            raise ConfigError("patch must be at least 1")


def desk_train_config(**overrides):
    """Small-run defaults sized for a single CPU core."""
    settings = dict(
        lr0=1e-3,
        periods=(1000,),
        restart_weights=(1.0,),
        eta_min=1e-7,
        total_iters=1000,
        batch_per_device=2,
        patch=64,
        seed=0,
        checkpoint_every=500,
        augment=False,
    )
    settings.update(overrides)
    return TrainConfig(**settings)


def cosine_restart_lr(iteration, cfg):
    """Learning rate at a global iteration under cosine annealing with warm
    restarts: each period j of length T_j decays from w_j * lr0 down to
    eta_min following (1 + cos(pi * t / T_j)) / 2."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(
            f"iteration {iteration} outside [0, {cfg.total_iters})")
    start = 0
    for length, weight in zip(cfg.periods, cfg.restart_weights):
        if iteration < start + length:
            local = iteration - start
            peak = weight * cfg.lr0
            return cfg.eta_min + (peak - cfg.eta_min) * (
                1 + math.cos(math.pi * local / length)) / 2
        start += length
    raise ValueError(f"iteration {iteration} beyond schedule")  # unreachable


def loss(pred, gt):
    """Mean absolute error over every pixel and channel."""
    if pred.shape != gt.shape:
        raise ShapeError(
            f"loss shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    iteration: int = 0
    loss_history: List[tuple] = field(default_factory=list)

    @property
    def sample_counter(self):
        return self.iteration * self.config.batch_per_device


def _make_optimizer(model, cfg):
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=cfg.adam_betas, eps=cfg.adam_eps)


def init_train_state(model_cfg, train_cfg, variant="full"):
    model = build_model(model_cfg, variant, seed=train_cfg.seed)
    return TrainState(model, _make_optimizer(model, train_cfg), train_cfg)


def _sample_rng(cfg, sample_index):
    # one stream per drawn sample: (seed, worker, sample) as in the data
    # loader contract, with a single worker here
    return np.random.default_rng([cfg.seed, 0, sample_index])


def sample_batch(triples, cfg, first_sample_index):
    """Draw a batch of training crops; fully determined by (seed, index)."""
    inputs, targets = [], []
    for offset in range(cfg.batch_per_device):
        rng = _sample_rng(cfg, first_sample_index + offset)
        triple = triples[int(rng.integers(0, len(triples)))]
        triple = random_crop(triple, cfg.patch, rng)
        if cfg.augment:
            triple = augment(triple, rng)
        inputs.append(triple.blended)
        targets.append(triple.transmission)
    return ReflectionTriple(torch.stack(inputs), torch.stack(targets))


def train_step(state, batch, cfg):
    """One optimizer step at the scheduled learning rate; returns the loss."""
    lr = cosine_restart_lr(state.iteration, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.model.train()
    pred = state.model(batch.blended)
    per_sample = (pred - batch.transmission).abs().mean(dim=(-3, -2, -1))
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        bad = int((~finite).nonzero()[0])
        raise TrainingError(
            f"non-finite loss at batch index {bad} "
            f"(iteration {state.iteration})")
    total = per_sample.mean()
    if cfg.ssim_weight:
        total = total + cfg.ssim_weight * (1 - ssim_value(pred, batch.transmission))

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip and cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()

    state.iteration += 1
    value = float(total.detach())
    state.loss_history.append((state.iteration, lr, value))
    return value


def _opt_arrays(state):
    """Flatten Adam moments into checkpoint arrays keyed by parameter index."""
    arrays = {}
    opt_state = state.optimizer.state_dict()["state"]
    for index, entry in opt_state.items():
        for key in ("step", "exp_avg", "exp_avg_sq"):
            value = entry[key]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arrays[f"opt.{index}.{key}"] = np.asarray(value)
    return arrays


def _assign_opt_arrays(optimizer, arrays):
    prefixed = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    if not prefixed:
        return
    entries = {}
    for key, value in prefixed.items():
        _, index, name = key.split(".", 2)
        entry = entries.setdefault(int(index), {})
        if name == "step":
            entry[name] = torch.tensor(float(value))
        else:
            entry[name] = torch.from_numpy(value.copy())
    replacement = optimizer.state_dict()
    replacement["state"] = entries
    optimizer.load_state_dict(replacement)


def save_checkpoint(path, state):
    """Write model weights, optimizer moments, and progress as one archive."""
    arrays = model_arrays(state.model)
    arrays.update(_opt_arrays(state))
    last = state.loss_history[-1][2] if state.loss_history else None
    metadata = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": asdict(state.model.config),
        "variant": state.model.variant,
        "seed": state.model.seed,
        "iteration": state.iteration,
        "train": {
            "config": asdict(state.config),
            "sample_counter": state.sample_counter,
            "last_loss": last,
        },
    }
    _write_archive(path, arrays, metadata)


def load_checkpoint(path, expect_model=None):
    """Rebuild a TrainState from a training checkpoint.

    When expect_model is given the weights are loaded into it, so an
    architecture mismatch fails naming the first offending parameter key.
    """
    arrays, metadata = _read_archive(path)
    _check_metadata(metadata, path, optional_keys=("train",))
    if "train" not in metadata:
        raise CheckpointError(f"{path}: checkpoint lacks training state")
    if expect_model is not None:
        model = expect_model
    else:
        config = ModelConfig(**metadata["config"])
        model = build_model(config, metadata["variant"], metadata["seed"])
    assign_model_arrays(model, arrays)
    train_meta = metadata["train"]
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in train_meta["config"].items()})
    optimizer = _make_optimizer(model, cfg)
    _assign_opt_arrays(optimizer, arrays)
    return TrainState(model, optimizer, cfg, iteration=int(metadata["iteration"]))


def fit(model_cfg, train_cfg, variant="full", triples=None, out_dir=None,
        resume=None):
    """Train to total_iters, appending one CSV row per iteration and writing
    periodic checkpoints plus a final checkpoint_last."""
    if not triples:
        raise TrainingError("fit needs at least one training triple")
    if resume is not None:
        expect = build_model(model_cfg, variant, seed=train_cfg.seed)
        state = load_checkpoint(resume, expect_model=expect)
        state.config = train_cfg
    else:
        state = init_train_state(model_cfg, train_cfg, variant)

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "loss.csv")
        if resume is None and os.path.exists(csv_path):
            os.remove(csv_path)

    while state.iteration < train_cfg.total_iters:
        batch = sample_batch(triples, train_cfg, state.sample_counter)
        train_step(state, batch, train_cfg)
        iteration, lr, value = state.loss_history[-1]
        if csv_path is not None:
            with open(csv_path, "a", newline="") as handle:
                csv.writer(handle).writerow(
                    [iteration, f"{lr:.10g}", f"{value:.8f}"])
        if (out_dir is not None and train_cfg.checkpoint_every > 0
                and state.iteration % train_cfg.checkpoint_every == 0):
            save_checkpoint(
                os.path.join(out_dir, f"checkpoint_{state.iteration:07d}.npz"),
                state)

    if out_dir is not None and state.iteration > 0:
        save_checkpoint(os.path.join(out_dir, "checkpoint_last.npz"), state)
    return state
