"""ADAM with decoupled weight decay, the step learning-rate schedule and the training loop."""
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from .config import RunConfig, derive_seed
from .data_io import AugmentConfig, Dataset, augment
from .error_handler import ConfigurationError, TrainingDivergedError, UsageError
from .network import CcanModel, ccan_forward, save_checkpoint
from .objective import pk_sample, total_loss
from .tensor_core import Tape, Tensor, backward, from_numpy

ADAM_EPS = 1e-8
LOSS_KEYS = ('ce_G', 'tri_G', 'ce_L', 'tri_L', 'total')


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Dict[str, Tensor]) -> 'AdamState':
        return cls(m={name: np.zeros_like(p.data) for name, p in params.items()},
                   v={name: np.zeros_like(p.data) for name, p in params.items()})


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float, cfg) -> Tuple[Dict[str, Tensor], AdamState]:
    """One bias-corrected ADAM update preceded by decoupled weight decay.

    Args:
        params: named parameters; they are not modified
        grads: gradient per parameter name, None meaning zero
        state: moment accumulators, updated in place
        lr: learning rate for this step
        cfg: anything with beta1, beta2 and weight_decay

    Returns:
        tuple: new parameter tensors and the updated state
    """
    if lr <= 0:
        raise UsageError(f"Learning rate must be positive, got {lr}")
    state.t += 1
    beta1, beta2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise UsageError(f"Gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        data = p.data - lr * cfg.weight_decay * p.data if cfg.weight_decay else p.data
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        new = data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        updated[name] = from_numpy(new.astype(p.data.dtype, copy=False), requires_grad=True)
        updated[name].name = name
    return updated, state


def lr_at(epoch: int, cfg) -> float:
    """lr0 before the plateau ends, then multiplied by lr_factor every lr_decay_every epochs"""
    if epoch < cfg.lr_plateau:
        return cfg.lr0
    return cfg.lr0 * cfg.lr_factor ** (1 + (epoch - cfg.lr_plateau) // cfg.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    ce_G: float
    tri_G: float
    ce_L: float
    tri_L: float
    total: float
    triplets: float
    steps: int
    erasing: bool
    wall_time: float = field(default=0.0, compare=False)
    eval: Optional[Dict[str, float]] = None


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def write_history(path: str, history: TrainHistory) -> None:
    """One JSON object per epoch; wall time is left out so reruns produce identical files"""
    with open(path, 'w', encoding='utf-8') as handle:
        for record in history.records:
            row = asdict(record)
            row.pop('wall_time')
            if row['eval'] is None:
                row.pop('eval')
            handle.write(json.dumps(row, sort_keys=True) + '\n')


def read_history(path: str) -> List[Dict[str, object]]:
    with open(path, 'r', encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]


class Trainer:
    """Epoch-driven PK-batch training of a CcanModel"""

    def __init__(self, cfg: RunConfig, checkpoint_dir: Optional[str] = None,
                 on_epoch: Optional[Callable[[EpochRecord], None]] = None):
        self.cfg = cfg
        self.checkpoint_dir = checkpoint_dir
        self.on_epoch = on_epoch
        self.logger = logging.getLogger(__name__)

    def _show_progress(self) -> bool:
        return bool(self.cfg.progress) and sys.stderr.isatty()

    def train(self, model: CcanModel, dataset: Dataset) -> Tuple[CcanModel, TrainHistory]:
        cfg = self.cfg
        train_idx, label_of = dataset.train_labels()
        if len(label_of) < cfg.v:
            raise ConfigurationError(f"The train split has {len(label_of)} identities, v={cfg.v} are needed")
        if model.config.num_ids != len(label_of):
            raise ConfigurationError(
                f"Model has {model.config.num_ids} classes but the train split has {len(label_of)} identities")

        person_ids = [dataset.records[i].person_id for i in train_idx]
        sampler_rng = np.random.default_rng(derive_seed(cfg.seed, 'sampler'))
        augment_rng = np.random.default_rng(derive_seed(cfg.seed, 'augment'))
        steps = max(1, len(train_idx) // cfg.batch)
        state = AdamState.for_params(model.params)
        history = TrainHistory()

        self.logger.info(f"Training {cfg.setting} for {cfg.epochs} epochs x {steps} steps "
                         f"({len(train_idx)} images, {len(label_of)} identities)")
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr = lr_at(epoch, cfg)
            erasing = epoch >= cfg.erasing_start_epoch
            aug_cfg = AugmentConfig.from_run_config(cfg, erase_enabled=erasing)
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            triplets = 0

            bar = tqdm(range(steps), desc=f"epoch {epoch + 1}/{cfg.epochs}", leave=False,
                       disable=not self._show_progress())
            for step in bar:
                positions = pk_sample(person_ids, cfg.v, cfg.batch, sampler_rng)
                images = [augment(dataset.image(train_idx[k]), aug_cfg, augment_rng) for k in positions]
                labels = [label_of[person_ids[k]] for k in positions]

                with Tape() as tape:
                    outputs = ccan_forward(images, model)
                    breakdown = total_loss(outputs, labels, cfg)
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError("Loss is not finite", epoch, step, breakdown.as_dict())
                backward(breakdown.tensor, tape)
                grads = {name: p.grad for name, p in model.params.items()}
                tape.clear()
                params, state = adam_step(model.params, grads, state, lr, cfg)
                model = model.with_parameters(params)

                for key, value in breakdown.as_dict().items():
                    sums[key] += value
                triplets += breakdown.triplets_G + breakdown.triplets_L
                bar.set_postfix(loss=f"{breakdown.total:.4f}")

            means = {key: value / steps for key, value in sums.items()}
            record = EpochRecord(epoch=epoch, lr=lr, triplets=triplets / steps, steps=steps, erasing=erasing,
                                 wall_time=time.perf_counter() - started, **means)
            history.records.append(record)
            self.logger.info(
                f"epoch {epoch + 1}/{cfg.epochs} lr {lr:.2e} total {means['total']:.4f} "
                f"(ceG {means['ce_G']:.4f} triG {means['tri_G']:.4f} ceL {means['ce_L']:.4f} triL {means['tri_L']:.4f})")
            if self.on_epoch is not None:
                self.on_epoch(record)
            if self.checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(self.checkpoint_dir, f"epoch_{epoch + 1:04d}.ccac"), model)

        return model, history


def train(model: CcanModel, dataset: Dataset, cfg: RunConfig, checkpoint_dir: Optional[str] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[CcanModel, TrainHistory]:
    return Trainer(cfg, checkpoint_dir=checkpoint_dir, on_epoch=on_epoch).train(model, dataset)
