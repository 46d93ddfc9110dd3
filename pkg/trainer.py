"""
Trainer
Mini-batch training loop: deterministic shuffling, Adam on every parameter,
per-epoch checkpoints and a loss log.
"""
import csv
import logging
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from checkpoint_codec import save_checkpoint
from model import Batch, ModelParams, model_backward, model_forward
from numeric_core import NumericError, adam_step
from preprocess import MAX_INPUT_LENGTH, Example

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1


class TrainingDivergedError(ArithmeticError):
    """Raised when the loss stops being finite."""


class TrainState(Enum):
    """Trainer state machine states."""
    IDLE = "IDLE"
    TRAINING = "TRAINING"
    FINISHED = "FINISHED"
    FAILED = "FAILED"


@dataclass
class TrainConfig:
    """Training protocol: six epochs of Adam with default settings."""
    epochs: int = 6
    batch_size: int = 256
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    seconds: float
    checkpoint_path: Optional[str] = None


@dataclass
class TrainLog:
    """One record per completed epoch."""
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> List[float]:
        return [r.mean_loss for r in self.records]

    def to_csv(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['epoch', 'mean_loss', 'seconds'])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.mean_loss), f"{r.seconds:.3f}"])


def make_batches(examples: Sequence[Example], batch_size: int, seed: int, epoch: int,
                 shuffle: bool = True, max_len: int = MAX_INPUT_LENGTH) -> List[Batch]:
    """Pack examples into left-padded batches; the order is a pure function of (seed, epoch)."""
    if shuffle:
        rng = np.random.default_rng([seed & SEED_MASK, epoch])
        order = rng.permutation(len(examples))
    else:
        order = np.arange(len(examples))
    return [Batch.from_examples([examples[i] for i in order[start:start + batch_size]], max_len)
            for start in range(0, len(examples), batch_size)]


def _param_stats(params: ModelParams) -> str:
    parts = []
    for p in params.parameters():
        finite = np.isfinite(p.value).all() and np.isfinite(p.grad).all()
        parts.append(f"{p.name}: max|w|={np.abs(p.value).max():.3g} "
                     f"max|g|={np.abs(p.grad).max():.3g}{'' if finite else ' NON-FINITE'}")
    return '; '.join(parts)


class Trainer:
    """Runs the epoch loop over one ModelParams instance."""

    def __init__(self, params: ModelParams, config: TrainConfig,
                 checkpoint_dir: Optional[str] = None, vocab_digest: Optional[str] = None,
                 verbose: bool = False):
        """
        Args:
            params: parameters to train in place
            config: protocol settings
            checkpoint_dir: where `epoch_<n>.ckpt` files go; None disables them
            vocab_digest: stored in every checkpoint
            verbose: show a progress bar per epoch
        """
        self.params = params
        self.config = config
        self.checkpoint_dir = checkpoint_dir
        self.vocab_digest = vocab_digest
        self.verbose = verbose
        self.state = TrainState.IDLE
        self.log = TrainLog()

        # Callbacks
        self.on_state_change: Optional[Callable[[TrainState], None]] = None
        self.on_epoch_complete: Optional[Callable[[EpochRecord, ModelParams], None]] = None

    def _set_state(self, state: TrainState):
        self.state = state
        if self.on_state_change:
            self.on_state_change(state)

    def train_step(self, batch: Batch) -> float:
        """Forward, backward and one Adam update on every parameter."""
        _, trace = model_forward(self.params, batch)
        loss = model_backward(self.params, trace)
        c = self.config
        for p in self.params.parameters():
            adam_step(p, c.lr, c.beta1, c.beta2, c.eps)
        return loss

    def run(self, examples: Sequence[Example], start_epoch: int = 1) -> TrainLog:
        if not examples:
            raise ValueError("no training examples")
        c = self.config
        max_len = self.params.base_config.max_len
        if self.checkpoint_dir:
            os.makedirs(self.checkpoint_dir, exist_ok=True)
        self._set_state(TrainState.TRAINING)

        for epoch in range(start_epoch, start_epoch + c.epochs):
            started = time.perf_counter()
            batches = make_batches(examples, c.batch_size, c.seed, epoch, c.shuffle, max_len)
            total = 0.0
            for index, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not self.verbose,
                                               leave=False)):
                try:
                    loss = self.train_step(batch)
                except NumericError as e:
                    loss = float('nan')
                    logger.debug("numeric failure: %s", e)
                if not np.isfinite(loss):
                    self._set_state(TrainState.FAILED)
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {index}; {_param_stats(self.params)}")
                total += loss * len(batch)
            record = EpochRecord(epoch, total / len(examples), time.perf_counter() - started)
            if self.checkpoint_dir:
                record.checkpoint_path = os.path.join(self.checkpoint_dir, f"epoch_{epoch}.ckpt")
                save_checkpoint(record.checkpoint_path, self.params, self.vocab_digest,
                                {'epoch': epoch, 'seed': c.seed})
            self.log.records.append(record)
            logger.info("epoch %d: mean loss %.5f (%.1fs)", epoch, record.mean_loss, record.seconds)
            if self.on_epoch_complete:
                self.on_epoch_complete(record, self.params)

        self._set_state(TrainState.FINISHED)
        return self.log


def train(kind: str, params: ModelParams, examples: Sequence[Example], config: TrainConfig,
          checkpoint_dir: Optional[str] = None, vocab_digest: Optional[str] = None,
          on_epoch_complete: Optional[Callable[[EpochRecord, ModelParams], None]] = None,
          verbose: bool = False) -> TrainLog:
    """Train params in place for config.epochs epochs and return the loss log."""
    if kind != params.kind:
        raise ValueError(f"asked to train a {kind}-rnn but got {params.kind}-rnn parameters")
    trainer = Trainer(params, config, checkpoint_dir, vocab_digest, verbose)
    trainer.on_epoch_complete = on_epoch_complete
    return trainer.run(examples)
