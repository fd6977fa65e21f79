"""Training loop: Adam steps, per-epoch validation, checkpoint-on-best, LR decay, early stop."""

import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, load_weights, model_weights, save_checkpoint
from .data import batch_iterator
from .metrics import MetricSpec, evaluate_model, loss_tensor
from .optim import AdamState, SchedulerState, adam_step, clip_global_norm, scheduler_update

log = logging.getLogger(__name__)

BEST_NAME = "best.w4ck"
LAST_NAME = "last.w4ck"
HISTORY_NAME = "history.tsv"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    target: str = "temperature"
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = None
    augment: bool = True
    logit_epsilon: float = 1e-3
    budget_epochs: int = 100
    budget_hours: float = None
    threads: int = 1
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    lr: float
    checkpointed: bool

    def row(self):
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_metric!r}\t{self.lr!r}\t{int(self.checkpointed)}"


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    stop_reason: str = ""


def write_history(path, history, append=False):
    new = not (append and os.path.exists(path))
    with open(path, "a" if append else "w") as f:
        if new:
            f.write("epoch\ttrain_loss\tval_metric\tlr\tcheckpointed\n")
        for rec in history:
            f.write(rec.row() + "\n")


class Trainer:
    """Holds the optimizer state for ``model`` and applies batch updates."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.names = [n for n, _ in model.named_parameters()]
        self.params = model.parameters()
        self.train_spec = MetricSpec.for_variable(cfg.target, cfg.logit_epsilon, training=True)
        self.val_spec = MetricSpec.for_variable(cfg.target, cfg.logit_epsilon)
        self.adam = AdamState.for_params(
            [p.data for p in self.params], lr=cfg.learning_rate,
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
        )
        self.sched = SchedulerState(lr=cfg.learning_rate)

    def _shard_grads(self, inputs, targets, mask):
        loss = loss_tensor(self.train_spec, self.model(inputs), targets, mask)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite training loss {value} at step {self.adam.t + 1}")
        return value, T.grad(loss, self.params)

    def gradients(self, batch):
        """Batch loss and parameter gradients, sharded over threads if configured."""
        dtype = self.model.dtype
        inputs = batch.inputs.astype(dtype, copy=False)
        targets = batch.targets.astype(dtype, copy=False)
        n = len(inputs)
        shards = min(max(1, self.cfg.threads), n)
        if shards == 1:
            return self._shard_grads(inputs, targets, batch.mask)
        bounds = np.linspace(0, n, shards + 1).astype(int)
        parts = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=shards) as pool:
            results = list(pool.map(
                lambda b: self._shard_grads(inputs[b[0]:b[1]], targets[b[0]:b[1]], batch.mask[b[0]:b[1]]),
                parts,
            ))
        # fixed shard order: the sum does not depend on thread scheduling
        loss = 0.0
        grads = [np.zeros_like(p.data) for p in self.params]
        for (lo, hi), (l_s, g_s) in zip(parts, results):
            w = (hi - lo) / n
            loss += w * l_s
            for acc, g in zip(grads, g_s):
                acc += g * g.dtype.type(w)
        return loss, grads

    def step(self, batch):
        """One optimizer update; returns the pre-update batch loss."""
        loss, grads = self.gradients(batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss {loss} at step {self.adam.t + 1}")
        if self.cfg.clip_norm is not None:
            grads, _ = clip_global_norm(grads, self.cfg.clip_norm)
        self.adam.lr = self.sched.lr
        adam_step([p.data for p in self.params], grads, self.adam, names=self.names)
        return loss

    def snapshot(self, metric=float("nan"), epoch=0):
        cfg_echo = json.dumps(
            {"model": self.model.config.to_dict(), "train": dataclasses.asdict(self.cfg)}, sort_keys=True
        )
        adam = AdamState(
            lr=self.adam.lr, beta1=self.adam.beta1, beta2=self.adam.beta2, eps=self.adam.eps,
            t=self.adam.t, m=[m.copy() for m in self.adam.m], v=[v.copy() for v in self.adam.v],
        )
        return Checkpoint(
            weights=model_weights(self.model), adam=adam,
            scheduler=dataclasses.replace(self.sched), config=cfg_echo, metric=metric, epoch=epoch,
        )

    def restore(self, ckpt):
        load_weights(self.model, ckpt.weights)
        dt = [p.dtype for p in self.params]
        self.adam = AdamState(
            lr=ckpt.adam.lr, beta1=ckpt.adam.beta1, beta2=ckpt.adam.beta2, eps=ckpt.adam.eps,
            t=ckpt.adam.t,
            m=[np.array(m, dtype=d) for m, d in zip(ckpt.adam.m, dt)] or [np.zeros_like(p.data) for p in self.params],
            v=[np.array(v, dtype=d) for v, d in zip(ckpt.adam.v, dt)] or [np.zeros_like(p.data) for p in self.params],
        )
        self.sched = dataclasses.replace(ckpt.scheduler)


def fit_steps(model, windows, cfg, steps, stop_below=None):
    """Run up to ``steps`` optimizer updates over repeated epochs, without validation.

    Returns the per-step (pre-update) batch losses. With ``stop_below`` set,
    stops after the first step whose loss is under that value.
    """
    trainer = Trainer(model, cfg)
    losses = []
    epoch = 0
    while len(losses) < steps:
        for batch in batch_iterator(windows, cfg.batch_size, cfg.seed, cfg.augment, epoch=epoch):
            losses.append(trainer.step(batch))
            if len(losses) == steps or (stop_below is not None and losses[-1] < stop_below):
                return losses
        epoch += 1
    return losses


def train(model, train_windows, val_windows, cfg, out_dir=None, resume=None):
    """Full protocol; one epoch is one shuffled (augmented) pass over ``train_windows``.

    After every epoch the validation metric drives the scheduler; strict
    improvements are saved as the best checkpoint. ``out_dir`` receives
    best/last checkpoints and the history table. ``resume`` is a checkpoint
    (or path) to continue from.
    """
    if not train_windows or not val_windows:
        raise ValueError("train: training and validation sets must be non-empty")
    trainer = Trainer(model, cfg)
    start_epoch = 0
    best = None
    if resume is not None:
        ckpt = load_checkpoint(resume) if isinstance(resume, (str, os.PathLike)) else resume
        trainer.restore(ckpt)
        start_epoch = ckpt.epoch
        if out_dir and os.path.exists(os.path.join(out_dir, BEST_NAME)):
            best = load_checkpoint(os.path.join(out_dir, BEST_NAME))
    if best is None:
        best = trainer.snapshot(epoch=start_epoch)
    last = trainer.snapshot(epoch=start_epoch)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if resume is None:
            save_checkpoint(last, os.path.join(out_dir, LAST_NAME))

    result = TrainResult(best=best, last=last)
    deadline = None if cfg.budget_hours is None else time.monotonic() + 3600 * cfg.budget_hours
    if trainer.sched.stopped:
        result.stop_reason = "early stop"
        return result
    for epoch in range(start_epoch, cfg.budget_epochs):
        if deadline is not None and time.monotonic() >= deadline:
            result.stop_reason = "time budget"
            break
        losses = []
        for batch in batch_iterator(train_windows, cfg.batch_size, cfg.seed, cfg.augment, epoch=epoch,
                                    workers=max(0, cfg.threads - 1)):
            losses.append(trainer.step(batch))
        result.step_losses.extend(losses)
        metric = evaluate_model(model, val_windows, trainer.val_spec)
        if not math.isfinite(metric):
            raise TrainingDiverged(f"non-finite validation metric at epoch {epoch}")
        trainer.sched = scheduler_update(trainer.sched, metric)
        rec = EpochRecord(epoch, float(np.mean(losses)), metric, trainer.sched.lr, trainer.sched.improved)
        result.history.append(rec)
        log.info("epoch %d train %.6g val %.6g lr %.3g%s", epoch, rec.train_loss, metric, rec.lr,
                 " *" if rec.checkpointed else "")
        last = trainer.snapshot(metric=metric, epoch=epoch + 1)
        result.last = last
        if trainer.sched.improved:
            result.best = last
        if out_dir:
            if trainer.sched.improved:
                save_checkpoint(last, os.path.join(out_dir, BEST_NAME))
            save_checkpoint(last, os.path.join(out_dir, LAST_NAME))
            write_history(os.path.join(out_dir, HISTORY_NAME), [rec], append=epoch > 0)
        if trainer.sched.stopped:
            result.stop_reason = "early stop"
            break
    else:
        result.stop_reason = result.stop_reason or "epoch budget"
    if out_dir and not os.path.exists(os.path.join(out_dir, BEST_NAME)):
        save_checkpoint(result.best, os.path.join(out_dir, BEST_NAME))
    return result
