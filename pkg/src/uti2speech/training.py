"""Speaker-specific training: AdamW, cosine-decay-restarts schedule, early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import CorpusSplit, UltrasoundRecording
from .dsp import MelStats, extract_mel, preprocess_frames, standardize_mel
from .errors import ConfigurationError, DivergenceError, InsufficientDataError, NumericInputError
from .models import ModelSpec, build_model

log = logging.getLogger(__name__)


@dataclass
class TrainingSchedule:
    """Cosine-decay-restarts law: cycles grow 5x, peaks decay 0.9x per cycle."""

    lr_initial: float = 1e-4
    first_cycle_steps: int = 100
    cycle_growth: int = 5
    peak_decay: float = 0.9
    lr_min: float = 1e-5

    def __post_init__(self):
        if not self.lr_min < self.lr_initial:
            raise ConfigurationError("lr_min must be below lr_initial")
        if self.cycle_growth < 1 or self.first_cycle_steps < 1:
            raise ConfigurationError("cycle_growth and first_cycle_steps must be >= 1")


@dataclass
class TrainerConfig:
    batch_size: int = 128
    max_epochs: int = 20
    patience: int = 3
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size, patience and max_epochs must be >= 1")


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    dev_mse: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def save(self, path: str | Path) -> None:
        """Line-delimited records: one per epoch plus a summary line."""
        with Path(path).open("w") as fh:
            steps_per_epoch = len(self.lr_trace) // max(1, len(self.train_loss))
            for epoch, (loss, dev, seconds) in enumerate(
                zip(self.train_loss, self.dev_mse, self.epoch_seconds), start=1
            ):
                lo = (epoch - 1) * steps_per_epoch
                record = {
                    "epoch": epoch,
                    "train_loss": loss,
                    "dev_mse": dev,
                    "seconds": seconds,
                    "lr_start": self.lr_trace[lo] if self.lr_trace else None,
                }
                fh.write(json.dumps(record) + "\n")
            fh.write(
                json.dumps(
                    {
                        "stopped_epoch": self.stopped_epoch,
                        "best_epoch": self.best_epoch,
                        "best_dev_mse": min(self.dev_mse) if self.dev_mse else None,
                    }
                )
                + "\n"
            )


def learning_rate_at(step: int, schedule: TrainingSchedule) -> float:
    """Learning rate for a global step counter (per-batch steps)."""
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    cycle_len = schedule.first_cycle_steps
    peak = schedule.lr_initial
    remaining = step
    while remaining >= cycle_len:
        remaining -= cycle_len
        cycle_len *= schedule.cycle_growth
        peak *= schedule.peak_decay
    peak = max(peak, schedule.lr_min)
    return schedule.lr_min + (peak - schedule.lr_min) * 0.5 * (
        1.0 + math.cos(math.pi * remaining / cycle_len)
    )


class AdamW(torch.optim.Optimizer):
    """Adam with bias correction and decoupled multiplicative weight decay."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        # Validate first so a bad batch never corrupts parameters or state.
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    log.warning("non-finite gradient encountered; optimizer step skipped")
                    raise NumericInputError("non-finite gradient; step skipped")
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)

                if group["weight_decay"] != 0:
                    p.mul_(1.0 - group["lr"] * group["weight_decay"])

                bias_correction1 = 1 - beta1 ** state["step"]
                bias_correction2 = 1 - beta2 ** state["step"]
                denom = (exp_avg_sq / bias_correction2).sqrt_().add_(group["eps"])
                p.addcdiv_(exp_avg, denom, value=-group["lr"] / bias_correction1)
        return loss


def optimizer_step(optimizer: AdamW, lr: float) -> None:
    """Apply one update at the given rate; skips and raises on non-finite grads."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


class EarlyStopper:
    """Stop after `patience` consecutive epochs without dev improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedUtterance:
    frames: np.ndarray  # (T, 64, 128) float32, normalized pixels
    mel: np.ndarray  # (T, 80) standardized log-mel


@dataclass
class PreparedCorpus:
    utterances: dict[str, PreparedUtterance]
    stats: MelStats
    fps: float
    sample_rate: int

    def stack(self, utterance_ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
        frames = np.concatenate([self.utterances[u].frames for u in utterance_ids], axis=0)
        mels = np.concatenate([self.utterances[u].mel for u in utterance_ids], axis=0)
        return frames, mels


def prepare_corpus(
    recordings: list[UltrasoundRecording],
    split: CorpusSplit,
    stats: MelStats | None = None,
) -> PreparedCorpus:
    """Preprocess frames, extract mels, standardize with train-set statistics."""
    by_id = {r.utterance_id: r for r in recordings}
    missing = [u for u in split.all_utterances() if u not in by_id]
    if missing:
        raise InsufficientDataError(f"split references unknown utterances: {missing[:3]}")

    frames = {}
    raw_mels = {}
    for utt in split.all_utterances():
        rec = by_id[utt]
        frames[utt] = preprocess_frames(rec.frames)
        raw_mels[utt] = extract_mel(rec.audio, rec.fps, rec.n_frames)
    if stats is None:
        stats = MelStats.from_mels([raw_mels[u] for u in split.train])

    utterances = {
        utt: PreparedUtterance(frames=frames[utt], mel=standardize_mel(raw_mels[utt], stats).values)
        for utt in split.all_utterances()
    }
    sample = by_id[split.all_utterances()[0]]
    return PreparedCorpus(
        utterances=utterances,
        stats=stats,
        fps=sample.fps,
        sample_rate=sample.audio.sample_rate,
    )


# ---------------------------------------------------------------------------
# Training loop


def _evaluate_mse(model: torch.nn.Module, frames: np.ndarray, mels: np.ndarray) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, frames.shape[0], 512):
            x = torch.as_tensor(frames[start : start + 512], dtype=torch.float32)
            y = torch.as_tensor(mels[start : start + 512], dtype=torch.float32)
            pred = model(x)
            total += float(((pred - y) ** 2).sum())
    return total / (frames.shape[0] * mels.shape[1])


def train(
    spec: ModelSpec,
    corpus: PreparedCorpus,
    split: CorpusSplit,
    schedule: TrainingSchedule | None = None,
    config: TrainerConfig | None = None,
    seed: int = 0,
) -> tuple[torch.nn.Module, TrainingHistory]:
    """Train one speaker-specific model; returns the best-dev checkpoint."""
    schedule = schedule or TrainingSchedule()
    config = config or TrainerConfig()
    if not split.train or not split.dev:
        raise InsufficientDataError("split must provide train and dev utterances")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = build_model(spec)
    optimizer = AdamW(model.parameters(), lr=schedule.lr_initial, weight_decay=config.weight_decay)

    train_frames, train_mels = corpus.stack(split.train)
    dev_frames, dev_mels = corpus.stack(split.dev)
    n_train = train_frames.shape[0]

    history = TrainingHistory()
    stopper = EarlyStopper(config.patience)
    best_state = None
    global_step = 0

    for epoch in range(1, config.max_epochs + 1):
        epoch_start = time.perf_counter()
        model.train()
        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = torch.as_tensor(train_frames[batch], dtype=torch.float32)
            y = torch.as_tensor(train_mels[batch], dtype=torch.float32)
            lr = learning_rate_at(global_step, schedule)
            optimizer.zero_grad(set_to_none=True)
            loss = torch.nn.functional.mse_loss(model(x), y)
            if not torch.isfinite(loss):
                history.stopped_epoch = epoch
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {global_step}", history=history
                )
            loss.backward()
            optimizer_step(optimizer, lr)
            history.lr_trace.append(lr)
            loss_sum += float(loss) * len(batch)
            global_step += 1

        train_loss = loss_sum / n_train
        dev_mse = _evaluate_mse(model, dev_frames, dev_mels)
        history.train_loss.append(train_loss)
        history.dev_mse.append(dev_mse)
        history.epoch_seconds.append(time.perf_counter() - epoch_start)
        history.stopped_epoch = epoch
        log.info(
            "epoch %d/%d train_loss %.5f dev_mse %.5f (%.1fs)",
            epoch,
            config.max_epochs,
            train_loss,
            dev_mse,
            history.epoch_seconds[-1],
        )

        if dev_mse < stopper.best:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if stopper.update(dev_mse, epoch):
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    history.best_epoch = stopper.best_epoch
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history
