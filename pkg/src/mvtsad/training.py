"""Masked-reconstruction training on normal-only windows.

Each step draws fresh masks per window, zeroes the masked cells of the input,
and minimises squared reconstruction error pooled over all masked cells in
the batch. After every epoch a validation loss (fixed per-window mask seeds,
dropout off, running batch-norm statistics) is computed; the parameters with
the lowest validation loss are returned, with early stopping after
``patience`` non-improving epochs.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import file_sha256, save_checkpoint
from .dataprep import SPLIT_TRAIN, SPLIT_VAL
from .errors import ParameterError, TrainingError
from .masking import MaskSpec, make_mask, train_mask_rng, val_mask_rng
from .model import forward, init_params

_DROPOUT_TAG = 0xD0
_SHUFFLE_TAG = 0x5F


@dataclass(frozen=True)
class TrainConfig:
    mask: MaskSpec = field(default_factory=MaskSpec)
    batch_size: int = 64
    max_epochs: int = 200
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    seed: int = 0

    def validate(self):
        self.mask.validate()
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ParameterError(f"max_epochs must be >= 1, got {self.max_epochs}")
        # rate 0 is allowed so tests can freeze the model and probe early stopping
        if self.learning_rate < 0.0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.seed < 0:
            raise ParameterError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    train_losses: list
    val_losses: list
    best_epoch: int  # 1-based
    checkpoint_path: str
    wall_clock_s: float
    stopped_early: bool

    @property
    def best_val_loss(self):
        return self.val_losses[self.best_epoch - 1]


def masked_mse(x, x_hat, mask):
    """Mean squared error over masked cells only; gradient reaches only those.

    Works on one (time, channels) window or a batch; for a batch the mean
    pools every masked cell uniformly (total squared error / total count).
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise TrainingError("masked_mse needs at least one masked cell")
    if not isinstance(x_hat, Tensor):
        x_hat = Tensor(x_hat)
    if x_hat.shape != mask.shape:
        raise ParameterError(f"mask shape {mask.shape} does not match prediction {x_hat.shape}")
    target = Tensor(np.asarray(x, dtype=x_hat.dtype))
    if target.shape != x_hat.shape:
        raise ParameterError(f"target shape {target.shape} does not match prediction {x_hat.shape}")
    mask_f = Tensor(mask.astype(x_hat.dtype))
    diff = ad.mul(ad.sub(x_hat, target), mask_f)
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / count)


class Adam:
    """Moment-based adaptive gradient rule with bias correction."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = named_params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _snapshot(params):
    arrays = {k: t.data.copy() for k, t in params.named_parameters().items()}
    arrays.update({k: a.copy() for k, a in params.named_state().items()})
    return arrays


def _restore(params, arrays):
    for k, t in params.named_parameters().items():
        t.data[...] = arrays[k]
    for k, a in params.named_state().items():
        a[...] = arrays[k]


def _check_normal_only(labels, what):
    if np.any(np.asarray(labels) != 0):
        bad = int(np.flatnonzero(np.asarray(labels) != 0)[0])
        raise TrainingError(
            f"unsupervised training requires label-0 windows only; "
            f"{what} window at position {bad} is labelled anomalous"
        )


def _pooled_loss(params, windows, indices, mask_spec, seed, batch_size):
    """Validation loss: per-window seeded masks, inference mode, cell-pooled."""
    total_sq = 0.0
    total_count = 0
    with ad.no_grad():
        for lo in range(0, len(indices), batch_size):
            batch = indices[lo : lo + batch_size]
            x = windows[batch]
            masks = np.stack(
                [make_mask(x.shape[1], x.shape[2], mask_spec, val_mask_rng(seed, int(wi))) for wi in batch]
            )
            x_in = np.where(masks, 0.0, x).astype(x.dtype)
            recon, _ = forward(params, x_in, training=False)
            sq = ((recon.data - x) ** 2)[masks]
            total_sq += float(sq.sum(dtype=np.float64))
            total_count += int(masks.sum())
    return total_sq / total_count


def train(window_set, model_config, train_config, checkpoint_path):
    """Fit the autoencoder on the train split, select by validation loss.

    ``window_set`` must carry only label-0 windows in its train and val
    splits; any anomalous window is a hard error, which guards the
    unsupervised contract. Returns ``(params, TrainReport)`` and writes the
    best checkpoint plus a JSON run manifest next to it.
    """
    t0 = time.perf_counter()
    model_config.validate()
    train_config.validate()
    split = np.asarray(window_set.split)
    labels = np.asarray(window_set.labels)
    train_idx = np.flatnonzero(split == SPLIT_TRAIN)
    val_idx = np.flatnonzero(split == SPLIT_VAL)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ParameterError(
            f"training needs non-empty train and val splits, got {len(train_idx)}/{len(val_idx)}"
        )
    _check_normal_only(labels[train_idx], "train-split")
    _check_normal_only(labels[val_idx], "val-split")

    windows = np.asarray(window_set.windows, dtype=np.float32)
    n_time, n_ch = windows.shape[1], windows.shape[2]
    if (n_time, n_ch) != (model_config.window_len, model_config.n_channels):
        raise ParameterError(
            f"window shape {(n_time, n_ch)} does not match model config "
            f"{(model_config.window_len, model_config.n_channels)}"
        )

    params = init_params(model_config)
    named = params.named_parameters()
    opt = Adam(
        named,
        lr=train_config.learning_rate,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.adam_eps,
    )
    dropout_rng = np.random.default_rng(np.random.SeedSequence([train_config.seed, _DROPOUT_TAG]))
    mask_spec = train_config.mask

    train_losses = []
    val_losses = []
    best_val = np.inf
    best_epoch = 0
    best_arrays = None
    bad_epochs = 0
    stopped_early = False

    for epoch in range(1, train_config.max_epochs + 1):
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([train_config.seed, _SHUFFLE_TAG, epoch])
        )
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        epoch_sq = 0.0
        epoch_count = 0
        for lo in range(0, len(order), train_config.batch_size):
            batch = order[lo : lo + train_config.batch_size]
            x = windows[batch]
            masks = np.stack(
                [
                    make_mask(n_time, n_ch, mask_spec, train_mask_rng(train_config.seed, epoch, int(wi)))
                    for wi in batch
                ]
            )
            x_in = np.where(masks, 0.0, x).astype(np.float32)
            recon, _ = forward(params, x_in, training=True, rng=dropout_rng)
            loss = masked_mse(x, recon, masks)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite training loss {loss_val} at epoch {epoch}, "
                    f"batch starting at window {int(batch[0])}"
                )
            ad.zero_grads(named)
            loss.backward()
            opt.step()
            count = int(masks.sum())
            epoch_sq += loss_val * count
            epoch_count += count
        train_losses.append(epoch_sq / epoch_count)

        val_loss = _pooled_loss(
            params, windows, val_idx, mask_spec, train_config.seed, train_config.batch_size
        )
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_arrays = _snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= train_config.patience:
                stopped_early = True
                break

    _restore(params, best_arrays)
    save_checkpoint(params, checkpoint_path)
    report = TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=best_epoch,
        checkpoint_path=str(checkpoint_path),
        wall_clock_s=time.perf_counter() - t0,
        stopped_early=stopped_early,
    )
    return params, report


def thread_info():
    """Worker-thread context recorded in manifests for reproducibility."""
    return {
        "mvts_threads": os.environ.get("MVTS_THREADS"),
        "cpu_count": os.cpu_count(),
    }


def write_run_manifest(path, model_config, train_config, report, effective_config=None):
    manifest = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "seed": train_config.seed,
        "threads": thread_info(),
        "train_losses": report.train_losses,
        "val_losses": report.val_losses,
        "best_epoch": report.best_epoch,
        "checkpoint": report.checkpoint_path,
        "checkpoint_sha256": file_sha256(report.checkpoint_path),
        "wall_clock_s": report.wall_clock_s,
        "stopped_early": report.stopped_early,
    }
    if effective_config is not None:
        manifest["effective_config"] = effective_config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
