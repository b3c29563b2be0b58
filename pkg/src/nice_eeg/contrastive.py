"""Symmetric image/EEG contrastive loss, Adam, and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoders import EncoderParams, HyperParams, encode, init_params, tsconv_backward, tsconv_forward

log = logging.getLogger(__name__)


class NormalizationError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Training aborted; ``last_good`` holds the parameters before the failing step."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    batch_size: int = 1000
    epochs: int = 200
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    n_val: int = 740
    seed: int = 0
    max_scale: float | None = 100.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass
class TrainState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    best_params: EncoderParams | None = None
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def normalize_rows(F):
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot normalise a zero-norm row")
    return F / norms


def normalize_rows_backward(dY, Y, norms):
    """Gradient through ``Y = F / |F|`` given the normalised rows and the norms."""
    return (dY - Y * np.sum(dY * Y, axis=1, keepdims=True)) / norms


def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def info_nce(E_f, I_f, t):
    """Symmetric cross-entropy over scaled cosine similarities.

    ``logits = E_f @ I_f.T * exp(t)``; the target of row ``i`` and of column
    ``i`` is ``i``. Returns ``(loss, dlogits)``.
    """
    b = E_f.shape[0]
    if b < 2:
        warnings.warn("contrastive loss on a batch of one is uninformative", RuntimeWarning)
    logits = (E_f @ I_f.T) * np.exp(t)
    lsm_rows = _log_softmax(logits, axis=1)
    lsm_cols = _log_softmax(logits, axis=0)
    diag = np.arange(b)
    loss_rows = -lsm_rows[diag, diag].mean()
    loss_cols = -lsm_cols[diag, diag].mean()
    loss = 0.5 * (loss_rows + loss_cols)
    eye = np.eye(b, dtype=logits.dtype)
    dlogits = 0.5 * ((np.exp(lsm_rows) - eye) + (np.exp(lsm_cols) - eye)) / b
    # + 0.0 turns the -0.0 of a single-pair batch into 0.0
    return float(loss) + 0.0, dlogits


def info_nce_backward(dlogits, E_f, I_f, t):
    """Map d(logits) to gradients for the EEG rows and the log-temperature."""
    scale = np.exp(t)
    dE = (dlogits @ I_f) * scale
    dt = float(np.sum(dlogits * (E_f @ I_f.T)) * scale)
    return dE, dt


def adam_step(params: dict, grads: dict, state: TrainState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step}")
    state.step += 1
    c1 = 1 - cfg.beta1 ** state.step
    c2 = 1 - cfg.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        params[name] = (p - update).astype(p.dtype, copy=False)


def loss_and_grads(params: EncoderParams, eeg, img_f, mode="train"):
    """Forward, loss and full gradient for one batch.

    ``img_f`` must already be row-normalised. Returns ``(loss, grads, cache)``.
    """
    feats, cache = tsconv_forward(eeg, params, mode)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("encoder produced a zero feature vector")
    E_f = feats / norms
    t = params.tensors["logit_scale"]
    loss, dlogits = info_nce(E_f, img_f, t)
    dE, dt = info_nce_backward(dlogits, E_f, img_f, t)
    dfeat = normalize_rows_backward(dE, E_f, norms)
    grads = tsconv_backward(dfeat, cache, params.hyper)
    grads["logit_scale"] = np.asarray(dt, dtype=t.dtype)
    return loss, grads, cache


def contrastive_loss(params: EncoderParams, eeg, img_f, batch_size=1000) -> float:
    """Eval-mode loss over the whole set in one contrastive pass."""
    feats = encode(eeg, params, batch_size=batch_size)
    loss, _ = info_nce(normalize_rows(feats), img_f, params.tensors["logit_scale"])
    return loss


def train(train_ds, val_ds, hyper: HyperParams, cfg: TrainConfig,
          log_path=None, init: EncoderParams | None = None, dtype=np.float32):
    """Fit the EEG encoder to frozen image features.

    ``train_ds``/``val_ds`` are :class:`~nice_eeg.data_io.PairedDataset`.
    Returns the parameters with the lowest validation loss and the final
    :class:`TrainState`.
    """
    x_tr, f_tr = train_ds.arrays(dtype)
    x_va, f_va = val_ds.arrays(dtype)
    f_tr = normalize_rows(f_tr)
    f_va = normalize_rows(f_va)
    params = init if init is not None else init_params(hyper, cfg.seed, dtype)
    state = TrainState()
    rng = np.random.default_rng(cfg.seed)
    n = len(x_tr)
    log_fh = open(log_path, "a") if log_path else None
    max_t = np.log(cfg.max_scale) if cfg.max_scale else None
    try:
        for epoch in range(cfg.epochs):
            tic = time.perf_counter()
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                last_good = params.copy()
                loss, grads, cache = loss_and_grads(params, x_tr[idx], f_tr[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"loss became {loss} at epoch {epoch}", last_good)
                try:
                    adam_step(params.tensors, grads, state, cfg)
                except TrainingError as exc:
                    exc.last_good = last_good
                    raise
                params.buffers = cache.buffers
                if max_t is not None and params.tensors["logit_scale"] > max_t:
                    params.tensors["logit_scale"] = np.asarray(max_t, dtype=dtype)
                losses.append(loss)
            val = contrastive_loss(params, x_va, f_va)
            train_loss = float(np.mean(losses)) if losses else math.nan
            state.train_loss.append(train_loss)
            state.val_loss.append(val)
            state.epoch = epoch + 1
            if val < state.best_val_loss:
                state.best_val_loss = val
                state.best_epoch = epoch
                state.best_params = params.copy()
            record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val,
                      "exp_t": params.scale, "seconds": time.perf_counter() - tic}
            log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    best = state.best_params if state.best_params is not None else params
    return best, state
