"""Adam training loop, epoch logging and checkpoint persistence.

Checkpoints are a binary container: magic ``EFCK``, a u16 format
version, a length-prefixed JSON header (config, normalization stats,
tensor directory) and a raw little-endian float32 parameter payload.
Parameters are rounded to float32 at save time so a save/load roundtrip
reproduces eval-mode outputs bit-identically.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .dataset import (ImageCache, NormStats, apply_norm, batch_iter,
                      fit_norm_stats, train_val_split)
from .model import LAYER_ORDER, ModelConfig, Parameters, init_parameters, model_forward

CHECKPOINT_MAGIC = b"EFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class TrainingError(RuntimeError):
    """Training aborted (NaN loss, empty split, ...)."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch: int = 64
    epochs: int = 100
    seed: int = 0
    val_fraction: float = 0.2

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (batch-norm train mode)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        return self


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


class Adam:
    """Adam with coupled L2 weight decay (g <- g + wd * w)."""

    def __init__(self, params, cfg):
        self.cfg = cfg
        self._params = params.trainable()
        self.m = {n: np.zeros_like(t.data) for n, t in self._params}
        self.v = {n: np.zeros_like(t.data) for n, t in self._params}
        self.t = 0

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self._params:
            if p.grad is None:
                raise TrainingError(f"missing gradient for parameter {name!r}")
            if p.grad.shape != p.data.shape:
                raise TrainingError(f"gradient shape mismatch for {name!r}")
            g = p.grad + c.weight_decay * p.data
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - c.lr * m_hat / (np.sqrt(v_hat) + c.eps_adam)


def _run_split(entries, table, cache, params, model_cfg, train_cfg,
               optimizer, shuffle_rng, dropout_rng, epoch_tag):
    """One pass over a split; trains when an optimizer is given."""
    total_loss, total_correct, total_n = 0.0, 0, 0
    mode = "train" if optimizer is not None else "eval"
    for batch_idx, (imgs, feats, labels, _ids) in enumerate(
        batch_iter(entries, table, cache, train_cfg.batch, shuffle_rng)
    ):
        dt = params.dtype
        x_img = T.Tensor(imgs.astype(dt))
        x_feat = T.Tensor(feats.astype(dt))
        if optimizer is not None:
            params.zero_grads()
            with T.Tape() as tape:
                logits = model_forward(x_img, x_feat, params, model_cfg,
                                       mode, dropout_rng)
                loss = T.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"non-finite loss at {epoch_tag}, batch {batch_idx}"
                )
            T.backward(loss, tape)
            optimizer.step()
        else:
            logits = model_forward(x_img, x_feat, params, model_cfg, mode)
            loss = T.softmax_cross_entropy(logits, labels)
        n = len(labels)
        total_loss += float(loss.data) * n
        total_correct += int((logits.data.argmax(axis=1) == labels).sum())
        total_n += n
    return total_loss / total_n, total_correct / total_n


def train_epoch(entries, table, cache, params, model_cfg, train_cfg,
                optimizer, epoch):
    shuffle_rng = np.random.default_rng([train_cfg.seed, epoch, 0])
    dropout_rng = np.random.default_rng([train_cfg.seed, epoch, 1])
    return _run_split(entries, table, cache, params, model_cfg, train_cfg,
                      optimizer, shuffle_rng, dropout_rng, f"epoch {epoch}")


def eval_split(entries, table, cache, params, model_cfg, train_cfg):
    rng = np.random.default_rng(0)  # order irrelevant in eval
    return _run_split(entries, table, cache, params, model_cfg, train_cfg,
                      None, rng, None, "eval")


def write_epoch_log(logs, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
        for r in logs:
            fh.write(
                f"{r.epoch},{r.train_loss:.17g},{r.train_acc:.17g},"
                f"{r.val_loss:.17g},{r.val_acc:.17g}\n"
            )


def fit(model_cfg, train_cfg, manifest, table, out_dir, data_root,
        progress=None):
    """Full training run; returns (final params, norm stats, epoch logs).

    Writes ``train_log.csv``, ``final.ckpt`` and ``best.ckpt`` (highest
    validation accuracy) under out_dir.
    """
    train_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    ids = [p for p, _ in manifest.entries]
    train_ids, val_ids = train_val_split(ids, train_cfg.val_fraction,
                                         train_cfg.seed)
    if not train_ids or not val_ids:
        raise TrainingError("empty train or validation split")
    by_id = dict(manifest.entries)
    train_entries = [(p, by_id[p]) for p in train_ids]
    val_entries = [(p, by_id[p]) for p in val_ids]

    stats = fit_norm_stats(table, train_ids)
    normed = apply_norm(table, stats)
    model_cfg.d_in = len(stats.columns)
    model_cfg.num_classes = manifest.num_classes
    model_cfg.validate()

    params = init_parameters(model_cfg, seed=train_cfg.seed,
                             dtype=np.float32)
    optimizer = Adam(params, train_cfg)
    cache = ImageCache(data_root, model_cfg.input_side)

    logs = []
    best_acc, best_params, best_epoch = -1.0, None, -1
    for epoch in range(train_cfg.epochs):
        tr_loss, tr_acc = train_epoch(train_entries, normed, cache, params,
                                      model_cfg, train_cfg, optimizer, epoch)
        va_loss, va_acc = eval_split(val_entries, normed, cache, params,
                                     model_cfg, train_cfg)
        logs.append(EpochLog(epoch, tr_loss, tr_acc, va_loss, va_acc))
        if progress is not None:
            progress(logs[-1])
        if va_acc > best_acc:
            best_acc, best_params, best_epoch = va_acc, params.copy(), epoch

    write_epoch_log(logs, os.path.join(out_dir, "train_log.csv"))
    save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_params,
                    model_cfg, stats, train_cfg.seed, best_epoch)
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), params, model_cfg,
                    stats, train_cfg.seed, train_cfg.epochs - 1)
    return params, stats, logs


def save_checkpoint(path, params, model_cfg, norm_stats, seed, epoch):
    """Serialize parameters + normalization stats + config.

    Parameter tensors are rounded to float32 in place: the stored and
    live values are then identical, making the roundtrip exact.
    """
    directory = []
    offset = 0
    for name, t in params.items():
        t.data = t.data.astype(np.float32)
        directory.append({
            "name": name,
            "shape": list(t.data.shape),
            "trainable": t.requires_grad,
            "offset": offset,
        })
        offset += t.data.size
    header = {
        "config": model_cfg.to_dict(),
        "layer_order": LAYER_ORDER,
        "norm_columns": norm_stats.columns,
        "norm_mean": norm_stats.mean.tolist(),
        "norm_std": norm_stats.std.tolist(),
        "norm_dropped": norm_stats.dropped,
        "seed": seed,
        "epoch": epoch,
        "tensors": directory,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _name, t in params.items():
            fh.write(t.data.astype("<f4").tobytes())


def _read_header(fh, path):
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    raw = fh.read(2)
    if len(raw) < 2:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack("<H", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    raw = fh.read(4)
    if len(raw) < 4:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw)
    blob = fh.read(hlen)
    if len(blob) < hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(blob.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid header JSON: {exc}")


def read_checkpoint_header(path):
    """Header-only inspection: returns the parsed JSON header."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_checkpoint(path):
    """Returns (params, model_cfg, norm_stats, seed, epoch)."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = np.frombuffer(fh.read(), dtype="<f4")
    n_values = sum(int(np.prod(e["shape"])) for e in header["tensors"])
    if payload.size != n_values:
        raise CheckpointError(f"{path}: truncated parameter payload")
    params = Parameters()
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        data = payload[entry["offset"] : entry["offset"] + n].astype(np.float32)
        params.add(entry["name"], data.reshape(entry["shape"]),
                   trainable=entry["trainable"])
    cfg = ModelConfig.from_dict(header["config"])
    stats = NormStats(
        columns=list(header["norm_columns"]),
        mean=np.array(header["norm_mean"], dtype=np.float64),
        std=np.array(header["norm_std"], dtype=np.float64),
        dropped=list(header["norm_dropped"]),
    )
    return params, cfg, stats, header["seed"], header["epoch"]
