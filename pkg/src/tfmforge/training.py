"""Supervised training loop: MSE loss, Adam, step decay, early stopping.

The loop is deterministic for a fixed seed when run single-threaded: data
shuffling and dropout draw from labelled RNG streams, and gradient reduction
follows tape creation order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .fileio import TensorFileError, tensor_from_bytes, tensor_to_bytes
from .layers import ParamSet
from .rng import RngStream
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 0.0002
    gamma: float = 0.9
    decay_period: int = 40
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or not 0 < self.gamma <= 1 or self.patience < 1:
            raise ValueError(f"invalid training config {self}")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all field components (per-sample 1/(2N^2) sum,
    averaged over the batch when inputs are batched)."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return T.tmean(T.mul(diff, diff))


def step_lr(epoch: int, lr0: float, gamma: float, period: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * gamma ** (epoch // period)


class AdamState:
    """Bias-corrected Adam moment buffers, one pair per parameter."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """In-place Adam update from the gradients accumulated on ``params``."""
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class EarlyStopState:
    """Best-weight retention with strict-improvement patience counting."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_val = np.inf
        self.best_epoch = -1
        self.best_params: dict[str, np.ndarray] | None = None
        self.since_improvement = 0

    def update(self, val_loss: float, params: ParamSet, epoch: int) -> str:
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_epoch = epoch
            self.best_params = {name: t.data.copy() for name, t in params.items()}
            self.since_improvement = 0
            return "continue"
        self.since_improvement += 1
        return "stop" if self.since_improvement >= self.patience else "continue"

    def restore(self, params: ParamSet) -> None:
        if self.best_params is None:
            return
        for name, t in params.items():
            t.data = self.best_params[name].copy()


def _forward_loss(model, u, f, cell_types, training, rng):
    ut = Tensor(u)
    ft = Tensor(f)
    if model.vocab is not None:
        pred = model.forward(ut, cell_type=cell_types, training=training, rng=rng)
    else:
        pred = model.forward(ut, training=training, rng=rng)
    return mse_loss(pred, ft)


def evaluate_loss(model, u, f, cell_types=None, batch_size: int = 8) -> float:
    """Validation loss with dropout disabled, averaged over all samples."""
    total = 0.0
    for start in range(0, len(u), batch_size):
        sl = slice(start, start + batch_size)
        ct = cell_types[sl] if cell_types is not None else None
        loss = _forward_loss(model, u[sl], f[sl], ct, training=False, rng=None)
        total += loss.item() * (len(u[sl]))
    return total / len(u)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    epochs_run: int = 0


def train(model, train_data, val_data, cfg: TrainConfig) -> TrainResult:
    """Run the training loop; the model retains its best-validation weights.

    ``train_data``/``val_data`` are (u, f, cell_types) triples of stacked
    dimensionless fields.
    """
    u_tr, f_tr, ct_tr = train_data
    u_va, f_va, ct_va = val_data
    if len(u_tr) == 0 or len(u_va) == 0:
        raise ValueError("train and val splits must be non-empty")
    stream = RngStream(cfg.seed, "train")
    opt = AdamState(model.params)
    stopper = EarlyStopState(cfg.patience)
    result = TrainResult()

    for epoch in range(cfg.max_epochs):
        lr = step_lr(epoch, cfg.lr0, cfg.gamma, cfg.decay_period)
        perm = stream.child(f"shuffle/{epoch}").permutation(len(u_tr))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            drop_rng = stream.child(f"dropout/{epoch}/{b}")
            model.params.zero_grad()
            loss = _forward_loss(model, u_tr[idx], f_tr[idx],
                                 ct_tr[idx] if ct_tr is not None else None,
                                 training=True, rng=drop_rng)
            loss.backward()
            adam_step(model.params, opt, lr)
            epoch_loss += loss.item() * len(idx)
        train_loss = epoch_loss / len(perm)
        val_loss = evaluate_loss(model, u_va, f_va, ct_va, cfg.batch_size)
        result.history.append({"epoch": epoch, "lr": lr,
                               "train_loss": train_loss, "val_loss": val_loss})
        result.epochs_run = epoch + 1
        if stopper.update(val_loss, model.params, epoch) == "stop":
            break

    stopper.restore(model.params)
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = float(stopper.best_val)
    return result


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["lr"]),
                             repr(row["train_loss"]), repr(row["val_loss"])])


# -- checkpoint container ------------------------------------------------


def save_checkpoint(path, model, config: dict, history=None, epoch: int = -1,
                    optimizer: AdamState | None = None) -> None:
    """Container: magic, version, JSON header, then named TFT1 records.

    Optimizer moment buffers are stored under the reserved ``__opt__.``
    prefix so parameter-name validation can ignore them on load.
    """
    import json

    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "model_kind": model.kind_full,
        "config": config,
        "epoch": epoch,
        "history": history or [],
        "optimizer_step": optimizer.step_count if optimizer else 0,
    }, sort_keys=True).encode()

    def record(fh, name, array):
        encoded = name.encode()
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(tensor_to_bytes(array))

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name, t in model.params.items():
            record(fh, name, t.data)
        if optimizer is not None:
            for name in model.params.names():
                record(fh, f"__opt__.m.{name}", optimizer.m[name])
                record(fh, f"__opt__.v.{name}", optimizer.v[name])


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, ordered name -> array map)."""
    import json

    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise TensorFileError(f"{path}: bad checkpoint magic at offset 0")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise TensorFileError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    offset = 12 + hlen
    records: dict[str, np.ndarray] = {}
    while offset < len(data):
        (nlen,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + nlen].decode()
        offset += nlen
        # TFT1 records are self-delimiting via their header
        code, rank = struct.unpack_from("<BBxx", data, offset + 4)
        shape = struct.unpack_from(f"<{rank}I", data, offset + 8)
        width = 4 if code == 1 else 8
        blob_len = 8 + 4 * rank + width * int(np.prod(shape))
        records[name] = tensor_from_bytes(data[offset:offset + blob_len],
                                          name=f"{path}:{name}")
        offset += blob_len
    return header, records


def load_checkpoint(path, model) -> dict:
    """Load parameters into ``model``, validating kind and name set."""
    header, records = read_checkpoint(path)
    if header["model_kind"] != model.kind_full:
        raise ValueError(f"checkpoint is for model kind {header['model_kind']!r}, "
                         f"not {model.kind_full!r}")
    expected = set(model.params.names())
    got = {n for n in records if not n.startswith("__opt__.")}
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(f"checkpoint parameter names do not match model: "
                         f"missing {missing}, extra {extra}")
    for name, t in model.params.items():
        arr = records[name]
        if arr.shape != t.shape:
            raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
        t.data = arr.astype(t.data.dtype)
    return header
