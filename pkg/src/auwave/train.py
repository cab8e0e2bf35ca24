"""Mini-batch training, split evaluation, early stopping and AUWC checkpoints."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import AlignedDataset, SplitIndices
from .errors import ConfigError, DegenerateError, FormatError, NonFiniteError, TrainingError
from .models import Model, build_model
from .optim import Adam, StepDecaySchedule

LR_RANGE = (1e-5, 1e-3)
GAMMA_RANGE = (0.9, 0.99)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    step_size: int = 1
    max_epochs: int = 500
    max_steps: Optional[int] = None
    patience: int = 100
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        lo, hi = LR_RANGE
        if not lo <= self.lr <= hi:
            raise ConfigError(f"lr={self.lr} outside the allowed range [{lo:g}, {hi:g}]")
        lo, hi = GAMMA_RANGE
        if not lo <= self.gamma <= hi:
            raise ConfigError(f"gamma={self.gamma} outside the allowed range [{lo:g}, {hi:g}]")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1 epoch")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when given")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch normalisation)")
        if self.step_size < 1:
            raise ConfigError("step_size must be at least 1 epoch")

    def schedule(self) -> StepDecaySchedule:
        return StepDecaySchedule(self.lr, self.gamma, self.step_size)


@dataclass
class EarlyStopState:
    patience: int
    best_loss: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record one epoch's loss; True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience

    @property
    def improved(self) -> bool:
        return self.epochs_since_improvement == 0


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_loss: float


@dataclass
class TrainResult:
    model: Model
    history: list
    best_epoch: int
    best_val_loss: float
    optimizer: Adam
    stopped_early: bool = False

    def history_csv(self) -> str:
        lines = ["epoch,lr,train_loss,test_loss"]
        for h in self.history:
            lines.append(f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.test_loss!r}")
        return "\n".join(lines) + "\n"


def predict(model: Model, obs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode forward pass over an (N, n) array, batched."""
    was_training = model.training
    model.eval()
    try:
        outs = []
        with T.no_grad():
            for i in range(0, len(obs), batch_size):
                outs.append(model(obs[i:i + batch_size]).data)
    finally:
        model.train(was_training)
    if not outs:
        return np.zeros((0, 1, 32, 32), dtype=np.float32)
    return np.concatenate(outs)


def evaluate_split_loss(model: Model, dataset: AlignedDataset, indices,
                        batch_size: int = 64) -> float:
    """Land-masked MSE in the dataset's (log) space, averaged over samples."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("cannot evaluate an empty split")
    pred = predict(model, dataset.obs[idx], batch_size)
    return masked_mse(pred, dataset.fields[idx], dataset.ocean_mask)


def masked_mse(pred: np.ndarray, target: np.ndarray, ocean: np.ndarray) -> float:
    w = np.broadcast_to(ocean, pred.shape)
    per_sample = ((pred.astype(np.float64) - target) ** 2 * w).sum(axis=(1, 2, 3)) / w[0].sum()
    return float(per_sample.mean())


def train(model: Model, dataset: AlignedDataset, splits: SplitIndices, cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit ``model`` on the train split, selecting the epoch with the lowest test-split loss.

    ``on_epoch(epoch, test_loss)`` runs after every epoch; raising from it
    (e.g. a pruning signal) aborts training and propagates.
    """
    if not dataset.transform_applied:
        raise ConfigError("train expects a log-space dataset (apply to_log_space first)")
    train_idx = np.asarray(list(splits.train), dtype=np.int64)
    test_idx = np.asarray(list(splits.test), dtype=np.int64)
    if train_idx.size < 2 or test_idx.size == 0:
        raise ConfigError("train split needs at least 2 samples and test split at least 1")

    rng = np.random.default_rng(cfg.seed)
    schedule = cfg.schedule()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    ocean = dataset.ocean_mask[None, None]
    dtype = model.dtype
    obs = dataset.obs.astype(dtype, copy=False)
    fields = dataset.fields.astype(dtype, copy=False)
    stopper = EarlyStopState(cfg.patience)
    history: list = []
    best_state = model.state_dict()
    steps = 0
    stopped = False

    for epoch in range(cfg.max_epochs):
        lr = schedule.lr(epoch)
        model.train()
        order = rng.permutation(train_idx)
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
        total, count = 0.0, 0
        for b in batches:
            try:
                pred = model(obs[b])
                loss = T.mse_loss(pred, fields[b], ocean)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, step {steps}: {exc}") from exc
            total += loss.item() * len(b)
            count += len(b)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        train_loss = total / count
        test_loss = evaluate_split_loss(model, dataset, test_idx)
        if not math.isfinite(test_loss):
            raise TrainingError(f"non-finite test loss at epoch {epoch}")
        history.append(EpochRecord(epoch, lr, train_loss, test_loss))
        stop = stopper.update(epoch, test_loss)
        if stopper.improved:
            best_state = model.state_dict()
        if on_epoch is not None:
            on_epoch(epoch, test_loss)
        if stop:
            stopped = True
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, stopper.best_epoch, stopper.best_loss, opt, stopped)


# -------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"AUWC"
CKPT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = _pack_str(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model: Model, path, optimizer: Optional[Adam] = None, epoch: int = 0,
                    best_val_loss: float = math.nan) -> Path:
    """Write the AUWC checkpoint: header, JSON metadata, then named float32 tensors.

    Layout (little endian)::

        b"AUWC" | u16 version | u32 len + utf8 JSON meta | u32 n_tensors
        n_tensors x (u32 len + utf8 name | u8 ndim | u32[ndim] shape | f4[prod(shape)])

    Tensor names are the model's parameter and buffer names, followed by
    ``adam.m.<i>`` / ``adam.v.<i>`` moment buffers when an optimizer is given.
    """
    meta = {
        "kind": model.kind,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "epoch": int(epoch),
        "best_val_loss": None if math.isnan(best_val_loss) else float(best_val_loss),
        "adam": None,
    }
    tensors = list(model.state_dict().items())
    if optimizer is not None:
        st = optimizer.state
        meta["adam"] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                        "lr": optimizer.lr}
        tensors += [(f"adam.m.{i}", m) for i, m in enumerate(st.m)]
        tensors += [(f"adam.v.{i}", v) for i, v in enumerate(st.v)]
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION),
             _pack_str(json.dumps(meta, sort_keys=True)), struct.pack("<I", len(tensors))]
    parts += [_pack_array(n, a) for n, a in tensors]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


@dataclass
class CheckpointInfo:
    kind: str
    config: dict
    seed: int
    epoch: int
    best_val_loss: Optional[float]
    adam: Optional[dict] = None
    adam_moments: dict = field(default_factory=dict)


def load_checkpoint(path, kind: Optional[str] = None) -> tuple[Model, CheckpointInfo]:
    """Rebuild the model stored at ``path``; ``kind`` guards against loading the wrong network."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    rd = _Reader(blob)
    if rd.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not an AUWC checkpoint")
    (version,) = rd.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(rd.string())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    if kind is not None and meta["kind"] != kind:
        raise FormatError(f"{path}: holds a {meta['kind']!r} model, expected {kind!r}")
    (n,) = rd.unpack("<I")
    tensors = {}
    for _ in range(n):
        name = rd.string()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if rd.pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after tensor table")
    try:
        model = build_model(meta["kind"], meta["config"], seed=meta["seed"])
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid model config: {exc}") from exc
    moments = {k: tensors.pop(k) for k in [k for k in tensors if k.startswith("adam.")]}
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: tensors do not match the stored config: {exc}") from exc
    model.eval()
    info = CheckpointInfo(meta["kind"], meta["config"], meta["seed"], meta["epoch"],
                          meta["best_val_loss"], meta["adam"], moments)
    return model, info
