"""Adam / AdamW training loop, evaluation, and the binary checkpoint format."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import AugmentConfig, Dataset, batch_indices, batches, make_batch
from .errors import CheckpointError, ConfigError, DataError, NonFiniteError, ShapeError
from .model import SparseSwin, SparseSwinConfig, build, freeze
from .regularizers import RegConfig, penalty
from .serde import from_dict, to_plain
from .tensor import no_grad

NO_DECAY_SUFFIXES = ("bias", "gain", "rel_bias")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 128
    steps: int = 100
    seed: int = 0
    reg: RegConfig = field(default_factory=RegConfig)
    freeze_stages: tuple = ()
    eval_batch: int = 64

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "freeze_stages", tuple(self.freeze_stages))
        if isinstance(self.reg, dict):
            object.__setattr__(self, "reg", RegConfig(**self.reg))
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.optimizer == "adam" and self.weight_decay:
            raise ConfigError("plain adam takes no weight decay; use optimizer 'adamw'")
        if self.batch < 1 or self.steps < 0 or self.eval_batch < 1:
            raise ConfigError("batch and eval_batch must be >= 1, steps >= 0")


# ---------------------------------------------------------------------------
# optimizers


def _adam_direction(grad, m, v, step, betas, eps):
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return m_hat / (np.sqrt(v_hat) + eps), m, v


def _check_shapes(param, grad, m, v):
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeError(f"optimizer step: shapes differ {param.shape}, {grad.shape}, {m.shape}, {v.shape}")


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. ``step`` counts from 1. Returns (param, m, v)."""
    _check_shapes(param, grad, m, v)
    d, m, v = _adam_direction(grad, m, v, step, betas, eps)
    return param - lr * d, m, v


def adamw_step(param, grad, m, v, step, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """Adam plus decoupled decay ``param -= lr * wd * param`` on the pre-step value."""
    _check_shapes(param, grad, m, v)
    d, m, v = _adam_direction(grad, m, v, step, betas, eps)
    return (param - lr * weight_decay * param) - lr * d, m, v


def decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in NO_DECAY_SUFFIXES


class Adam:
    """Adam (``weight_decay=0``) or AdamW over a named parameter table.

    Parameters with ``requires_grad=False`` are skipped and carry no state.
    """

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            if cfg.optimizer == "adamw" and decays(name):
                p.data, self.m[name], self.v[name] = adamw_step(
                    p.data, g, m, self.v[name], t, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
            else:
                p.data, self.m[name], self.v[name] = adam_step(
                    p.data, g, m, self.v[name], t, cfg.lr, cfg.betas, cfg.eps)


# ---------------------------------------------------------------------------
# loop


class Trainer:
    """Owns the optimizer and the step cursor; data order is a pure function of (seed, step)."""

    def __init__(self, model: SparseSwin, ds: Dataset, cfg: TrainConfig, aug: AugmentConfig):
        if len(ds) == 0:
            raise DataError("training dataset is empty")
        self.model = model
        self.ds = ds
        self.cfg = cfg
        self.aug = aug
        self.freeze_mask = freeze(model, cfg.freeze_stages)
        self.opt = Adam(model.param_dict(), cfg)
        self.step = 0
        self._epoch_cache: tuple[int, list] | None = None

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.ds) // self.cfg.batch)

    def _batch(self, step: int):
        epoch, offset = divmod(step, self.steps_per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, batch_indices(len(self.ds), self.cfg.batch, self.cfg.seed, epoch))
        idx = self._epoch_cache[1][offset]
        return make_batch(self.ds, idx, self.aug, self.cfg.seed, epoch, train=True)

    def train_step(self) -> dict:
        step = self.step
        images, labels = self._batch(step)
        model = self.model
        try:
            logits, state = model.forward_with_state(images)
            ce = F.cross_entropy(logits, labels)
            pen = penalty(state.attn, self.cfg.reg)
            loss = ce + pen
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {step + 1}: {exc}") from exc
        model.zero_grad()
        loss.backward()
        for name, p in self.opt.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"step {step + 1}: gradient of {name} is non-finite")
        self.opt.step()
        self.step += 1
        acc = float((logits.data.argmax(axis=1) == labels).mean())
        return {"step": self.step, "loss": float(loss.item()), "ce": float(ce.item()),
                "penalty": float(pen.item()), "acc": acc}

    def run(self, n: int) -> list[dict]:
        return [self.train_step() for _ in range(n)]


def train_steps(model: SparseSwin, ds: Dataset, cfg: TrainConfig, n: int,
                aug: AugmentConfig | None = None) -> list[dict]:
    """Run ``n`` optimizer steps from a fresh optimizer; returns per-step metrics."""
    return Trainer(model, ds, cfg, aug or AugmentConfig()).run(n)


def evaluate(model: SparseSwin, ds: Dataset, batch: int = 64, aug: AugmentConfig | None = None):
    """Top-1 accuracy and mean cross-entropy under the deterministic eval transform."""
    aug = aug or AugmentConfig()
    correct = 0
    loss_sum = 0.0
    with no_grad():
        for images, labels in batches(ds, batch, 0, 0, aug, train=False):
            logits = model(images)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            loss_sum += float(F.cross_entropy(logits, labels).item()) * len(labels)
    return correct / len(ds), loss_sum / len(ds)


METRIC_FIELDS = ("step", "loss", "ce", "penalty", "acc")


def write_metrics(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRIC_FIELDS) + "\n")
        for row in history:
            fh.write(",".join(repr(row[k]) for k in METRIC_FIELDS) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
#
# "SSWN" | u32 version | u32 n_entries | entries sorted by name, each:
#   u32 name_len | name (utf-8) | u8 dtype | u8 ndim | u64 dims[ndim] | u64 nbytes | raw little-endian data

MAGIC = b"SSWN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}; not a SparseSwin checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
        pos = 12
        entries = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dt = _DTYPES[code]
            if nbytes != int(np.prod(shape)) * dt.itemsize or pos + nbytes > len(buf):
                raise CheckpointError(f"{name}: truncated or inconsistent entry")
            entries[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint body: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last entry")
    return entries


def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> None:
    """Write parameters, optimizer moments, step cursor and config echoes."""
    entries: dict[str, np.ndarray] = {}
    for name, p in trainer.model.named_parameters():
        entries[f"param/{name}"] = p.data
    for name in trainer.opt.m:
        entries[f"optim/m/{name}"] = trainer.opt.m[name]
        entries[f"optim/v/{name}"] = trainer.opt.v[name]
    entries["optim/step"] = np.array([trainer.opt.step_count], dtype=np.int64)
    entries["cursor/step"] = np.array([trainer.step], dtype=np.int64)
    entries["config/model"] = _json_entry(to_plain(trainer.model.cfg))
    entries["config/train"] = _json_entry(to_plain(trainer.cfg))
    entries["config/augment"] = _json_entry(to_plain(trainer.aug))
    for k, v in (extra or {}).items():
        entries[f"extra/{k}"] = _json_entry(v)
    data = encode_checkpoint(entries)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def json_entry(entries: dict, name: str):
    return json.loads(entries[name].tobytes().decode("utf-8"))


def restore_trainer(entries: dict, ds: Dataset) -> Trainer:
    """Rebuild model + optimizer exactly as saved, ready to continue training."""
    mcfg = from_dict(SparseSwinConfig, json_entry(entries, "config/model"))
    tcfg = from_dict(TrainConfig, json_entry(entries, "config/train"))
    acfg = from_dict(AugmentConfig, json_entry(entries, "config/augment"))
    model = build(mcfg, tcfg.seed)
    state = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    model.load_state_dict(state)
    trainer = Trainer(model, ds, tcfg, acfg)
    for k, v in entries.items():
        if k.startswith("optim/m/"):
            trainer.opt.m[k[len("optim/m/"):]] = v.copy()
        elif k.startswith("optim/v/"):
            trainer.opt.v[k[len("optim/v/"):]] = v.copy()
    trainer.opt.step_count = int(entries["optim/step"][0])
    trainer.step = int(entries["cursor/step"][0])
    return trainer


def load_model(entries: dict) -> SparseSwin:
    model = build(from_dict(SparseSwinConfig, json_entry(entries, "config/model")), 0)
    model.load_state_dict({k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")})
    return model
