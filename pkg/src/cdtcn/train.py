"""Adam training on the negative SI-SNR loss, with checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .audio_io import atomic_write
from .data import MixtureManifest, load_pairs
from .metrics import neg_si_snr_loss, si_snr
from .model import EnhancementSystem, SystemConfig
from .numerics import ContractError, Parameter

log = logging.getLogger(__name__)

MAGIC = b"CDTN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or has an unsupported version."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """One bias-corrected Adam update of every parameter, in place."""
    if state.lr <= 0:
        raise ContractError(f"adam_step: lr must be positive, got {state.lr}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients to a global L2 norm of at most ``max_norm``; returns the norm before clipping."""
    if max_norm <= 0:
        raise ContractError(f"clip_grad_norm: max_norm must be positive, got {max_norm}")
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return total


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: SystemConfig
    params: Dict[str, np.ndarray]
    optimizer: Optional[OptimizerState] = None
    epoch: int = 0
    seed: int = 0
    history: List[Tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def from_system(cls, system: EnhancementSystem, optimizer: Optional[OptimizerState] = None,
                    epoch: int = 0, seed: int = 0, history=()) -> "Checkpoint":
        params = {name: p.data.copy() for name, p in system.named_parameters()}
        return cls(system.cfg, params, optimizer, epoch, seed, list(history))

    def restore(self) -> EnhancementSystem:
        """Build a system carrying exactly the stored parameter values."""
        system = EnhancementSystem(self.config, seed=self.seed)
        names = set(dict(system.named_parameters()))
        if names != set(self.params):
            missing = sorted(names - set(self.params))
            extra = sorted(set(self.params) - names)
            raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, p in system.named_parameters():
            stored = self.params[name]
            if stored.shape != p.shape:
                raise CheckpointError(f"parameter {name!r} has shape {stored.shape}, expected {p.shape}")
            p.data = stored.astype(p.dtype, copy=True)
        return system


def _tensor_entries(ckpt: Checkpoint):
    entries = [("param/" + k, v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is not None:
        for k in sorted(ckpt.optimizer.m):
            entries.append(("adam_m/" + k, ckpt.optimizer.m[k]))
            entries.append(("adam_v/" + k, ckpt.optimizer.v[k]))
    return entries


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name, arr in _tensor_entries(ckpt):
        dt = np.dtype(arr.dtype)
        if dt not in (np.float32, np.float64):
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
        table.append({"name": name, "dtype": dt.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "tensors": table,
        "optimizer": ckpt.optimizer.hyper() if ckpt.optimizer is not None else None,
        "epoch": ckpt.epoch,
        "rng": {"seed": ckpt.seed},
        "history": [[int(e), float(l), float(v)] for e, l, v in ckpt.history],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint prefix")
    magic, version, head_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (supported: {FORMAT_VERSION})")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
        config = SystemConfig.from_dict(header["config"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    base = start + head_len
    tensors = {}
    for entry in table:
        try:
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(int(s) for s in entry["shape"])
            lo = base + int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt tensor table entry {entry!r}: {exc}") from None
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)) or lo + nbytes > len(raw):
            raise CheckpointError(f"tensor {entry.get('name')!r} is truncated or inconsistent")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=lo).reshape(shape)
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = None
    if header.get("optimizer") is not None:
        h = header["optimizer"]
        opt = OptimizerState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], step=h["step"])
        for k, v in tensors.items():
            if k.startswith("adam_m/"):
                opt.m[k[len("adam_m/"):]] = v
            elif k.startswith("adam_v/"):
                opt.v[k[len("adam_v/"):]] = v
    history = [(int(e), float(l), float(v)) for e, l, v in header.get("history", [])]
    return Checkpoint(config, params, opt, int(header["epoch"]), int(header["rng"]["seed"]), history)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# ---------------------------------------------------------------------------
# training loop


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "valid_si_snr"])
    for epoch, loss, valid in history:
        w.writerow([epoch, repr(float(loss)), repr(float(valid))])
    return buf.getvalue()


def _crop(rng: np.random.Generator, mix: np.ndarray, clean: np.ndarray, length: int):
    if mix.shape[0] <= length:
        return mix, clean
    off = int(rng.integers(0, mix.shape[0] - length + 1))
    return mix[off : off + length], clean[off : off + length]


def evaluate(system: EnhancementSystem, pairs) -> float:
    """Mean SI-SNR of enhanced signals over (mixture, clean) pairs."""
    if not pairs:
        return float("nan")
    return float(np.mean([si_snr(system.enhance(mix), clean) for mix, clean in pairs]))


def _load_split(manifest: MixtureManifest, split: str, workers: int = 4):
    records = manifest.split(split)
    if not records:
        return []
    # threads only decode files; results keep manifest order
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [p for chunk in pool.map(lambda r: load_pairs(manifest, [r]), records) for p in chunk]


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def train(system: EnhancementSystem, manifest: MixtureManifest, epochs: int, batch_size: int = 4,
          lr: float = 1e-3, seed: int = 0, clip: float = 5.0, checkpoint_dir=None,
          crop_s: float = 1.0, progress: bool = False) -> List[Tuple[int, float, float]]:
    """Minimize the mean negative SI-SNR over the train split.

    Writes one checkpoint per finished epoch (``epoch_001.ckpt``, ...) and
    rewrites ``history.csv`` after each; with ``epochs=0`` only the initial
    state is saved as ``epoch_000.ckpt``. Raises :class:`NumericalError` on a
    non-finite loss; checkpoints of earlier epochs are left intact.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    train_pairs = _load_split(manifest, "train")
    valid_pairs = _load_split(manifest, "valid")
    if not train_pairs or not valid_pairs:
        raise ContractError("manifest needs nonempty train and valid splits")
    sr = system.cfg.sample_rate
    crop_len = int(round(crop_s * sr))
    params = system.parameters()
    state = OptimizerState(lr=lr)
    history: List[Tuple[int, float, float]] = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def snapshot(epoch):
        if ckdir is None:
            return
        save_checkpoint(ckdir / checkpoint_name(epoch), Checkpoint.from_system(system, state, epoch, seed, history))
        atomic_write(ckdir / "history.csv", history_csv(history).encode())

    if epochs == 0:
        snapshot(0)
    dtype = system.cfg.np_dtype
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [_crop(rng, *train_pairs[i], crop_len) for i in order[start : start + batch_size]]
            nx.zero_grad(params)
            try:
                outs = [system.forward(mix.astype(dtype)) for mix, _ in batch]
                loss = neg_si_snr_loss(outs, [clean for _, clean in batch])
                value = float(loss.data)
                if not math.isfinite(value):
                    raise FloatingPointError("loss is not finite")
                nx.backward(loss, params)
            except FloatingPointError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            norm = clip_grad_norm(params, clip)
            if not math.isfinite(norm):
                raise NumericalError(f"epoch {epoch}: gradient norm is not finite")
            adam_step(params, state)
            losses.append(value * len(batch))
        train_loss = float(np.sum(losses) / len(order))
        try:
            valid = evaluate(system, valid_pairs)
        except FloatingPointError as exc:
            raise NumericalError(f"epoch {epoch} validation: {exc}") from exc
        history.append((epoch, train_loss, valid))
        if progress:
            log.info("epoch %d  train_loss %.4f  valid_si_snr %.3f", epoch, train_loss, valid)
        snapshot(epoch)
    return history
