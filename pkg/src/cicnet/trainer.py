"""SGD with momentum, the piecewise-linear learning-rate schedule,
evaluation, history CSV and binary checkpoints."""
import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from .errors import (CompatibilityError, DivergenceError, FormatError,
                     NumericError, ParameterError, ShapeError)
from .netbuilder import config_from_text, config_hash, config_to_text
from .network import Network, Param

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_err", "test_err")


@dataclass(frozen=True)
class TrainSchedule:
    """``segments`` are ``(epoch_start, epoch_end, lr_start, lr_step)``; the
    rate at epoch ``e`` inside a segment is ``lr_start + (e - start) * step``,
    multiplied by ``scale``."""

    segments: Tuple[Tuple[int, int, float, float], ...]
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    total_epochs: int = 230
    scale: float = 1.0

    def __post_init__(self):
        expected = 1
        for start, end, _, _ in self.segments:
            if start != expected or end < start:
                raise ParameterError(f"segments must be contiguous from epoch 1; bad segment at {start}")
            expected = end + 1
        if expected - 1 != self.total_epochs:
            raise ParameterError(f"segments cover [1, {expected - 1}], not [1, {self.total_epochs}]")
        if self.batch_size < 1 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ParameterError("invalid optimizer hyperparameters")
        for e in range(1, self.total_epochs + 1):
            if lr_at_epoch(self, e) <= 0:
                raise ParameterError(f"learning rate at epoch {e} is not positive")


def paper_schedule(**kw) -> TrainSchedule:
    """0.5 for epochs 1-80, then -0.005 per epoch to 0.005 at 180, then
    -0.0001 per epoch through 230."""
    return TrainSchedule(((1, 80, 0.5, 0.0), (81, 180, 0.5, -0.005), (181, 230, 0.005, -0.0001)), **kw)


def desk_schedule(**kw) -> TrainSchedule:
    """The full schedule rescaled to a 0.1 peak (desk-scale default)."""
    kw.setdefault("scale", 0.2)
    return paper_schedule(**kw)


def constant_schedule(lr: float, epochs: int, **kw) -> TrainSchedule:
    return TrainSchedule(((1, epochs, lr, 0.0),), total_epochs=epochs, **kw)


def lr_at_epoch(s: TrainSchedule, epoch: int) -> float:
    # decimal arithmetic keeps the table anchors exact (0.5 - 99 * 0.005 == 0.005)
    for start, end, lr0, step in s.segments:
        if start <= epoch <= end:
            lr = Decimal(repr(lr0)) + (epoch - start) * Decimal(repr(step))
            return float(lr * Decimal(repr(s.scale)))
    raise IndexError(f"epoch {epoch} outside [1, {s.total_epochs}]")


def sgd_step(params: Sequence[Param], velocity: Sequence[np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """In-place ``v <- momentum*v - lr*(g + wd*p); p <- p + v``.  Parameters
    with ``decay=False`` (biases, batch-norm affine) skip weight decay."""
    updates = []
    for p, v in zip(params, velocity):
        g = p.grad + weight_decay * p.value if (p.decay and weight_decay) else p.grad
        v_new = momentum * v - lr * g
        p_new = p.value + v_new
        if not (np.all(np.isfinite(v_new)) and np.all(np.isfinite(p_new))):
            raise DivergenceError(f"non-finite update for parameter {p.name!r}")
        updates.append((p, v, v_new, p_new))
    for p, v, v_new, p_new in updates:
        v[...] = v_new
        p.value[...] = p_new


def error_rate(logits: np.ndarray, labels) -> float:
    """Fraction of argmax mistakes; ties resolve to the lowest class index."""
    pred = np.asarray(logits).reshape(len(labels), -1).argmax(axis=1)
    return float(np.mean(pred != np.asarray(labels)))


def evaluate(net: Network, ds: D.Dataset, batch_size: int = 256) -> float:
    if net.class_count != ds.class_count:
        raise ShapeError(f"network has {net.class_count} classes, dataset has {ds.class_count}")
    wrong = 0
    for x, y in D.batches(ds, batch_size):
        wrong += int((net.predict(x) != y).sum())
    return wrong / len(ds)


@dataclass
class HistoryRecord:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float

    def row(self) -> List[str]:
        return [str(self.epoch), repr(self.lr), repr(self.train_loss),
                repr(self.train_err), repr(self.test_err)]


def history_csv(history: Sequence[HistoryRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for rec in history:
        w.writerow(rec.row())
    return buf.getvalue()


def write_history(path, history: Sequence[HistoryRecord]) -> None:
    Path(path).write_text(history_csv(history), encoding="utf-8")


def read_history(path) -> List[HistoryRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [HistoryRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                          float(r["train_err"]), float(r["test_err"])) for r in rows]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CIC1"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1, np.dtype("int64"): 2}


@dataclass
class Checkpoint:
    epoch: int
    tensors: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray]
    rng_states: List[dict]
    config_text: str
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_hash(config_from_text(self.config_text))

    @classmethod
    def capture(cls, net: Network, epoch: int, velocity: Sequence[np.ndarray], **extra) -> "Checkpoint":
        names = [p.name for p in net.named_params()]
        return cls(epoch, {k: v.copy() for k, v in net.state_tensors().items()},
                   {n: v.copy() for n, v in zip(names, velocity)},
                   net.rng_states(), config_to_text(net.config), dict(extra))

    def restore(self, net: Network) -> List[np.ndarray]:
        """Load weights, buffers and RNG states into ``net``; returns the
        optimizer velocity in parameter order."""
        if config_hash(net.config) != self.config_hash:
            raise CompatibilityError("checkpoint was written for a different network configuration")
        net.load_state_tensors(self.tensors)
        net.set_rng_states(self.rng_states)
        return [self.velocity[p.name].copy() for p in net.named_params()]


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[code]).tobytes()


def checkpoint_save(path, ck: Checkpoint) -> None:
    entries = {f"param/{k}": v for k, v in ck.tensors.items()}
    entries.update({f"velocity/{k}": v for k, v in ck.velocity.items()})
    meta = {"rng_states": ck.rng_states, "extra": ck.extra}
    entries["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    entries["config"] = np.frombuffer(ck.config_text.encode("utf-8"), dtype=np.uint8)
    out = [MAGIC, struct.pack("<I", VERSION), ck.config_hash, struct.pack("<II", ck.epoch, len(entries))]
    out += [_pack_tensor(k, v) for k, v in entries.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, expect_config=None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a cicnet checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32)
    epoch, count = r.unpack("<II")
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        entries[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes")
    try:
        config_text = entries.pop("config").tobytes().decode("utf-8")
        meta = json.loads(entries.pop("meta").tobytes().decode("utf-8"))
    except KeyError as exc:
        raise FormatError(f"{path}: missing {exc}") from None
    ck = Checkpoint(
        epoch,
        {k[6:]: v for k, v in entries.items() if k.startswith("param/")},
        {k[9:]: v for k, v in entries.items() if k.startswith("velocity/")},
        meta["rng_states"], config_text, meta.get("extra", {}),
    )
    if ck.config_hash != digest:
        raise FormatError(f"{path}: header hash does not match the stored configuration")
    if expect_config is not None and config_hash(expect_config) != digest:
        raise CompatibilityError(f"{path}: checkpoint config hash does not match the requested network")
    return ck


# ---------------------------------------------------------------------------
# training loop


def train(net: Network, train_ds: D.Dataset, sched: TrainSchedule,
          policy: D.AugmentPolicy = D.AugmentPolicy(), seed: int = 0,
          epochs: Optional[int] = None, test_ds: Optional[D.Dataset] = None,
          out_dir=None, start_epoch: int = 1, velocity: Optional[List[np.ndarray]] = None,
          callback: Optional[Callable[[HistoryRecord], bool]] = None) -> List[HistoryRecord]:
    """Train for epochs ``start_epoch .. epochs`` (default: the schedule's
    total).  Every random draw is derived from ``(seed, epoch)`` so a run
    resumed from a checkpoint replays the uninterrupted one exactly.

    With ``out_dir`` the history CSV and a checkpoint are rewritten after
    every epoch.  ``callback`` sees each record; returning ``True`` stops.
    """
    epochs = sched.total_epochs if epochs is None else epochs
    if epochs > sched.total_epochs:
        raise ParameterError(f"schedule covers {sched.total_epochs} epochs, {epochs} requested")
    if net.class_count != train_ds.class_count:
        raise ShapeError(f"network has {net.class_count} classes, dataset has {train_ds.class_count}")
    params = net.named_params()
    if velocity is None:
        velocity = [np.zeros_like(p.value) for p in params]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: List[HistoryRecord] = []
    for epoch in range(start_epoch, epochs + 1):
        lr = lr_at_epoch(sched, epoch)
        aug_rng = np.random.default_rng([seed, epoch, 1])
        total_loss, wrong, seen = 0.0, 0, 0
        for x, y in D.batches(train_ds, sched.batch_size, shuffle=True, seed=[seed, epoch]):
            x = D.augment(x, policy, aug_rng)
            try:
                loss, logits, _ = net.loss_and_grad(x, y, training=True)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise DivergenceError(f"epoch {epoch}: non-finite loss")
            sgd_step(params, velocity, lr, sched.momentum, sched.weight_decay)
            total_loss += loss * len(y)
            wrong += int((logits.reshape(len(y), -1).argmax(axis=1) != y).sum())
            seen += len(y)
        test_err = evaluate(net, test_ds) if test_ds is not None else float("nan")
        rec = HistoryRecord(epoch, lr, total_loss / seen, wrong / seen, test_err)
        history.append(rec)
        log.info("epoch %d lr %g loss %.4f train_err %.4f test_err %.4f",
                 epoch, lr, rec.train_loss, rec.train_err, rec.test_err)
        if out is not None:
            checkpoint_save(out / "checkpoint.cic", Checkpoint.capture(net, epoch, velocity, seed=seed))
            prior = read_history(out / "history.csv") if (start_epoch > 1 and (out / "history.csv").exists()) else []
            write_history(out / "history.csv", [h for h in prior if h.epoch < start_epoch] + history)
        if callback is not None and callback(rec):
            break
    if out is not None and not history and start_epoch == 1:
        write_history(out / "history.csv", [])
    return history
