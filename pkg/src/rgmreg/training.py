"""Correspondence loss, plain SGD, the training loop and checkpoint files."""

import copy
import csv
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import EPS

log = logging.getLogger(__name__)

REDUCTIONS = ("sum", "mean")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    reduction: str = "sum"
    momentum: float = 0.0
    target_recall: float = 0.0  # stop once validation recall reaches this; 0 disables

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def bce_loss(probs, gt, reduction="sum"):
    """Binary cross-entropy between a soft correspondence block and a 0/1 target."""
    probs = ad.as_tensor(probs)
    gt = np.asarray(gt, dtype=probs.data.dtype)
    if probs.shape != gt.shape:
        raise ad.ShapeError(f"bce_loss: incompatible shapes {probs.shape} and {gt.shape}")
    P = ad.clip(probs, EPS, 1.0 - EPS)
    terms = gt * ad.log(P) + (1.0 - gt) * ad.log(ad.affine(P, -1.0, 1.0))
    total = ad.sum(terms)
    if reduction == "mean":
        return ad.affine(total, -1.0 / gt.size)
    return -total


class SGD:
    """``p <- p - lr * g`` (optional momentum); steps with a non-finite gradient are skipped."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None
        self.skipped = 0

    def step(self, scale=1.0):
        grads = [p.grad * scale for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        if self.velocity is None:
            sgd_step(self.params, grads, self.lr)
        else:
            for p, v, g in zip(self.params, self.velocity, grads):
                v *= self.momentum
                v += g
                p.data -= self.lr * v
        return True


def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        if p.data.shape != np.shape(g):
            raise ad.ShapeError(f"sgd_step: parameter {p.data.shape} vs gradient {np.shape(g)}")
        p.data -= lr * g


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_recall: float = float("nan")
    val_mie_r: float = float("nan")
    val_mie_t: float = float("nan")


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    skipped_steps: int = 0
    diverged: bool = False


LOG_HEADER = ["epoch", "mean_loss", "val_recall", "val_mie_r", "val_mie_t"]


def sample_loss(model, sample, reduction="sum"):
    C = model.forward(sample.source, sample.target)
    return bce_loss(C.probs, sample.gt_corr.as_matrix(), reduction)


def validate(model, samples, iters=2):
    from .pipeline import register_rgm, sample_metrics

    rows = [sample_metrics(s, register_rgm(s.source, s.target, model, iters)) for s in samples]
    recall = float(np.mean([r["pass"] for r in rows]))
    return recall, float(np.mean([r["mie_r_deg"] for r in rows])), float(np.mean([r["mie_t"] for r in rows]))


def train(model, samples, cfg, val_samples=None, start_epoch=0, on_epoch=None, lr_schedule=None):
    """Per-sample SGD on the correspondence loss.

    Sample order in epoch ``e`` comes from ``default_rng([seed, e])`` so a run
    resumed at ``start_epoch`` replays the same order as an uninterrupted one.
    Two consecutive non-finite losses abort the run and restore the weights
    saved at the start of the epoch.  With ``cfg.target_recall > 0`` and a
    validation set, training stops after the first epoch reaching that recall.
    """
    if not samples:
        raise ValueError("training set is empty")
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum)
    result = TrainResult()
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        if lr_schedule is not None:
            opt.lr = cfg.lr * lr_schedule(epoch)
        snapshot = copy.deepcopy(model.state_dict())
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        losses, bad_run = [], 0
        model.zero_grad()
        for n, idx in enumerate(order, 1):
            loss = sample_loss(model, samples[idx], cfg.reduction)
            value = loss.item()
            if not np.isfinite(value):
                bad_run += 1
                model.zero_grad()
                if bad_run >= 2:
                    log.warning("loss diverged in epoch %d; restoring epoch-start weights", epoch)
                    model.load_state_dict(snapshot)
                    result.diverged = True
                    result.skipped_steps = opt.skipped
                    return result
                continue
            bad_run = 0
            ad.backward(loss)
            losses.append(value)
            if n % cfg.batch_size == 0 or n == len(order):
                opt.step(1.0 / cfg.batch_size)
                model.zero_grad()
        entry = EpochLog(epoch + 1, float(np.mean(losses)) if losses else float("nan"))
        if val_samples:
            entry.val_recall, entry.val_mie_r, entry.val_mie_t = validate(model, val_samples)
        result.history.append(entry)
        log.info("epoch %d loss %.4f val_recall %.3f", entry.epoch, entry.mean_loss, entry.val_recall)
        if on_epoch is not None:
            on_epoch(entry)
        if val_samples and cfg.target_recall > 0 and entry.val_recall >= cfg.target_recall:
            log.info("validation recall %.3f reached target; stopping", entry.val_recall)
            break
    result.skipped_steps = opt.skipped
    return result


def write_log(path, history, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_HEADER)
        for e in history:
            w.writerow([e.epoch, repr(e.mean_loss), repr(e.val_recall), repr(e.val_mie_r), repr(e.val_mie_t)])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"RGMW1" | u32 count | count x (u16 name_len, name, u8 rank, rank x u32 dim, f64 values)
#   | u32 text_len | utf-8 config echo ("key = value" lines)

MAGIC = b"RGMW1"


class CheckpointError(ValueError):
    kind = "checkpoint"


class CheckpointFormatError(CheckpointError):
    kind = "format"


class CheckpointTruncatedError(CheckpointError):
    kind = "truncated"


class CheckpointDimError(CheckpointError):
    kind = "dim"


def save_checkpoint(model, path, extra=None):
    from .config import format_kv

    named = list(model.named_parameters())
    chunks = [MAGIC, struct.pack("<I", len(named))]
    for name, p in named:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    echo = dict(model.config.to_dict())
    echo.update(extra or {})
    text = format_kv(echo).encode()
    chunks.append(struct.pack("<I", len(text)) + text)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Returns ``(state, echo)``: name -> array, and the config echo as a str dict."""
    from .config import parse_kv

    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: format tag is not {MAGIC.decode()}")
    r = _Reader(buf, path)
    r.take(len(MAGIC))
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    (tlen,) = r.unpack("<I")
    echo = parse_kv(r.take(tlen).decode())
    return state, echo


def load_checkpoint(path, model=None):
    """Load weights; builds the model from the config echo when none is given."""
    from .config import _coerce
    from .network import ModelConfig, RGMNet

    state, echo = read_checkpoint(path)
    if model is None:
        defaults = ModelConfig()
        kwargs = {f.name: _coerce(echo[f.name], getattr(defaults, f.name), f.name)
                  for f in fields(ModelConfig) if f.name in echo}
        model = RGMNet(ModelConfig(**kwargs))
    own = dict(model.named_parameters())
    if set(own) != set(state):
        raise CheckpointDimError(f"{path}: parameter names do not match the model config")
    for name, p in own.items():
        if state[name].shape != p.data.shape:
            raise CheckpointDimError(
                f"{path}: dim mismatch for {name}: file {state[name].shape}, model {p.data.shape}")
    model.load_state_dict(state)
    return model, echo
