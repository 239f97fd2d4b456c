"""Dataset generation from the link simulator and the Adam training loop.

Datasets pair noisy pilot LS grids with the true frequency response of the
realization that produced them.  Training minimizes a Huber loss with Adam,
a step learning-rate schedule, and L2 regularization folded into the
gradient; the best-validation parameter set is retained.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from chanest import tensor as tz
from chanest._alloc import tune_allocator
from chanest.baseband import BasebandConfig, build_slot, qpsk_modulate
from chanest.channel import PowerDelayProfile, apply_channel_freq, freq_response, sample_realization
from chanest.estimators import ls_pilot_estimate
from chanest.mambanet import MambaNetConfig, MambaNetParams, forward_tokens, tokenize
from chanest.tensor import Tensor

# spawn-key namespaces so every consumer of one base seed gets its own stream
_NS_DATASET = 0
_NS_SHUFFLE = 2


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""

    initial_lr: float = 5e-4
    lr_drop_period: int = 25
    lr_drop_factor: float = 0.5
    max_epochs: int = 100
    minibatch: int = 128
    l2: float = 1e-7
    huber_delta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.initial_lr, self.lr_drop_period, self.lr_drop_factor) <= 0:
            raise ValueError("learning-rate schedule values must be positive")
        if min(self.max_epochs, self.minibatch) < 1:
            raise ValueError("epochs and minibatch must be at least 1")
        if self.huber_delta <= 0 or self.adam_eps <= 0:
            raise ValueError("huber_delta and adam_eps must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_drop_factor ** (epoch // self.lr_drop_period)


@dataclass
class Dataset:
    """Stacked samples: pilot LS inputs, true-response labels, draw metadata."""

    inputs: np.ndarray  # (n, n_f/l_s, n_pilot) complex
    labels: np.ndarray  # (n, n_f, n_s, 2) float
    snr_db: np.ndarray  # (n,)
    f_d_max: np.ndarray  # (n,)
    n_train: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def train_indices(self) -> np.ndarray:
        return np.arange(self.n_train)

    @property
    def val_indices(self) -> np.ndarray:
        return np.arange(self.n_train, self.n)

    def sample(self, i: int):
        return self.inputs[i], self.labels[i], float(self.snr_db[i]), float(self.f_d_max[i])


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_NS_DATASET, index)))


def _generate_range(args):
    start, count, seed, cfg, pdp, snr_range, fd_range = args
    inputs = np.empty((count, cfg.n_f // cfg.l_s, cfg.n_pilot), dtype=np.complex128)
    labels = np.empty((count, cfg.n_f, cfg.n_s, 2))
    snrs = np.empty(count)
    fds = np.empty(count)
    for j in range(count):
        rng = _sample_rng(seed, start + j)
        snr = rng.uniform(*snr_range)
        fd = rng.uniform(*fd_range)
        ch = sample_realization(pdp, fd, rng, cfg)
        bits = rng.integers(0, 2, cfg.n_data_bits)
        grid = build_slot(qpsk_modulate(bits), cfg)
        h = freq_response(ch, cfg)
        y = apply_channel_freq(grid, h, snr, rng)
        inputs[j] = ls_pilot_estimate(y, cfg).values
        labels[j, :, :, 0] = h.h.real
        labels[j, :, :, 1] = h.h.imag
        snrs[j] = snr
        fds[j] = fd
    return inputs, labels, snrs, fds


def generate_dataset(
    n: int,
    snr_range: tuple[float, float],
    fd_range: tuple[float, float],
    cfg: BasebandConfig,
    pdp: PowerDelayProfile,
    seed: int,
    val_fraction: float = 0.05,
    workers: int = 1,
) -> Dataset:
    """Draw ``n`` independent slots; each sample has its own seeded stream,
    so the result is identical for any worker count."""
    if n < 1:
        raise ValueError("need at least one sample")
    tune_allocator()
    jobs = []
    step = max(1, -(-n // max(1, workers)))
    for start in range(0, n, step):
        jobs.append((start, min(step, n - start), seed, cfg, pdp, snr_range, fd_range))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_generate_range, jobs))
    else:
        parts = [_generate_range(job) for job in jobs]
    inputs = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    snrs = np.concatenate([p[2] for p in parts])
    fds = np.concatenate([p[3] for p in parts])
    n_train = int(round(n * (1.0 - val_fraction))) if n > 1 else 1
    n_train = min(max(n_train, 1), n)
    meta = {
        "count": n,
        "n_train": n_train,
        "seed": seed,
        "snr_range": list(snr_range),
        "fd_range": list(fd_range),
    }
    return Dataset(inputs, labels, snrs, fds, n_train, meta)


# ---------------------------------------------------------------------------
# dataset files

_DATA_MAGIC = b"CEDS"
_DATA_VERSION = 1


def _record_dtype(cfg_shapes: dict) -> np.dtype:
    rows, npil = cfg_shapes["input"]
    nf, ns, two = cfg_shapes["label"]
    return np.dtype(
        [
            ("input", "<c16", (rows, npil)),
            ("label", "<f8", (nf, ns, two)),
            ("snr", "<f8"),
            ("fd", "<f8"),
        ]
    )


def save_dataset(path, ds: Dataset, extra_header: dict | None = None) -> None:
    """Binary dataset: header (shapes, counts, seed) + packed records."""
    shapes = {"input": list(ds.inputs.shape[1:]), "label": list(ds.labels.shape[1:])}
    header = dict(ds.meta)
    header.update({"shapes": shapes, "version": _DATA_VERSION})
    if extra_header:
        header.update(extra_header)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    rec = np.empty(ds.n, dtype=_record_dtype(shapes))
    rec["input"] = ds.inputs
    rec["label"] = ds.labels
    rec["snr"] = ds.snr_db
    rec["fd"] = ds.f_d_max
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<HI", _DATA_VERSION, len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())


def load_dataset(path, mmap: bool = True) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _DATA_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, blob_len = struct.unpack("<HI", fh.read(6))
        if version != _DATA_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        header = json.loads(fh.read(blob_len).decode())
        offset = fh.tell()
    dtype = _record_dtype(header["shapes"])
    n = header["count"]
    if mmap:
        rec = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=(n,))
    else:
        with open(path, "rb") as fh:
            fh.seek(offset)
            rec = np.frombuffer(fh.read(), dtype=dtype, count=n)
    return Dataset(
        rec["input"], rec["label"], rec["snr"], rec["fd"], header["n_train"], header
    )


# ---------------------------------------------------------------------------
# loss and optimizer


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty: quadratic within ``delta``, linear beyond,
    matched at the knee so the gradient is continuous."""
    pred = tz._as_tensor(pred)
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = pred.data - tgt
    ae = np.abs(e)
    quad = ae <= delta
    vals = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    out = np.asarray(vals.mean())
    n = e.size

    def vjp(g):
        return (g * np.clip(e, -delta, delta) / n,)

    return tz._make(out, (pred,), vjp)


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: MambaNetParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
    )


def adam_step(
    params: MambaNetParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    l2: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; L2 enters as a gradient term l2*theta."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if l2:
            g = g + l2 * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float


class TrainingDiverged(RuntimeError):
    pass


def _batched_loss(
    tokens: np.ndarray,
    labels: np.ndarray,
    params: MambaNetParams,
    cfg: MambaNetConfig,
    delta: float,
    chunk: int = 256,
) -> float:
    total = 0.0
    with tz.no_grad():
        for i in range(0, tokens.shape[0], chunk):
            x = Tensor(tokens[i : i + chunk])
            loss = huber_loss(forward_tokens(x, params, cfg), labels[i : i + chunk], delta)
            total += loss.item() * x.shape[0]
    return total / tokens.shape[0]


def train(
    params: MambaNetParams,
    cfg: MambaNetConfig,
    data: Dataset,
    tcfg: TrainConfig,
    log=None,
) -> TrainResult:
    """Minibatch training with per-epoch seeded shuffles.

    Records train/validation Huber per epoch, drops the learning rate on the
    configured schedule, and keeps a copy of the best-validation parameters.
    Aborts with diagnostics on a non-finite loss.
    """
    tune_allocator()
    tokens = tokenize(np.asarray(data.inputs), cfg)
    labels = np.asarray(data.labels)
    tr = data.train_indices
    va = data.val_indices
    if va.size == 0:
        raise ValueError("dataset has no validation split")
    state = init_adam_state(params)
    history: list[EpochStats] = []
    best_state = params.state()
    best_val = np.inf
    best_epoch = -1
    for epoch in range(tcfg.max_epochs):
        lr = tcfg.lr_at(epoch)
        order = np.random.default_rng(
            np.random.SeedSequence(tcfg.seed, spawn_key=(_NS_SHUFFLE, epoch))
        ).permutation(tr)
        running = 0.0
        for start in range(0, order.size, tcfg.minibatch):
            idx = order[start : start + tcfg.minibatch]
            x = Tensor(tokens[idx])
            pred = forward_tokens(x, params, cfg)
            loss = huber_loss(pred, labels[idx], tcfg.huber_delta)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, step {start // tcfg.minibatch}"
                )
            loss.backward()
            adam_step(
                params,
                {name: p.grad for name, p in params.items()},
                state,
                lr,
                l2=tcfg.l2,
                beta1=tcfg.beta1,
                beta2=tcfg.beta2,
                eps=tcfg.adam_eps,
            )
            params.zero_grad()
            running += value * idx.size
        train_loss = running / order.size
        val_loss = _batched_loss(tokens[va], labels[va], params, cfg, tcfg.huber_delta)
        history.append(EpochStats(epoch, lr, train_loss, val_loss))
        if log is not None:
            log(f"epoch {epoch:3d}  lr {lr:.3e}  train {train_loss:.6f}  val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = params.state()
    return TrainResult(history, best_state, best_epoch, best_val)


def write_history_csv(path, history: list[EpochStats], header_line: str = "") -> None:
    with open(path, "w") as fh:
        if header_line:
            fh.write(f"# {header_line}\n")
        fh.write("epoch,lr,train_loss,val_loss\n")
        for row in history:
            fh.write(f"{row.epoch},{row.lr!r},{row.train_loss!r},{row.val_loss!r}\n")
