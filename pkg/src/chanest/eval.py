"""Monte Carlo MSE/BER sweeps over SNR with paired trials, plus kernel
scaling benchmarks.

Every estimator at a given (SNR, trial) sees the identical realization,
transmitted slot, and noise, so comparisons are paired.  Trials are chunked
and evaluated batched; accumulation uses compensated summation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from chanest import __version__
from chanest._alloc import tune_allocator
from chanest.baseband import (
    BasebandConfig,
    SlotGrid,
    build_slot,
    extract_data,
    qpsk_demodulate,
    qpsk_modulate,
)
from chanest.channel import PowerDelayProfile, freq_response_batch, sample_realization
from chanest.estimators import (
    correlation_from_pdp,
    interpolate_grid_batch,
    ls_pilot_estimate_batch,
    mmse_weight_matrix,
)
from chanest.interp import linear_interp_matrix
from chanest.mambanet import infer_batch, load_checkpoint
from chanest.scan_backend import ACTIVE_BACKEND, available_backends

_NS_EVAL = 1

_EQ_FLOOR = 1e-12


def mse_metric(est, truth) -> float:
    """Per-slot mean squared complex error between estimate and truth."""
    e = est.values if isinstance(est, SlotGrid) else np.asarray(est)
    t = getattr(truth, "h", truth)
    t = np.asarray(t)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch: estimate {e.shape} vs truth {t.shape}")
    return float(np.mean(np.abs(e - t) ** 2))


def equalize_and_demodulate(est_values, rx_values, cfg: BasebandConfig) -> np.ndarray:
    """One-tap zero-forcing on the data resource elements, then QPSK bits."""
    h = np.asarray(est_values)
    if h.ndim != 2:
        raise ValueError("expected one slot")
    mag = np.abs(h)
    h_safe = np.where(mag < _EQ_FLOOR, _EQ_FLOOR, h)
    xhat = np.asarray(rx_values) / h_safe
    data = xhat[:, list(cfg.data_symbols)].reshape(-1, order="F")
    return qpsk_demodulate(data)


def ber_metric(est, rx, tx_bits: np.ndarray, cfg: BasebandConfig) -> float:
    """Fraction of mismatched data bits after equalizing with the estimate."""
    e = est.values if isinstance(est, SlotGrid) else np.asarray(est)
    r = rx.values if isinstance(rx, SlotGrid) else np.asarray(rx)
    bits = equalize_and_demodulate(e, r, cfg)
    tx_bits = np.asarray(tx_bits).reshape(-1)
    if bits.size != tx_bits.size:
        raise ValueError(f"bit count mismatch: {bits.size} vs {tx_bits.size}")
    return float(np.mean(bits != tx_bits))


# ---------------------------------------------------------------------------
# estimators under test


@dataclass(frozen=True)
class EstimatorSpec:
    """Picklable description of an estimator to evaluate."""

    name: str
    kind: str  # ls | mmse | mambanet | perfect
    checkpoint: str | None = None


@dataclass
class TrialBatch:
    """One chunk of paired trials at a fixed SNR."""

    tx: np.ndarray  # (n, n_f, n_s)
    rx: np.ndarray
    ls: np.ndarray  # (n, n_f/l_s, n_pilot)
    truth: np.ndarray  # (n, n_f, n_s); only ideal estimators may read it
    bits: np.ndarray  # (n, n_bits)
    snr_db: float


def build_estimators(specs, cfg: BasebandConfig, pdp: PowerDelayProfile):
    """Bind specs to batched callables TrialBatch -> (n, n_f, n_s) estimates."""
    bound = []
    for spec in specs:
        if spec.kind == "ls":
            fn = lambda batch: interpolate_grid_batch(batch.ls, cfg)
        elif spec.kind == "mmse":
            wt = linear_interp_matrix(
                np.asarray(cfg.pilot_symbols, dtype=float), np.arange(cfg.n_s, dtype=float)
            ).T.astype(np.complex128)
            cache: dict[float, np.ndarray] = {}

            def fn(batch, _wt=wt, _cache=cache):
                w = _cache.get(batch.snr_db)
                if w is None:
                    ratio = 10.0 ** (-batch.snr_db / 10.0)
                    w = mmse_weight_matrix(correlation_from_pdp(pdp, cfg, ratio))
                    _cache[batch.snr_db] = w
                return (w @ batch.ls) @ _wt

        elif spec.kind == "mambanet":
            if spec.checkpoint is None:
                raise ValueError(f"estimator {spec.name!r} needs a checkpoint path")
            params, mcfg, _ = load_checkpoint(spec.checkpoint)
            if (mcfg.n_f, mcfg.n_s, mcfg.l_s, mcfg.n_pilot) != (
                cfg.n_f,
                cfg.n_s,
                cfg.l_s,
                cfg.n_pilot,
            ):
                raise ValueError("checkpoint was trained for a different slot layout")

            def fn(batch, _p=params, _c=mcfg):
                return infer_batch(batch.ls, _p, _c)

        elif spec.kind == "perfect":
            fn = lambda batch: batch.truth
        else:
            raise ValueError(f"unknown estimator kind {spec.kind!r}")
        bound.append((spec.name, fn))
    return bound


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    snr_db: float
    estimator: str
    mse: float
    ber: float
    n_trials: int


@dataclass
class SweepReport:
    rows: list[SweepRow]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.rows:
            if row.mse < 0:
                raise ValueError("negative MSE")
            if not math.isnan(row.ber) and not 0.0 <= row.ber <= 0.5 + 1e-3:
                raise ValueError(f"BER {row.ber} outside the random-guessing bound")

    def to_csv(self, fh) -> None:
        close = isinstance(fh, (str, bytes))
        if close:
            fh = open(fh, "w")
        try:
            meta = ",".join(f"{k}={self.meta[k]}" for k in sorted(self.meta))
            fh.write(f"# chanest v{__version__} {meta}\n")
            fh.write("snr_db,estimator,mse,ber,n_trials\n")
            for r in self.rows:
                fh.write(f"{r.snr_db!r},{r.estimator},{r.mse!r},{r.ber!r},{r.n_trials}\n")
        finally:
            if close:
                fh.close()

    def to_text(self) -> str:
        names = sorted({r.estimator for r in self.rows})
        snrs = sorted({r.snr_db for r in self.rows})
        by = {(r.snr_db, r.estimator): r for r in self.rows}
        out = ["metric   snr_db  " + "".join(f"{n:>14}" for n in names)]
        for metric in ("mse", "ber"):
            for s in snrs:
                cells = "".join(f"{getattr(by[(s, n)], metric):>14.6g}" for n in names)
                out.append(f"{metric:<8} {s:6g}  {cells}")
        return "\n".join(out)


def _draw_trials(
    count: int, snr_index: int, start: int, snr_db: float, fd_range, cfg, pdp, seed
):
    m = len(pdp.delays_ns)
    gains = np.empty((count, m), dtype=np.complex128)
    dopplers = np.empty((count, m))
    phases = np.empty((count, m))
    bits = np.empty((count, cfg.n_data_bits), dtype=np.uint8)
    noise = np.empty((count, cfg.n_f, cfg.n_s), dtype=np.complex128)
    delays = None
    for j in range(count):
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(_NS_EVAL, snr_index, start + j))
        )
        fd = rng.uniform(*fd_range)
        ch = sample_realization(pdp, fd, rng, cfg)
        gains[j] = ch.gains
        dopplers[j] = ch.dopplers
        phases[j] = ch.phases
        delays = ch.delays
        bits[j] = rng.integers(0, 2, cfg.n_data_bits)
        noise[j] = rng.standard_normal((cfg.n_f, cfg.n_s)) + 1j * rng.standard_normal(
            (cfg.n_f, cfg.n_s)
        )
    truth = freq_response_batch(gains, delays, dopplers, phases, cfg)
    sym = qpsk_modulate(bits.reshape(-1)).reshape(count, cfg.n_data_re)
    tx = np.zeros((count, cfg.n_f, cfg.n_s), dtype=np.complex128)
    tx[:, :, list(cfg.data_symbols)] = sym.reshape(count, cfg.n_f, -1, order="F")
    tx[:, cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)] = cfg.pilot_value
    nz = tx[0] != 0
    sigma_x2 = float(np.mean(np.abs(tx[0][nz]) ** 2))
    sigma_n = np.sqrt(sigma_x2 * 10.0 ** (-snr_db / 10.0) / 2.0)
    rx = truth * tx + sigma_n * noise
    ls = ls_pilot_estimate_batch(rx, cfg)
    return TrialBatch(tx, rx, ls, truth, bits, snr_db)


def _batch_ber(est: np.ndarray, batch: TrialBatch, cfg: BasebandConfig) -> np.ndarray:
    mag = np.abs(est)
    h_safe = np.where(mag < _EQ_FLOOR, _EQ_FLOOR, est)
    xhat = batch.rx / h_safe
    data = xhat[:, :, list(cfg.data_symbols)].reshape(est.shape[0], -1, order="F")
    bits = np.empty((est.shape[0], cfg.n_data_bits), dtype=np.uint8)
    bits[:, 0::2] = data.real < 0
    bits[:, 1::2] = data.imag < 0
    return np.mean(bits != batch.bits, axis=1)


def monte_carlo_sweep(
    specs,
    snr_list,
    n_trials: int,
    cfg: BasebandConfig,
    pdp: PowerDelayProfile,
    fd_range=(0.0, 97.0),
    seed: int = 0,
    compute_ber: bool = True,
    chunk: int = 500,
    trial_dump=None,
) -> SweepReport:
    """Paired-trial mean MSE/BER per (SNR, estimator).

    ``trial_dump``, if given, receives one CSV line per (trial, estimator)
    for debugging.
    """
    if n_trials < 1:
        raise ValueError("need at least one trial")
    tune_allocator()
    estimators = build_estimators(specs, cfg, pdp)
    rows = []
    for si, snr in enumerate(snr_list):
        mse_parts = {name: [] for name, _ in estimators}
        ber_parts = {name: [] for name, _ in estimators}
        for start in range(0, n_trials, chunk):
            count = min(chunk, n_trials - start)
            batch = _draw_trials(count, si, start, snr, fd_range, cfg, pdp, seed)
            for name, fn in estimators:
                est = fn(batch)
                per_trial = np.mean(np.abs(est - batch.truth) ** 2, axis=(1, 2))
                mse_parts[name].extend(per_trial.tolist())
                if compute_ber:
                    bers = _batch_ber(est, batch, cfg)
                    ber_parts[name].extend(bers.tolist())
                if trial_dump is not None:
                    for j, v in enumerate(per_trial):
                        b = ber_parts[name][start + j] if compute_ber else float("nan")
                        trial_dump.write(f"{snr!r},{start + j},{name},{v!r},{b!r}\n")
        for name, _ in estimators:
            mse = math.fsum(mse_parts[name]) / n_trials
            ber = math.fsum(ber_parts[name]) / n_trials if compute_ber else float("nan")
            rows.append(SweepRow(float(snr), name, mse, ber, n_trials))
    meta = {
        "seed": seed,
        "n_trials": n_trials,
        "fd_range": f"{fd_range[0]:g}-{fd_range[1]:g}",
        "backend": ACTIVE_BACKEND,
    }
    return SweepReport(rows, meta)


# ---------------------------------------------------------------------------
# scaling benchmarks


def _median_time(fn, reps: int) -> float:
    fn()  # warmup
    est = 1e-4
    t0 = time.perf_counter()
    fn()
    est = max(time.perf_counter() - t0, 1e-7)
    iters = max(1, int(0.005 / est))
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(iters):
            fn()
        times.append((time.perf_counter() - t0) / iters)
    return float(np.median(times))


def _attention_score_time(length: int, width: int, rng) -> float:
    q = rng.standard_normal((length, width))
    kt = rng.standard_normal((width, length))
    rows = max(1, min(length, (1 << 22) // length))
    buf = np.empty((rows, length))

    def product():
        for i in range(0, length, rows):
            n = min(rows, length - i)
            np.matmul(q[i : i + n], kt, out=buf[:n])

    return product


@dataclass
class BenchReport:
    rows: list[dict]
    slopes: dict[str, float]
    meta: dict

    def to_csv(self, fh) -> None:
        close = isinstance(fh, (str, bytes))
        if close:
            fh = open(fh, "w")
        try:
            keys = [k for k in self.rows[0] if k != "L"]
            meta = ",".join(f"{k}={self.meta[k]}" for k in sorted(self.meta))
            fh.write(f"# chanest v{__version__} {meta}\n")
            fh.write("L," + ",".join(keys) + "\n")
            for row in self.rows:
                fh.write(f"{row['L']}," + ",".join(repr(row[k]) for k in keys) + "\n")
        finally:
            if close:
                fh.close()


def bench_scan_scaling(
    lengths=tuple(2**k for k in range(8, 15)),
    reps: int = 5,
    width: int = 24,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of the scan kernels and of a dense attention score
    product per sequence length, with fitted log-log slopes.

    The scan is timed on every importable backend, so the compiled kernel
    and the pure-numpy fallback can be compared directly.
    """
    tune_allocator()
    rng = np.random.default_rng(seed)
    backends = available_backends()
    rows = []
    for length in lengths:
        a = np.ascontiguousarray(rng.uniform(0.01, 0.99, (length, width)))
        b = np.ascontiguousarray(rng.standard_normal((length, width)))
        row: dict = {"L": length}
        for name, mod in backends.items():
            row[f"scan_{name}_s"] = _median_time(lambda m=mod: m.bidir_scan(a, b), reps)
        row["attention_s"] = _median_time(_attention_score_time(length, 2, rng), reps)
        rows.append(row)
    logl = np.log([r["L"] for r in rows])
    slopes = {}
    for key in rows[0]:
        if key == "L":
            continue
        series = np.log([r[key] for r in rows])
        slopes[key.removesuffix("_s")] = float(np.polyfit(logl, series, 1)[0])
    meta = {"width": width, "reps": reps, "active_backend": ACTIVE_BACKEND}
    return BenchReport(rows, slopes, meta)
