"""Multipath Rayleigh fading: tapped-delay-line realizations and application.

Realizations are drawn per slot from a power-delay profile with Jakes-style
Doppler.  The frequency-domain pathway (per-RE multiply plus AWGN) is the
canonical channel model used for dataset generation and evaluation; the
time-domain convolution pathway exists to validate it on realizations whose
delays are integer sample counts within the cyclic prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chanest.baseband import BasebandConfig, SlotGrid, TimeSignal

#: 3GPP TS 36.101 Annex B.2 Extended Typical Urban tapped-delay-line profile.
ETU_DELAYS_NS = (0.0, 50.0, 120.0, 200.0, 230.0, 500.0, 1600.0, 2300.0, 5000.0)
ETU_POWERS_DB = (-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, -3.0, -5.0, -7.0)


@dataclass(frozen=True)
class PowerDelayProfile:
    """Average per-path power (dB) at fixed delays (ns)."""

    name: str
    delays_ns: tuple[float, ...]
    powers_db: tuple[float, ...]

    def __post_init__(self):
        if len(self.delays_ns) != len(self.powers_db):
            raise ValueError("delay and power lists differ in length")
        if len(self.delays_ns) == 0:
            raise ValueError("profile needs at least one tap")
        if any(d1 < d0 for d0, d1 in zip(self.delays_ns, self.delays_ns[1:])):
            raise ValueError("delays must be nondecreasing")

    def normalized_powers(self) -> np.ndarray:
        """Linear per-path powers scaled to sum to one."""
        linear = 10.0 ** (np.asarray(self.powers_db) / 10.0)
        return linear / linear.sum()


ETU = PowerDelayProfile("etu", ETU_DELAYS_NS, ETU_POWERS_DB)

_BUILTIN_PDPS = {"etu": ETU}


def builtin_pdp(name: str) -> PowerDelayProfile:
    try:
        return _BUILTIN_PDPS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown power-delay profile {name!r}") from None


@dataclass
class ChannelRealization:
    """One drawn multipath channel: complex gains, delays, Doppler, phases."""

    gains: np.ndarray  # complex, unit total average power in expectation
    delays: np.ndarray  # in samples, real-valued
    dopplers: np.ndarray  # Hz
    phases: np.ndarray  # rad
    f_d_max: float

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.complex128)
        self.delays = np.asarray(self.delays, dtype=np.float64)
        self.dopplers = np.asarray(self.dopplers, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        if np.any(self.delays < 0):
            raise ValueError("path delays must be nonnegative")
        if np.any(np.abs(self.dopplers) > self.f_d_max + 1e-9):
            raise ValueError("per-path Doppler exceeds f_d_max")


@dataclass
class FrequencyResponse:
    """Channel gain per (subcarrier, symbol)."""

    h: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)


def sample_realization(
    pdp: PowerDelayProfile, f_d_max: float, rng: np.random.Generator, cfg: BasebandConfig
) -> ChannelRealization:
    """Draw Rayleigh path gains, Jakes Doppler, and uniform phases.

    Draw order per realization is fixed (gains, Doppler angles, phases) so
    seeded streams reproduce bit-exactly.
    """
    if f_d_max < 0:
        raise ValueError("f_d_max must be nonnegative")
    sigma = np.sqrt(pdp.normalized_powers())
    m = sigma.size
    g = rng.standard_normal((m, 2))
    gains = sigma * (g[:, 0] + 1j * g[:, 1]) / np.sqrt(2.0)
    theta = rng.uniform(0.0, 2.0 * np.pi, m)
    dopplers = f_d_max * np.cos(theta)
    phases = rng.uniform(0.0, 2.0 * np.pi, m)
    delays = np.asarray(pdp.delays_ns) * 1e-9 / cfg.t_s
    return ChannelRealization(gains, delays, dopplers, phases, f_d_max)


def _gains_at(ch: ChannelRealization, t: float) -> np.ndarray:
    return ch.gains * np.exp(-1j * (2.0 * np.pi * ch.dopplers * t + ch.phases))


def channel_taps(ch: ChannelRealization, t: float, cfg: BasebandConfig) -> np.ndarray:
    """Discrete-time taps of the channel at time ``t``.

    Fractional delays spread over all n_f taps through the periodic-sinc
    (Dirichlet) kernel, normalized so an integer delay d gives a single tap
    of the path gain at index d.
    """
    n = cfg.n_f
    idx = np.arange(n)
    taps = np.zeros(n, dtype=np.complex128)
    for a, tau in zip(_gains_at(ch, t), ch.delays):
        nearest = np.round(tau)
        if abs(tau - nearest) < 1e-9:
            taps[int(nearest) % n] += a
            continue
        phase = np.exp(-1j * np.pi * (idx + (n - 1) * tau) / n)
        dirichlet = np.sin(np.pi * tau) / np.sin(np.pi * (tau - idx) / n)
        taps += a * phase * dirichlet / n
    return taps


def freq_response(ch: ChannelRealization, cfg: BasebandConfig) -> FrequencyResponse:
    """Per-RE channel gain: each path contributes a delay ramp over
    subcarriers and a Doppler rotation over symbols."""
    k = np.arange(cfg.n_f)
    l = np.arange(cfg.n_s)
    ramp = np.exp(-2j * np.pi * np.outer(ch.delays, k) / cfg.n_f)  # (m, n_f)
    rot = _gains_at(ch, 0.0)[:, None] * np.exp(
        -2j * np.pi * np.outer(ch.dopplers, l) * cfg.t_o
    )  # (m, n_s)
    return FrequencyResponse(np.einsum("mk,ml->kl", ramp, rot))


def freq_response_batch(
    gains: np.ndarray,
    delays: np.ndarray,
    dopplers: np.ndarray,
    phases: np.ndarray,
    cfg: BasebandConfig,
) -> np.ndarray:
    """Vectorized :func:`freq_response` for stacked realizations.

    ``gains``/``dopplers``/``phases`` are ``(n, m)``; ``delays`` is ``(m,)``
    shared across the batch (fixed-profile draws).  Returns ``(n, n_f, n_s)``.
    """
    k = np.arange(cfg.n_f)
    l = np.arange(cfg.n_s)
    ramp = np.exp(-2j * np.pi * np.outer(delays, k) / cfg.n_f)  # (m, n_f)
    rot = gains[:, :, None] * np.exp(
        -1j * (2.0 * np.pi * dopplers[:, :, None] * cfg.t_o * l + phases[:, :, None])
    )  # (n, m, n_s)
    return np.einsum("nml,mk->nkl", rot, ramp)


def apply_channel_freq(
    grid: SlotGrid,
    h: FrequencyResponse,
    snr_db: float | None,
    rng: np.random.Generator,
    power_scope: str = "nonzero",
) -> SlotGrid:
    """Y = H * X + N with noise power set from the requested SNR.

    The signal power reference is the mean power of the grid's nonzero
    resource elements by default ("full" uses every RE, including the zeroed
    vacant pilot subcarriers).  ``snr_db=None`` disables noise.
    """
    x = grid.values
    if h.h.shape != x.shape:
        raise ValueError(f"response shape {h.h.shape} does not match grid {x.shape}")
    y = h.h * x
    if snr_db is not None and np.isfinite(snr_db):
        sigma_x2 = _signal_power(x, power_scope)
        sigma_n2 = sigma_x2 * 10.0 ** (-snr_db / 10.0)
        noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
        y = y + np.sqrt(sigma_n2 / 2.0) * noise
    return SlotGrid(y, kind="received")


def _signal_power(x: np.ndarray, scope: str) -> float:
    if scope == "full":
        return float(np.mean(np.abs(x) ** 2))
    if scope == "nonzero":
        nz = x[x != 0]
        if nz.size == 0:
            raise ValueError("grid has no nonzero resource elements")
        return float(np.mean(np.abs(nz) ** 2))
    raise ValueError(f"unknown power scope {scope!r}")


def apply_channel_time(
    sig: TimeSignal,
    ch: ChannelRealization,
    snr_db: float | None,
    rng: np.random.Generator,
    cfg: BasebandConfig,
) -> TimeSignal:
    """Per-symbol linear convolution with quasi-static taps plus AWGN.

    Restricted to integer delays within the cyclic prefix; tails spill into
    the following symbol's samples.  Taps are held constant across each OFDM
    symbol, evaluated at the symbol start.
    """
    rounded = np.round(ch.delays)
    if np.any(np.abs(ch.delays - rounded) > 1e-9):
        raise ValueError("time pathway requires integer sample delays")
    if np.any(rounded > cfg.l_cp):
        raise ValueError(f"path delay beyond the cyclic prefix ({cfg.l_cp} samples)")
    per_symbol = cfg.n_f + cfg.l_cp
    if sig.samples.size != cfg.n_s * per_symbol:
        raise ValueError("signal length does not match the slot layout")
    out = np.zeros(sig.samples.size + cfg.l_cp, dtype=np.complex128)
    for sym in range(cfg.n_s):
        taps = np.zeros(cfg.l_cp + 1, dtype=np.complex128)
        for a, d in zip(_gains_at(ch, sym * cfg.t_o), rounded.astype(int)):
            taps[d] += a
        start = sym * per_symbol
        block = sig.samples[start : start + per_symbol]
        out[start : start + per_symbol + cfg.l_cp] += np.convolve(block, taps)
    y = out[: sig.samples.size]
    if snr_db is not None and np.isfinite(snr_db):
        sigma_x2 = float(np.mean(np.abs(sig.samples) ** 2))
        sigma_n2 = sigma_x2 * 10.0 ** (-snr_db / 10.0)
        noise = rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        y = y + np.sqrt(sigma_n2 / 2.0) * noise
    return TimeSignal(y, sig.t_s)
