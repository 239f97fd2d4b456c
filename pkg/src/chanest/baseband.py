"""OFDM slot construction, QPSK mapping, and unitary (de)modulation.

A slot is an ``n_f x n_s`` grid of complex resource elements.  Pilot symbols
carry a fixed-value comb (stride ``l_s``); the remaining resource elements of
pilot symbols are zero, and data symbols are filled subcarrier-fastest in
time order.  Both DFT directions scale by 1/sqrt(N) so the transform chain
is power preserving.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

SQRT_HALF = 1.0 / np.sqrt(2.0)

#: Gray-mapped QPSK constellation indexed by (first_bit, second_bit).
_QPSK = np.array(
    [
        [1.0 + 1.0j, 1.0 - 1.0j],
        [-1.0 + 1.0j, -1.0 - 1.0j],
    ]
) * SQRT_HALF


@dataclass(frozen=True)
class BasebandConfig:
    """Static numerology of the link."""

    n_f: int = 228
    n_s: int = 14
    l_cp: int = 12
    l_s: int = 4
    pilot_symbols: tuple[int, ...] = (2, 5, 8, 11)
    pilot_offset: int = 1
    f_space: float = 15e3
    f_r: float = 5e9
    pilot_value: complex = complex(SQRT_HALF, SQRT_HALF)

    def __post_init__(self):
        if self.n_f % self.l_s:
            raise ValueError(f"n_f={self.n_f} must be divisible by l_s={self.l_s}")
        if not 0 <= self.pilot_offset < self.l_s:
            raise ValueError(f"pilot_offset={self.pilot_offset} must lie in [0, l_s)")
        if any(not 0 <= s < self.n_s for s in self.pilot_symbols):
            raise ValueError(f"pilot_symbols {self.pilot_symbols} outside [0, n_s)")
        if len(set(self.pilot_symbols)) != len(self.pilot_symbols):
            raise ValueError("pilot_symbols must be distinct")
        if not 0 <= self.l_cp < self.n_f:
            raise ValueError(f"l_cp={self.l_cp} must lie in [0, n_f)")

    @property
    def n_pilot(self) -> int:
        return len(self.pilot_symbols)

    @property
    def t_s(self) -> float:
        """Sample period in seconds."""
        return 1.0 / (self.n_f * self.f_space)

    @property
    def t_o(self) -> float:
        """Full OFDM symbol period including the cyclic prefix."""
        return (self.n_f + self.l_cp) * self.t_s

    @property
    def pilot_subcarriers(self) -> np.ndarray:
        return self.pilot_offset + self.l_s * np.arange(self.n_f // self.l_s)

    @property
    def data_symbols(self) -> tuple[int, ...]:
        return tuple(s for s in range(self.n_s) if s not in self.pilot_symbols)

    @property
    def n_data_re(self) -> int:
        return self.n_f * (self.n_s - self.n_pilot)

    @property
    def n_data_bits(self) -> int:
        return 2 * self.n_data_re


@dataclass
class SlotGrid:
    """Complex resource grid with a role marker."""

    values: np.ndarray
    kind: str = "transmitted"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError(f"slot grid must be 2-d, got shape {self.values.shape}")
        if self.kind not in ("transmitted", "received", "channel"):
            raise ValueError(f"unknown grid kind {self.kind!r}")

    def to_csv(self, fh) -> None:
        """Write (subcarrier, symbol, re, im) rows."""
        close = False
        if isinstance(fh, (str, bytes)):
            fh = open(fh, "w")
            close = True
        try:
            fh.write("k,l,re,im\n")
            for k in range(self.values.shape[0]):
                for l in range(self.values.shape[1]):
                    v = self.values[k, l]
                    fh.write(f"{k},{l},{v.real!r},{v.imag!r}\n")
        finally:
            if close:
                fh.close()

    @staticmethod
    def from_csv(fh, kind: str = "transmitted") -> "SlotGrid":
        close = False
        if isinstance(fh, (str, bytes)):
            fh = open(fh)
            close = True
        try:
            rows = [line.strip().split(",") for line in fh if line.strip()][1:]
        finally:
            if close:
                fh.close()
        ks = [int(r[0]) for r in rows]
        ls = [int(r[1]) for r in rows]
        values = np.zeros((max(ks) + 1, max(ls) + 1), dtype=np.complex128)
        for k, l, re, im in rows:
            values[int(k), int(l)] = float(re) + 1j * float(im)
        return SlotGrid(values, kind=kind)


@dataclass
class TimeSignal:
    """Serial complex samples of one slot."""

    samples: np.ndarray
    t_s: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1:
            raise ValueError("time signal must be 1-d")


def qpsk_modulate(bits: np.ndarray) -> np.ndarray:
    """Map bit pairs to unit-power QPSK symbols (Gray: first bit -> I sign)."""
    bits = np.asarray(bits)
    if bits.size % 2:
        raise ValueError(f"bit count must be even, got {bits.size}")
    pairs = bits.reshape(-1, 2).astype(np.intp)
    return _QPSK[pairs[:, 0], pairs[:, 1]]


def qpsk_demodulate(symbols: np.ndarray) -> np.ndarray:
    """Minimum-distance (per-axis sign) decision back to bits."""
    symbols = np.asarray(symbols, dtype=np.complex128).reshape(-1)
    bits = np.empty((symbols.size, 2), dtype=np.uint8)
    bits[:, 0] = symbols.real < 0
    bits[:, 1] = symbols.imag < 0
    return bits.reshape(-1)


def build_slot(data: np.ndarray, cfg: BasebandConfig) -> SlotGrid:
    """Assemble a transmitted grid from data symbols plus the pilot comb."""
    data = np.asarray(data, dtype=np.complex128).reshape(-1)
    if data.size != cfg.n_data_re:
        raise ValueError(f"expected {cfg.n_data_re} data symbols, got {data.size}")
    values = np.zeros((cfg.n_f, cfg.n_s), dtype=np.complex128)
    values[:, list(cfg.data_symbols)] = data.reshape(cfg.n_f, -1, order="F")
    values[cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)] = cfg.pilot_value
    return SlotGrid(values, kind="transmitted")


def extract_data(grid: SlotGrid, cfg: BasebandConfig) -> np.ndarray:
    """Read data resource elements back in the fill order of build_slot."""
    return grid.values[:, list(cfg.data_symbols)].reshape(-1, order="F")


def unitary_dft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """DFT along axis 0 with 1/sqrt(N) scaling in both directions."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty transform")
    if inverse:
        return np.fft.ifft(x, axis=0) * np.sqrt(n)
    return np.fft.fft(x, axis=0) / np.sqrt(n)


def ofdm_modulate(grid: SlotGrid, cfg: BasebandConfig) -> TimeSignal:
    """Per-symbol inverse transform plus cyclic prefix, serialized in time."""
    if grid.values.shape != (cfg.n_f, cfg.n_s):
        raise ValueError(f"grid shape {grid.values.shape} does not match config")
    time = unitary_dft(grid.values, inverse=True)
    with_cp = np.concatenate([time[-cfg.l_cp :], time], axis=0) if cfg.l_cp else time
    return TimeSignal(with_cp.reshape(-1, order="F"), cfg.t_s)


def ofdm_demodulate(sig: TimeSignal, cfg: BasebandConfig, kind: str = "received") -> SlotGrid:
    """Drop each symbol's prefix and transform back to the grid."""
    per_symbol = cfg.n_f + cfg.l_cp
    expected = cfg.n_s * per_symbol
    if sig.samples.size != expected:
        raise ValueError(f"expected {expected} samples, got {sig.samples.size}")
    symbols = sig.samples.reshape(per_symbol, cfg.n_s, order="F")[cfg.l_cp :]
    return SlotGrid(unitary_dft(symbols), kind=kind)
