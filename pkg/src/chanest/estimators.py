"""Classical channel estimators: pilot LS with grid interpolation, and
ideal linear MMSE built from the profile's closed-form correlations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chanest.baseband import BasebandConfig, SlotGrid
from chanest.channel import PowerDelayProfile
from chanest.interp import linear_interp_matrix


@dataclass
class PilotLsGrid:
    """Least-squares estimates at the pilot resource elements,
    (n_f / l_s) subcarrier rows by n_pilot symbol columns."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise ValueError("pilot grid must be 2-d")


@dataclass
class CorrelationSet:
    """Frequency correlations of the channel at/between pilot subcarriers."""

    r_cp: np.ndarray  # (n_f, n_f/l_s): full grid vs pilot subcarriers
    r_pp: np.ndarray  # (n_f/l_s, n_f/l_s): pilot vs pilot
    noise_ratio: float  # sigma_N^2 / sigma_X^2

    def __post_init__(self):
        self.r_cp = np.asarray(self.r_cp, dtype=np.complex128)
        self.r_pp = np.asarray(self.r_pp, dtype=np.complex128)
        if not np.allclose(self.r_pp, self.r_pp.conj().T):
            raise ValueError("pilot correlation matrix must be Hermitian")


def ls_pilot_estimate(y: SlotGrid, cfg: BasebandConfig) -> PilotLsGrid:
    """Divide the received pilots by the known pilot value."""
    if cfg.pilot_value == 0:
        raise ValueError("pilot value must be nonzero for LS division")
    sub = y.values[cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)]
    return PilotLsGrid(sub / cfg.pilot_value)


def ls_pilot_estimate_batch(y: np.ndarray, cfg: BasebandConfig) -> np.ndarray:
    """Batched LS extraction from stacked received grids (n, n_f, n_s)."""
    if cfg.pilot_value == 0:
        raise ValueError("pilot value must be nonzero for LS division")
    return y[:, cfg.pilot_subcarriers[:, None], list(cfg.pilot_symbols)] / cfg.pilot_value


def _freq_time_matrices(cfg: BasebandConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.pilot_subcarriers.size < 2 or cfg.n_pilot < 2:
        raise ValueError("interpolation needs at least two pilots per axis")
    wf = linear_interp_matrix(cfg.pilot_subcarriers.astype(float), np.arange(cfg.n_f, dtype=float))
    wt = linear_interp_matrix(
        np.asarray(cfg.pilot_symbols, dtype=float), np.arange(cfg.n_s, dtype=float)
    )
    return wf, wt


def interpolate_grid(p: PilotLsGrid, cfg: BasebandConfig) -> SlotGrid:
    """Separable linear interpolation of pilot estimates to the full slot.

    Frequency first, then time; outside the pilot hull the line through the
    two nearest pilots is continued, so affine surfaces are reproduced
    exactly out to the grid edges.
    """
    wf, wt = _freq_time_matrices(cfg)
    return SlotGrid(wf @ p.values @ wt.T, kind="channel")


def interpolate_grid_batch(pilots: np.ndarray, cfg: BasebandConfig) -> np.ndarray:
    """Batched :func:`interpolate_grid` on stacked (n, n_f/l_s, n_pilot) inputs."""
    wf, wt = _freq_time_matrices(cfg)
    return np.asarray(wf, dtype=np.complex128) @ pilots @ np.asarray(wt.T, dtype=np.complex128)


def correlation_from_pdp(
    pdp: PowerDelayProfile, cfg: BasebandConfig, noise_ratio: float = 0.0
) -> CorrelationSet:
    """Closed-form frequency correlation E{H(k) H*(k')} of the profile.

    Each tap contributes its normalized power times a complex exponential in
    the subcarrier difference; delays enter in samples.
    """
    powers = pdp.normalized_powers()
    delays = np.asarray(pdp.delays_ns) * 1e-9 / cfg.t_s
    full = np.arange(cfg.n_f)
    pilot = cfg.pilot_subcarriers

    def corr(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        diff = rows[:, None] - cols[None, :]
        return np.einsum("m,mkq->kq", powers, np.exp(-2j * np.pi * np.multiply.outer(delays, diff) / cfg.n_f))

    return CorrelationSet(corr(full, pilot), corr(pilot, pilot), noise_ratio)


_JITTER = 1e-12


def mmse_weight_matrix(corr: CorrelationSet) -> np.ndarray:
    """W such that W @ h_ls is the per-symbol linear MMSE estimate."""
    n = corr.r_pp.shape[0]
    reg = corr.r_pp + (corr.noise_ratio + _JITTER) * np.eye(n)
    return np.linalg.solve(reg.conj().T, corr.r_cp.conj().T).conj().T


def mmse_estimate(ls: PilotLsGrid, corr: CorrelationSet, cfg: BasebandConfig) -> SlotGrid:
    """Wiener-filter the pilot LS columns, then interpolate linearly in time."""
    if ls.values.shape[0] != corr.r_pp.shape[0]:
        raise ValueError(
            f"pilot count mismatch: LS has {ls.values.shape[0]} rows, "
            f"correlations expect {corr.r_pp.shape[0]}"
        )
    if ls.values.shape[1] != cfg.n_pilot:
        raise ValueError("pilot symbol count does not match config")
    w = mmse_weight_matrix(corr)
    _, wt = _freq_time_matrices(cfg)
    return SlotGrid((w @ ls.values) @ wt.T, kind="channel")
