"""Signal front-end: normalization, Chebyshev II filter bank, temporal
segmentation and covariance tensors.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import DomainError

DEFAULT_BANDS = tuple((f, f + 4) for f in range(4, 40, 4))


@dataclass(frozen=True)
class BandSpec:
    bands: tuple = DEFAULT_BANDS
    order: int = 4
    stopband_atten_db: float = 30.0
    transition_hz: float = 2.0

    def validate(self, fs):
        if not self.bands:
            raise ValueError("at least one band is required")
        for lo, hi in self.bands:
            if not 0 < lo < hi < fs / 2:
                raise ValueError(f"band ({lo}, {hi}) Hz is invalid for fs={fs} Hz")
            if hi + self.transition_hz >= fs / 2:
                raise ValueError(f"band ({lo}, {hi}) Hz leaves no stopband below Nyquist")


@dataclass(frozen=True)
class SegSpec:
    omega: int
    s: int
    p: int = 0

    def __post_init__(self):
        if self.omega < 2:
            raise ValueError(f"window length must be >= 2, got {self.omega}")
        if self.s < 1:
            raise ValueError(f"stride must be >= 1, got {self.s}")
        if self.p < 0:
            raise ValueError(f"padding must be >= 0, got {self.p}")

    def n_windows(self, T):
        span = T + 2 * self.p - self.omega
        if span < 0:
            raise ValueError(
                f"window of {self.omega} samples exceeds the padded trial "
                f"({T} + 2*{self.p} samples)"
            )
        return span // self.s + 1


def center_scale(x):
    """Zero-mean every channel, then divide by the pooled standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(np.mean(xc ** 2))
    if not sd > 0:
        raise ValueError("trial has zero variance; cannot scale")
    return xc / sd


@dataclass
class FilterBank:
    """Designed second-order sections, one array per band."""

    fs: float
    spec: BandSpec
    sos: list = field(default_factory=list)


def design_filterbank(fs, spec: BandSpec = BandSpec()):
    """Design one causal Chebyshev type II band-pass per band.

    Stopband edges sit ``transition_hz`` outside each passband; the digital
    filter comes from the bilinear transform and is stored as biquads.
    """
    spec.validate(fs)
    sos = []
    for lo, hi in spec.bands:
        edges = [max(lo - spec.transition_hz, 0.5 * lo), hi + spec.transition_hz]
        s = sps.cheby2(spec.order, spec.stopband_atten_db, edges,
                       btype="bandpass", output="sos", fs=fs)
        _, poles, _ = sps.sos2zpk(s)
        if np.any(np.abs(poles) >= 1.0):
            raise DomainError(f"designed filter for band {lo}-{hi} Hz is unstable")
        sos.append(s)
    return FilterBank(fs, spec, sos)


def apply_filterbank(x, bank: FilterBank):
    """Causal forward-only filtering of ``(C, T)`` (or ``(N, C, T)``) data.

    Returns an array with a new band axis in front of the channel axis:
    ``(F, C, T)`` or ``(N, F, C, T)``.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.stack([sps.sosfilt(s, x, axis=-1) for s in bank.sos], axis=-3)
    return out


def segment_stack(x, seg: SegSpec):
    """Cut ``(..., F, C, T)`` into ``(..., W, F, C, omega)`` windows.

    The signal is zero-padded by ``p`` samples on each side and window ``i``
    starts at sample ``i*s`` of the padded signal.
    """
    T = x.shape[-1]
    nwin = seg.n_windows(T)
    if seg.p:
        pad = [(0, 0)] * (x.ndim - 1) + [(seg.p, seg.p)]
        x = np.pad(x, pad)
    wins = [x[..., i * seg.s:i * seg.s + seg.omega] for i in range(nwin)]
    return np.stack(wins, axis=-4)


def covariance(seg, ridge=1e-4):
    """Spatial covariance ``X X^T / omega`` plus a trace-relative ridge.

    Raises
    ------
    DomainError
        If any window has zero energy.
    """
    omega, C = seg.shape[-1], seg.shape[-2]
    S = seg @ np.swapaxes(seg, -1, -2) / omega
    tr = np.trace(S, axis1=-2, axis2=-1)
    if np.any(tr <= 0):
        raise DomainError("degenerate window: zero signal energy")
    if ridge:
        S = S + (ridge * tr / C)[..., None, None] * np.eye(C)
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def tensor_stack(trials, fs, bands: BandSpec, seg: SegSpec, ridge=1e-4, bank=None):
    """Full front-end: ``(N, C, T)`` raw trials to ``(N, W, F, C, C)`` SPD tensors."""
    bank = design_filterbank(fs, bands) if bank is None else bank
    x = np.stack([center_scale(t) for t in np.asarray(trials, dtype=np.float64)])
    return covariance(segment_stack(apply_filterbank(x, bank), seg), ridge)
