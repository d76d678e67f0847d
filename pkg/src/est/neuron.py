"""Integrate-and-fire population with soft reset and strict threshold.

The recurrence is

    u[t] = u[t-1] + I[t] - v * o[t-1]
    o[t] = 1 if u[t] > v else 0

so the reset for a spike at step t is applied while integrating step t+1.
Membranes start at zero and are never clamped from below.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from est.errors import AccountingError, ConfigError, DimensionError, ThresholdError


@dataclass(frozen=True)
class IfState:
    u: np.ndarray
    o_prev: np.ndarray  # uint8, 0/1
    v: float
    t: int = 0
    n_spikes: int = 0  # running total, kept independently of any spike record

    @property
    def shape(self) -> tuple[int, ...]:
        return self.u.shape


def if_init(n, v: float) -> IfState:
    """Fresh population. ``n`` may be an int or a shape tuple."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if any(int(s) < 1 for s in shape):
        raise ConfigError(f"population size must be >= 1, got {n}")
    if not (np.isfinite(v) and v > 0):
        raise ThresholdError(f"threshold must be > 0, got {v}")
    return IfState(np.zeros(shape), np.zeros(shape, dtype=np.uint8), float(v))


def if_step(s: IfState, input_current) -> tuple[np.ndarray, IfState]:
    current = np.asarray(input_current, dtype=np.float64)
    if current.shape != s.u.shape:
        raise DimensionError(f"if_step: input shape {current.shape} != state shape {s.u.shape}")
    u = s.u + current - s.v * s.o_prev
    spikes = (u > s.v).astype(np.uint8)
    return spikes, IfState(u, spikes, s.v, s.t + 1, s.n_spikes + int(spikes.sum()))


def with_threshold(s: IfState, v: float) -> IfState:
    if not v > 0:
        raise ThresholdError(f"threshold must be > 0, got {v}")
    return replace(s, v=float(v))


def encode_direct(x, T: int) -> np.ndarray:
    """Constant-current encoding: the analog input repeated on a new leading time axis."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    x = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(x, (T, *x.shape)).copy()


def rate_decode(spike_count, T: int, v: float) -> np.ndarray:
    """Activation estimate ``count * v / T``."""
    count = np.asarray(spike_count)
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if (count < 0).any() or (count > T).any():
        raise AccountingError(f"spike counts must lie in [0, {T}]")
    return count * v / T


def simulate(stream, v: float) -> tuple[np.ndarray, IfState]:
    """Drive a fresh population with a ``(T, n)`` current stream.

    Returns the ``(T, n)`` spike raster and the final state.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2:
        raise DimensionError(f"simulate: expected a (T, n) stream, got shape {stream.shape}")
    s = if_init(stream.shape[1], v)
    raster = np.zeros(stream.shape, dtype=np.uint8)
    for step, cur in enumerate(stream):
        raster[step], s = if_step(s, cur)
    return raster, s
