"""Framing, windows, STFT/ISTFT and overlap-add.

Every transform here is linear in the signal. The ``*_t`` functions take and
return :class:`~cdtcn.numerics.Tensor` objects and carry gradients through
the exact adjoint; the plain functions operate on numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import DimensionError, ParameterError, Tensor, linear_op

OLA_FLOOR = 1e-8


@dataclass
class SignalFrameMatrix:
    frames: np.ndarray  # L x K, column k is segment k
    frame_len: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]


@dataclass
class PackedSpectrogram:
    """Rows 0..F-1 hold real parts, rows F..2F-1 imaginary parts."""

    values: np.ndarray
    n_fft: int
    win_len: int
    hop: int
    window: str = "hann"
    length: Optional[int] = None  # source length, used by istft to crop
    center: bool = True

    @property
    def n_bins(self) -> int:
        return self.values.shape[0] // 2


def hann(n: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window; overlap-adds to exactly 1 at hop n/2."""
    if n <= 0:
        raise ParameterError(f"hann: length must be positive, got {n}")
    i = np.arange(n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * i / n)).astype(dtype)


def get_window(kind: str, n: int, dtype=np.float64) -> np.ndarray:
    if kind == "hann":
        return hann(n, dtype)
    if kind in ("rect", "boxcar", "none"):
        return np.ones(n, dtype=dtype)
    raise ParameterError(f"unknown window {kind!r}")


def num_frames(T: int, L: int, hop: int) -> int:
    """Frame count with the trailing partial frame zero-padded in."""
    if T <= L:
        return 1
    return -(-(T - L) // hop) + 1


def padded_length(T: int, L: int, hop: int) -> int:
    return (num_frames(T, L, hop) - 1) * hop + L


def _check_frame_args(L: int, hop: int) -> None:
    if L <= 0 or hop <= 0:
        raise ParameterError(f"frame length and hop must be positive, got L={L} hop={hop}")


def _frame(x: np.ndarray, L: int, hop: int) -> np.ndarray:
    T = x.shape[-1]
    K = num_frames(T, L, hop)
    total = (K - 1) * hop + L
    if total > T:
        x = np.concatenate([x, np.zeros(total - T, dtype=x.dtype)])
    idx = np.arange(L)[:, None] + hop * np.arange(K)[None, :]
    return x[idx]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    L, K = frames.shape
    out = np.zeros((K - 1) * hop + L, dtype=frames.dtype)
    if hop >= L:
        for k in range(K):
            out[k * hop : k * hop + L] += frames[:, k]
        return out
    # one strided add per row of the frame matrix
    span = hop * (K - 1) + 1
    for i in range(L):
        out[i : i + span : hop] += frames[i]
    return out


def frame_signal(x, L: int, hop: int) -> SignalFrameMatrix:
    _check_frame_args(L, hop)
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError(f"frame_signal: expected 1-D samples, got shape {x.shape}")
    if x.shape[0] < L:
        raise DimensionError(f"frame_signal: signal of {x.shape[0]} samples shorter than frame {L}")
    return SignalFrameMatrix(_frame(x, L, hop), L, hop)


def _ola_envelope(window: np.ndarray, K: int, hop: int) -> np.ndarray:
    w2 = np.repeat((window * window)[:, None], K, axis=1)
    return np.maximum(_overlap_add(w2, hop), OLA_FLOOR)


def overlap_add(S, hop: int, synthesis_window=None) -> np.ndarray:
    """Scatter-add columns of an L x K matrix at multiples of ``hop``.

    With a synthesis window the columns are windowed and the sum is divided
    by the overlapped squared-window envelope (floored at 1e-8).
    """
    S = np.asarray(S)
    L, K = S.shape
    if hop <= 0 or hop > L:
        raise ParameterError(f"overlap_add: hop must be in [1, {L}], got {hop}")
    if synthesis_window is None:
        return _overlap_add(S, hop)
    w = np.asarray(synthesis_window, dtype=S.dtype)
    if w.shape != (L,):
        raise DimensionError(f"overlap_add: window length {w.shape[0]} != frame length {L}")
    return _overlap_add(S * w[:, None], hop) / _ola_envelope(w, K, hop).astype(S.dtype)


def _check_stft_args(n_fft: int, win_len: int, hop: int) -> None:
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise ParameterError(f"stft: n_fft must be a power of two, got {n_fft}")
    if not 0 < win_len <= n_fft:
        raise ParameterError(f"stft: win_len must be in [1, n_fft={n_fft}], got {win_len}")
    if not 0 < hop <= win_len:
        raise ParameterError(f"stft: hop must be in [1, win_len={win_len}], got {hop}")


class StftOperator:
    """Packed STFT and its inverse for a fixed geometry and signal length.

    ``center`` pads ``win_len - hop`` zeros at both ends so that every input
    sample sits under at least two well-weighted window taps, which keeps
    the inverse exact and well conditioned at the signal edges. ``n_rows`` truncates the packed output to the first
    ``n_rows // 2`` bins (real then imaginary).
    """

    def __init__(self, n_fft: int, win_len: int, hop: int, window: str = "hann",
                 center: bool = True, n_rows: Optional[int] = None):
        _check_stft_args(n_fft, win_len, hop)
        self.n_fft = n_fft
        self.win_len = win_len
        self.hop = hop
        self.window = window
        self.center = center
        self.n_bins = n_fft // 2 + 1
        self.n_keep = self.n_bins if n_rows is None else n_rows // 2
        if n_rows is not None and (n_rows % 2 or not 0 < self.n_keep <= self.n_bins):
            raise ParameterError(f"stft: n_rows must be even and at most {2 * self.n_bins}, got {n_rows}")
        self.pad = win_len - hop if center else 0
        self._win = get_window(window, win_len)

    @property
    def n_rows(self) -> int:
        return 2 * self.n_keep

    def frames_for(self, T: int) -> int:
        return num_frames(T + 2 * self.pad, self.win_len, self.hop)

    def _win_as(self, dtype) -> np.ndarray:
        return self._win.astype(dtype)

    # analysis -------------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.pad:
            z = np.zeros(self.pad, dtype=x.dtype)
            x = np.concatenate([z, x, z])
        fr = _frame(x, self.win_len, self.hop) * self._win_as(x.dtype)[:, None]
        spec = np.fft.rfft(fr, n=self.n_fft, axis=0)[: self.n_keep]
        return np.concatenate([spec.real, spec.imag], axis=0).astype(x.dtype)

    def forward_adjoint(self, g: np.ndarray, T: int) -> np.ndarray:
        F = self.n_keep
        K = g.shape[1]
        z = np.zeros((self.n_fft, K), dtype=np.complex128)
        z[:F] = g[:F] + 1j * g[F:]
        fr = (np.fft.ifft(z, axis=0).real * self.n_fft)[: self.win_len]
        fr = fr * self._win[:, None]
        x = _overlap_add(fr, self.hop)
        return x[self.pad : self.pad + T].astype(g.dtype)

    # synthesis ------------------------------------------------------------

    def _irfft_weights(self) -> np.ndarray:
        c = np.full(self.n_bins, 2.0)
        c[0] = 1.0
        if self.n_fft % 2 == 0:
            c[-1] = 1.0
        return c[: self.n_keep]

    def inverse(self, values: np.ndarray, T: int) -> np.ndarray:
        F = self.n_keep
        if values.ndim != 2 or values.shape[0] != 2 * F:
            raise DimensionError(f"istft: expected {2 * F} packed rows, got shape {values.shape}")
        K = values.shape[1]
        spec = np.zeros((self.n_bins, K), dtype=np.complex128)
        spec[:F] = values[:F] + 1j * values[F:]
        fr = np.fft.irfft(spec, n=self.n_fft, axis=0)[: self.win_len]
        w = self._win
        y = _overlap_add(fr * w[:, None], self.hop) / _ola_envelope(w, K, self.hop)
        y = y[self.pad :]
        if y.shape[0] < T:
            y = np.concatenate([y, np.zeros(T - y.shape[0])])
        return y[:T].astype(values.dtype)

    def inverse_adjoint(self, g: np.ndarray, K: int) -> np.ndarray:
        w = self._win
        total = (K - 1) * self.hop + self.win_len
        y = np.zeros(total)
        n = min(g.shape[0], total - self.pad)
        y[self.pad : self.pad + n] = g[:n]
        y = y / _ola_envelope(w, K, self.hop)
        idx = np.arange(self.win_len)[:, None] + self.hop * np.arange(K)[None, :]
        fr = y[idx] * w[:, None]
        full = np.zeros((self.n_fft, K))
        full[: self.win_len] = fr
        spec = np.fft.rfft(full, axis=0)[: self.n_keep] * (self._irfft_weights()[:, None] / self.n_fft)
        return np.concatenate([spec.real, spec.imag], axis=0).astype(g.dtype)

    # tensors ----------------------------------------------------------------

    def analyze(self, x: Tensor) -> Tensor:
        T = x.shape[-1]
        return linear_op(x, self.forward, lambda g: self.forward_adjoint(g, T), "stft")

    def synthesize(self, spec: Tensor, T: int) -> Tensor:
        K = spec.shape[1]
        return linear_op(spec, lambda v: self.inverse(v, T), lambda g: self.inverse_adjoint(g, K), "istft")


def stft(x, n_fft: int, win_len: int, hop: int, window: str = "hann", center: bool = True) -> PackedSpectrogram:
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError(f"stft: expected 1-D samples, got shape {x.shape}")
    op = StftOperator(n_fft, win_len, hop, window, center)
    return PackedSpectrogram(op.forward(x), n_fft, win_len, hop, window, x.shape[0], center)


def istft(spec: PackedSpectrogram, length: Optional[int] = None) -> np.ndarray:
    if spec.values.ndim != 2 or spec.values.shape[0] % 2:
        raise DimensionError(f"istft: malformed packed spectrogram of shape {spec.values.shape}")
    op = StftOperator(spec.n_fft, spec.win_len, spec.hop, spec.window, spec.center)
    if spec.values.shape[0] != op.n_rows:
        raise DimensionError(
            f"istft: {spec.values.shape[0]} rows do not match n_fft={spec.n_fft} ({op.n_rows} rows)"
        )
    if length is None:
        length = spec.length
    if length is None:
        length = (spec.values.shape[1] - 1) * spec.hop + spec.win_len - 2 * op.pad
    return op.inverse(spec.values, length)


def stft_t(x: Tensor, n_fft: int, win_len: int, hop: int, window: str = "hann", center: bool = True) -> Tensor:
    return StftOperator(n_fft, win_len, hop, window, center).analyze(x)


def istft_t(spec: Tensor, length: int, n_fft: int, win_len: int, hop: int,
            window: str = "hann", center: bool = True) -> Tensor:
    return StftOperator(n_fft, win_len, hop, window, center).synthesize(spec, length)


def frame_t(x: Tensor, L: int, hop: int) -> Tensor:
    """Differentiable framing; the adjoint is plain overlap-add."""
    _check_frame_args(L, hop)
    T = x.shape[-1]
    return linear_op(x, lambda v: _frame(v, L, hop), lambda g: _overlap_add(g, hop)[:T], "frame")


def overlap_add_t(S: Tensor, hop: int, synthesis_window=None) -> Tensor:
    L, K = S.shape
    if synthesis_window is None:
        return linear_op(S, lambda v: _overlap_add(v, hop), lambda g: _frame(g, L, hop), "ola")
    w = np.asarray(synthesis_window, dtype=np.float64)
    env = _ola_envelope(w, K, hop)

    def fwd(v):
        return (_overlap_add(v * w[:, None], hop) / env).astype(v.dtype)

    def adj(g):
        return (_frame(g / env, L, hop) * w[:, None]).astype(g.dtype)

    return linear_op(S, fwd, adj, "ola")


def magnitude_db(x, n_fft: int = 512, win_len: Optional[int] = None, hop: Optional[int] = None,
                 floor_db: float = -80.0):
    """Log-magnitude spectrogram in dB (F x K), floored."""
    win_len = n_fft if win_len is None else win_len
    hop = win_len // 2 if hop is None else hop
    op = StftOperator(n_fft, win_len, hop, "hann", center=False)
    x = np.asarray(x, dtype=np.float64)
    packed = op.forward(x)
    F = op.n_keep
    mag = np.hypot(packed[:F], packed[F:])
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return np.maximum(db, floor_db)
