"""CSI denoising and feature rendering.

The chain is: pick an antenna pair from the per-antenna motion score, take
the element-wise CSI ratio (cancels the per-packet phase offset shared by
both antennas), then derive two views per pair: the unwrapped phase over time
and a two-sided Doppler spectrogram of the high-passed ratio. Views are
min-max normalized one by one, colour-mapped, tiled and resized.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from .core import CsiRecord

HANN_WINDOW = 256
HOP = 16
HIGHPASS_ORDER = 4
HIGHPASS_CUTOFF_HZ = 2.0
DIV_EPS_REL = 1e-6


class DegenerateAntennaError(ValueError):
    pass


class DenominatorUnderflowError(ValueError):
    pass


class RecordTooShortError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass
class CsiRatioSeries:
    values: np.ndarray  # [subcarrier, time], complex
    source_pair: tuple[int, int]
    sample_rate_hz: float


@dataclass
class Spectrogram:
    power: np.ndarray  # [frequency bin, frame]
    frequencies: np.ndarray  # Hz, symmetric about 0
    frame_times: np.ndarray  # s, window centres


@dataclass
class InputImage:
    pixels: np.ndarray  # [channel, height, width] float32 in [0, 1]
    layout: list[str] = field(default_factory=list)


def _antenna_data(rec_or_data) -> np.ndarray:
    return rec_or_data.data if isinstance(rec_or_data, CsiRecord) else np.asarray(rec_or_data)


def antenna_scores(rec: CsiRecord | np.ndarray) -> np.ndarray:
    """Motion score per antenna: mean over subcarriers of var(|H|)/mean(|H|) over time.

    Uses the population variance. Raises DegenerateAntennaError if any
    subcarrier of any antenna has zero mean amplitude.
    """
    amp = np.abs(_antenna_data(rec))
    mean = amp.mean(axis=-1)
    if np.any(mean == 0):
        a, c = np.argwhere(mean == 0)[0]
        raise DegenerateAntennaError(f"degenerate antenna {a}: subcarrier {c} has zero mean amplitude")
    return (amp.var(axis=-1) / mean).mean(axis=-1)


def antenna_score(rec: CsiRecord | np.ndarray, a: int) -> float:
    data = _antenna_data(rec)
    if not 0 <= a < data.shape[0]:
        raise IndexError(f"antenna index {a} out of range for A={data.shape[0]}")
    return float(antenna_scores(data[a:a + 1])[0])


def select_antenna_pair(rec: CsiRecord | np.ndarray) -> tuple[int, int]:
    """(numerator, denominator) = (argmax score, argmin score), 0-based.

    Ties: the lowest index wins the argmax, the highest index the argmin.
    """
    scores = antenna_scores(rec)
    if scores.size < 2:
        raise ValueError("need at least two antennas")
    num = int(np.argmax(scores))
    den = int(scores.size - 1 - np.argmin(scores[::-1]))
    if num == den:  # only possible when all scores are equal
        den = scores.size - 1 if num != scores.size - 1 else 0
    return num, den


def csi_ratio(rec: CsiRecord, pair: tuple[int, int]) -> CsiRatioSeries:
    num, den = pair
    A = rec.num_antennas
    if num == den or not (0 <= num < A and 0 <= den < A):
        raise ValueError(f"invalid antenna pair {pair} for A={A}")
    h_num = rec.data[num].astype(np.complex128)
    h_den = rec.data[den].astype(np.complex128)
    mag = np.abs(h_den)
    eps = DIV_EPS_REL * float(np.median(mag))
    bad = (mag < eps) | (mag == 0)
    if np.any(bad):
        c, t = np.argwhere(bad)[0]
        raise DenominatorUnderflowError(f"denominator underflow at subcarrier {c}, time {t}")
    return CsiRatioSeries(h_num / h_den, (num, den), rec.sample_rate_hz)


def unwrap_phase(angles: np.ndarray, axis: int = -1) -> np.ndarray:
    """Cumulative unwrap; every step is mapped into [-pi, pi).

    A step of exactly +-pi always resolves to -pi, so alternating
    half-turns unwrap monotonically instead of oscillating.
    """
    angles = np.asarray(angles, dtype=np.float64)
    d = np.diff(angles, axis=axis)
    d = np.mod(d + np.pi, 2 * np.pi) - np.pi
    first = np.take(angles, [0], axis=axis)
    return np.concatenate([first, first + np.cumsum(d, axis=axis)], axis=axis)


def extract_phase(ratio: CsiRatioSeries) -> np.ndarray:
    """Phase of the ratio, unwrapped along time for each subcarrier."""
    values = np.asarray(ratio.values)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite CSI ratio")
    return unwrap_phase(np.angle(values), axis=-1)


def highpass(ratio: CsiRatioSeries, cutoff_hz: float = HIGHPASS_CUTOFF_HZ,
             order: int = HIGHPASS_ORDER) -> CsiRatioSeries:
    """Zero-phase Butterworth high-pass along time, real and imaginary parts separately.

    The temporal mean is removed first: it lies in the stopband anyway, and a
    large static offset would otherwise excite a start-up transient that
    lasts about as long as a one-second record.
    """
    fs = ratio.sample_rate_hz
    if not 0 < cutoff_hz < fs / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {fs / 2}) Hz")
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=fs, output="sos")
    x = np.asarray(ratio.values)
    x = x - x.mean(axis=-1, keepdims=True)
    T = x.shape[-1]
    padlen = min(3 * (2 * len(sos) + 1), T - 1)
    re = signal.sosfiltfilt(sos, x.real, axis=-1, padlen=padlen)
    im = signal.sosfiltfilt(sos, x.imag, axis=-1, padlen=padlen)
    return CsiRatioSeries(re + 1j * im, ratio.source_pair, fs)


def dfs_spectrogram(ratio: CsiRatioSeries, window: int = HANN_WINDOW, hop: int = HOP) -> Spectrogram:
    """Two-sided STFT power averaged over subcarriers.

    The frequency axis is shifted so 0 Hz sits in the middle; the unpaired
    -fs/2 bin of an even-length FFT is dropped to keep the axis symmetric.
    """
    x = np.atleast_2d(np.asarray(ratio.values))
    T = x.shape[-1]
    if T < window:
        raise RecordTooShortError(f"record too short: T={T} < window={window}")
    fs = ratio.sample_rate_hz
    win = signal.get_window("hann", window)
    n_frames = (T - window) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)[:, ::hop][:, :n_frames]
    spec = np.fft.fftshift(np.fft.fft(frames * win, axis=-1), axes=-1)
    power = (np.abs(spec) ** 2).mean(axis=0).T  # [freq, frame]
    freqs = np.fft.fftshift(np.fft.fftfreq(window, d=1.0 / fs))
    if window % 2 == 0:
        power = power[1:]
        freqs = freqs[1:]
    times = (np.arange(n_frames) * hop + window / 2) / fs
    return Spectrogram(power, freqs, times)


def peak_frequency(spec: Spectrogram) -> float:
    """Frequency of the global power maximum."""
    f, _ = np.unravel_index(np.argmax(spec.power), spec.power.shape)
    return float(spec.frequencies[f])


def minmax(view: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant view maps to all zeros."""
    view = np.asarray(view, dtype=np.float64)
    lo, hi = float(view.min()), float(view.max())
    if not hi > lo:
        return np.zeros_like(view)
    return np.clip((view - lo) / (hi - lo), 0.0, 1.0)


_VIRIDIS = None


def _colormap() -> np.ndarray:
    global _VIRIDIS
    if _VIRIDIS is None:
        from matplotlib import colormaps
        _VIRIDIS = np.asarray(colormaps["viridis"](np.linspace(0.0, 1.0, 256))[:, :3])
    return _VIRIDIS


def colorize(normalized: np.ndarray) -> np.ndarray:
    """[h, w] in [0, 1] -> [h, w, 3] through a 256-entry viridis table, linearly interpolated."""
    lut = _colormap()
    pos = np.clip(normalized, 0.0, 1.0) * (len(lut) - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, len(lut) - 1)
    frac = (pos - lo)[..., None]
    return lut[lo] * (1.0 - frac) + lut[hi] * frac


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [h, w, ch] array, antialiased when shrinking."""
    from skimage.transform import resize as _resize
    out = _resize(img, (height, width) + img.shape[2:], order=1, mode="edge",
                  anti_aliasing=img.shape[0] > height or img.shape[1] > width)
    return np.clip(out, 0.0, 1.0)


def render_input(views: Sequence[tuple[str, np.ndarray]], grid: tuple[int, int] | None = None,
                 size: int = 224) -> InputImage:
    """Normalize each view on its own, colour-map it and tile the results.

    ``views`` is a sequence of ``(tag, 2-D array)``; tiles fill ``grid``
    (rows, cols) row by row. The default grid has one row per pair of views
    (phase next to Doppler). The output is ``[3, size, size]``.
    """
    if not views:
        raise LayoutError("need at least one view")
    n = len(views)
    if grid is None:
        grid = ((n + 1) // 2, min(n, 2))
    rows, cols = grid
    if rows < 1 or cols < 1 or n > rows * cols:
        raise LayoutError(f"{n} views do not fit a {rows}x{cols} grid")
    cell_h, cell_w = max(1, size // rows), max(1, size // cols)
    canvas = np.zeros((rows * cell_h, cols * cell_w, 3))
    layout = []
    for k, (tag, view) in enumerate(views):
        view = np.asarray(view, dtype=np.float64)
        if view.ndim != 2 or 0 in view.shape:
            raise LayoutError(f"view {tag!r} has shape {view.shape}; tiles must be non-empty 2-D arrays")
        if not np.all(np.isfinite(view)):
            raise ValueError(f"view {tag!r} is not finite")
        r, c = divmod(k, cols)
        tile = resize(colorize(minmax(view)), cell_h, cell_w)
        canvas[r * cell_h:(r + 1) * cell_h, c * cell_w:(c + 1) * cell_w] = tile
        layout.append(tag)
    if canvas.shape[:2] != (size, size):
        canvas = resize(canvas, size, size)
    pixels = np.ascontiguousarray(canvas.transpose(2, 0, 1), dtype=np.float32)
    return InputImage(pixels, layout)
