"""EEG preprocessing: notch / band-pass, decimation, 5x5 grid, windows, FFT bands."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

GRID_ROWS = ("F", "FC", "C", "CP", "P")
GRID_COLS = ("3", "1", "z", "2", "4")

# 60-channel 10-20 montage of the raw 2500 Hz recordings, in file order. The
# grid needs FCz, so it is carried as a recorded channel (in place of Iz).
MONTAGE_60 = (
    "Fp1 Fp2 AF7 AF5 AF6 AF8 AFz "
    "F7 F5 F3 F1 Fz F2 F4 F6 F8 FT7 FT8 "
    "FC5 FC3 FC1 FCz FC2 FC4 FC6 T7 C5 C3 C1 Cz C2 C4 C6 T8 "
    "TP7 CP5 CP3 CP1 CPz CP2 CP4 CP6 TP8 "
    "P7 P5 P3 P1 Pz P2 P4 P6 P8 PO7 PO3 POz PO4 PO8 O1 Oz O2"
).split()

BANDS = (
    ("delta", 0.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("beta", 12.0, 30.0),
    ("gamma", 30.0, np.inf),
)


class FilterDesignError(ValueError):
    pass


class SignalLengthError(ValueError):
    pass


class MissingChannelsError(KeyError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing channels: {', '.join(self.missing)}")


@dataclass(frozen=True)
class BiquadChain:
    """Cascade of second-order sections, rows ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    tag: str = ""

    @property
    def order(self) -> int:
        return 2 * len(self.sos)

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(s[3:]) for s in self.sos])

    def is_stable(self, margin=1e-9) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def response(self, freqs_hz, fs) -> np.ndarray:
        """Complex transfer function evaluated on the unit circle."""
        z1 = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        h = np.ones_like(z1)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 * z1 + b2 * z1 * z1) / (a0 + a1 * z1 + a2 * z1 * z1)
        return h

    def gain_db(self, freqs_hz, fs) -> np.ndarray:
        return 20.0 * np.log10(np.abs(self.response(freqs_hz, fs)))


def design_bandpass(low_hz, high_hz, fs, order=4) -> BiquadChain:
    """Butterworth band-pass (``order`` per edge) as second-order sections."""
    if not 0 < low_hz < high_hz < fs / 2:
        raise FilterDesignError(f"need 0 < low < high < fs/2, got {low_hz}, {high_hz} at fs={fs}")
    if order < 1:
        raise FilterDesignError(f"order must be >= 1, got {order}")
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", fs=fs, output="sos")
    return BiquadChain(sos, f"butter{order} bandpass {low_hz}-{high_hz} Hz @ {fs} Hz")


def design_notch(f0_hz, q=30.0, fs=2500.0) -> BiquadChain:
    if not 0 < f0_hz < fs / 2:
        raise FilterDesignError(f"notch frequency {f0_hz} Hz outside (0, {fs / 2})")
    if q <= 0:
        raise FilterDesignError(f"Q must be positive, got {q}")
    b, a = sps.iirnotch(f0_hz, q, fs=fs)
    return BiquadChain(np.concatenate([b, a])[None, :], f"notch {f0_hz} Hz Q={q} @ {fs} Hz")


def filtfilt(chain: BiquadChain, x, axis=-1):
    """Zero-phase filtering with odd-reflected edges (padding 3 x order).

    A single forward-backward pass is not exactly reversal-symmetric: its
    edge transients depend on which end the forward pass starts from, and
    with a 0.5 Hz edge they last for seconds. Averaging the forward-backward
    and backward-forward passes makes ``filtfilt(x[::-1]) == filtfilt(x)[::-1]``
    hold to rounding.
    """
    x = np.asarray(x, dtype=float)
    padlen = 3 * chain.order
    if x.shape[axis] <= padlen:
        raise SignalLengthError(f"signal of {x.shape[axis]} samples too short for padding {padlen}")

    def fb(v):
        return sps.sosfiltfilt(chain.sos, v, axis=axis, padtype="odd", padlen=padlen)

    forward = fb(x)
    backward = np.flip(fb(np.flip(x, axis)), axis)
    return 0.5 * (forward + backward)


def decimate(x, factor, axis=-1):
    """Keep every ``factor``-th sample from index 0 (input must be band-limited)."""
    if int(factor) != factor or factor <= 0:
        raise ValueError(f"decimation factor must be a positive integer, got {factor}")
    x = np.asarray(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, int(factor))
    return x[tuple(sl)]


def grid_layout() -> list[list[str]]:
    """5x5 channel names: rows front to back, columns left to right."""
    return [[row + col for col in GRID_COLS] for row in GRID_ROWS]


def grid_channels() -> list[str]:
    return [name for row in grid_layout() for name in row]


def select_and_grid(channel_names) -> np.ndarray:
    """Indices into ``channel_names`` arranged as the 5x5 grid."""
    lookup = {name: i for i, name in enumerate(channel_names)}
    missing = [name for name in grid_channels() if name not in lookup]
    if missing:
        raise MissingChannelsError(missing)
    return np.array([[lookup[name] for name in row] for row in grid_layout()])


@dataclass(frozen=True)
class Preprocessor:
    """Raw 60-channel trials -> (5, 5, T) grids at the target rate."""

    fs_in: float = 2500.0
    fs_out: float = 250.0
    notch_hz: float = 60.0
    notch_q: float = 30.0
    band: tuple[float, float] = (0.5, 40.0)
    order: int = 4

    @property
    def factor(self) -> int:
        f = self.fs_in / self.fs_out
        if abs(f - round(f)) > 1e-9:
            raise ValueError(f"fs_in/fs_out = {f} is not an integer")
        return int(round(f))

    def chains(self):
        return (
            design_notch(self.notch_hz, self.notch_q, self.fs_in),
            design_bandpass(self.band[0], self.band[1], self.fs_in, self.order),
        )

    def __call__(self, samples, channel_names) -> np.ndarray:
        """``(..., channels, time)`` -> ``(..., 5, 5, time / factor)``."""
        samples = np.asarray(samples, dtype=float)
        idx = select_and_grid(channel_names)
        # filters are per-channel and linear, so select first
        x = samples[..., idx.ravel(), :]
        for chain in self.chains():
            x = filtfilt(chain, x)
        x = decimate(x, self.factor)
        return x.reshape(x.shape[:-2] + (5, 5, x.shape[-1]))


def sliding_windows(x, fs=250.0, window_s=3.0, stride_s=0.5, count=5):
    """Equal-length windows along the last axis; returns (count, ..., window)."""
    x = np.asarray(x)
    win = int(round(window_s * fs))
    hop = int(round(stride_s * fs))
    need = win + (count - 1) * hop
    if x.shape[-1] < need:
        raise SignalLengthError(f"need {need} samples ({need / fs:.2f} s), got {x.shape[-1]}")
    return np.stack([x[..., k * hop : k * hop + win] for k in range(count)])


def window_offsets(fs=250.0, stride_s=0.5, count=5) -> list[int]:
    hop = int(round(stride_s * fs))
    return [k * hop for k in range(count)]


def band_of(freq_hz) -> str:
    for name, lo, hi in BANDS:
        if name == "beta":
            if lo <= freq_hz <= hi:
                return name
        elif lo <= freq_hz < hi:
            return name
    return "gamma"


def peak_frequencies(feature_maps, fs) -> np.ndarray:
    """Per-row frequency of the largest non-DC FFT magnitude."""
    x = np.atleast_2d(np.asarray(feature_maps, dtype=float))
    n = x.shape[-1]
    nfft = 1 << (n - 1).bit_length()
    mag = np.abs(np.fft.rfft(x, n=nfft, axis=-1))
    peak = 1 + np.argmax(mag[:, 1:], axis=-1)
    return peak * fs / nfft


def beta_fraction(feature_maps, fs) -> float:
    """Share of filters whose spectral peak lies in the 12-30 Hz band."""
    x = np.atleast_2d(np.asarray(feature_maps, dtype=float))
    if x.size == 0:
        raise ValueError("no feature maps")
    if x.shape[-1] < 8:
        raise ValueError(f"need at least 8 time points, got {x.shape[-1]}")
    bands = [band_of(f) for f in peak_frequencies(x, fs)]
    return bands.count("beta") / len(bands)


def band_histogram(feature_maps, fs) -> dict[str, int]:
    counts = {name: 0 for name, _, _ in BANDS}
    for f in peak_frequencies(feature_maps, fs):
        counts[band_of(f)] += 1
    return counts
