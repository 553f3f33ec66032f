"""Synthetic motor-imagery EEG and the on-disk dataset format.

Random numbers come from splitmix64 so that any implementation can reproduce
a dataset bit for bit:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                      (all arithmetic mod 2**64)

Trial ``i`` of a session seeded with ``s`` uses a stream whose initial state
is the first splitmix64 output of state ``s ^ i``. Uniforms are
``(z >> 11) * 2**-53``; normals use Box-Muller on consecutive pairs
``(u1, u2)`` with ``u1`` shifted to ``(0, 1]``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .dsp import MONTAGE_60, Preprocessor, grid_channels

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1

FORMAT_NAME = "grn-dataset"
FORMAT_VERSION = 1

BAND_EDGES = {"mu": (8.0, 12.0), "beta": (12.0, 30.0)}


# -- splitmix64 ----------------------------------------------------------------


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_next(state: int) -> tuple[int, int]:
    """One scalar step: returns ``(new_state, output)``."""
    state = (state + int(GAMMA)) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * int(MIX1)) & MASK64
    z = ((z ^ (z >> 27)) * int(MIX2)) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    """Vectorised splitmix64 stream (output ``k`` is a pure function of the seed)."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_uint64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.state) + steps * GAMMA)
        self.state = (self.state + n * int(GAMMA)) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]


def trial_stream(seed: int, index: int) -> SplitMix64:
    _, first = splitmix64_next((int(seed) ^ int(index)) & MASK64)
    return SplitMix64(first)


# -- synthetic generator -------------------------------------------------------


@dataclass(frozen=True)
class ClassSpec:
    """One MI class: ERD of ``band`` centred on grid cell ``focus``."""

    name: str
    focus: tuple[float, float]
    band: str
    depth: float
    subpart: str = ""

    def __post_init__(self):
        if self.band not in BAND_EDGES:
            raise ValueError(f"{self.name}: band must be one of {sorted(BAND_EDGES)}")
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError(f"{self.name}: modulation depth {self.depth} outside [0, 1]")


REPRESENTATIVE = (
    ClassSpec("forward_reach", (1.0, 1.0), "beta", 0.8, "upper-arm"),
    ClassSpec("left_twist", (3.0, 3.0), "mu", 0.8, "forearm"),
    ClassSpec("cylindrical_grasp", (1.0, 3.0), "beta", 0.8, "hand"),
)

# untrained candidates: same generators per sub-part with shifted parameters
CANDIDATES = (
    ClassSpec("backward_reach", (1.3, 1.0), "beta", 0.75, "upper-arm"),
    ClassSpec("left_reach", (1.0, 0.7), "beta", 0.8, "upper-arm"),
    ClassSpec("right_reach", (1.0, 1.3), "beta", 0.8, "upper-arm"),
    ClassSpec("up_reach", (0.7, 1.0), "beta", 0.75, "upper-arm"),
    ClassSpec("down_reach", (1.3, 1.3), "beta", 0.7, "upper-arm"),
    ClassSpec("right_twist", (3.0, 2.7), "mu", 0.75, "forearm"),
    ClassSpec("lateral_grasp", (1.3, 3.0), "beta", 0.75, "hand"),
    ClassSpec("spherical_grasp", (0.7, 2.7), "beta", 0.75, "hand"),
)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 2020
    classes: tuple[ClassSpec, ...] = REPRESENTATIVE + CANDIDATES
    noise_uv: float = 10.0  # RMS of the 1/f background per channel
    snr_db: float = 6.0  # rhythm RMS over background RMS
    focus_spread: float = 0.8  # Gaussian ERD radius in grid cells
    amplitude_jitter: float = 0.2
    phase_lock: float = 0.8  # share of rhythm power that is cue-locked (same waveform every trial)
    fs: float = 2500.0
    duration_s: float = 3.0
    n_channels: int = 60
    trials_per_class: int = 50

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(
            c if isinstance(c, ClassSpec) else ClassSpec(**{**c, "focus": tuple(c["focus"])})
            for c in self.classes
        ))
        if self.trials_per_class < 1:
            raise ValueError("trials_per_class must be >= 1")
        if self.n_channels != len(MONTAGE_60):
            raise ValueError(f"the synthetic montage has {len(MONTAGE_60)} channels")

    @property
    def n_samples(self) -> int:
        return int(round(self.fs * self.duration_s))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["classes"] = [dataclasses.asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassSpec(**{**c, "focus": tuple(c["focus"])}) for c in d["classes"])
        return cls(**d)

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


def representative_config(**overrides) -> SynthConfig:
    """The reference 3-class session used for learning checks."""
    return SynthConfig(classes=REPRESENTATIVE, **overrides)


def electrode_position(name: str) -> tuple[float, float]:
    """Approximate (row, col) of a 10-20 label in 5x5-grid units (F row = 0, Cz col = 2)."""
    rows = {"Fp": -2, "AF": -1, "F": 0, "FT": 1, "FC": 1, "T": 2, "C": 2, "TP": 3, "CP": 3, "P": 4, "PO": 5, "O": 6, "I": 7}
    prefix = name.rstrip("0123456789z")
    suffix = name[len(prefix):]
    if suffix == "z":
        col = 0
    else:
        n = int(suffix)
        col = -(n + 1) // 2 if n % 2 else n // 2
    return float(rows[prefix]), float(col + 2)


def _pink_noise(rng: SplitMix64, n_channels, n_samples, fs):
    n_freq = n_samples // 2 + 1
    spec = rng.normal(2 * n_channels * n_freq).reshape(n_channels, n_freq, 2)
    spec = spec[..., 0] + 1j * spec[..., 1]
    f = np.arange(n_freq) * fs / n_samples
    shape = np.zeros(n_freq)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * shape, n=n_samples, axis=-1)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True))


def _band_source(rng: SplitMix64, band, n_samples, fs):
    lo, hi = BAND_EDGES[band]
    n_freq = n_samples // 2 + 1
    f = np.arange(n_freq) * fs / n_samples
    sel = (f >= lo) & (f <= hi)
    coef = rng.normal(2 * int(sel.sum())).reshape(-1, 2)
    spec = np.zeros(n_freq, dtype=complex)
    spec[sel] = coef[:, 0] + 1j * coef[:, 1]
    x = np.fft.irfft(spec, n=n_samples)
    return x / np.sqrt(np.mean(x * x))


# Stream index reserved for the cue-locked rhythms shared by every trial.
# They are drawn once over LOCKED_SECONDS so that trials of any duration up
# to that length see the same waveform from the cue onwards.
LOCKED_STREAM = MASK64
LOCKED_SECONDS = 10.0


def locked_rhythms(config: SynthConfig) -> dict[str, np.ndarray]:
    """Unit-RMS cue-locked waveform per band, truncated to the trial length."""
    rng = trial_stream(config.seed, LOCKED_STREAM)
    n_full = int(round(LOCKED_SECONDS * config.fs))
    if config.n_samples > n_full:
        raise ValueError(f"trials longer than {LOCKED_SECONDS} s are not supported")
    out = {}
    for band in sorted(BAND_EDGES):
        x = _band_source(rng, band, n_full, config.fs)[: config.n_samples]
        out[band] = x / np.sqrt(np.mean(x * x))
    return out


def erd_gains(config: SynthConfig, cls: ClassSpec) -> np.ndarray:
    """Per-channel amplitude factor of the class band (1 = no desynchronisation)."""
    pos = np.array([electrode_position(n) for n in MONTAGE_60])
    d2 = np.sum((pos - np.asarray(cls.focus)) ** 2, axis=1)
    return 1.0 - cls.depth * np.exp(-d2 / (2.0 * config.focus_spread**2))


def generate_trial(config: SynthConfig, index: int, cls: ClassSpec, locked=None) -> np.ndarray:
    """(channels, samples) microvolts for trial ``index`` of the session."""
    if locked is None and config.phase_lock > 0.0:
        locked = locked_rhythms(config)
    rng = trial_stream(config.seed, index)
    n, fs = config.n_samples, config.fs
    x = config.noise_uv * _pink_noise(rng, config.n_channels, n, fs)
    rhythm_rms = config.noise_uv * 10.0 ** (config.snr_db / 20.0)
    jitter = 1.0 + config.amplitude_jitter * (2.0 * rng.uniform(len(BAND_EDGES)) - 1.0)
    for (band, _), amp in zip(sorted(BAND_EDGES.items()), jitter):
        src = _band_source(rng, band, n, fs)
        if locked is not None:
            lam = config.phase_lock
            src = np.sqrt(1.0 - lam) * src + np.sqrt(lam) * locked[band]
        gains = erd_gains(config, cls) if cls.band == band else np.ones(config.n_channels)
        x += rhythm_rms * amp * gains[:, None] * src[None, :]
    return x


@dataclass
class Dataset:
    """Labelled trials: raw ``(trials, channels, time)`` or grid ``(trials, 5, 5, time)``."""

    data: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    fs: float
    channel_names: list[str]
    kind: str = "raw"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.data) != len(self.labels):
            raise ValueError(f"{len(self.data)} trials but {len(self.labels)} labels")
        if self.kind not in ("raw", "grid"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class list")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, class_names=None) -> "Dataset":
        """Trials at ``indices``; with ``class_names``, labels are re-indexed to that list."""
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices]
        names = list(self.class_names)
        if class_names is not None:
            remap = {names.index(c): i for i, c in enumerate(class_names)}
            labels = np.array([remap[int(l)] for l in labels], dtype=np.int64)
            names = list(class_names)
        return Dataset(self.data[indices], labels, names, self.fs, list(self.channel_names), self.kind,
                       dict(self.provenance))

    def select_classes(self, class_names) -> "Dataset":
        wanted = [self.class_names.index(c) for c in class_names]
        idx = np.flatnonzero(np.isin(self.labels, wanted))
        return self.subset(idx, class_names)


def generate_session(config: SynthConfig) -> Dataset:
    """Trials are class-major: class 0 trials first, each class ``trials_per_class`` long."""
    n_trials = len(config.classes) * config.trials_per_class
    data = np.empty((n_trials, config.n_channels, config.n_samples), dtype=np.float32)
    labels = np.empty(n_trials, dtype=np.int64)
    locked = locked_rhythms(config) if config.phase_lock > 0.0 else None
    for i in range(n_trials):
        k = i // config.trials_per_class
        data[i] = generate_trial(config, i, config.classes[k], locked)
        labels[i] = k
    return Dataset(data, labels, [c.name for c in config.classes], config.fs, list(MONTAGE_60), "raw",
                   {"synthetic": config.to_dict()})


def preprocess_dataset(raw: Dataset, pre: Preprocessor | None = None, batch=32) -> Dataset:
    """Raw dataset -> grid dataset (notch, band-pass, decimate, 5x5 layout)."""
    if raw.kind != "raw":
        raise ValueError("preprocess expects a raw dataset")
    pre = pre or Preprocessor(fs_in=raw.fs)
    parts = [pre(raw.data[i : i + batch], raw.channel_names) for i in range(0, len(raw), batch)]
    grid = np.concatenate(parts).astype(np.float32)
    prov = dict(raw.provenance)
    prov["preprocess"] = dataclasses.asdict(pre)
    return Dataset(grid, raw.labels.copy(), list(raw.class_names), pre.fs_out, grid_channels(), "grid", prov)


def import_raw_matrix(samples, labels, class_names, fs=2500.0, channel_names=MONTAGE_60, note="") -> Dataset:
    """Wrap real recordings shaped ``(trials, 60, 7500)`` as a raw dataset."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 3 or samples.shape[1] != len(channel_names):
        raise ValueError(f"expected (trials, {len(channel_names)}, time), got {samples.shape}")
    return Dataset(samples, labels, list(class_names), fs, list(channel_names), "raw", {"import": note})


# -- file format ---------------------------------------------------------------


class DatasetFileError(Exception):
    code = "dataset"


class ChecksumError(DatasetFileError):
    code = "checksum"


class VersionError(DatasetFileError):
    code = "version"


class TruncatedError(DatasetFileError):
    code = "truncated"


@njit(cache=True)
def _fnv1a(buf):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes | np.ndarray) -> int:
    """64-bit FNV-1a over raw bytes."""
    buf = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray)) else data.view(np.uint8).ravel()
    return int(_fnv1a(buf))


def _paths(path):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".f32")


def save_dataset(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.f32`` (little-endian payload)."""
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(dataset.data, dtype="<f4")
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": dataset.kind,
        "fs": dataset.fs,
        "channel_names": list(dataset.channel_names),
        "class_names": list(dataset.class_names),
        "labels": [int(l) for l in dataset.labels],
        "trial_count": len(dataset),
        "trial_shape": list(payload.shape[1:]),
        "checksum_fnv1a64": f"{fnv1a64(payload):016x}",
        "provenance": dataset.provenance,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    payload_path.write_bytes(payload.tobytes())
    return manifest_path, payload_path


def load_dataset(path) -> Dataset:
    manifest_path, payload_path = _paths(path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetFileError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{manifest_path}: version {manifest.get('version')} != {FORMAT_VERSION}")
    raw = payload_path.read_bytes()
    shape = [manifest["trial_count"], *manifest["trial_shape"]]
    expected = 4 * math.prod(shape)
    if len(raw) != expected:
        raise TruncatedError(f"{payload_path}: {len(raw)} payload bytes, manifest implies {expected}")
    if f"{fnv1a64(raw):016x}" != manifest["checksum_fnv1a64"]:
        raise ChecksumError(f"{payload_path}: checksum mismatch")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return Dataset(data, np.array(manifest["labels"], dtype=np.int64), manifest["class_names"], manifest["fs"],
                   manifest["channel_names"], manifest["kind"], manifest.get("provenance", {}))
