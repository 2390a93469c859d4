"""Waveform I/O, 80-channel log-mel extraction and the binary feature file format."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, FormatError, UnsupportedFormatError

SAMPLE_RATE = 16000
N_MELS = 80
FRAME_SIZE_S = 0.025
FRAME_HOP_S = 0.010
N_FFT = 512
LOG_FLOOR = 1e-10
CROP_SECONDS = 5.0

FEATURE_MAGIC = b"SMLCFEAT"
FEATURE_VERSION = 1
_KIND_CODES = {"mel80": 0, "external": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_HEADER = struct.Struct("<8sIIIIB")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    """A T x D matrix of acoustic frames."""

    frames: np.ndarray
    frame_hop_s: float = FRAME_HOP_S
    feature_kind: str = "mel80"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {self.frames.shape}")
        if self.feature_kind not in _KIND_CODES:
            raise ValueError(f"unknown feature_kind {self.feature_kind!r}")
        if self.feature_kind == "mel80" and self.frames.shape[1] != N_MELS:
            raise ValueError(f"mel80 features must have {N_MELS} channels, got {self.frames.shape[1]}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames contain non-finite values")
        if self.frame_hop_s <= 0:
            raise ValueError("frame_hop_s must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.frame_hop_s


@dataclass
class MelFilterbank:
    weights: np.ndarray
    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    center_hz: np.ndarray = field(default=None, repr=False)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


# -- WAV ---------------------------------------------------------------------


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: malformed WAV header ({msg})") from exc
    except (EOFError, struct.error) as exc:
        raise FormatError(f"{path}: truncated WAV file") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: expected mono audio, found {n_channels} channels")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if len(raw) % 2:
        raise FormatError(f"{path}: odd number of bytes in 16-bit data chunk")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


# -- mel filterbank ------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(hz):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    hz = np.asarray(hz, dtype=np.float64)
    mel = hz / _F_SP
    log_region = hz >= _MIN_LOG_HZ
    return np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(hz, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    return np.where(mel >= _MIN_LOG_MEL, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)), _F_SP * mel)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters with Slaney area normalization."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_hz = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_hz[None, :]
    rising = -ramps[:-2] / widths[:-1, None]
    falling = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    if np.any(weights.max(axis=1) <= 0):
        raise ValueError("mel filterbank has empty filters; increase n_fft or reduce n_mels")
    return MelFilterbank(weights, sample_rate, n_fft, center_hz=edges[1:-1])


_DEFAULT_FB: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _DEFAULT_FB
    if _DEFAULT_FB is None:
        _DEFAULT_FB = mel_filterbank()
    return _DEFAULT_FB


# -- log-mel -------------------------------------------------------------------


def frame_count(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def power_spectrogram(w: Waveform, n_fft: int, frame_size_s: float = FRAME_SIZE_S,
                      frame_hop_s: float = FRAME_HOP_S) -> np.ndarray:
    frame_len = int(round(frame_size_s * w.sample_rate))
    hop = int(round(frame_hop_s * w.sample_rate))
    if frame_len > n_fft:
        raise ValueError(f"frame length {frame_len} exceeds n_fft {n_fft}")
    n_frames = frame_count(len(w.samples), frame_len, hop)
    if n_frames == 0:
        raise EmptyInputError(
            f"waveform has {len(w.samples)} samples, fewer than one {frame_len}-sample frame")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, frame_len)[::hop][:n_frames]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(w: Waveform, fb: MelFilterbank | None = None, frame_size_s: float = FRAME_SIZE_S,
            frame_hop_s: float = FRAME_HOP_S) -> FeatureSequence:
    fb = default_filterbank() if fb is None else fb
    if fb.sample_rate != w.sample_rate:
        raise ValueError(f"filterbank is for {fb.sample_rate} Hz audio, waveform is {w.sample_rate} Hz")
    power = power_spectrogram(w, fb.n_fft, frame_size_s, frame_hop_s)
    mel = power @ fb.weights.T
    kind = "mel80" if fb.n_mels == N_MELS else "external"
    return FeatureSequence(np.log(np.maximum(LOG_FLOOR, mel)), frame_hop_s, kind)


def crop_frames(frame_hop_s: float, seconds: float = CROP_SECONDS) -> int:
    """Number of frames covering ``seconds`` at the given hop (500 at 10 ms, 250 at 20 ms)."""
    return max(1, int(round(seconds / frame_hop_s)))


def crop_or_pad(f: FeatureSequence, target_frames: int, rng: np.random.Generator | None = None) -> FeatureSequence:
    """Fix the sequence length to ``target_frames``.

    Longer inputs are windowed: from frame 0 when ``rng`` is None (evaluation),
    otherwise from a start drawn from ``rng`` (training). Shorter inputs are
    zero-padded at the end.
    """
    if target_frames < 1:
        raise ValueError("target_frames must be at least 1")
    T = f.n_frames
    if T == target_frames:
        frames = f.frames.copy()
    elif T > target_frames:
        start = 0 if rng is None else int(rng.integers(0, T - target_frames + 1))
        frames = f.frames[start:start + target_frames].copy()
    else:
        frames = np.zeros((target_frames, f.dim), dtype=np.float32)
        frames[:T] = f.frames
    return FeatureSequence(frames, f.frame_hop_s, f.feature_kind)


# -- feature files -------------------------------------------------------------


def save_feature_file(path, f: FeatureSequence) -> None:
    hop_us = int(round(f.frame_hop_s * 1e6))
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f.n_frames, f.dim, hop_us,
                          _KIND_CODES[f.feature_kind])
    payload = np.ascontiguousarray(f.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_feature_file(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than feature header")
    magic, version, T, D, hop_us, kind = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature format version {version}")
    if kind not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown feature kind code {kind}")
    if T < 1 or D < 1 or hop_us == 0:
        raise FormatError(f"{path}: invalid header T={T} D={D} hop={hop_us}us")
    if _KIND_NAMES[kind] == "mel80" and D != N_MELS:
        raise FormatError(f"{path}: mel80 file declares D={D}")
    expected = _HEADER.size + 4 * T * D
    if len(data) != expected:
        raise FormatError(f"{path}: payload is {len(data) - _HEADER.size} bytes, header implies {4 * T * D}")
    frames = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float32)
    try:
        return FeatureSequence(frames, hop_us / 1e6, _KIND_NAMES[kind])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def featurize_wav(path) -> FeatureSequence:
    """Load a WAV file and compute Mel80 features; only 16 kHz audio is accepted."""
    w = load_wav(path)
    if w.sample_rate != SAMPLE_RATE:
        raise UnsupportedFormatError(f"{path}: sample rate {w.sample_rate} Hz, expected {SAMPLE_RATE} Hz")
    return log_mel(w)


def load_features(source) -> FeatureSequence:
    """Features for a manifest source: WAV audio is featurized, anything else is read as a feature file."""
    if str(source).lower().endswith(".wav"):
        return featurize_wav(source)
    return load_feature_file(source)
