"""Audio containers, WAV I/O, framing, log-magnitude spectral features, and
the time-domain convolution together with its exact adjoint/gradient.

Everything here is a pure function of its inputs; sample buffers are frozen
after construction so values can be shared freely between workers.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
from scipy import signal as sig

DEFAULT_SAMPLE_RATE = 16000
PCM_SCALE = 32768  # int16 full scale: read divides by 32768, write rounds s*32767


class AudioError(Exception):
    """Base class for signal-layer failures."""


class FormatError(AudioError):
    """A WAV file (or raw buffer) violates the 16-bit PCM mono contract."""


class ClippingError(AudioError):
    """Samples exceed [-1, 1]; carries the number of offending samples."""

    def __init__(self, count: int):
        super().__init__(f"{count} sample(s) exceed [-1.0, 1.0]")
        self.count = count


@dataclass(frozen=True)
class AudioSignal:
    """Mono audio: a 1-D float64 sample buffer plus its sample rate in Hz.

    Samples are nominally in [-1, 1]; values outside that range are legal to
    carry around (an attack in progress may overshoot) but are flagged via
    ``clipped`` and refused by :func:`write_wav`.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be a positive integer")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def clipped(self) -> bool:
        return bool(np.any(np.abs(self.samples) > 1.0))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """Framing and DFT parameters for the short-time spectral front end."""

    frame_ms: float = 20.0
    hop_ms: float = 10.0
    dft_size: int = 512
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.frame_ms <= 0 or self.hop_ms <= 0:
            raise ValueError("frame_ms and hop_ms must be positive")
        if self.dft_size < 2:
            raise ValueError("dft_size must be >= 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def frame_len(self, sample_rate: int) -> int:
        return int(round(self.frame_ms * sample_rate / 1000.0))

    def hop(self, sample_rate: int) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    @property
    def bins(self) -> int:
        return self.dft_size // 2 + 1

    def n_frames(self, n_samples: int, sample_rate: int) -> int:
        frame = self.frame_len(sample_rate)
        if n_samples < frame:
            return 0
        return (n_samples - frame) // self.hop(sample_rate) + 1


@dataclass(frozen=True)
class FeatureMatrix:
    """T x B matrix of log magnitudes plus the framing that produced it."""

    values: np.ndarray
    frame_ms: float
    hop_ms: float
    dft_bins: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("feature values must be a 2-D matrix")
        if values.shape[1] != self.dft_bins:
            raise ValueError("column count must equal dft_bins")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def load_wav(path) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1)."""
    try:
        reader = wave.open(str(path), "rb")
    except FileNotFoundError:
        raise
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"not a readable PCM WAV file: {exc}") from exc
    with reader:
        if reader.getnchannels() != 1:
            raise FormatError(f"channels={reader.getnchannels()}, expected mono")
        if reader.getsampwidth() != 2:
            raise FormatError(
                f"sample_width={reader.getsampwidth()} bytes, expected 2 (16-bit)"
            )
        if reader.getcomptype() != "NONE":
            raise FormatError(f"compression={reader.getcomptype()}, expected none")
        n = reader.getnframes()
        if n < 1:
            raise FormatError("empty WAV payload")
        raw = reader.readframes(n)
        rate = reader.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return AudioSignal(samples, rate)


def write_wav(signal: AudioSignal, path) -> None:
    """Write 16-bit PCM mono WAV; refuses clipped input rather than clamping.

    Quantization is symmetric with :func:`load_wav` (scale 32768, saturating
    at 32767) so that a round trip stays within one quantization step.
    """
    over = int(np.count_nonzero(np.abs(signal.samples) > 1.0))
    if over:
        raise ClippingError(over)
    quantized = np.rint(signal.samples * PCM_SCALE)
    quantized = np.minimum(quantized, PCM_SCALE - 1).astype("<i2")
    with wave.open(str(path), "wb") as writer:
        writer.setnchannels(1)
        writer.setsampwidth(2)
        writer.setframerate(signal.sample_rate)
        writer.writeframes(quantized.tobytes())


def convolve(x: AudioSignal, h) -> AudioSignal:
    """Convolve ``x`` with an impulse response, truncated to len(x).

    Output sample n is sum_{m=n-M+1..n} x(m) h(n-m) with x(m)=0 for m<0,
    i.e. the causal same-length convolution. No renormalization is applied.
    """
    if x.sample_rate != h.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: signal {x.sample_rate} Hz vs RIR {h.sample_rate} Hz"
        )
    taps = np.asarray(h.taps, dtype=np.float64)
    out = sig.convolve(x.samples, taps, mode="full", method="auto")[: len(x)]
    return AudioSignal(out, x.sample_rate)


def convolution_jacobian_vjp(h, upstream_grad, n: int | None = None) -> np.ndarray:
    """Pull a gradient back through :func:`convolve` with respect to the signal.

    Given dL/dx_h of length N, returns dL/dx of length N:
    g(m) = sum_n upstream(n) h(n-m), the correlation of the upstream gradient
    with the taps. The N x N Jacobian is never materialized.
    """
    grad = np.asarray(upstream_grad, dtype=np.float64)
    if grad.ndim != 1:
        raise ValueError("upstream gradient must be 1-D")
    if n is not None and grad.size != n:
        raise ValueError(f"upstream gradient length {grad.size} != signal length {n}")
    taps = np.asarray(h.taps, dtype=np.float64)
    padded = np.concatenate([grad, np.zeros(taps.size - 1)])
    return sig.correlate(padded, taps, mode="valid", method="auto")


def _hann_periodic(length: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def _frame_signal(samples: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n_frames = (samples.size - frame) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(samples, frame)[::hop]
    return view[:n_frames]


def stft(x: AudioSignal, config: FeatureConfig) -> np.ndarray:
    """Complex one-sided short-time spectrum, shape (T, bins).

    Each frame is Hann-windowed (periodic window) and zero-padded to the
    configured DFT size.
    """
    frame = config.frame_len(x.sample_rate)
    hop = config.hop(x.sample_rate)
    if len(x) < frame:
        raise FormatError(
            f"signal of {len(x)} samples is shorter than one {frame}-sample frame"
        )
    frames = _frame_signal(x.samples, frame, hop)
    window = _hann_periodic(frame)
    return np.fft.rfft(frames * window, config.dft_size, axis=1)


def extract_features(x: AudioSignal, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Log-magnitude short-time spectral features, shape (T, bins).

    values[t, b] = log(|DFT(window * frame_t)|_b + log_floor); the floor keeps
    both the value and its gradient finite at zero-magnitude bins.
    """
    mags = np.abs(stft(x, config))
    return FeatureMatrix(
        values=np.log(mags + config.log_floor),
        frame_ms=config.frame_ms,
        hop_ms=config.hop_ms,
        dft_bins=config.bins,
    )


def feature_jacobian_vjp(
    x: AudioSignal, config: FeatureConfig, upstream: np.ndarray
) -> np.ndarray:
    """Pull a (T, bins) feature gradient back to a length-N sample gradient.

    Exact adjoint of :func:`extract_features` at ``x``; overlapping frame
    contributions are accumulated.
    """
    frame = config.frame_len(x.sample_rate)
    hop = config.hop(x.sample_rate)
    spec = stft(x, config)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != spec.shape:
        raise ValueError(f"upstream shape {up.shape} != feature shape {spec.shape}")

    mags = np.abs(spec)
    # d|z_b| / du_j = Re(z_b exp(i w_b j)) / |z_b|; magnitude direction 0 at z=0.
    unit = np.divide(spec, mags, out=np.zeros_like(spec), where=mags > 0)
    coeff = (up / (mags + config.log_floor)) * unit

    # Adjoint of rfft: halve interior bins, inverse transform, scale by L.
    adj = coeff.copy()
    if config.dft_size % 2 == 0:
        adj[:, 1:-1] *= 0.5
    else:
        adj[:, 1:] *= 0.5
    frame_grad = np.fft.irfft(adj, config.dft_size, axis=1) * config.dft_size
    frame_grad = frame_grad[:, :frame] * _hann_periodic(frame)

    out = np.zeros(len(x))
    t_idx = np.arange(spec.shape[0])[:, None] * hop + np.arange(frame)[None, :]
    np.add.at(out, t_idx, frame_grad)
    return out
