"""Room impulse responses: image-method generation, sampling of room
configurations from uniform parameter ranges, and T60 measurement.

The generator enumerates the mirror-source lattice of a cuboid room with a
uniform wall reflection coefficient derived from the requested reverberation
time via Eyring's relation, and places each image with a Hann-windowed sinc
fractional-delay kernel. Generation is deterministic: all randomness lives in
:func:`sample_room`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .signal_core import AudioSignal, load_wav

SPEED_OF_SOUND = 343.0  # m/s at ~20 C
ANECHOIC_T60_CUTOFF = 0.05  # below this the walls are treated as fully absorbing
KERNEL_HALF_WIDTH = 4  # samples, Hann-windowed sinc fractional delay
DEFAULT_PLACEMENT_MARGIN = 0.1  # m clearance from every wall
MIN_IMAGE_DISTANCE = 1e-2  # m, guards the 1/(4*pi*d) amplitude


class RoomError(Exception):
    """Base class for room-simulation failures."""


class RoomParameterError(RoomError):
    """Room parameters are geometrically or physically impossible."""


class MeasurementError(RoomError):
    """An impulse response does not support the requested measurement."""


@dataclass(frozen=True)
class RoomParams:
    """A cuboid room: dimensions b, source s, receiver r (meters), and T60 (s)."""

    b: tuple[float, float, float]
    s: tuple[float, float, float]
    r: tuple[float, float, float]
    t60: float

    def __post_init__(self):
        b = tuple(float(v) for v in self.b)
        s = tuple(float(v) for v in self.s)
        r = tuple(float(v) for v in self.r)
        if len(b) != 3 or len(s) != 3 or len(r) != 3:
            raise RoomParameterError("b, s, r must each have three components")
        if any(v <= 0 for v in b):
            raise RoomParameterError(f"room dimensions must be positive, got {b}")
        for name, pos in (("source", s), ("receiver", r)):
            if not all(0.0 < pos[i] < b[i] for i in range(3)):
                raise RoomParameterError(
                    f"{name} position {pos} not strictly inside room {b}"
                )
        if self.t60 < 0:
            raise RoomParameterError(f"t60 must be >= 0, got {self.t60}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t60", float(self.t60))

    @property
    def volume(self) -> float:
        bx, by, bz = self.b
        return bx * by * bz

    @property
    def surface_area(self) -> float:
        bx, by, bz = self.b
        return 2.0 * (bx * by + bx * bz + by * bz)

    @property
    def source_receiver_distance(self) -> float:
        return math.dist(self.s, self.r)


# Room of the reference impulse response used throughout the docs and CLI
# ("fig5" preset): 8 x 7 x 2.8 m, T60 = 0.4 s.
REFERENCE_ROOM = RoomParams(
    b=(8.0, 7.0, 2.8), s=(3.9, 3.4, 1.2), r=(1.4, 1.8, 1.2), t60=0.4
)


@dataclass(frozen=True)
class RirDistribution:
    """Uniform ranges for room dimensions and T60; positions are drawn after
    the room size, uniformly within the placement margin."""

    b_x: tuple[float, float]
    b_y: tuple[float, float]
    b_z: tuple[float, float]
    t60: tuple[float, float]
    placement_margin: float = DEFAULT_PLACEMENT_MARGIN

    def __post_init__(self):
        for name in ("b_x", "b_y", "b_z", "t60"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range has min {lo} > max {hi}")
        if self.placement_margin < 0:
            raise ValueError("placement_margin must be >= 0")


PRESETS = {
    "h_theta_1": RirDistribution((6.0, 10.0), (5.0, 9.0), (3.0, 5.0), (0.2, 0.6)),
    "h_theta_2": RirDistribution((7.0, 9.0), (6.0, 8.0), (2.5, 3.0), (0.2, 0.4)),
    "h_theta_3": RirDistribution((2.0, 15.0), (2.0, 15.0), (2.0, 5.0), (0.0, 1.0)),
}


def preset(name: str) -> RirDistribution:
    try:
        return PRESETS[name]
    except KeyError:
        valid = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown distribution preset {name!r}; valid: {valid}") from None


@dataclass(frozen=True)
class Rir:
    """A finite impulse response plus the room parameters that generated it
    (absent for measured or loaded responses)."""

    taps: np.ndarray
    sample_rate: int
    params: RoomParams | None = None

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or taps.size < 1:
            raise ValueError("taps must be a non-empty 1-D sequence")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        taps = taps.copy()
        taps.flags.writeable = False
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.taps.size


def identity_rir(sample_rate: int = 16000) -> Rir:
    """The unit-impulse response: convolution with it is the identity."""
    return Rir(np.array([1.0]), sample_rate)


def sample_room(dist: RirDistribution, rng: np.random.Generator) -> RoomParams:
    """Draw one room configuration: dimensions and T60 first, then source and
    receiver uniformly inside the margins. Deterministic for a fixed rng state."""
    b = tuple(
        float(rng.uniform(lo, hi)) for lo, hi in (dist.b_x, dist.b_y, dist.b_z)
    )
    t60 = float(rng.uniform(*dist.t60))
    m = dist.placement_margin
    for i, edge in enumerate(b):
        if edge <= 2.0 * m:
            raise RoomParameterError(
                f"room edge b[{i}]={edge:.3f} m leaves no interior at margin {m} m"
            )
    s = tuple(float(rng.uniform(m, edge - m)) for edge in b)
    r = tuple(float(rng.uniform(m, edge - m)) for edge in b)
    return RoomParams(b=b, s=s, r=r, t60=t60)


def reflection_coefficient(params: RoomParams) -> float:
    """Uniform wall reflection coefficient beta for the requested T60.

    Eyring: T60 = 0.161 V / (-S ln(1 - alpha)), beta = sqrt(1 - alpha).
    At or below the anechoic cutoff the walls are fully absorbing (beta = 0).
    """
    if params.t60 <= ANECHOIC_T60_CUTOFF:
        return 0.0
    alpha = 1.0 - math.exp(-0.161 * params.volume / (params.surface_area * params.t60))
    if not 0.0 < alpha <= 1.0:
        raise RoomParameterError(
            f"t60={params.t60} s requires absorption {alpha:.3f} outside (0, 1]"
        )
    return math.sqrt(1.0 - alpha)


def _octant_directions(n: int = 512) -> np.ndarray:
    """Deterministic Fibonacci-lattice directions folded into |u| >= 0."""
    k = np.arange(n) + 0.5
    phi = np.pi * (1.0 + math.sqrt(5.0)) * k
    z = 1.0 - 2.0 * k / n
    rho = np.sqrt(1.0 - z * z)
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    return np.abs(dirs)


_DIRECTIONS = _octant_directions()


@lru_cache(maxsize=256)
def _shape_tau60(b: tuple[float, float, float]) -> float:
    """Schroeder-fit decay constant of the specular-mixture model, in
    distance units, for a room of dimensions ``b`` with unit |ln beta|.

    In a shoebox every ray keeps its direction cosines, so the energy decay
    is a mixture of exponentials with per-direction rate proportional to
    sum_i |u_i| / b_i. The -5..-35 dB line fit of that mixture's Schroeder
    curve scales inversely with |ln beta|, which lets the wall coefficient be
    solved in closed form. In the diffuse limit this reduces to Eyring.
    """
    rates = np.sum(_DIRECTIONS / np.asarray(b), axis=1)  # wall hits per meter
    tau_max = 1.5 * 13.8155 / float(np.mean(rates))
    for _ in range(24):  # extend until the curve actually reaches -35 dB
        tau = np.linspace(0.0, tau_max, 2048)
        edc = np.mean(np.exp(-np.outer(tau, rates)) / rates, axis=1)
        edc_db = 10.0 * np.log10(edc / edc[0])
        if edc_db[-1] <= -40.0:
            break
        tau_max *= 2.0
    i5 = int(np.argmax(edc_db <= -5.0))
    i35 = int(np.argmax(edc_db <= -35.0))
    slope, _ = np.polyfit(tau[i5 : i35 + 1], edc_db[i5 : i35 + 1], 1)
    return -60.0 / slope


def wall_coefficient(params: RoomParams) -> float:
    """Wall reflection magnitude used by :func:`generate_rir`.

    Solves |ln beta| so that the specular-mixture decay model of this room
    shape reproduces the requested Schroeder-measured T60 (the plain Eyring
    value of :func:`reflection_coefficient` reads 10-50% slow on the Schroeder
    fit because a shoebox sound field is not diffuse).
    """
    if params.t60 <= ANECHOIC_T60_CUTOFF:
        return 0.0
    tau60 = _shape_tau60(params.b)
    return math.exp(-tau60 / (2.0 * SPEED_OF_SOUND * params.t60))


def generate_rir(params: RoomParams, m: int, fs: int = 16000) -> Rir:
    """Image-method impulse response with ``m`` taps at sample rate ``fs``.

    Mirror sources are enumerated out to the truncation window (plus kernel
    half-width); each contributes beta^reflections / (4 pi d) at delay d/c,
    placed with a Hann-windowed sinc kernel. Bit-identical across runs.
    """
    if m < 1:
        raise ValueError("tap count m must be >= 1")
    beta = wall_coefficient(params)
    d_max = (m + KERNEL_HALF_WIDTH) / fs * SPEED_OF_SOUND

    b = np.asarray(params.b)
    s = np.asarray(params.s)
    r = np.asarray(params.r)
    lattice = [
        np.arange(-(int(np.ceil(d_max / (2.0 * b[i]))) + 1),
                  int(np.ceil(d_max / (2.0 * b[i]))) + 2)
        for i in range(3)
    ]
    max_order = sum(2 * int(q.max()) + 1 for q in lattice)
    # Wall coefficient is -beta: the sign alternates with reflection count,
    # which decorrelates overlapping images (otherwise the late tail piles up
    # coherently and the measured decay comes out far too slow).
    beta_pow = (-beta) ** np.arange(max_order + 1)  # beta=0 -> [1, 0, 0, ...]

    taps = np.zeros(m)
    offsets = np.arange(-KERNEL_HALF_WIDTH + 1, KERNEL_HALF_WIDTH + 1)
    for p in itertools.product((0, 1), repeat=3):
        axes = [(1 - 2 * p[i]) * s[i] + 2.0 * lattice[i] * b[i] for i in range(3)]
        refl = [np.abs(lattice[i] - p[i]) + np.abs(lattice[i]) for i in range(3)]
        dist = np.sqrt(
            (axes[0][:, None, None] - r[0]) ** 2
            + (axes[1][None, :, None] - r[1]) ** 2
            + (axes[2][None, None, :] - r[2]) ** 2
        ).ravel()
        order = (
            refl[0][:, None, None] + refl[1][None, :, None] + refl[2][None, None, :]
        ).ravel()
        keep = dist <= d_max
        dist = np.maximum(dist[keep], MIN_IMAGE_DISTANCE)
        amp = beta_pow[order[keep]] / (4.0 * np.pi * dist)
        live = amp != 0.0
        dist, amp = dist[live], amp[live]

        t_samp = dist * (fs / SPEED_OF_SOUND)
        idx = np.floor(t_samp).astype(np.int64)[:, None] + offsets[None, :]
        delta = idx - t_samp[:, None]
        kernel = np.where(
            np.abs(delta) < KERNEL_HALF_WIDTH,
            0.5 * (1.0 + np.cos(np.pi * delta / KERNEL_HALF_WIDTH)) * np.sinc(delta),
            0.0,
        )
        vals = amp[:, None] * kernel
        valid = (idx >= 0) & (idx < m)
        taps += np.bincount(idx[valid], weights=vals[valid], minlength=m)

    return Rir(taps=taps, sample_rate=fs, params=params)


def measure_t60(h: Rir) -> float:
    """Reverberation time from the Schroeder backward-integrated decay curve.

    A line is fit to the energy decay between -5 dB and -35 dB and
    extrapolated to -60 dB (T30 method), since the raw -60 dB point usually
    falls below the truncated tail.
    """
    energy = h.taps.astype(np.float64) ** 2
    total = energy.sum()
    if total <= 0.0:
        raise MeasurementError("impulse response has no energy")
    edc = np.cumsum(energy[::-1])[::-1]
    nz = np.nonzero(edc > 0.0)[0]
    edc_db = 10.0 * np.log10(edc[: nz[-1] + 1] / edc[0])

    below5 = np.nonzero(edc_db <= -5.0)[0]
    below35 = np.nonzero(edc_db <= -35.0)[0]
    if below5.size == 0 or below35.size == 0:
        raise MeasurementError("decay curve never reaches the -5/-35 dB fit range")
    i5, i35 = below5[0], below35[0]
    if i35 - i5 < 10:
        raise MeasurementError(
            f"only {i35 - i5} decay samples between -5 and -35 dB; need >= 10"
        )
    t = np.arange(i5, i35 + 1) / h.sample_rate
    slope, _ = np.polyfit(t, edc_db[i5 : i35 + 1], 1)
    if slope >= 0.0:
        raise MeasurementError("decay curve is not decreasing")
    return float(-60.0 / slope)


def load_measured_rir(path, sample_rate: int = 16000, m: int | None = None) -> Rir:
    """Load an impulse response from a mono 16-bit WAV at the pipeline rate.

    If ``m`` is given, the taps are truncated or zero-padded to that length.
    Loaded responses carry no generating room parameters.
    """
    audio = load_wav(path)
    if audio.sample_rate != sample_rate:
        raise MeasurementError(
            f"RIR sampled at {audio.sample_rate} Hz, pipeline expects {sample_rate} Hz"
        )
    taps = np.array(audio.samples)
    if m is not None:
        if m < 1:
            raise ValueError("tap count m must be >= 1")
        if taps.size >= m:
            taps = taps[:m]
        else:
            taps = np.concatenate([taps, np.zeros(m - taps.size)])
    return Rir(taps=taps, sample_rate=sample_rate, params=None)


def rir_to_signal(h: Rir) -> AudioSignal:
    """View an impulse response as an audio signal (for WAV export)."""
    return AudioSignal(h.taps, h.sample_rate)
