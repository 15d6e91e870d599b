"""Psychoacoustic hearing thresholds on the attack's own STFT grid, following
the first stage of the MP3 layer-1 psychoacoustic model: 96-dB-full-scale
spectrum, threshold in quiet, tonal/non-tonal masker extraction per critical
band, two-slope spreading, and a power-summed global threshold.

Thresholds are computed once per utterance from the ORIGINAL signal and
shared read-only by every attack iteration; the gradient mask derived from
them ramps smoothly to zero as the perturbation approaches its budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_core import AudioSignal, FeatureConfig, _hann_periodic, stft

FULL_SCALE_DB = 96.0  # digital full scale maps to 96 dB SPL
TONAL_PROMINENCE_DB = 7.0
MASK_RAMP_DB = 20.0  # headroom over which the gradient mask ramps 0 -> 1
SPECTRUM_FLOOR_DB = -400.0

# Critical-band edges (Hz) up to the 8 kHz Nyquist of the 16 kHz pipeline.
CRITICAL_BAND_EDGES_HZ = np.array(
    [0.0, 100.0, 200.0, 300.0, 400.0, 510.0, 630.0, 770.0, 920.0, 1080.0,
     1270.0, 1480.0, 1720.0, 2000.0, 2320.0, 2700.0, 3150.0, 3700.0, 4400.0,
     5300.0, 6400.0, 7700.0, 8000.0]
)


@dataclass(frozen=True)
class HearingThresholds:
    """Allowed perturbation level per time-frequency bin, in dB (96 dB full
    scale), with the margin applied at use time."""

    values: np.ndarray
    margin_db: float = 20.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("threshold matrix must be 2-D")
        if not np.all(np.isfinite(values)):
            raise ValueError("thresholds must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def threshold_in_quiet(f) -> np.ndarray | float:
    """Absolute audibility threshold in dB at frequency ``f`` (Hz), Terhardt
    approximation: 3.64 (f/kHz)^-0.8 - 6.5 exp(-0.6 (f/kHz - 3.3)^2)
    + 1e-3 (f/kHz)^4."""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr <= 0.0):
        raise ValueError("frequency must be positive")
    khz = f_arr / 1000.0
    out = (
        3.64 * khz**-0.8
        - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2)
        + 1e-3 * khz**4
    )
    return float(out) if np.isscalar(f) else out


def _bark(f):
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def _spreading(dz, masker_db):
    """Two-slope MP3 model-1 spreading function over bark distance dz,
    level-dependent; no contribution outside [-3, 8) bark."""
    dz = np.asarray(dz, dtype=np.float64)
    sf = np.full(dz.shape, -np.inf)
    p = masker_db
    m = (dz >= -3.0) & (dz < -1.0)
    sf[m] = 17.0 * dz[m] - 0.4 * p + 11.0
    m = (dz >= -1.0) & (dz < 0.0)
    sf[m] = (0.4 * p + 6.0) * dz[m]
    m = (dz >= 0.0) & (dz < 1.0)
    sf[m] = -17.0 * dz[m]
    m = (dz >= 1.0) & (dz < 8.0)
    sf[m] = (0.15 * p - 17.0) * dz[m] - 0.15 * p
    return sf


def _tonal_neighborhood(bin_index: int, bin_hz: float) -> np.ndarray:
    """Offsets a tonal peak must dominate, widening with frequency (the MP3
    neighbor table rescaled to this DFT grid): +-2 bins below 2.5 kHz, +-3 to
    5 kHz, +-6 above."""
    f = bin_index * bin_hz
    if f < 2500.0:
        reach = 2
    elif f < 5000.0:
        reach = 3
    else:
        reach = 6
    offsets = np.arange(-reach, reach + 1)
    return offsets[np.abs(offsets) >= 2]


def power_spectrum_db(x: AudioSignal, config: FeatureConfig) -> np.ndarray:
    """STFT magnitude mapped to the 96-dB-full-scale convention: a full-scale
    sinusoid at a bin center reads 96 dB."""
    spec = np.abs(stft(x, config))
    window_gain = _hann_periodic(config.frame_len(x.sample_rate)).sum() / 2.0
    norm = spec / window_gain
    with np.errstate(divide="ignore"):
        db = FULL_SCALE_DB + 20.0 * np.log10(norm)
    return np.maximum(db, SPECTRUM_FLOOR_DB)


def compute_thresholds(
    x: AudioSignal, config: FeatureConfig = FeatureConfig(), margin_db: float = 20.0
) -> HearingThresholds:
    """Per-frame global masking thresholds for the original signal ``x``."""
    psd = power_spectrum_db(x, config)
    n_frames, n_bins = psd.shape
    fs = x.sample_rate
    bin_hz = fs / config.dft_size
    freqs = np.maximum(np.arange(n_bins) * bin_hz, 20.0)  # DC evaluated at 20 Hz
    quiet = threshold_in_quiet(freqs)
    barks = _bark(freqs)

    band_edges = CRITICAL_BAND_EDGES_HZ[CRITICAL_BAND_EDGES_HZ <= fs / 2.0]
    if band_edges[-1] < fs / 2.0:
        band_edges = np.append(band_edges, fs / 2.0)
    band_of_bin = np.searchsorted(band_edges, freqs, side="right") - 1
    band_of_bin = np.clip(band_of_bin, 0, len(band_edges) - 2)
    band_centers_hz = np.sqrt(
        np.maximum(band_edges[:-1], bin_hz) * band_edges[1:]
    )
    band_center_bark = _bark(band_centers_hz)
    band_center_quiet = threshold_in_quiet(band_centers_hz)

    values = np.empty_like(psd)
    for t in range(n_frames):
        frame = psd[t]
        maskers = []  # (bark position, level_db, is_tonal)

        tonal_bins = []
        for k in range(1, n_bins - 1):
            if not (frame[k] > frame[k - 1] and frame[k] > frame[k + 1]):
                continue
            offsets = _tonal_neighborhood(k, bin_hz)
            neighbors = k + offsets
            neighbors = neighbors[(neighbors >= 0) & (neighbors < n_bins)]
            if np.all(frame[k] > frame[neighbors] + TONAL_PROMINENCE_DB):
                level = 10.0 * np.log10(
                    np.sum(10.0 ** (frame[k - 1 : k + 2] / 10.0))
                )
                if level >= quiet[k]:
                    maskers.append((barks[k], level, True))
                tonal_bins.append(k)

        consumed = np.zeros(n_bins, dtype=bool)
        for k in tonal_bins:
            consumed[max(k - 1, 0) : k + 2] = True
        residual_power = np.where(consumed, 0.0, 10.0 ** (frame / 10.0))
        for band in range(len(band_edges) - 1):
            sel = band_of_bin == band
            power = residual_power[sel].sum()
            if power <= 0.0:
                continue
            level = 10.0 * np.log10(power)
            if level >= band_center_quiet[band]:
                maskers.append((band_center_bark[band], level, False))

        total = 10.0 ** (quiet / 10.0)
        for z_m, level, tonal in maskers:
            av = (-0.275 * z_m - 6.025) if tonal else (-0.175 * z_m - 2.025)
            contrib = level + av + _spreading(barks - z_m, level)
            finite = contrib > -np.inf
            total[finite] += 10.0 ** (contrib[finite] / 10.0)
        values[t] = 10.0 * np.log10(total)

    return HearingThresholds(values=values, margin_db=margin_db)


def perturbation_spectrum_db(
    delta: np.ndarray, config: FeatureConfig, sample_rate: int
) -> np.ndarray:
    """Current perturbation magnitude on the threshold grid, in dB (96 dB
    full scale); silent bins read the -400 dB floor."""
    return power_spectrum_db(AudioSignal(delta, sample_rate), config)


def budget_amplitude(
    thresholds: HearingThresholds,
    config: FeatureConfig,
    sample_rate: int,
    margin_db: float | None = None,
) -> np.ndarray:
    """Allowed perturbation level as a raw STFT magnitude (the inverse of the
    96-dB-full-scale mapping), for amplitude-domain budget checks."""
    if margin_db is None:
        margin_db = thresholds.margin_db
    window_gain = _hann_periodic(config.frame_len(sample_rate)).sum() / 2.0
    return window_gain * 10.0 ** ((thresholds.values + margin_db - FULL_SCALE_DB) / 20.0)


def gradient_mask(
    thresholds: HearingThresholds,
    perturbation_db: np.ndarray,
    margin_db: float | None = None,
    erode: bool = True,
) -> np.ndarray:
    """Per-bin gradient scale in [0, 1]: zero at or over the allowed level
    (threshold + margin), one with >= 20 dB headroom, linear between.

    A time-domain update aimed at one bin also deposits energy into the
    overlapping neighbor frames and adjacent bins (window main lobe), so by
    default the mask is eroded over that leakage neighborhood: a bin only
    keeps gradient while everything it spills into still has headroom.
    """
    if margin_db is None:
        margin_db = thresholds.margin_db
    if perturbation_db.shape != thresholds.values.shape:
        raise ValueError(
            f"perturbation grid {perturbation_db.shape} != thresholds "
            f"{thresholds.values.shape}"
        )
    headroom = thresholds.values + margin_db - perturbation_db
    mask = np.clip(headroom / MASK_RAMP_DB, 0.0, 1.0)
    if erode:
        from scipy.ndimage import minimum_filter

        mask = minimum_filter(mask, size=(3, 9), mode="nearest")
    return mask


def export_thresholds_csv(thresholds: HearingThresholds, path) -> None:
    """CSV rows (frame, bin, dB) for inspection and plotting."""
    with open(path, "w") as fh:
        fh.write("frame,bin,db\n")
        n_frames, n_bins = thresholds.values.shape
        for t in range(n_frames):
            for b in range(n_bins):
                fh.write(f"{t},{b},{thresholds.values[t, b]:.4f}\n")
