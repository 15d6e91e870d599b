import math

import numpy as np
import pytest
from scipy import stats

from airforge.room_sim import (
    PRESETS,
    MeasurementError,
    REFERENCE_ROOM,
    Rir,
    RirDistribution,
    RoomParameterError,
    RoomParams,
    SPEED_OF_SOUND,
    generate_rir,
    identity_rir,
    load_measured_rir,
    measure_t60,
    preset,
    reflection_coefficient,
    rir_to_signal,
    sample_room,
)
from airforge.signal_core import write_wav

FS = 16000


def first_significant_tap(h, rel=0.5):
    mags = np.abs(h.taps)
    return int(np.argmax(mags >= rel * mags.max()))


# ---------------------------------------------------------------- room params


def test_room_params_validation():
    with pytest.raises(RoomParameterError):
        RoomParams(b=(4, 4, 3), s=(4.0, 1, 1), r=(1, 1, 1), t60=0.3)
    with pytest.raises(RoomParameterError):
        RoomParams(b=(4, 4, 3), s=(1, 1, 1), r=(1, -0.1, 1), t60=0.3)
    with pytest.raises(RoomParameterError):
        RoomParams(b=(4, 4, 3), s=(1, 1, 1), r=(2, 2, 2), t60=-0.1)


def test_preset_ranges_match_published_table():
    h1 = preset("h_theta_1")
    assert h1.b_x == (6.0, 10.0)
    assert h1.b_y == (5.0, 9.0)
    assert h1.b_z == (3.0, 5.0)
    assert h1.t60 == (0.2, 0.6)
    h2 = preset("h_theta_2")
    assert h2.b_x == (7.0, 9.0)
    assert h2.b_y == (6.0, 8.0)
    assert h2.b_z == (2.5, 3.0)
    assert h2.t60 == (0.2, 0.4)
    h3 = preset("h_theta_3")
    assert h3.b_x == (2.0, 15.0)
    assert h3.b_y == (2.0, 15.0)
    assert h3.b_z == (2.0, 5.0)
    assert h3.t60 == (0.0, 1.0)


def test_unknown_preset():
    with pytest.raises(KeyError, match="h_theta_1"):
        preset("h_theta_9")


# ------------------------------------------------------------------ sampling


def test_sample_room_within_generic_ranges():
    rng = np.random.default_rng(0)
    for _ in range(50):
        params = sample_room(preset("h_theta_3"), rng)
        assert 2.0 <= params.b[0] <= 15.0
        assert 0.0 <= params.t60 <= 1.0
        for i in range(3):
            assert 0.0 < params.s[i] < params.b[i]
            assert 0.0 < params.r[i] < params.b[i]


def test_sample_room_degenerate_ranges_collapse():
    dist = RirDistribution((5.0, 5.0), (4.0, 4.0), (3.0, 3.0), (0.3, 0.3))
    rng = np.random.default_rng(1)
    for _ in range(5):
        params = sample_room(dist, rng)
        assert params.b == (5.0, 4.0, 3.0)
        assert params.t60 == 0.3


def test_sample_room_deterministic_per_seed():
    a = sample_room(preset("h_theta_1"), np.random.default_rng(42))
    b = sample_room(preset("h_theta_1"), np.random.default_rng(42))
    assert a == b


def test_sample_room_margin_too_large():
    dist = RirDistribution((0.15, 0.15), (5, 5), (3, 3), (0.3, 0.3))
    with pytest.raises(RoomParameterError, match="margin"):
        sample_room(dist, np.random.default_rng(2))


def test_sample_room_uniformity_ks():
    rng = np.random.default_rng(3)
    dist = preset("h_theta_1")
    draws = [sample_room(dist, rng) for _ in range(10_000)]
    for values, (lo, hi) in [
        (np.array([d.b[0] for d in draws]), dist.b_x),
        (np.array([d.b[1] for d in draws]), dist.b_y),
        (np.array([d.b[2] for d in draws]), dist.b_z),
        (np.array([d.t60 for d in draws]), dist.t60),
    ]:
        assert values.min() >= lo and values.max() <= hi
        unit = (values - lo) / (hi - lo)
        assert stats.kstest(unit, "uniform").statistic < 0.02


# -------------------------------------------------------- reflection + RIR


def test_reflection_coefficient_closed_form():
    # V = 8*7*2.8 = 156.8 m^3, S = 196 m^2, t60 = 0.4 s
    params = REFERENCE_ROOM
    assert params.volume == pytest.approx(156.8)
    assert params.surface_area == pytest.approx(196.0)
    alpha = 1.0 - math.exp(-0.161 * 156.8 / (196.0 * 0.4))
    assert alpha == pytest.approx(0.275, abs=1e-3)
    assert reflection_coefficient(params) == pytest.approx(math.sqrt(1 - alpha))
    assert reflection_coefficient(params) == pytest.approx(0.851, abs=1e-3)


def test_reflection_coefficient_limits():
    lossless = RoomParams(b=(8, 7, 2.8), s=(3.9, 3.4, 1.2), r=(1.4, 1.8, 1.2), t60=1e9)
    assert reflection_coefficient(lossless) == pytest.approx(1.0, abs=1e-6)
    anechoic = RoomParams(b=(8, 7, 2.8), s=(3.9, 3.4, 1.2), r=(1.4, 1.8, 1.2), t60=0.05)
    assert reflection_coefficient(anechoic) == 0.0


def test_generate_rir_direct_path_delay_reference_room():
    h = generate_rir(REFERENCE_ROOM, m=2048, fs=FS)
    expected = REFERENCE_ROOM.source_receiver_distance / SPEED_OF_SOUND * FS
    assert expected == pytest.approx(138.4, abs=0.2)
    assert abs(first_significant_tap(h) - expected) <= 1.0


def test_generate_rir_anechoic_below_cutoff():
    params = RoomParams(b=(6, 5, 3), s=(2, 2, 1.5), r=(4, 3, 1.5), t60=0.01)
    h = generate_rir(params, m=2048, fs=FS)
    direct = params.source_receiver_distance / SPEED_OF_SOUND * FS
    nz = np.nonzero(h.taps)[0]
    assert nz.size > 0
    # all energy within the fractional-delay kernel around the direct path
    assert nz.min() >= math.floor(direct) - 4
    assert nz.max() <= math.ceil(direct) + 4


def test_generate_rir_t60_roundtrip():
    params = RoomParams(b=(8, 7, 2.8), s=(3.9, 3.4, 1.2), r=(1.4, 1.8, 1.2), t60=0.4)
    h = generate_rir(params, m=8192, fs=FS)
    assert measure_t60(h) == pytest.approx(0.4, rel=0.25)


def test_generate_rir_deterministic():
    h1 = generate_rir(REFERENCE_ROOM, m=512, fs=FS)
    h2 = generate_rir(REFERENCE_ROOM, m=512, fs=FS)
    assert np.array_equal(h1.taps, h2.taps)


def test_generate_rir_energy_grows_with_t60():
    base = dict(b=(6, 5, 3), s=(2, 2, 1.5), r=(4, 3, 1.5))
    energies = [
        np.sum(generate_rir(RoomParams(t60=t, **base), m=4096, fs=FS).taps ** 2)
        for t in (0.2, 0.4, 0.8)
    ]
    assert energies[0] < energies[1] < energies[2]


def test_generate_rir_random_rooms_direct_delay():
    rng = np.random.default_rng(4)
    for _ in range(25):
        params = sample_room(preset("h_theta_1"), rng)
        h = generate_rir(params, m=1024, fs=FS)
        expected = params.source_receiver_distance / SPEED_OF_SOUND * FS
        if expected >= 1020:  # direct path beyond truncation; skip
            continue
        assert abs(first_significant_tap(h) - expected) <= 1.0


# ---------------------------------------------------------------- measure_t60


def test_measure_t60_synthetic_exponential_decay():
    rng = np.random.default_rng(5)
    n = FS  # 1 s
    target = 0.5
    envelope = np.exp(-6.91 * np.arange(n) / (FS * target))  # e^-6.91 ~ -60 dB
    h = Rir(envelope * rng.standard_normal(n), FS)
    assert measure_t60(h) == pytest.approx(target, rel=0.10)


def test_measure_t60_direct_path_only_fails():
    with pytest.raises(MeasurementError):
        measure_t60(identity_rir(FS))


def test_measure_t60_zero_energy():
    with pytest.raises(MeasurementError):
        measure_t60(Rir(np.zeros(128), FS))


def test_measure_t60_cross_checks_generator():
    params = RoomParams(b=(8, 7, 2.8), s=(3.9, 3.4, 1.2), r=(1.4, 1.8, 1.2), t60=0.6)
    h = generate_rir(params, m=8192, fs=FS)
    assert measure_t60(h) == pytest.approx(0.6, rel=0.25)


# ------------------------------------------------------------------- file I/O


def test_load_measured_rir_identity(tmp_path):
    path = tmp_path / "ident.wav"
    write_wav(rir_to_signal(Rir(np.array([1.0, 0.0, 0.0, 0.0]), FS)), path)
    h = load_measured_rir(path, sample_rate=FS)
    assert h.params is None
    assert h.taps[0] == pytest.approx(1.0, abs=1 / 32768)
    assert np.all(h.taps[1:] == 0.0)


def test_load_measured_rir_roundtrip(tmp_path):
    h = generate_rir(REFERENCE_ROOM, m=2048, fs=FS)
    path = tmp_path / "rir.wav"
    write_wav(rir_to_signal(h), path)
    back = load_measured_rir(path, sample_rate=FS)
    assert np.max(np.abs(back.taps - h.taps)) <= 1.0 / 32768


def test_load_measured_rir_truncation(tmp_path):
    h = generate_rir(REFERENCE_ROOM, m=2048, fs=FS)
    path = tmp_path / "rir.wav"
    write_wav(rir_to_signal(h), path)
    short = load_measured_rir(path, sample_rate=FS, m=512)
    full = load_measured_rir(path, sample_rate=FS)
    assert short.taps.size == 512
    assert np.array_equal(short.taps, full.taps[:512])
    padded = load_measured_rir(path, sample_rate=FS, m=4096)
    assert padded.taps.size == 4096
    assert np.all(padded.taps[2048:] == 0.0)


def test_load_measured_rir_rate_mismatch(tmp_path):
    path = tmp_path / "wrong_rate.wav"
    from airforge.signal_core import AudioSignal

    write_wav(AudioSignal(np.zeros(64) + 0.1, 8000), path)
    with pytest.raises(MeasurementError, match="8000"):
        load_measured_rir(path, sample_rate=FS)
