import numpy as np
import pytest

from airforge.signal_core import (
    AudioSignal,
    ClippingError,
    FeatureConfig,
    FormatError,
    convolve,
    convolution_jacobian_vjp,
    extract_features,
    feature_jacobian_vjp,
    load_wav,
    write_wav,
)
from airforge.room_sim import Rir, identity_rir

FS = 16000


def brute_force_convolve(x, h):
    """Direct shift-and-add evaluation of the causal truncated convolution."""
    n, m = len(x), len(h)
    out = np.zeros(n)
    for k in range(m):
        out[k:] += h[k] * x[: n - k]
    return out


# ---------------------------------------------------------------- WAV I/O


def test_load_wav_all_zero(tmp_path):
    path = tmp_path / "zeros.wav"
    write_wav(AudioSignal(np.zeros(512), FS), path)
    loaded = load_wav(path)
    assert loaded.sample_rate == FS
    assert np.all(loaded.samples == 0.0)


def test_load_wav_scaling_identity(tmp_path):
    import wave

    path = tmp_path / "one.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(FS)
        w.writeframes(np.array([32767], dtype="<i2").tobytes())
    loaded = load_wav(path)
    assert loaded.samples[0] == pytest.approx(32767 / 32768, abs=0)


def test_wav_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    x = AudioSignal(rng.uniform(-0.99, 0.99, FS), FS)
    path = tmp_path / "noise.wav"
    write_wav(x, path)
    back = load_wav(path)
    assert back.sample_rate == FS
    assert np.max(np.abs(back.samples - x.samples)) <= 1.0 / 32768


def test_write_wav_boundary_value(tmp_path):
    path = tmp_path / "full.wav"
    write_wav(AudioSignal(np.array([1.0, -1.0]), FS), path)
    import wave

    with wave.open(str(path), "rb") as w:
        raw = np.frombuffer(w.readframes(2), dtype="<i2")
    assert raw[0] == 32767  # positive full scale saturates at int16 max
    assert raw[1] == -32768


def test_write_wav_rejects_clipped():
    with pytest.raises(ClippingError) as err:
        write_wav(AudioSignal(np.array([0.0, 1.2, 0.5]), FS), "/dev/null")
    assert err.value.count == 1


def test_load_wav_rejects_stereo(tmp_path):
    import wave

    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(FS)
        w.writeframes(np.zeros(8, dtype="<i2").tobytes())
    with pytest.raises(FormatError, match="channels"):
        load_wav(path)


def test_load_wav_rejects_8bit(tmp_path):
    import wave

    path = tmp_path / "8bit.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(FS)
        w.writeframes(bytes(8))
    with pytest.raises(FormatError, match="sample_width"):
        load_wav(path)


def test_load_wav_missing_file():
    with pytest.raises(FileNotFoundError):
        load_wav("/nonexistent/missing.wav")


def test_clipped_flag():
    assert not AudioSignal(np.array([1.0, -1.0]), FS).clipped
    assert AudioSignal(np.array([1.0001]), FS).clipped


# ---------------------------------------------------------------- convolution


def test_convolve_identity_kernel():
    rng = np.random.default_rng(1)
    x = AudioSignal(rng.standard_normal(200), FS)
    h = Rir(np.array([1.0, 0.0, 0.0, 0.0]), FS)
    out = convolve(x, h)
    assert np.allclose(out.samples, x.samples, atol=1e-15)


def test_convolve_unit_impulse_reproduces_taps():
    rng = np.random.default_rng(2)
    taps = rng.standard_normal(16)
    x = AudioSignal(np.concatenate([[1.0], np.zeros(63)]), FS)
    out = convolve(x, Rir(taps, FS))
    assert np.allclose(out.samples[:16], taps, atol=1e-14)
    assert np.allclose(out.samples[16:], 0.0, atol=1e-14)


def test_convolve_matches_brute_force():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(64)
    h = rng.standard_normal(16)
    out = convolve(AudioSignal(x, FS), Rir(h, FS))
    assert np.max(np.abs(out.samples - brute_force_convolve(x, h))) < 1e-12


def test_convolve_sample_rate_mismatch():
    x = AudioSignal(np.ones(8), 16000)
    with pytest.raises(ValueError, match="sample-rate"):
        convolve(x, Rir(np.array([1.0]), 8000))


def test_convolve_linearity():
    rng = np.random.default_rng(4)
    x1, x2 = rng.standard_normal(128), rng.standard_normal(128)
    h = Rir(rng.standard_normal(32), FS)
    a, b = 0.7, -1.3
    lhs = convolve(AudioSignal(a * x1 + b * x2, FS), h).samples
    rhs = a * convolve(AudioSignal(x1, FS), h).samples + b * convolve(
        AudioSignal(x2, FS), h
    ).samples
    assert np.max(np.abs(lhs - rhs)) < 1e-10


# ------------------------------------------------------- convolution adjoint


def test_conv_vjp_identity_kernel():
    rng = np.random.default_rng(5)
    up = rng.standard_normal(50)
    assert np.allclose(convolution_jacobian_vjp(identity_rir(FS), up), up)


def test_conv_vjp_matches_explicit_jacobian():
    rng = np.random.default_rng(6)
    n, m = 8, 3
    h = rng.standard_normal(m)
    up = rng.standard_normal(n)
    jac = np.zeros((n, n))  # jac[i, j] = d x_h(i) / d x(j) = h(i - j)
    for i in range(n):
        for j in range(n):
            if 0 <= i - j < m:
                jac[i, j] = h[i - j]
    expected = jac.T @ up
    got = convolution_jacobian_vjp(Rir(h, FS), up)
    assert np.max(np.abs(got - expected)) < 1e-12


def test_conv_vjp_central_differences():
    rng = np.random.default_rng(7)
    n, m = 120, 24
    x = rng.standard_normal(n)
    h = Rir(rng.standard_normal(m), FS)
    w = rng.standard_normal(n)  # loss L = <w, convolve(x, h)>
    grad = convolution_jacobian_vjp(h, w)
    eps = 1e-5
    for j in rng.choice(n, size=12, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        lp = w @ convolve(AudioSignal(xp, FS), h).samples
        lm = w @ convolve(AudioSignal(xm, FS), h).samples
        fd = (lp - lm) / (2 * eps)
        assert abs(fd - grad[j]) <= 1e-4 * max(1.0, abs(fd))


def test_conv_vjp_is_exact_adjoint():
    rng = np.random.default_rng(8)
    n = 96
    h = Rir(rng.standard_normal(17), FS)
    u = rng.standard_normal(n)
    v = rng.standard_normal(n)
    lhs = convolve(AudioSignal(u, FS), h).samples @ v
    rhs = u @ convolution_jacobian_vjp(h, v)
    assert abs(lhs - rhs) < 1e-10


def test_conv_vjp_length_check():
    with pytest.raises(ValueError, match="length"):
        convolution_jacobian_vjp(identity_rir(FS), np.ones(5), n=7)


# ------------------------------------------------------------------ features


def test_extract_features_sinusoid_peak_bin():
    cfg = FeatureConfig()
    t = np.arange(FS) / FS
    x = AudioSignal(0.5 * np.sin(2 * np.pi * 1000.0 * t), FS)
    feats = extract_features(x, cfg)
    expected_bin = round(1000.0 * cfg.dft_size / FS)
    assert expected_bin == 32
    assert np.all(np.argmax(feats.values, axis=1) == expected_bin)


def test_extract_features_zero_signal_hits_log_floor():
    cfg = FeatureConfig()
    feats = extract_features(AudioSignal(np.zeros(FS // 2), FS), cfg)
    assert np.allclose(feats.values, np.log(cfg.log_floor))


def test_extract_features_frame_count_formula():
    cfg = FeatureConfig()
    feats = extract_features(AudioSignal(np.ones(16000) * 0.1, FS), cfg)
    # floor((16000 - 320) / 160) + 1
    assert feats.n_frames == (16000 - 320) // 160 + 1 == 99


def test_extract_features_too_short():
    with pytest.raises(FormatError, match="shorter"):
        extract_features(AudioSignal(np.ones(100), FS), FeatureConfig())


def test_extract_features_finite_for_any_input():
    rng = np.random.default_rng(9)
    x = AudioSignal(np.concatenate([np.zeros(400), rng.standard_normal(4000) * 40]), FS)
    feats = extract_features(x, FeatureConfig())
    assert np.all(np.isfinite(feats.values))


def test_extract_features_deterministic():
    rng = np.random.default_rng(10)
    x = AudioSignal(rng.standard_normal(4000), FS)
    a = extract_features(x, FeatureConfig()).values
    b = extract_features(x, FeatureConfig()).values
    assert np.array_equal(a, b)


# ---------------------------------------------------------- feature adjoint


def test_feature_vjp_zero_upstream():
    rng = np.random.default_rng(11)
    x = AudioSignal(rng.standard_normal(4000), FS)
    cfg = FeatureConfig()
    up = np.zeros((cfg.n_frames(len(x), FS), cfg.bins))
    assert np.all(feature_jacobian_vjp(x, cfg, up) == 0.0)


def test_feature_vjp_central_differences():
    rng = np.random.default_rng(12)
    cfg = FeatureConfig()
    n = FS // 2
    x = rng.uniform(-0.5, 0.5, n)
    up = rng.standard_normal((cfg.n_frames(n, FS), cfg.bins))
    grad = feature_jacobian_vjp(AudioSignal(x, FS), cfg, up)

    def loss(vec):
        return float(
            np.sum(up * extract_features(AudioSignal(vec, FS), cfg).values)
        )

    eps = 1e-5
    for j in rng.choice(n, size=50, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        fd = (loss(xp) - loss(xm)) / (2 * eps)
        assert abs(fd - grad[j]) <= 1e-3 * max(1e-6, abs(fd), abs(grad[j]))


def test_feature_vjp_disjoint_frames_support():
    rng = np.random.default_rng(13)
    cfg = FeatureConfig(frame_ms=20.0, hop_ms=20.0)  # hop == frame: no overlap
    frame = cfg.frame_len(FS)
    n = frame * 4
    x = AudioSignal(rng.uniform(-0.5, 0.5, n), FS)
    up = np.zeros((cfg.n_frames(n, FS), cfg.bins))
    up[2] = rng.standard_normal(cfg.bins)  # only frame 2 active
    grad = feature_jacobian_vjp(x, cfg, up)
    assert np.any(grad[2 * frame : 3 * frame] != 0.0)
    assert np.all(grad[: 2 * frame] == 0.0)
    assert np.all(grad[3 * frame :] == 0.0)


def test_feature_vjp_shape_mismatch():
    x = AudioSignal(np.ones(4000) * 0.1, FS)
    with pytest.raises(ValueError, match="shape"):
        feature_jacobian_vjp(x, FeatureConfig(), np.zeros((3, 3)))
