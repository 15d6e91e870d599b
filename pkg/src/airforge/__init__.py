"""Over-the-air-robust targeted adversarial audio against a toy DNN-HMM
recognizer, with image-method room simulation and psychoacoustic masking."""

from .signal_core import (
    AudioSignal,
    FeatureConfig,
    FeatureMatrix,
    convolve,
    convolution_jacobian_vjp,
    extract_features,
    feature_jacobian_vjp,
    load_wav,
    write_wav,
)
from .room_sim import (
    PRESETS,
    Rir,
    RirDistribution,
    RoomParams,
    generate_rir,
    identity_rir,
    load_measured_rir,
    measure_t60,
    sample_room,
)

__all__ = [
    "AudioSignal",
    "FeatureConfig",
    "FeatureMatrix",
    "PRESETS",
    "Rir",
    "RirDistribution",
    "RoomParams",
    "convolve",
    "convolution_jacobian_vjp",
    "extract_features",
    "feature_jacobian_vjp",
    "generate_rir",
    "identity_rir",
    "load_measured_rir",
    "load_wav",
    "measure_t60",
    "sample_room",
    "write_wav",
]
