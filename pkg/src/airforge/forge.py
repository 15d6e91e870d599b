"""The attack engine: a differentiable room-convolution -> feature ->
acoustic-network pipeline, and the iterative loop that hardens a targeted
adversarial example over sampled room impulse responses, optionally under
psychoacoustic hearing-threshold masks, verifying against a held-out test
response that never enters the gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bench import snrseg, wer
from .masking import (
    HearingThresholds,
    budget_amplitude,
    compute_thresholds,
    gradient_mask,
    perturbation_spectrum_db,
)
from .recognizer import (
    AcousticModel,
    AlignmentTargets,
    DecodeConfig,
    Lexicon,
    decode,
    force_align,
    loss_and_input_grad,
)
from .room_sim import Rir, RirDistribution, generate_rir, sample_room
from .signal_core import (
    AudioSignal,
    ClippingError,
    convolve,
    convolution_jacobian_vjp,
    extract_features,
    feature_jacobian_vjp,
    write_wav,
)

ATTACK_MODES = ("adapted", "generic", "direct")


class AttackError(Exception):
    """Attack aborted; carries the loss trace up to the failure."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = loss_trace or []


@dataclass(frozen=True)
class AttackConfig:
    """Knobs of the hardening loop.

    ``mode``: "direct" skips the room layer entirely (the plain feature-level
    attack); "generic" draws training and verification responses from a broad
    room prior; "adapted" trains on a room-distribution prior but verifies
    against a supplied (measured) response.
    """

    mode: str = "direct"
    distribution: RirDistribution | None = None
    h_test: Rir | None = None
    max_iterations: int = 2000  # outer iterations (one room draw each)
    steps_per_rir: int = 10  # gradient steps per drawn response
    rir_taps: int = 512
    step_size: float = 0.05
    step_decay_at: tuple[int, ...] = (1000, 1500)  # outer iterations halving the step
    use_thresholds: bool = False
    margin_db: float = 20.0
    delta_max: float | None = None  # optional max-abs bound on the perturbation
    seed: int = 0
    snapshot_every: int = 0  # keep a copy of x' every N outer iterations
    decode_config: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"mode must be one of {ATTACK_MODES}")
        if not self.max_iterations >= self.steps_per_rir >= 1:
            raise ValueError("need max_iterations >= steps_per_rir >= 1")
        if self.rir_taps < 1:
            raise ValueError("rir_taps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.mode in ("adapted", "generic") and self.distribution is None:
            raise ValueError(f"{self.mode} mode needs a room distribution")
        if self.mode == "adapted" and self.h_test is None:
            raise ValueError("adapted mode needs a measured verification response")


@dataclass
class AttackResult:
    adversarial: AudioSignal
    perturbation: AudioSignal
    iterations_used: int
    success: bool
    wer_htest: float
    snrseg_db: float
    clipped: bool
    loss_trace: list[float]
    decoded: tuple[str, ...]
    target: tuple[str, ...]
    seed: int
    snapshots: list[tuple[int, AudioSignal]] = field(default_factory=list)


def _pipeline_parts(model, h, x, targets, spectral_mask=None):
    """Forward the (optional room ->) feature -> network pipeline and return
    the loss plus a masked time-domain gradient, sharing one computation."""
    fc = model.feature_config
    received = convolve(x, h) if h is not None else x
    feats = extract_features(received, fc)
    loss, grad_feat = loss_and_input_grad(model, feats, targets)
    if spectral_mask is not None:
        grad_feat = grad_feat * spectral_mask
    grad_time = feature_jacobian_vjp(received, fc, grad_feat)
    if h is not None:
        grad_time = convolution_jacobian_vjp(h, grad_time, n=len(x))
    return loss, grad_time


def pipeline_gradient(
    model: AcousticModel,
    h: Rir | None,
    x: AudioSignal,
    targets: AlignmentTargets,
    spectral_mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy of the pipeline at ``x`` and its exact gradient with
    respect to the raw samples.

    With a room response the chain runs loss -> features -> convolution
    (``h = None`` short-circuits the room layer: the plain direct-attack
    gradient). ``spectral_mask`` scales the feature-level gradient bin-wise
    before it is pulled back to the time domain.
    """
    return _pipeline_parts(model, h, x, targets, spectral_mask)


def apply_masked_step(
    x_adv: AudioSignal,
    spectral_grad: np.ndarray,
    mask: np.ndarray | None,
    step_size: float,
    to_time,
) -> AudioSignal:
    """One descent step: scale the feature-domain loss gradient by ``mask``,
    map it to the time domain via ``to_time``, and subtract ``step_size``
    times the result normalized to unit max-abs.

    The normalization peak is taken from the UNMASKED gradient: renormalizing
    after masking would blow a nearly-extinguished gradient back up to full
    step size and let the perturbation creep far past its spectral budget.
    """
    if mask is None:
        grad = to_time(spectral_grad)
        peak = float(np.max(np.abs(grad)))
    else:
        peak = float(np.max(np.abs(to_time(spectral_grad))))
        grad = to_time(spectral_grad * mask)
    if peak == 0.0:
        return x_adv
    return AudioSignal(
        x_adv.samples - step_size * (grad / peak), x_adv.sample_rate
    )


def _step_size_at(cfg: AttackConfig, outer_iteration: int) -> float:
    alpha = cfg.step_size
    for threshold in cfg.step_decay_at:
        if outer_iteration > threshold:
            alpha *= 0.5
    return alpha


def attack(
    model: AcousticModel,
    x: AudioSignal,
    target,
    cfg: AttackConfig,
    lexicon: Lexicon,
) -> AttackResult:
    """Forge a targeted adversarial example.

    Alignment targets are fixed once from the original audio. Each outer
    iteration draws a fresh room response (skipped in direct mode), runs
    ``steps_per_rir`` masked gradient-descent steps on the raw samples, then
    decodes the candidate through the verification response; the loop exits
    early on a verbatim match. The verification response never contributes a
    gradient. Clipping is reported at exit, never clamped away.
    """
    target = tuple(target)
    fc = model.feature_config
    rng = np.random.default_rng([cfg.seed, 0x41F0])
    feats_x = extract_features(x, fc)
    targets = force_align(model, feats_x, target, lexicon, cfg.decode_config)

    thresholds: HearingThresholds | None = None
    if cfg.use_thresholds:
        thresholds = compute_thresholds(x, fc, margin_db=cfg.margin_db)

    if cfg.mode == "generic" and cfg.h_test is None:
        h_test = generate_rir(
            sample_room(cfg.distribution, rng), cfg.rir_taps, x.sample_rate
        )
    else:
        h_test = cfg.h_test  # measured (adapted), None (direct), or supplied

    def verify(cand: AudioSignal) -> tuple[str, ...]:
        received = convolve(cand, h_test) if h_test is not None else cand
        return decode(
            model, extract_features(received, fc), lexicon, cfg.decode_config
        )

    x_adv = x
    loss_trace: list[float] = []
    snapshots: list[tuple[int, AudioSignal]] = []
    decoded = verify(x_adv)
    success = decoded == target
    g = 0
    while g < cfg.max_iterations and not success:
        g += 1
        h = None
        if cfg.mode != "direct":
            h = generate_rir(
                sample_room(cfg.distribution, rng), cfg.rir_taps, x.sample_rate
            )
        alpha = _step_size_at(cfg, g)
        for _ in range(cfg.steps_per_rir):
            mask = None
            if thresholds is not None:
                delta_db = perturbation_spectrum_db(
                    x_adv.samples - x.samples, fc, x.sample_rate
                )
                mask = gradient_mask(thresholds, delta_db, cfg.margin_db)
            received = convolve(x_adv, h) if h is not None else x_adv
            feats = extract_features(received, fc)
            loss, grad_feat = loss_and_input_grad(model, feats, targets)
            if not np.isfinite(loss):
                raise AttackError(
                    f"loss became {loss} at outer iteration {g}", loss_trace
                )
            loss_trace.append(loss)

            def to_time(masked_grad):
                grad = feature_jacobian_vjp(received, fc, masked_grad)
                if h is not None:
                    grad = convolution_jacobian_vjp(h, grad, n=len(x_adv))
                return grad

            x_adv = apply_masked_step(x_adv, grad_feat, mask, alpha, to_time)
            if cfg.delta_max is not None:
                delta = np.clip(
                    x_adv.samples - x.samples, -cfg.delta_max, cfg.delta_max
                )
                x_adv = AudioSignal(x.samples + delta, x.sample_rate)
        decoded = verify(x_adv)
        success = decoded == target
        if cfg.snapshot_every > 0 and (g % cfg.snapshot_every == 0 or success):
            snapshots.append((g, x_adv))

    perturbation = AudioSignal(x_adv.samples - x.samples, x.sample_rate)
    return AttackResult(
        adversarial=x_adv,
        perturbation=perturbation,
        iterations_used=g,
        success=success,
        wer_htest=wer(target, decoded),
        snrseg_db=snrseg(x, x_adv, post_rir=h_test).db,
        clipped=x_adv.clipped,
        loss_trace=loss_trace,
        decoded=decoded,
        target=target,
        seed=cfg.seed,
        snapshots=snapshots,
    )


def threshold_exceedance(
    x: AudioSignal,
    perturbation: AudioSignal,
    model: AcousticModel,
    margin_db: float = 0.0,
) -> tuple[float, float]:
    """Post-hoc spectral audit of a finished attack: fraction of bins where
    the perturbation exceeds threshold + margin, and the worst excess in dB."""
    fc = model.feature_config
    thresholds = compute_thresholds(x, fc, margin_db=margin_db)
    delta_db = perturbation_spectrum_db(perturbation.samples, fc, x.sample_rate)
    excess = delta_db - (thresholds.values + margin_db)
    over = excess > 0.0
    fraction = float(np.mean(over))
    worst = float(np.max(excess[over])) if np.any(over) else 0.0
    return fraction, worst


def save_attack_result(result: AttackResult, out_prefix, cfg: AttackConfig) -> dict:
    """Persist an attack: adversarial WAV, perturbation WAV, JSON sidecar.

    Clipped audio cannot be written as PCM without falsifying it, so WAVs are
    skipped (and flagged in the sidecar) when their payload exceeds full scale.
    """
    from pathlib import Path

    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "schema_version": 1,
        "mode": cfg.mode,
        "seed": result.seed,
        "target": list(result.target),
        "decoded": list(result.decoded),
        "iterations_used": result.iterations_used,
        "max_iterations": cfg.max_iterations,
        "steps_per_rir": cfg.steps_per_rir,
        "rir_taps": cfg.rir_taps,
        "step_size": cfg.step_size,
        "use_thresholds": cfg.use_thresholds,
        "margin_db": cfg.margin_db,
        "success": result.success,
        "wer_htest_pct": result.wer_htest,
        "snrseg_db": result.snrseg_db,
        "clipped": result.clipped,
        "adversarial_wav": None,
        "perturbation_wav": None,
        "loss_trace": [round(v, 6) for v in result.loss_trace],
    }
    adv_path = prefix.with_suffix(".adv.wav")
    delta_path = prefix.with_suffix(".delta.wav")
    try:
        write_wav(result.adversarial, adv_path)
        sidecar["adversarial_wav"] = adv_path.name
    except ClippingError as exc:
        sidecar["adversarial_wav_skipped"] = f"clipped: {exc.count} samples"
    try:
        write_wav(result.perturbation, delta_path)
        sidecar["perturbation_wav"] = delta_path.name
    except ClippingError as exc:
        sidecar["perturbation_wav_skipped"] = f"out of range: {exc.count} samples"
    json_path = prefix.with_suffix(".json")
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return sidecar
