"""Metrics (word error rate, segmental SNR), simulated room playback, and
experiment grids that evaluate attack robustness across room conditions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .recognizer import DecodeConfig, decode
from .room_sim import (
    DEFAULT_PLACEMENT_MARGIN,
    Rir,
    RoomParams,
    generate_rir,
    preset,
    sample_room,
)
from .signal_core import AudioSignal, convolve, extract_features

SNRSEG_SEGMENT = 256  # samples (16 ms at 16 kHz)
SNRSEG_FLOOR_DB = -10.0
SNRSEG_CAP_DB = 35.0

REPORT_SCHEMA_VERSION = 1
TRIAL_COLUMNS = [
    "trial_id",
    "preset",
    "m",
    "thresholds",
    "t60",
    "distance",
    "content",
    "seed",
    "iterations",
    "success",
    "wer_pct",
    "snrseg_db",
    "clipped",
    "excluded",
]


def wer(reference, hypothesis) -> float:
    """Word error rate in percent: 100 * Levenshtein(ref, hyp) / len(ref).

    Uniform-cost dynamic programming over words; can exceed 100% when the
    hypothesis inserts more words than the reference holds.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("reference transcription is empty")
    prev = np.arange(len(hyp) + 1)
    for i, r in enumerate(ref, start=1):
        curr = np.empty(len(hyp) + 1, dtype=np.int64)
        curr[0] = i
        for j, h in enumerate(hyp, start=1):
            curr[j] = min(
                prev[j] + 1,  # deletion
                curr[j - 1] + 1,  # insertion
                prev[j - 1] + (r != h),  # substitution / match
            )
        prev = curr
    return 100.0 * float(prev[-1]) / len(ref)


class SnrsegResult(NamedTuple):
    db: float
    no_noise: bool
    segments_used: int


def snrseg(x: AudioSignal, x_adv: AudioSignal, post_rir: Rir | None = None) -> SnrsegResult:
    """Segmental SNR of the perturbation x_adv - x, in dB.

    Non-overlapping 256-sample segments; per-segment ratios are clamped to
    [-10, 35] dB; segments with zero noise energy are excluded. When ``post_rir``
    is given, both signals are convolved with it first (the distortion as
    heard through the room). If every segment is noise-free the result is the
    +35 dB cap with ``no_noise`` set.
    """
    if len(x) != len(x_adv):
        raise ValueError(f"length mismatch: {len(x)} vs {len(x_adv)}")
    a = x.samples
    b = x_adv.samples
    if post_rir is not None:
        a = convolve(x, post_rir).samples
        b = convolve(x_adv, post_rir).samples
    sigma = b - a
    n_seg = len(a) // SNRSEG_SEGMENT
    used = 0
    total = 0.0
    for k in range(n_seg):
        lo = k * SNRSEG_SEGMENT
        hi = lo + SNRSEG_SEGMENT
        noise = float(np.sum(sigma[lo:hi] ** 2))
        if noise == 0.0:
            continue
        sig = float(np.sum(a[lo:hi] ** 2))
        if sig == 0.0:
            ratio_db = SNRSEG_FLOOR_DB
        else:
            ratio_db = float(np.clip(10.0 * np.log10(sig / noise),
                                     SNRSEG_FLOOR_DB, SNRSEG_CAP_DB))
        total += ratio_db
        used += 1
    if used == 0:
        return SnrsegResult(db=SNRSEG_CAP_DB, no_noise=True, segments_used=0)
    return SnrsegResult(db=total / used, no_noise=False, segments_used=used)


@dataclass(frozen=True)
class PlaybackTrial:
    rir_index: int
    decoded: tuple[str, ...]
    wer_pct: float


def simulate_playback(
    x_adv: AudioSignal,
    rirs,
    model,
    lexicon,
    target_words,
    decode_config: DecodeConfig = DecodeConfig(),
) -> list[PlaybackTrial]:
    """Decode x_adv played through each room response; WER is vs the attack
    target transcription."""
    results = []
    for i, h in enumerate(rirs):
        received = convolve(x_adv, h) if h is not None else x_adv
        hyp = decode(
            model, extract_features(received, model.feature_config), lexicon,
            decode_config,
        )
        results.append(
            PlaybackTrial(rir_index=i, decoded=hyp, wer_pct=wer(target_words, hyp))
        )
    return results


# ---------------------------------------------------------------------------
# Experiment grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    """Cartesian experiment grid. Axes with several values multiply into
    cells; per cell ``trials`` attacks run against held-out evaluation rooms.

    Evaluation conditions: a ``t60`` axis fixes the reference 8 x 7 x 2.8 m
    room at that reverberation time with jittered positions; a ``distance``
    axis moves the receiver along a line away from the source at T60 = 0.42 s;
    otherwise evaluation rooms are drawn from the cell's preset distribution
    (or the generic prior for direct cells). ``eval_rirs == 0`` evaluates the
    direct feed instead (identity response).
    """

    presets: tuple[str, ...] = ("direct",)  # "direct", "generic", "adapted_1", "adapted_2"
    m_values: tuple[int, ...] = (512,)
    thresholds: tuple[bool, ...] = (False,)
    t60_values: tuple[float, ...] | None = None
    distances: tuple[float, ...] | None = None
    content: tuple[str, ...] = ("speech",)
    trials: int = 3
    eval_rirs: int = 20
    eval_m: int = 8192
    max_iterations: int = 400
    steps_per_rir: int = 10
    step_size: float = 0.05
    margin_db: float = 20.0
    target_words: int = 2
    seed: int = 0
    snapshot_every: int = 0


@dataclass(frozen=True)
class TrialRow:
    trial_id: str
    preset: str
    m: int
    thresholds: bool
    t60: float | None
    distance: float | None
    content: str
    seed: int
    iterations: int
    success: bool
    wer_pct: float
    snrseg_db: float
    clipped: bool
    excluded: bool


@dataclass
class ExperimentReport:
    rows: list[TrialRow] = field(default_factory=list)
    curves: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def aggregates(self) -> list[dict]:
        """Per-cell aggregates recomputed from the rows alone."""
        cells: dict[tuple, list[TrialRow]] = {}
        for row in self.rows:
            key = (row.preset, row.m, row.thresholds, row.t60, row.distance, row.content)
            cells.setdefault(key, []).append(row)
        out = []
        for key in sorted(cells, key=str):
            rows = cells[key]
            live = [r for r in rows if not r.excluded]
            wers = [r.wer_pct for r in live]
            snrs = [r.snrseg_db for r in live]
            out.append(
                {
                    "preset": key[0],
                    "m": key[1],
                    "thresholds": key[2],
                    "t60": key[3],
                    "distance": key[4],
                    "content": key[5],
                    "trial_count": len(rows),
                    "excluded_count": len(rows) - len(live),
                    "mean_wer_pct": float(np.mean(wers)) if wers else None,
                    "snrseg_mean_db": float(np.mean(snrs)) if snrs else None,
                    "snrseg_std_db": float(np.std(snrs)) if snrs else None,
                    "success_count": sum(1 for r in live if r.wer_pct == 0.0),
                }
            )
        return out

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "trials.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRIAL_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [
                        row.trial_id, row.preset, row.m, int(row.thresholds),
                        "" if row.t60 is None else row.t60,
                        "" if row.distance is None else row.distance,
                        row.content, row.seed, row.iterations, int(row.success),
                        f"{row.wer_pct:.4f}", f"{row.snrseg_db:.4f}",
                        int(row.clipped), int(row.excluded),
                    ]
                )
        with open(out / "aggregates.json", "w") as fh:
            json.dump(
                {"schema_version": REPORT_SCHEMA_VERSION, "cells": self.aggregates()},
                fh,
                indent=2,
            )
        for name, points in self.curves.items():
            with open(out / f"{name}.dat", "w") as fh:
                for xval, yval in points:
                    fh.write(f"{xval} {yval}\n")


def _eval_rirs_for_cell(grid: GridConfig, t60, distance, dist_preset, cell_index):
    """Held-out evaluation responses for one cell; seed stream is disjoint
    from the attack seeds."""
    rng = np.random.default_rng([grid.seed, 900_000 + cell_index])
    if grid.eval_rirs == 0:
        return [None]
    rirs = []
    for _ in range(grid.eval_rirs):
        if distance is not None:
            source = (7.0, 3.5, 1.3)
            jitter = rng.uniform(-0.1, 0.1, size=2)
            receiver = (7.0 - distance, 3.5 + jitter[0], 1.3 + jitter[1])
            params = RoomParams(b=(8.0, 7.0, 2.8), s=source, r=receiver, t60=0.42)
        elif t60 is not None:
            room = RoomParams(
                b=(8.0, 7.0, 2.8),
                s=tuple(rng.uniform(DEFAULT_PLACEMENT_MARGIN, e - DEFAULT_PLACEMENT_MARGIN) for e in (8.0, 7.0, 2.8)),
                r=tuple(rng.uniform(DEFAULT_PLACEMENT_MARGIN, e - DEFAULT_PLACEMENT_MARGIN) for e in (8.0, 7.0, 2.8)),
                t60=t60,
            )
            params = room
        else:
            params = sample_room(preset("h_theta_3"), rng)
        rirs.append(generate_rir(params, grid.eval_m, 16000))
    return rirs


def _target_for(utterance, lexicon, n_words, rng):
    """Random attack target avoiding the utterance's own words."""
    pool = [w for w in sorted(lexicon.words) if w not in utterance.words]
    if len(pool) < n_words:
        pool = sorted(lexicon.words)
    picks = rng.choice(len(pool), size=n_words, replace=False)
    return tuple(pool[i] for i in picks)


def run_experiment(grid: GridConfig, corpus, model, lexicon, out_dir=None) -> ExperimentReport:
    """Run every grid cell: per trial, forge an adversarial example and score
    it through the cell's held-out rooms. Clipped examples are excluded from
    aggregates but recorded."""
    from . import forge  # deferred: forge imports bench metrics

    report = ExperimentReport()
    axes = [
        grid.presets,
        grid.m_values,
        grid.thresholds,
        grid.t60_values or (None,),
        grid.distances or (None,),
        grid.content,
    ]
    cell_index = 0
    snapshot_rows: dict[int, list[float]] = {}
    for preset_name in axes[0]:
        for m in axes[1]:
            for thr in axes[2]:
                for t60 in axes[3]:
                    for dist in axes[4]:
                        for content in axes[5]:
                            cell_index += 1
                            eval_rirs = _eval_rirs_for_cell(
                                grid, t60, dist, preset_name, cell_index
                            )
                            for trial in range(grid.trials):
                                row = _run_trial(
                                    grid, corpus, model, lexicon, preset_name, m,
                                    thr, t60, dist, content, trial, cell_index,
                                    eval_rirs, snapshot_rows,
                                )
                                report.rows.append(row)
    if grid.distances:
        by_distance: dict[float, list[float]] = {}
        for row in report.rows:
            if row.distance is not None and not row.excluded:
                by_distance.setdefault(row.distance, []).append(row.wer_pct)
        report.curves["distance_wer"] = [
            (d, float(np.mean(v))) for d, v in sorted(by_distance.items())
        ]
    if grid.snapshot_every > 0 and snapshot_rows:
        report.curves["iteration_wer"] = [
            (g, float(np.mean(v))) for g, v in sorted(snapshot_rows.items())
        ]
    if out_dir is not None:
        report.save(out_dir)
    return report


def _run_trial(
    grid, corpus, model, lexicon, preset_name, m, thr, t60, dist, content,
    trial, cell_index, eval_rirs, snapshot_rows,
):
    from . import forge

    rng = np.random.default_rng([grid.seed, cell_index, trial])
    utt = corpus[int(rng.integers(0, len(corpus)))]
    x = _content_signal(utt, content, rng)
    target = _target_for(utt, lexicon, grid.target_words, rng)
    seed = int(rng.integers(0, 2**31 - 1))

    cfg = forge.AttackConfig(
        mode="direct" if preset_name == "direct" else
             ("generic" if preset_name == "generic" else "adapted"),
        distribution=_attack_distribution(preset_name),
        rir_taps=m,
        max_iterations=grid.max_iterations,
        steps_per_rir=grid.steps_per_rir,
        step_size=grid.step_size,
        use_thresholds=thr,
        margin_db=grid.margin_db,
        seed=seed,
        snapshot_every=grid.snapshot_every,
        h_test=_adapted_h_test(preset_name, m, seed),
    )
    trial_id = f"cell{cell_index:03d}_trial{trial:03d}"
    try:
        result = forge.attack(model, x, target, cfg, lexicon)
    except forge.AttackError:
        return TrialRow(
            trial_id=trial_id, preset=preset_name, m=m, thresholds=thr, t60=t60,
            distance=dist, content=content, seed=seed, iterations=0,
            success=False, wer_pct=float("nan"), snrseg_db=float("nan"),
            clipped=False, excluded=True,
        )

    playback = simulate_playback(result.adversarial, eval_rirs, model, lexicon, target)
    mean_wer = float(np.mean([p.wer_pct for p in playback]))
    snr = snrseg(x, result.adversarial).db
    excluded = result.clipped
    if grid.snapshot_every > 0:
        for g, snap in result.snapshots:
            snaps = simulate_playback(snap, eval_rirs, model, lexicon, target)
            snapshot_rows.setdefault(g, []).append(
                float(np.mean([p.wer_pct for p in snaps]))
            )
    return TrialRow(
        trial_id=trial_id, preset=preset_name, m=m, thresholds=thr, t60=t60,
        distance=dist, content=content, seed=seed, iterations=result.iterations_used,
        success=mean_wer == 0.0, wer_pct=mean_wer, snrseg_db=snr,
        clipped=result.clipped, excluded=excluded,
    )


def _attack_distribution(preset_name):
    if preset_name == "direct":
        return None
    if preset_name == "generic":
        return preset("h_theta_3")
    if preset_name == "adapted_1":
        return preset("h_theta_1")
    if preset_name == "adapted_2":
        return preset("h_theta_2")
    raise ValueError(f"unknown attack preset {preset_name!r}")


def _adapted_h_test(preset_name, m, seed):
    """Adapted attacks verify against a response of the reference room, the
    simulation stand-in for a measured RIR."""
    if preset_name in ("adapted_1", "adapted_2"):
        from .room_sim import REFERENCE_ROOM

        return generate_rir(REFERENCE_ROOM, m=8192, fs=16000)
    return None


def _content_signal(utt, content, rng):
    if content == "speech":
        return utt.signal
    n = len(utt.signal)
    fs = utt.signal.sample_rate
    t = np.arange(n) / fs
    if content == "chirp":
        sweep = 0.3 * np.sin(2 * np.pi * (300.0 + 1500.0 * t) * t)
        return AudioSignal(sweep, fs)
    if content == "noise":
        return AudioSignal(0.2 * rng.standard_normal(n), fs)
    raise ValueError(f"unknown content tag {content!r}")
