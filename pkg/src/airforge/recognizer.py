"""A toy hybrid DNN-HMM recognizer: synthetic corpus, acoustic network,
frame posteriors with exact input gradients, Viterbi decoding, and forced
alignment.

Scale stands in for a production system: each word is a left-to-right chain
of single-state phones, phones are rendered as tone complexes, and the
acoustic model is a small feedforward network over context-stacked
log-spectral features with per-utterance mean normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .signal_core import AudioSignal, FeatureConfig, FeatureMatrix, extract_features

SILENCE = "sil"

# Tone components (Hz) defining each synthetic phone.
PHONE_TONES = {
    "aa": (250.0, 850.0),
    "ee": (350.0, 2100.0),
    "ii": (420.0, 2700.0, 3200.0),
    "oo": (480.0, 950.0),
    "uu": (300.0, 700.0, 1150.0),
    "bb": (180.0, 1350.0),
    "dd": (650.0, 1900.0),
    "gg": (780.0, 1550.0, 2300.0),
    "ss": (2500.0, 3300.0),
    "rr": (1100.0, 1700.0),
}

DEFAULT_WORDS = {
    "up": ("aa",),
    "down": ("dd", "oo"),
    "left": ("ee", "ss"),
    "right": ("rr", "ii"),
    "go": ("gg", "oo"),
    "stop": ("ss", "aa", "bb"),
    "yes": ("ii", "ee"),
    "no": ("bb", "oo"),
    "open": ("oo", "aa", "dd"),
    "close": ("gg", "ee", "ss"),
    "on": ("aa", "bb"),
    "off": ("uu", "ss"),
}


class RecognizerError(Exception):
    pass


class TrainingError(RecognizerError):
    pass


class DecodeError(RecognizerError):
    pass


class InfeasibleTargetError(RecognizerError):
    """Target transcription needs more frames than the audio provides."""

    def __init__(self, message, required_frames=None, available_frames=None):
        super().__init__(message)
        self.required_frames = required_frames
        self.available_frames = available_frames


@dataclass(frozen=True)
class Lexicon:
    """Word-to-phone mapping over a dense phone inventory plus silence.

    State ids are phone indices; the silence unit is the last state.
    """

    words: dict[str, tuple[str, ...]]
    phones: tuple[str, ...]

    def __post_init__(self):
        if not self.words:
            raise ValueError("lexicon needs at least one word")
        index = {ph: i for i, ph in enumerate(self.phones)}
        if SILENCE in index:
            raise ValueError("silence is implicit; do not list it as a phone")
        for word, seq in self.words.items():
            if len(seq) < 1:
                raise ValueError(f"word {word!r} maps to no phones")
            for ph in seq:
                if ph not in index:
                    raise ValueError(f"word {word!r} uses unknown phone {ph!r}")
        object.__setattr__(self, "words", dict(self.words))
        object.__setattr__(self, "phones", tuple(self.phones))

    @property
    def n_states(self) -> int:
        return len(self.phones) + 1  # + silence

    @property
    def silence_state(self) -> int:
        return len(self.phones)

    def phone_index(self, phone: str) -> int:
        return self.silence_state if phone == SILENCE else self.phones.index(phone)

    def word_states(self, word: str) -> tuple[int, ...]:
        return tuple(self.phones.index(ph) for ph in self.words[word])


def default_lexicon() -> Lexicon:
    return Lexicon(words=DEFAULT_WORDS, phones=tuple(sorted(PHONE_TONES)))


def save_lexicon(lexicon: Lexicon, path) -> None:
    with open(path, "w") as fh:
        for word, seq in lexicon.words.items():
            fh.write(f"{word}\t{' '.join(seq)}\n")


def load_lexicon(path, phones: tuple[str, ...] | None = None) -> Lexicon:
    words = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            word, _, rest = line.partition("\t")
            words[word] = tuple(rest.split())
    if phones is None:
        phones = tuple(sorted({ph for seq in words.values() for ph in seq}))
    return Lexicon(words=words, phones=phones)


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    signal: AudioSignal
    words: tuple[str, ...]
    # Ground-truth (phone, start_sample, end_sample) spans from synthesis;
    # None for corpora loaded from disk. Never used by training.
    phone_spans: tuple[tuple[str, int, int], ...] | None = None


def _tukey_ramps(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        up = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = up
        env[n - ramp :] = up[::-1]
    return env


def synth_corpus(
    lexicon: Lexicon,
    n_utterances: int,
    snr_db: float,
    rng: np.random.Generator,
    sample_rate: int = 16000,
    words_per_utterance: tuple[int, int] = (2, 5),
) -> list[Utterance]:
    """Generate utterances of random word sequences.

    Each phone is a 2-3 component tone complex with +-3% frequency jitter,
    100-250 ms long under a raised-cosine-ramped envelope; words (and the
    utterance edges) are separated by 30-80 ms of silence; white noise is
    added at ``snr_db`` (np.inf for none). Deterministic for a fixed rng.
    """
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    word_list = sorted(lexicon.words)
    corpus = []
    for _ in range(n_utterances):
        n_words = int(rng.integers(words_per_utterance[0], words_per_utterance[1] + 1))
        words = tuple(str(rng.choice(word_list)) for _ in range(n_words))
        pieces = []
        spans = []
        cursor = 0

        def add_silence():
            nonlocal cursor
            n = int(rng.uniform(0.03, 0.08) * sample_rate)
            pieces.append(np.zeros(n))
            spans.append((SILENCE, cursor, cursor + n))
            cursor += n

        add_silence()
        for w, word in enumerate(words):
            if w > 0:
                add_silence()
            for phone in lexicon.words[word]:
                dur = int(rng.uniform(0.100, 0.250) * sample_rate)
                t = np.arange(dur) / sample_rate
                tones = PHONE_TONES[phone]
                wave = np.zeros(dur)
                for f in tones:
                    f_jit = f * (1.0 + rng.uniform(-0.03, 0.03))
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    wave += np.sin(2.0 * np.pi * f_jit * t + phase)
                wave *= 0.35 / len(tones)
                wave *= _tukey_ramps(dur, int(0.020 * sample_rate))
                pieces.append(wave)
                spans.append((phone, cursor, cursor + dur))
                cursor += dur
        add_silence()

        samples = np.concatenate(pieces)
        if np.isfinite(snr_db):
            power = np.mean(samples**2)
            noise_std = np.sqrt(power / 10.0 ** (snr_db / 10.0))
            samples = samples + rng.normal(0.0, noise_std, samples.size)
        corpus.append(
            Utterance(
                signal=AudioSignal(samples, sample_rate),
                words=words,
                phone_spans=tuple(spans),
            )
        )
    return corpus


def save_corpus(corpus, out_dir) -> None:
    """Write WAVs plus a ``transcript.txt`` of "utt_id<TAB>WORD WORD..." lines."""
    from pathlib import Path

    from .signal_core import write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "transcript.txt", "w") as fh:
        for i, utt in enumerate(corpus):
            utt_id = f"utt_{i:04d}"
            write_wav(utt.signal, out / f"{utt_id}.wav")
            fh.write(f"{utt_id}\t{' '.join(utt.words)}\n")


def load_corpus(in_dir) -> list[Utterance]:
    from pathlib import Path

    from .signal_core import load_wav

    root = Path(in_dir)
    transcript = root / "transcript.txt"
    if not transcript.exists():
        raise FileNotFoundError(f"no transcript.txt under {root}")
    corpus = []
    with open(transcript) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            utt_id, _, words = line.partition("\t")
            corpus.append(
                Utterance(
                    signal=load_wav(root / f"{utt_id}.wav"),
                    words=tuple(words.split()),
                )
            )
    return corpus


# --------------------------------------------------------------------------
# Acoustic model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    hidden_sizes: tuple[int, ...] = (256, 256)
    context: int = 4  # frames of context each side
    epochs_flat: int = 6
    epochs_realign: int = 12
    batch_size: int = 256
    learning_rate: float = 0.08
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)


@dataclass(frozen=True)
class PosteriorMatrix:
    """Row-stochastic (T, n_states) matrix of state probabilities."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("posteriors must be 2-D")
        if np.any(values < 0):
            raise ValueError("posteriors must be non-negative")
        if not np.allclose(values.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("posterior rows must sum to 1")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_states(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AlignmentTargets:
    """Per-frame target state ids for a transcription, from forced alignment."""

    states: np.ndarray
    transcription: tuple[str, ...]

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        if states.ndim != 1 or states.size < 1:
            raise ValueError("states must be a non-empty 1-D sequence")
        states = states.copy()
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    @property
    def n_frames(self) -> int:
        return self.states.size

    def one_hot(self, n_states: int) -> np.ndarray:
        out = np.zeros((self.states.size, n_states))
        out[np.arange(self.states.size), self.states] = 1.0
        return out


@dataclass
class AcousticModel:
    """Feedforward net over context-stacked, mean-normalized features."""

    weights: list[np.ndarray]  # alternating W (in, out) and b (out,)
    mu: np.ndarray  # per-bin standardization after per-utterance gain norm
    sigma: np.ndarray
    context: int
    n_states: int
    feature_config: FeatureConfig
    epochs_trained: int = 0
    final_loss: float = float("nan")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _normalize_features(values: np.ndarray, mu, sigma) -> np.ndarray:
    # Scalar per-utterance gain normalization: log features shift by a
    # constant under playback gain, so subtracting the global mean makes the
    # model level-invariant without nulling utterance-frequent phones the way
    # per-bin mean subtraction would.
    gained = values - values.mean()
    return (gained - mu) / sigma


def _context_indices(n_frames: int, context: int) -> np.ndarray:
    offsets = np.arange(-context, context + 1)
    return np.clip(np.arange(n_frames)[:, None] + offsets[None, :], 0, n_frames - 1)


def _stack(values: np.ndarray, context: int) -> np.ndarray:
    idx = _context_indices(values.shape[0], context)
    return values[idx].reshape(values.shape[0], -1)


def _net_forward(model: AcousticModel, x: np.ndarray):
    """Returns (probs, cache) where cache holds pre-activations for backprop."""
    acts = [x]
    pre = []
    h = x
    n_layers = len(model.weights) // 2
    for i in range(n_layers):
        w, b = model.weights[2 * i], model.weights[2 * i + 1]
        z = h @ w + b
        pre.append(z)
        h = _softplus(z) if i < n_layers - 1 else z
        acts.append(h)
    probs = _softmax(acts[-1])
    return probs, (acts, pre)


def _net_backward_to_input(model: AcousticModel, cache, dlogits: np.ndarray):
    acts, pre = cache
    n_layers = len(model.weights) // 2
    grad = dlogits
    for i in reversed(range(n_layers)):
        w = model.weights[2 * i]
        grad = grad @ w.T
        if i > 0:
            grad = grad * _sigmoid(pre[i - 1])
    return grad


def _model_posteriors(model: AcousticModel, feature_values: np.ndarray):
    normalized = _normalize_features(feature_values, model.mu, model.sigma)
    stacked = _stack(normalized, model.context)
    probs, cache = _net_forward(model, stacked)
    return probs, cache


def forward(model: AcousticModel, features: FeatureMatrix) -> PosteriorMatrix:
    """Frame posteriors over HMM states for a feature matrix."""
    expected = features.values.shape[1] * (2 * model.context + 1)
    if expected != model.input_dim:
        raise ValueError(
            f"feature dim {features.values.shape[1]} incompatible with model input "
            f"{model.input_dim} at context {model.context}"
        )
    probs, _ = _model_posteriors(model, features.values)
    return PosteriorMatrix(probs)


def loss_and_input_grad(
    model: AcousticModel, features: FeatureMatrix, targets: AlignmentTargets
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over frames and its exact gradient w.r.t. the
    (T, B) feature matrix (not the weights)."""
    values = features.values
    t_frames, n_bins = values.shape
    if targets.n_frames != t_frames:
        raise ValueError(
            f"targets cover {targets.n_frames} frames, features have {t_frames}"
        )
    probs, cache = _model_posteriors(model, values)
    idx = np.arange(t_frames)
    picked = np.maximum(probs[idx, targets.states], 1e-300)
    loss = float(-np.mean(np.log(picked)))

    dlogits = probs.copy()
    dlogits[idx, targets.states] -= 1.0
    dlogits /= t_frames
    dstacked = _net_backward_to_input(model, cache, dlogits)

    # Undo context stacking: accumulate each offset block onto its frame.
    context = model.context
    dnorm = np.zeros((t_frames, n_bins))
    ctx_idx = _context_indices(t_frames, context)
    blocks = dstacked.reshape(t_frames, 2 * context + 1, n_bins)
    for k in range(2 * context + 1):
        np.add.at(dnorm, ctx_idx[:, k], blocks[:, k, :])
    # Undo standardization, then the scalar gain normalization.
    dgain = dnorm / model.sigma
    dvalues = dgain - dgain.mean()
    return loss, dvalues


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def _flat_start_chain(lexicon: Lexicon, words: tuple[str, ...]) -> list[int]:
    chain = [lexicon.silence_state]
    for w, word in enumerate(words):
        if w > 0:
            chain.append(lexicon.silence_state)
        chain.extend(lexicon.word_states(word))
    chain.append(lexicon.silence_state)
    return chain


def _equal_split_targets(n_frames: int, chain: list[int]) -> np.ndarray:
    if n_frames < len(chain):
        raise TrainingError(
            f"utterance has {n_frames} frames but its flat-start chain needs "
            f"{len(chain)}"
        )
    bounds = np.round(np.linspace(0, n_frames, len(chain) + 1)).astype(int)
    targets = np.empty(n_frames, dtype=np.int64)
    for i, state in enumerate(chain):
        targets[bounds[i] : bounds[i + 1]] = state
    return targets


def _flat_start_targets(
    feature_values: np.ndarray, lexicon: Lexicon, words: tuple[str, ...]
) -> np.ndarray:
    """Flat-start frame targets: low-energy frames are silence, the remaining
    frames are split equally across the transcription's phone chain in order.

    Falls back to a plain equal split (silences included in the chain) when
    the energy histogram gives no usable speech/silence separation.
    """
    phones = [s for word in words for s in lexicon.word_states(word)]
    n_frames = feature_values.shape[0]
    # values are log magnitudes; 2*logsumexp approximates frame log energy
    peak = feature_values.max(axis=1)
    energy = 2.0 * (peak + np.log(np.sum(np.exp(feature_values - peak[:, None]), axis=1)))
    thr = 0.5 * (np.percentile(energy, 10) + np.percentile(energy, 90))
    speech = np.nonzero(energy > thr)[0]
    if speech.size < max(len(phones), 1):
        return _equal_split_targets(n_frames, _flat_start_chain(lexicon, words))
    targets = np.full(n_frames, lexicon.silence_state, dtype=np.int64)
    bounds = np.round(np.linspace(0, speech.size, len(phones) + 1)).astype(int)
    for i, state in enumerate(phones):
        targets[speech[bounds[i] : bounds[i + 1]]] = state
    return targets


def _init_weights(dims: list[int], rng: np.random.Generator) -> list[np.ndarray]:
    weights = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)))
        weights.append(np.zeros(d_out))
    return weights


def _sgd_epochs(
    model: AcousticModel,
    feats_all: np.ndarray,
    ctx_idx_all: np.ndarray,
    targets_all: np.ndarray,
    epochs: int,
    config: ModelConfig,
    rng: np.random.Generator,
) -> float:
    n = targets_all.size
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = feats_all[ctx_idx_all[batch]].reshape(batch.size, -1)
            y = targets_all[batch]
            probs, (acts, pre) = _net_forward(model, x)
            picked = np.maximum(probs[np.arange(batch.size), y], 1e-300)
            losses.append(-np.mean(np.log(picked)))

            grad = probs
            grad[np.arange(batch.size), y] -= 1.0
            grad /= batch.size
            n_layers = len(model.weights) // 2
            for i in reversed(range(n_layers)):
                w = model.weights[2 * i]
                gw = acts[i].T @ grad
                gb = grad.sum(axis=0)
                if i > 0:
                    grad = (grad @ w.T) * _sigmoid(pre[i - 1])
                model.weights[2 * i] = w - config.learning_rate * gw
                model.weights[2 * i + 1] = (
                    model.weights[2 * i + 1] - config.learning_rate * gb
                )
        last = float(np.mean(losses))
        if not np.isfinite(last):
            raise TrainingError(
                f"training diverged (loss={last}); lower the learning rate"
            )
    return last


def _prepare_corpus_features(corpus, config: ModelConfig):
    """Gain-normalized features concatenated, with absolute context
    indices that never cross utterance boundaries."""
    feats = []
    ctx_rows = []
    offset = 0
    for utt in corpus:
        values = extract_features(utt.signal, config.feature_config).values
        values = values - values.mean()
        feats.append(values)
        ctx_rows.append(_context_indices(values.shape[0], config.context) + offset)
        offset += values.shape[0]
    return np.concatenate(feats, axis=0), np.vstack(ctx_rows)


def train(
    corpus,
    lexicon: Lexicon,
    config: ModelConfig = ModelConfig(),
    rng: np.random.Generator | None = None,
) -> AcousticModel:
    """Train the acoustic network: flat-start equal-split targets, then one
    realignment pass with the intermediate model. Deterministic per rng."""
    if not corpus:
        raise ValueError("corpus is empty")
    if rng is None:
        rng = np.random.default_rng(0)

    feats_all, ctx_idx_all = _prepare_corpus_features(corpus, config)
    mu = feats_all.mean(axis=0)
    sigma = np.maximum(feats_all.std(axis=0), 1e-3)
    feats_all = (feats_all - mu) / sigma

    n_bins = feats_all.shape[1]
    dims = [n_bins * (2 * config.context + 1), *config.hidden_sizes, lexicon.n_states]
    model = AcousticModel(
        weights=_init_weights(dims, rng),
        mu=mu,
        sigma=sigma,
        context=config.context,
        n_states=lexicon.n_states,
        feature_config=config.feature_config,
    )

    frame_counts = []
    flat_targets = []
    offset = 0
    for utt in corpus:
        n_frames = config.feature_config.n_frames(
            len(utt.signal), utt.signal.sample_rate
        )
        frame_counts.append(n_frames)
        gained = feats_all[offset : offset + n_frames] * sigma + mu
        flat_targets.append(_flat_start_targets(gained, lexicon, utt.words))
        offset += n_frames
    targets_all = np.concatenate(flat_targets)

    _sgd_epochs(model, feats_all, ctx_idx_all, targets_all, config.epochs_flat, config, rng)

    # One realignment pass: re-derive frame targets with the bootstrap model.
    realigned = []
    for utt, n_frames in zip(corpus, frame_counts):
        feats = extract_features(utt.signal, config.feature_config)
        try:
            aligned = force_align(model, feats, utt.words, lexicon)
            realigned.append(aligned.states)
        except InfeasibleTargetError:
            realigned.append(
                _equal_split_targets(n_frames, _flat_start_chain(lexicon, utt.words))
            )
    targets_all = np.concatenate(realigned)
    final = _sgd_epochs(
        model, feats_all, ctx_idx_all, targets_all, config.epochs_realign, config, rng
    )

    model.epochs_trained = config.epochs_flat + config.epochs_realign
    model.final_loss = final
    return model


def frame_accuracy(model: AcousticModel, corpus, lexicon: Lexicon) -> float:
    """Fraction of frames whose argmax state matches the synthesis ground
    truth (frame labeled by the phone covering its center sample)."""
    hits = 0
    total = 0
    for utt in corpus:
        if utt.phone_spans is None:
            raise ValueError("corpus has no ground-truth spans")
        feats = extract_features(utt.signal, model.feature_config)
        post = forward(model, feats)
        pred = np.argmax(post.values, axis=1)
        fc = model.feature_config
        frame = fc.frame_len(utt.signal.sample_rate)
        hop = fc.hop(utt.signal.sample_rate)
        centers = np.arange(post.n_frames) * hop + frame // 2
        labels = np.full(post.n_frames, -1, dtype=np.int64)
        for phone, start, end in utt.phone_spans:
            sel = (centers >= start) & (centers < end)
            labels[sel] = lexicon.phone_index(phone)
        valid = labels >= 0
        hits += int(np.sum(pred[valid] == labels[valid]))
        total += int(np.sum(valid))
    return hits / max(total, 1)


# --------------------------------------------------------------------------
# Decoding graphs and Viterbi
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    word_insertion_penalty: float = 2.0  # nats, charged on word entry
    self_loop_prob: float = 0.7
    posterior_floor: float = 1e-10
    allow_silence: bool = True


LOG_ZERO = -1e30


def _viterbi(log_emissions, trans, start, final_mask):
    """Dense max-product DP. Returns the best node path (length T)."""
    t_frames, n_nodes = log_emissions.shape
    delta = start + log_emissions[0]
    back = np.zeros((t_frames, n_nodes), dtype=np.int32)
    for t in range(1, t_frames):
        scores = delta[:, None] + trans
        back[t] = np.argmax(scores, axis=0)
        delta = scores[back[t], np.arange(n_nodes)] + log_emissions[t]
    delta = np.where(final_mask, delta, LOG_ZERO)
    best_end = int(np.argmax(delta))
    if delta[best_end] <= LOG_ZERO:
        raise DecodeError("no path reaches a final state")
    path = np.empty(t_frames, dtype=np.int32)
    path[-1] = best_end
    for t in range(t_frames - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def _log_posteriors(posteriors: PosteriorMatrix, floor: float) -> np.ndarray:
    if np.all(posteriors.values <= floor):
        raise DecodeError("all posteriors at or below the floor; lattice is empty")
    return np.log(np.maximum(posteriors.values, floor))


def build_decode_graph(lexicon: Lexicon, config: DecodeConfig):
    """Word-loop graph: each word is its phone chain with self-loops; any
    word end connects to any word start (insertion penalty applied), with an
    optional silence node usable between words and at the edges.

    Returns (node_states, trans, start, final_mask, word_entry) where
    word_entry[j] is the word emitted when the path enters node j from
    outside that word.
    """
    node_states = []
    word_entry = []
    word_first = []
    word_last = []
    for word in sorted(lexicon.words):
        states = lexicon.word_states(word)
        word_first.append(len(node_states))
        for k, state in enumerate(states):
            node_states.append(state)
            word_entry.append(word if k == 0 else None)
        word_last.append(len(node_states) - 1)
    sil = None
    if config.allow_silence:
        sil = len(node_states)
        node_states.append(lexicon.silence_state)
        word_entry.append(None)

    n = len(node_states)
    trans = np.full((n, n), LOG_ZERO)
    log_loop = np.log(config.self_loop_prob)
    log_next = np.log(1.0 - config.self_loop_prob)
    wip = config.word_insertion_penalty

    firsts = np.array(word_first)
    for first, last in zip(word_first, word_last):
        for j in range(first, last):
            trans[j, j] = log_loop
            trans[j, j + 1] = log_next
        trans[last, last] = log_loop
        trans[last, firsts] = np.maximum(trans[last, firsts], log_next - wip)
        if sil is not None:
            trans[last, sil] = log_next
    if sil is not None:
        trans[sil, sil] = log_loop
        trans[sil, firsts] = log_next - wip

    start = np.full(n, LOG_ZERO)
    start[firsts] = -wip
    final_mask = np.zeros(n, dtype=bool)
    final_mask[word_last] = True
    if sil is not None:
        start[sil] = 0.0
        final_mask[sil] = True
    return node_states, trans, start, final_mask, word_entry


def decode_posteriors(
    posteriors: PosteriorMatrix, lexicon: Lexicon, config: DecodeConfig = DecodeConfig()
) -> tuple[str, ...]:
    """Max-probability word sequence for a posterior matrix."""
    node_states, trans, start, final_mask, word_entry = build_decode_graph(
        lexicon, config
    )
    log_post = _log_posteriors(posteriors, config.posterior_floor)
    emissions = log_post[:, node_states]
    path = _viterbi(emissions, trans, start, final_mask)
    words = []
    prev = None
    for node in path:
        if node != prev and word_entry[node] is not None:
            words.append(word_entry[node])
        prev = node
    return tuple(words)


def decode(
    model: AcousticModel,
    features: FeatureMatrix,
    lexicon: Lexicon,
    config: DecodeConfig = DecodeConfig(),
) -> tuple[str, ...]:
    return decode_posteriors(forward(model, features), lexicon, config)


def _alignment_graph(lexicon: Lexicon, words: tuple[str, ...], config: DecodeConfig):
    """Linear graph for a fixed transcription: optional edge silences,
    mandatory silence between words (keeps repeated words separable),
    left-to-right with self-loops."""
    nodes = []  # (state, optional)
    nodes.append((lexicon.silence_state, True))
    for w, word in enumerate(words):
        if w > 0:
            nodes.append((lexicon.silence_state, False))
        for state in lexicon.word_states(word):
            nodes.append((state, False))
    nodes.append((lexicon.silence_state, True))

    n = len(nodes)
    trans = np.full((n, n), LOG_ZERO)
    log_loop = np.log(config.self_loop_prob)
    log_next = np.log(1.0 - config.self_loop_prob)
    for j in range(n):
        trans[j, j] = log_loop
        k = j + 1
        while k < n:
            trans[j, k] = log_next
            if not nodes[k][1]:
                break
            k += 1
    start = np.full(n, LOG_ZERO)
    start[0] = 0.0
    if nodes[0][1] and n > 1:
        start[1] = 0.0
    final_mask = np.zeros(n, dtype=bool)
    final_mask[-1] = True
    if nodes[-1][1] and n > 1:
        final_mask[-2] = True
    return nodes, trans, start, final_mask


def align_posteriors(
    posteriors: PosteriorMatrix,
    words: tuple[str, ...],
    lexicon: Lexicon,
    config: DecodeConfig = DecodeConfig(),
) -> AlignmentTargets:
    for word in words:
        if word not in lexicon.words:
            raise ValueError(f"target word {word!r} not in lexicon")
    nodes, trans, start, final_mask = _alignment_graph(lexicon, words, config)
    mandatory = sum(1 for _, optional in nodes if not optional)
    if mandatory > posteriors.n_frames:
        raise InfeasibleTargetError(
            f"target needs {mandatory} frames, audio provides {posteriors.n_frames}",
            required_frames=mandatory,
            available_frames=posteriors.n_frames,
        )
    log_post = _log_posteriors(posteriors, config.posterior_floor)
    emissions = log_post[:, [state for state, _ in nodes]]
    path = _viterbi(emissions, trans, start, final_mask)
    states = np.array([nodes[j][0] for j in path], dtype=np.int64)
    return AlignmentTargets(states=states, transcription=tuple(words))


def force_align(
    model: AcousticModel,
    features: FeatureMatrix,
    words,
    lexicon: Lexicon,
    config: DecodeConfig = DecodeConfig(),
) -> AlignmentTargets:
    """Viterbi restricted to the target transcription's state graph."""
    return align_posteriors(forward(model, features), tuple(words), lexicon, config)


# --------------------------------------------------------------------------
# Model serialization
# --------------------------------------------------------------------------

_MODEL_MAGIC = b"AFAM"
_MODEL_VERSION = 1


def save_model(model: AcousticModel, path) -> None:
    """Single binary file: magic, version, scalar header, then row-major
    float64 payloads for mu, sigma, and each weight array."""
    fc = model.feature_config
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIddIdId",
                _MODEL_VERSION,
                model.context,
                model.n_states,
                len(model.weights),
                fc.frame_ms,
                fc.hop_ms,
                fc.dft_size,
                fc.log_floor,
                model.epochs_trained,
                model.final_loss,
            )
        )
        for arr in (model.mu, model.sigma, *model.weights):
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_model(path) -> AcousticModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise ValueError(f"{path} is not an acoustic model file")
        header = struct.unpack("<IIIIddIdId", fh.read(struct.calcsize("<IIIIddIdId")))
        (version, context, n_states, n_weights, frame_ms, hop_ms, dft_size,
         log_floor, epochs, final_loss) = header
        if version != _MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")

        def read_array():
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            return np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()

        mu = read_array()
        sigma = read_array()
        weights = [read_array() for _ in range(n_weights)]
    return AcousticModel(
        weights=weights,
        mu=mu,
        sigma=sigma,
        context=context,
        n_states=n_states,
        feature_config=FeatureConfig(
            frame_ms=frame_ms, hop_ms=hop_ms, dft_size=dft_size, log_floor=log_floor
        ),
        epochs_trained=epochs,
        final_loss=final_loss,
    )
