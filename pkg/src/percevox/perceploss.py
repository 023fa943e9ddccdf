"""Representation-matching losses behind a pluggable feature-extractor
interface.

A feature extractor maps an (N, mel_bands) log-mel input to one activation
sequence per tapped layer, time-aligned with the input.  The representation
loss averages squared activation differences over channels, frames, and
tapped layers.  Two built-in extractors are provided: a four-tap stack whose
regression head predicts a (1, 5) quality score (pretrained on synthetic
degradations, then frozen, and used for early stopping), and a single-tap
stack serving as a phoneme-representation stand-in (its randomly initialized
features still define a valid activation-matching metric).  Externally
computed activations can be substituted through the stored-activation
adapter at the bottom of the module.
"""

import numpy as np

from . import diffcore as dc
from . import dsp, formant
from .container import load_container, save_container
from .errors import AdapterError, DataError
from .optim import Adam

_DEGRADE_MAX_SNR_DB = 24.0


def _as_input_tensor(x, mel_bands):
    if isinstance(x, dsp.MelSpectrogram):
        t = dc.Tensor(x.frames)
    elif isinstance(x, dc.Tensor):
        t = x
    else:
        t = dc.Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2 or t.shape[1] != mel_bands:
        raise DataError(
            f"extractor expects (frames, {mel_bands}) input, got {t.shape}"
        )
    if t.shape[0] < 1:
        raise DataError("extractor input must have at least one frame")
    return t


class _ConvStackExtractor:
    """Shared machinery: a stack of stride-1 kernel-3 convolutions (time
    preserving) with leaky-ReLU activations, a subset of layers tapped."""

    def __init__(self, mel_bands, channels, n_layers, tapped, seed, prefix):
        self.mel_bands = mel_bands
        self.channels = channels
        self.frozen = False
        rng = np.random.default_rng(seed)
        self._layers = []
        c_in = mel_bands
        for i in range(n_layers):
            lim = np.sqrt(6.0 / (3 * c_in + channels))
            w = dc.Parameter(rng.uniform(-lim, lim, (3, c_in, channels)), f"{prefix}.conv{i + 1}.w")
            b = dc.Parameter(np.zeros((1, channels)), f"{prefix}.conv{i + 1}.b")
            self._layers.append((w, b))
            c_in = channels
        self._tapped = tuple(tapped)
        self.tapped_layers = tuple(f"{prefix}.tap{i + 1}" for i in self._tapped)

    def activations(self, x):
        """One (N, channels) activation sequence per tapped layer."""
        h = _as_input_tensor(x, self.mel_bands)
        taps = []
        for i, (w, b) in enumerate(self._layers):
            h = dc.leaky_relu(dc.conv1d(h, w, stride=1, padding=1) + b)
            if i in self._tapped:
                taps.append(h)
        return taps

    def parameters(self):
        return [p for pair in self._layers for p in pair]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def parameter_arrays(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_parameter_arrays(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise DataError(f"missing parameter {p.name}")
            if arrays[p.name].shape != p.data.shape:
                raise DataError(
                    f"shape mismatch for {p.name}: "
                    f"{arrays[p.name].shape} vs {p.data.shape}"
                )
            p.data = np.array(arrays[p.name], dtype=np.float64)


class QualityProxyExtractor(_ConvStackExtractor):
    """Four tapped conv layers plus a scalar quality head in (1, 5).

    The head is a sigmoid squashed to the 1-5 scale over the time-pooled
    final activation.  Scores are meaningful only after pretraining on the
    synthetic degradation scale (see :func:`pretrain_quality_proxy`);
    ``held_out_mse`` records the pretraining fit.
    """

    N_TAPS = 4

    def __init__(self, mel_bands=80, channels=16, seed=0):
        super().__init__(mel_bands, channels, 4, (0, 1, 2, 3), seed, "qp")
        rng = np.random.default_rng(seed + 1)
        lim = np.sqrt(6.0 / (channels + 1))
        self.head_w = dc.Parameter(rng.uniform(-lim, lim, (channels, 1)), "qp.head.w")
        self.head_b = dc.Parameter(np.zeros((1, 1)), "qp.head.b")
        self.held_out_mse = None

    def parameters(self):
        return super().parameters() + [self.head_w, self.head_b]

    def score(self, x):
        """Differentiable quality score, shape (1, 1), value in (1, 5)."""
        pooled = dc.mean(self.activations(x)[-1], axis=0)
        pooled = dc.reshape(pooled, (1, self.channels))
        return dc.sigmoid(pooled @ self.head_w + self.head_b) * 4.0 + 1.0

    def save(self, path):
        meta = {
            "kind": "quality-proxy",
            "mel_bands": self.mel_bands,
            "channels": self.channels,
            "frozen": self.frozen,
            "held_out_mse": self.held_out_mse,
        }
        save_container(path, self.parameter_arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path)
        if meta.get("kind") != "quality-proxy":
            raise DataError(f"not a quality-proxy container: {path}")
        ex = cls(mel_bands=meta["mel_bands"], channels=meta["channels"])
        ex.load_parameter_arrays(arrays)
        ex.held_out_mse = meta["held_out_mse"]
        if meta["frozen"]:
            ex.freeze()
        return ex


class PhonemeProxyExtractor(_ConvStackExtractor):
    """Two conv layers with a single tap on the last one."""

    N_TAPS = 1

    def __init__(self, mel_bands=80, channels=24, seed=0):
        super().__init__(mel_bands, channels, 2, (1,), seed, "pp")

    def save(self, path):
        meta = {
            "kind": "phoneme-proxy",
            "mel_bands": self.mel_bands,
            "channels": self.channels,
            "frozen": self.frozen,
        }
        save_container(path, self.parameter_arrays(), meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path)
        if meta.get("kind") != "phoneme-proxy":
            raise DataError(f"not a phoneme-proxy container: {path}")
        ex = cls(mel_bands=meta["mel_bands"], channels=meta["channels"])
        ex.load_parameter_arrays(arrays)
        if meta["frozen"]:
            ex.freeze()
        return ex


def representation_loss(extractor, x, x_dec):
    """Mean squared activation difference, averaged over channels, frames,
    and tapped layers.  The reference branch ``x`` is detached: gradient
    flows into ``x_dec`` (and nothing else when the extractor is frozen)."""
    x_const = dc.stop_gradient(x) if isinstance(x, dc.Tensor) else dc.Tensor(
        np.asarray(x.frames if isinstance(x, dsp.MelSpectrogram) else x, dtype=np.float64)
    )
    if not isinstance(x_dec, dc.Tensor):
        raise DataError("x_dec must be a Tensor")
    if x_const.shape != x_dec.shape:
        raise DataError(f"shape mismatch: {x_const.shape} vs {x_dec.shape}")
    ref_acts = extractor.activations(x_const)
    dec_acts = extractor.activations(x_dec)
    total = None
    for a, b in zip(ref_acts, dec_acts):
        layer = dc.mean(dc.square(a - b))
        total = layer if total is None else total + layer
    return total * (1.0 / len(ref_acts))


def quality_score(extractor, mel):
    """Scalar quality score in (1, 5); used for model selection only."""
    return float(extractor.score(mel).data[0, 0])


# --- synthetic degradations and quality-proxy pretraining ---------------------


def degrade_audio(audio, severity, rng):
    """Apply additive noise plus spectral smearing of the given severity.

    severity 0 returns the signal untouched; severity 1 is the heaviest
    setting (0 dB SNR noise, width-9 moving-average smearing).  Intermediate
    severities interpolate the SNR linearly on the dB scale and widen the
    smearing kernel in steps.
    """
    if not 0.0 <= severity <= 1.0:
        raise DataError(f"severity must be in [0, 1], got {severity}")
    x = audio.samples.copy()
    if severity == 0.0:
        return dsp.AudioBuffer(x, audio.sample_rate)
    width = 1 + 2 * int(round(4 * severity))
    if width > 1:
        x = np.convolve(x, np.ones(width) / width, mode="same")
    snr_db = _DEGRADE_MAX_SNR_DB * (1.0 - severity)
    signal_power = max(float(np.mean(x**2)), 1e-12)
    noise_power = signal_power / (10.0 ** (snr_db / 10.0))
    x = x + rng.standard_normal(len(x)) * np.sqrt(noise_power)
    return dsp.AudioBuffer(x, audio.sample_rate)


def _random_vowel(rng, duration):
    f1 = rng.uniform(250.0, 900.0)
    f2 = rng.uniform(f1 + 200.0, 2500.0)
    f3 = rng.uniform(f2 + 300.0, 3500.0)
    f0 = rng.uniform(80.0, 300.0)
    bws = rng.uniform(60.0, 180.0, size=3)
    return formant.synth_vowel(f0, (f1, f2, f3), bws, duration)


def build_degradation_set(n_items, seed, duration=0.5, spec_config=None):
    """Labeled (MelSpectrogram, target score) pairs over five degradation
    severities; the target score runs 5 (clean) down to 1 (heaviest)."""
    if n_items < 1:
        raise DataError(f"n_items must be >= 1, got {n_items}")
    rng = np.random.default_rng(seed)
    spec_config = spec_config or dsp.SpectrogramConfig()
    severities = (0.0, 0.25, 0.5, 0.75, 1.0)
    items = []
    for i in range(n_items):
        severity = severities[i % len(severities)]
        audio = degrade_audio(_random_vowel(rng, duration), severity, rng)
        mel = dsp.log_mel(audio, spec_config)
        items.append((mel, 5.0 - 4.0 * severity))
    return items


def pretrain_quality_proxy(seed=0, n_items=200, epochs=30, lr=3e-3,
                           batch_size=16, channels=16, holdout_fraction=0.1):
    """Train the quality head to regress the synthetic degradation score,
    then freeze the extractor.  Returns the frozen extractor with
    ``held_out_mse`` measured on the held-out items."""
    items = build_degradation_set(n_items, seed)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(items))
    n_held = max(1, int(round(len(items) * holdout_fraction)))
    held = [items[i] for i in order[:n_held]]
    train = [items[i] for i in order[n_held:]]
    if not train:
        raise DataError("degradation set too small to split")

    ex = QualityProxyExtractor(channels=channels, seed=seed)
    params = ex.parameters()
    opt = Adam(params, lr=lr)
    for _ in range(epochs):
        epoch_order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            batch = [train[i] for i in epoch_order[start:start + batch_size]]
            total = None
            for mel, target in batch:
                err = dc.sum_(dc.square(ex.score(mel) - target))
                total = err if total is None else total + err
            loss = total * (1.0 / len(batch))
            opt.zero_grad()
            loss.backward()
            opt.step()

    errors = [(quality_score(ex, mel) - target) ** 2 for mel, target in held]
    ex.held_out_mse = float(np.mean(errors))
    if not np.isfinite(ex.held_out_mse):
        raise dc.NonFiniteError("quality-proxy pretraining diverged")
    ex.freeze()
    return ex


# --- stored-activation adapter ------------------------------------------------


def save_activation_file(path, utterance_id, layer_names, matrices):
    """Persist externally computed activations: one (N, C) matrix per tapped
    layer for one utterance."""
    if len(layer_names) != len(matrices):
        raise DataError("one matrix per layer name required")
    arrays = {}
    n_frames = None
    for name, m in zip(layer_names, matrices):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2:
            raise DataError(f"activation {name} must be 2-D, got shape {m.shape}")
        if n_frames is None:
            n_frames = m.shape[0]
        elif m.shape[0] != n_frames:
            raise DataError("all layers must share the frame count")
        arrays[name] = m
    meta = {
        "kind": "activation-file",
        "utterance_id": utterance_id,
        "tapped_layers": list(layer_names),
    }
    save_container(path, arrays, meta)


class StoredActivations:
    """Feature-extractor stand-in serving one utterance's precomputed
    activations.  ``activations`` validates frame alignment against the
    query input but returns the stored constants, so this adapter carries
    no gradient: pair it with :func:`stored_representation_distance` or use
    it as the reference side of an experiment."""

    def __init__(self, path):
        arrays, meta = load_container(path)
        if meta.get("kind") != "activation-file":
            raise AdapterError(f"not an activation file: {path}")
        self.utterance_id = meta["utterance_id"]
        self.tapped_layers = tuple(meta["tapped_layers"])
        self._matrices = [arrays[name] for name in self.tapped_layers]
        self.frozen = True

    @property
    def n_frames(self):
        return self._matrices[0].shape[0]

    def matrices(self):
        return [m.copy() for m in self._matrices]

    def activations(self, x):
        frames = x.frames if isinstance(x, dsp.MelSpectrogram) else np.asarray(
            x.data if isinstance(x, dc.Tensor) else x
        )
        if frames.shape[0] != self.n_frames:
            raise AdapterError(
                f"stored activations cover {self.n_frames} frames, "
                f"input has {frames.shape[0]}"
            )
        return [dc.Tensor(m) for m in self._matrices]


def stored_representation_distance(a, b):
    """The representation-loss formula on two stored activation sets."""
    if a.tapped_layers != b.tapped_layers:
        raise AdapterError("activation files tap different layers")
    per_layer = []
    for ma, mb in zip(a.matrices(), b.matrices()):
        if ma.shape != mb.shape:
            raise AdapterError(f"activation shape mismatch: {ma.shape} vs {mb.shape}")
        per_layer.append(float(np.mean((ma - mb) ** 2)))
    return float(np.mean(per_layer))
