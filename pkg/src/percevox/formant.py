"""Formant machinery: analytic LPC tracking, a source-filter vowel
synthesizer, a differentiable formant regressor on log-mel frames, and the
formant-track loss.

The LPC path (preemphasis -> autocorrelation -> Levinson-Durbin -> roots)
is the analytic oracle; the regressor is the differentiable stand-in used
inside training losses. Frequencies are expressed as fractions of Nyquist
(Hz / 8000 at 16 kHz) everywhere a FormantTrack appears.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from . import diffcore as dc
from . import dsp
from .container import load_container, save_container
from .errors import DataError
from .optim import Adam

NYQUIST = dsp.CANONICAL_RATE / 2.0


class UnstableFrame(ValueError):
    """Levinson recursion hit a reflection coefficient of magnitude >= 1."""


@dataclass
class LpcConfig:
    order: int = 18
    preemphasis: float = 0.97
    frame_length: int = 1024
    frame_hop: int = 320
    max_bandwidth: float = 400.0
    min_freq: float = 90.0
    n_formants: int = 3

    def __post_init__(self):
        if self.order < 2 * self.n_formants:
            raise DataError(f"LPC order {self.order} < 2*{self.n_formants} cannot resolve the formants")
        if not 0 <= self.preemphasis < 1:
            raise DataError(f"preemphasis must be in [0, 1), got {self.preemphasis}")


@dataclass
class FormantTrack:
    values: np.ndarray  # (N, K), fractions of Nyquist, strictly increasing per frame

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"formant track must be 2-D, got shape {self.values.shape}")
        if np.any(self.values <= 0) or np.any(self.values >= 1):
            raise DataError("formant track entries must lie strictly inside (0, 1)")
        if np.any(np.diff(self.values, axis=1) <= 0):
            raise DataError("formants must be strictly increasing within each frame")

    @property
    def hz(self):
        return self.values * NYQUIST


# --- analytic LPC path ------------------------------------------------------


def preemphasize(audio, coeff=0.97):
    """y[n] = x[n] - coeff*x[n-1], with y[0] = x[0]."""
    if not 0 <= coeff < 1:
        raise DataError(f"preemphasis coefficient must be in [0, 1), got {coeff}")
    y = scipy.signal.lfilter([1.0, -coeff], [1.0], audio.samples)
    return dsp.AudioBuffer(y, audio.sample_rate)


def levinson_durbin(autocorr):
    """Solve the LPC normal equations for predictor coefficients a such that
    x[n] ~ sum_k a[k] x[n-k-1]. Returns (a, prediction_error)."""
    r = np.asarray(autocorr, dtype=np.float64)
    if r[0] <= 0:
        raise DataError(f"autocorrelation at lag 0 must be positive, got {r[0]}")
    order = len(r) - 1
    a = np.zeros(order)
    err = r[0]
    for m in range(1, order + 1):
        acc = r[m] - np.dot(a[: m - 1], r[m - 1 : 0 : -1])
        k = acc / err
        if not np.isfinite(k) or abs(k) >= 1.0:
            raise UnstableFrame(f"reflection coefficient {k} at stage {m}")
        if m > 1:
            a[: m - 1] -= k * a[m - 2 :: -1]
        a[m - 1] = k
        err *= 1.0 - k * k
    return a, err


def formants_from_lpc(coeffs, sample_rate=dsp.CANONICAL_RATE, cfg=None):
    """Formant candidates from predictor coefficients, lowest first (Hz).

    Roots of 1 - sum a_k z^-k with positive imaginary part become
    frequency = angle*sr/(2*pi) and bandwidth = -ln|root|*sr/pi; candidates
    must satisfy bandwidth < max_bandwidth and frequency > min_freq. May
    return fewer than cfg.n_formants entries.
    """
    cfg = cfg or LpcConfig()
    a = np.asarray(coeffs, dtype=np.float64)
    roots = np.roots(np.concatenate(([1.0], -a)))
    roots = roots[roots.imag > 0]
    if len(roots) == 0:
        return np.empty(0)
    freqs = np.angle(roots) * sample_rate / (2.0 * np.pi)
    mags = np.abs(roots)
    with np.errstate(divide="ignore"):
        bandwidths = -np.log(mags) * sample_rate / np.pi
    keep = (bandwidths < cfg.max_bandwidth) & (freqs > cfg.min_freq)
    return np.sort(freqs[keep])[: cfg.n_formants]


def track_formants(audio, cfg=None):
    """Per-frame LPC formant track aligned with the mel front end.

    Frames with too few qualifying resonances are filled from the nearest
    valid frame; an utterance with no valid frame at all is an error.
    """
    cfg = cfg or LpcConfig()
    if audio.sample_rate != dsp.CANONICAL_RATE:
        raise DataError(f"track_formants expects {dsp.CANONICAL_RATE} Hz audio")
    x = preemphasize(audio, cfg.preemphasis).samples
    pad = cfg.frame_length // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad, mode="edge")
    n_frames = len(x) // cfg.frame_hop + 1
    window = np.hamming(cfg.frame_length)
    values = np.zeros((n_frames, cfg.n_formants))
    valid = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        frame = xp[t * cfg.frame_hop : t * cfg.frame_hop + cfg.frame_length] * window
        energy = float(np.dot(frame, frame))
        if energy < 1e-10:
            continue
        r = np.array([np.dot(frame[: len(frame) - k], frame[k:]) for k in range(cfg.order + 1)])
        try:
            coeffs, _ = levinson_durbin(r)
        except (UnstableFrame, DataError):
            continue
        freqs = formants_from_lpc(coeffs, audio.sample_rate, cfg)
        if len(freqs) < cfg.n_formants or np.any(np.diff(freqs) <= 0):
            continue
        values[t] = freqs / (audio.sample_rate / 2.0)
        valid[t] = True
    if not valid.any():
        raise DataError("no valid formant frames in utterance (silence or unstable analysis)")
    if not valid.all():
        valid_idx = np.flatnonzero(valid)
        for t in np.flatnonzero(~valid):
            nearest = valid_idx[np.argmin(np.abs(valid_idx - t))]
            values[t] = values[nearest]
    return FormantTrack(values)


# --- source-filter synthesis -------------------------------------------------


def synth_vowel(f0, formant_freqs, bandwidths, duration, sample_rate=dsp.CANONICAL_RATE, source_tilt=0.97):
    """Impulse train at f0 through cascaded second-order resonators,
    peak-normalized to 0.9.

    source_tilt shapes the excitation with a one-pole lowpass (the glottal
    spectral slope); the default matches the standard preemphasis
    coefficient so LPC analysis of the result is tilt-free.
    """
    freqs = np.asarray(formant_freqs, dtype=np.float64)
    bws = np.asarray(bandwidths, dtype=np.float64)
    if np.any(np.diff(freqs) <= 0):
        raise DataError(f"formant frequencies must be strictly increasing, got {freqs}")
    if 2.0 * freqs.max() >= sample_rate:
        raise DataError(f"formant {freqs.max()} Hz too high for sample rate {sample_rate}")
    if f0 <= 0:
        raise DataError(f"f0 must be positive, got {f0}")
    n = int(round(duration * sample_rate))
    excitation = np.zeros(n)
    period = sample_rate / f0
    pulses = np.round(np.arange(0, n, period)).astype(int)
    excitation[pulses[pulses < n]] = 1.0
    y = excitation
    if source_tilt > 0:
        y = scipy.signal.lfilter([1.0], [1.0, -source_tilt], y)
    for f, bw in zip(freqs, bws):
        r = np.exp(-np.pi * bw / sample_rate)
        theta = 2.0 * np.pi * f / sample_rate
        b0 = 1.0 - 2.0 * r * np.cos(theta) + r * r
        y = scipy.signal.lfilter([b0], [1.0, -2.0 * r * np.cos(theta), r * r], y)
    peak = np.abs(y).max()
    if peak > 0:
        y = 0.9 * y / peak
    return dsp.AudioBuffer(y, sample_rate)


def build_synth_corpus(n_items, seed, duration=0.5, spec_config=None):
    """Random labeled vowels: list of (MelSpectrogram, FormantTrack).

    Labels come from the synthesis parameters, not from LPC analysis.
    F1 in [250, 900], F2 in [F1+200, 2500], F3 in [F2+300, 3500], and
    f0 in [80, 300] Hz. Deterministic for a fixed seed.
    """
    if n_items < 1:
        raise DataError(f"n_items must be >= 1, got {n_items}")
    rng = np.random.default_rng(seed)
    spec_config = spec_config or dsp.SpectrogramConfig()
    items = []
    for _ in range(n_items):
        f1 = rng.uniform(250.0, 900.0)
        f2 = rng.uniform(f1 + 200.0, 2500.0)
        f3 = rng.uniform(f2 + 300.0, 3500.0)
        f0 = rng.uniform(80.0, 300.0)
        bws = rng.uniform(60.0, 180.0, size=3)
        audio = synth_vowel(f0, (f1, f2, f3), bws, duration)
        mel = dsp.log_mel(audio, spec_config)
        label = np.tile(np.array([f1, f2, f3]) / NYQUIST, (mel.n_frames, 1))
        items.append((mel, FormantTrack(label)))
    return items


def save_corpus(path, corpus, seed):
    arrays = {}
    for i, (mel, track) in enumerate(corpus):
        arrays[f"mel_{i:05d}"] = mel.frames
        arrays[f"lab_{i:05d}"] = track.values
    cfg = corpus[0][0].config
    meta = {
        "kind": "formant-corpus",
        "count": len(corpus),
        "seed": seed,
        "hop_length": cfg.hop_length,
        "window_length": cfg.window_length,
        "fft_size": cfg.fft_size,
        "mel_bands": cfg.mel_bands,
    }
    save_container(path, arrays, meta)


def load_corpus(path):
    arrays, meta = load_container(path)
    if meta.get("kind") != "formant-corpus":
        raise DataError(f"not a formant corpus container: {path}")
    cfg = dsp.SpectrogramConfig(
        window_length=meta["window_length"],
        hop_length=meta["hop_length"],
        fft_size=meta["fft_size"],
        mel_bands=meta["mel_bands"],
    )
    corpus = []
    for i in range(meta["count"]):
        mel = dsp.MelSpectrogram(arrays[f"mel_{i:05d}"], cfg)
        corpus.append((mel, FormantTrack(arrays[f"lab_{i:05d}"])))
    return corpus, meta


# --- differentiable regressor -------------------------------------------------

_MEL_SHIFT = 12.0  # rough center of log-mel values on this corpus
_MEL_SCALE = 5.0


def _context_indices(n_frames, half_context):
    offsets = np.arange(-half_context, half_context + 1)
    idx = np.arange(n_frames)[:, None] + offsets[None, :]
    return np.clip(idx, 0, n_frames - 1)


class FormantRegressor:
    """Small frame-context network mapping log-mel frames to K formants.

    Per frame: a (2*half_context+1)-frame window, two tanh layers, then a
    cumulative-positive-gap head so outputs in (0,1) always satisfy
    F1 < F2 < ... < FK.
    """

    def __init__(self, mel_bands=80, half_context=2, hidden=64, hidden2=32, n_formants=3, gap_scale=4.0, seed=0):
        self.mel_bands = mel_bands
        self.half_context = half_context
        self.n_formants = n_formants
        self.gap_scale = gap_scale
        self.held_out_mse = None
        self.train_history = []
        rng = np.random.default_rng(seed)
        d_in = (2 * half_context + 1) * mel_bands

        def init(shape, fan_in, fan_out, name):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return dc.Parameter(rng.uniform(-lim, lim, shape), name)

        self.w1 = init((d_in, hidden), d_in, hidden, "freg.w1")
        self.b1 = dc.Parameter(np.zeros((1, hidden)), "freg.b1")
        self.w2 = init((hidden, hidden2), hidden, hidden2, "freg.w2")
        self.b2 = dc.Parameter(np.zeros((1, hidden2)), "freg.b2")
        self.w3 = init((hidden2, n_formants), hidden2, n_formants, "freg.w3")
        # start the head in the low-frequency region where formants live
        b3 = np.full((1, n_formants), -1.5)
        b3[0, 0] = -2.5
        self.b3 = dc.Parameter(b3, "freg.b3")
        # constant column selectors for the gap construction
        self._selectors = [np.eye(n_formants)[:, k : k + 1] for k in range(n_formants)]

    def parameters(self):
        params = [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
        dc.check_unique_names(params)
        return params

    def _forward(self, x):
        # x: Tensor (N, (2c+1)*mel_bands), already context-stacked and normalized
        h = dc.tanh(x @ self.w1 + self.b1)
        h = dc.tanh(h @ self.w2 + self.b2)
        g = h @ self.w3 + self.b3
        cols = [g @ dc.Tensor(self._selectors[0])]
        for k in range(1, self.n_formants):
            gap = dc.sigmoid(g @ dc.Tensor(self._selectors[k])) * self.gap_scale
            cols.append(cols[-1] + gap)
        return dc.sigmoid(dc.concat(cols, axis=1))

    def _stack_context_tensor(self, mel_tensor):
        n = mel_tensor.shape[0]
        idx = _context_indices(n, self.half_context)
        cols = []
        for c in range(idx.shape[1]):
            sel = np.zeros((n, n))
            sel[np.arange(n), idx[:, c]] = 1.0
            cols.append(dc.Tensor(sel) @ mel_tensor)
        return dc.concat(cols, axis=1)

    def _normalize(self, t):
        return (t + _MEL_SHIFT) * (1.0 / _MEL_SCALE)

    def predict(self, mel):
        """Differentiable track prediction.

        Accepts a MelSpectrogram or a (N, mel_bands) Tensor; returns a
        (N, n_formants) Tensor with entries in (0,1), strictly increasing
        along the formant axis.
        """
        t = mel if isinstance(mel, dc.Tensor) else dc.Tensor(np.asarray(mel.frames))
        if t.shape[1] != self.mel_bands:
            raise DataError(f"expected {self.mel_bands} mel bands, got {t.shape[1]}")
        return self._forward(self._normalize(self._stack_context_tensor(t)))

    def track(self, mel):
        return FormantTrack(self.predict(mel).data)

    # numpy fast path used during regressor training (no mel gradients needed)
    def _stack_context_numpy(self, frames):
        idx = _context_indices(frames.shape[0], self.half_context)
        return frames[idx].reshape(frames.shape[0], -1)

    def save(self, path):
        arrays = {p.name: p.data for p in self.parameters()}
        meta = {
            "kind": "formant-regressor",
            "mel_bands": self.mel_bands,
            "half_context": self.half_context,
            "hidden": self.w1.data.shape[1],
            "hidden2": self.w2.data.shape[1],
            "n_formants": self.n_formants,
            "gap_scale": self.gap_scale,
            "held_out_mse": self.held_out_mse,
        }
        save_container(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_container(path)
        if meta.get("kind") != "formant-regressor":
            raise DataError(f"not a formant regressor container: {path}")
        reg = cls(
            mel_bands=meta["mel_bands"],
            half_context=meta["half_context"],
            hidden=meta["hidden"],
            hidden2=meta["hidden2"],
            n_formants=meta["n_formants"],
            gap_scale=meta["gap_scale"],
        )
        for p in reg.parameters():
            p.data = arrays[p.name].copy()
        reg.held_out_mse = meta.get("held_out_mse")
        return reg


def predict_formants(reg, mel):
    """Module-level alias for FormantRegressor.predict."""
    return reg.predict(mel)


def train_formant_regressor(
    corpus, epochs=60, seed=0, lr=2e-3, batch_size=256, holdout_fraction=0.1, **reg_kwargs
):
    """Fit a FormantRegressor to (mel, track) pairs by minimizing MSE in
    normalized units. The last holdout_fraction of items is held out; the
    resulting model carries held_out_mse and the per-epoch train_history."""
    if not corpus:
        raise DataError("empty corpus")
    n_hold = int(round(len(corpus) * holdout_fraction))
    train_items = corpus[: len(corpus) - n_hold]
    hold_items = corpus[len(corpus) - n_hold :]
    if not train_items:
        raise DataError("holdout fraction leaves no training items")

    mel_bands = train_items[0][0].frames.shape[1]
    reg = FormantRegressor(mel_bands=mel_bands, seed=seed, **reg_kwargs)

    def stack(items):
        xs = [reg._stack_context_numpy(np.asarray(m.frames, dtype=np.float64)) for m, _ in items]
        ys = [t.values for _, t in items]
        return np.concatenate(xs), np.concatenate(ys)

    x_train, y_train = stack(train_items)
    x_train = (x_train + _MEL_SHIFT) / _MEL_SCALE
    rng = np.random.default_rng(seed + 1)
    opt = Adam(reg.parameters(), lr=lr)
    reg.train_history = []
    for _ in range(epochs):
        order = rng.permutation(len(x_train))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            xb = dc.Tensor(x_train[sel])
            yb = dc.Tensor(y_train[sel])
            loss = dc.mean(dc.square(reg._forward(xb) - yb))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data)
            n_batches += 1
        reg.train_history.append(epoch_loss / n_batches)

    if hold_items:
        xh, yh = stack(hold_items)
        pred = reg._forward(dc.Tensor((xh + _MEL_SHIFT) / _MEL_SCALE)).data
        reg.held_out_mse = float(np.mean((pred - yh) ** 2))
    return reg


# --- the formant-track loss -----------------------------------------------------


def track_mse(phi_x, phi_dec):
    """Mean squared difference over all K*N track entries (differentiable)."""
    return dc.mean(dc.square(phi_x - phi_dec))


def formant_loss(x, x_dec, reg):
    """Mean squared formant-track difference between a reference
    spectrogram and a decoded one. Gradient flows into x_dec only."""
    x_t = x if isinstance(x, dc.Tensor) else dc.Tensor(np.asarray(x.frames))
    d_t = x_dec if isinstance(x_dec, dc.Tensor) else dc.Tensor(np.asarray(x_dec.frames))
    if x_t.shape != d_t.shape:
        raise DataError(f"spectrogram shape mismatch: {x_t.shape} vs {d_t.shape}")
    phi_x = reg.predict(dc.stop_gradient(x_t))
    phi_d = reg.predict(d_t)
    return track_mse(phi_x, phi_d)
