"""Audio I/O and the STFT/mel front end, plus Griffin-Lim inversion.

All functions are pure and deterministic; Griffin-Lim takes an explicit
seed for its random phase initialization.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CANONICAL_RATE = 16000


@dataclass
class AudioBuffer:
    samples: np.ndarray  # 1-D float array, amplitudes in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass
class SpectrogramConfig:
    window_length: int = 1024
    hop_length: int = 320
    fft_size: int = 1024
    mel_bands: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (0 < self.hop_length <= self.window_length <= self.fft_size):
            raise DataError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length}) <= fft ({self.fft_size})"
            )
        if not (0 <= self.fmin < self.fmax):
            raise DataError(f"need 0 <= fmin < fmax, got ({self.fmin}, {self.fmax})")
        if self.mel_bands < 1:
            raise DataError(f"mel_bands must be >= 1, got {self.mel_bands}")
        if self.log_floor <= 0:
            raise DataError(f"log_floor must be positive, got {self.log_floor}")

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (N, mel_bands) log-power values
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (mel_bands, fft_size//2 + 1), nonnegative


# --- WAV I/O ---------------------------------------------------------------


def load_wav(path):
    """Read a 16-bit PCM RIFF WAV file; multichannel is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as wf:
            sampwidth = wf.getsampwidth()
            channels = wf.getnchannels()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except FileNotFoundError:
        raise DataError(f"no such audio file: {path}") from None
    except (wave.Error, EOFError) as exc:
        raise DataError(f"not a readable PCM WAV file: {path} ({exc})") from exc
    if sampwidth != 2:
        raise DataError(f"only 16-bit PCM WAV is supported, got {8 * sampwidth}-bit: {path}")
    if n == 0:
        raise DataError(f"zero-length audio: {path}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(data, rate)


def save_wav(path, audio):
    """Write an AudioBuffer as mono 16-bit PCM."""
    scaled = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(scaled.tobytes())


def resample(audio, target_rate):
    """Linear-interpolation resampling; preserves duration within one sample."""
    if target_rate <= 0:
        raise DataError(f"target_rate must be positive, got {target_rate}")
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate)
    n_in = len(audio.samples)
    # last output time stays inside the source grid: no extrapolation
    n_out = int((n_in - 1) * target_rate // audio.sample_rate) + 1
    t_old = np.arange(n_in) / audio.sample_rate
    t_new = np.arange(n_out) / target_rate
    return AudioBuffer(np.interp(t_new, t_old, audio.samples), target_rate)


# --- STFT front end --------------------------------------------------------


def _hann_periodic(length):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def stft(audio, config=None):
    """Center-aligned STFT: reflect padding of window/2 per side, frame count
    floor(len/hop) + 1. Returns a complex (N, fft_size//2+1) matrix."""
    config = config or SpectrogramConfig()
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float64)
    if len(x) < 1:
        raise DataError("stft needs at least one sample")
    pad = config.window_length // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad, mode="edge")
    n_frames = len(x) // config.hop_length + 1
    window = _hann_periodic(config.window_length)
    frames = np.lib.stride_tricks.sliding_window_view(xp, config.window_length)[
        :: config.hop_length
    ][:n_frames]
    return np.fft.rfft(frames * window, n=config.fft_size, axis=1)


def istft(spec, config=None):
    """Weighted overlap-add inverse of stft. Returns (N-1)*hop samples."""
    config = config or SpectrogramConfig()
    n_frames = spec.shape[0]
    hop, win_len = config.hop_length, config.window_length
    window = _hann_periodic(win_len)
    frames = np.fft.irfft(spec, n=config.fft_size, axis=1)[:, :win_len]
    total = (n_frames - 1) * hop + win_len
    num = np.zeros(total)
    den = np.zeros(total)
    for t in range(n_frames):
        start = t * hop
        num[start : start + win_len] += frames[t] * window
        den[start : start + win_len] += window * window
    out = num / np.maximum(den, 1e-12)
    pad = win_len // 2
    return out[pad : pad + (n_frames - 1) * hop]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(config=None, sample_rate=CANONICAL_RATE):
    """Triangular filters with centers equally spaced on the mel scale
    mel(f) = 2595*log10(1 + f/700), between fmin and fmax. Unnormalized."""
    config = config or SpectrogramConfig()
    if config.fmax > sample_rate / 2:
        raise DataError(f"fmax {config.fmax} exceeds Nyquist for rate {sample_rate}")

    edges_hz = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bands + 2))
    bin_hz = np.arange(config.n_bins) * sample_rate / config.fft_size
    weights = np.zeros((config.mel_bands, config.n_bins))
    for m in range(config.mel_bands):
        left, center, right = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    if np.any(weights.sum(axis=1) == 0):
        raise DataError(
            f"{config.mel_bands} mel bands is too many for fft_size {config.fft_size}: some filter is empty"
        )
    return MelFilterbank(weights)


def log_mel(audio, config=None):
    """log(max(filterbank . |stft|^2, log_floor)) per frame."""
    config = config or SpectrogramConfig()
    if audio.sample_rate != CANONICAL_RATE:
        raise DataError(
            f"log_mel expects {CANONICAL_RATE} Hz audio, got {audio.sample_rate} Hz (resample first)"
        )
    fb = build_mel_filterbank(config, audio.sample_rate)
    power = np.abs(stft(audio, config)) ** 2
    mel_power = power @ fb.weights.T
    return MelSpectrogram(np.log(np.maximum(mel_power, config.log_floor)), config)


def clip_frames(mel, clip_seconds, sample_rate=CANONICAL_RATE):
    """Split into non-overlapping fixed-length clips; drop the final partial one."""
    if clip_seconds <= 0:
        raise DataError(f"clip_seconds must be positive, got {clip_seconds}")
    clip_len = int(round(clip_seconds * sample_rate / mel.config.hop_length))
    n = mel.frames.shape[0] // clip_len
    return [MelSpectrogram(mel.frames[i * clip_len : (i + 1) * clip_len].copy(), mel.config) for i in range(n)]


def mel_to_linear(mel, fb):
    """Pseudo-inverse mel inversion: returns the nonnegative linear power
    spectrum (N, fft_size//2+1). Lossy by construction."""
    inv = np.linalg.pinv(fb.weights)
    linear = np.exp(mel.frames) @ inv.T
    return np.maximum(linear, 0.0)


def griffin_lim(linear_mag, config=None, iterations=60, seed=0):
    """Iterative phase reconstruction from a (N, bins) magnitude matrix.

    Returns (AudioBuffer, history) where history[i] is the spectral
    convergence ||| STFT(audio_i) | - M|| / ||M|| after iteration i.
    """
    config = config or SpectrogramConfig()
    if iterations < 1:
        raise DataError(f"iterations must be >= 1, got {iterations}")
    mag = np.asarray(linear_mag, dtype=np.float64)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    spec = mag * phase
    mag_norm = np.linalg.norm(mag)
    history = []
    audio = None
    for _ in range(iterations):
        audio = istft(spec, config)
        rebuilt = stft(AudioBuffer(audio, CANONICAL_RATE), config)
        rebuilt_mag = np.abs(rebuilt)
        history.append(
            float(np.linalg.norm(rebuilt_mag - mag) / mag_norm) if mag_norm > 0 else 0.0
        )
        unit = np.where(rebuilt_mag > 1e-12, rebuilt / np.maximum(rebuilt_mag, 1e-12), 1.0)
        spec = mag * unit
    return AudioBuffer(audio, CANONICAL_RATE), history
