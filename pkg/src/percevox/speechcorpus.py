"""Synthetic multi-speaker speech corpus and the built-in recognition
adapters that make end-to-end evaluation self-contained.

A "speaker" is a formant-scale plus pitch-range profile; an "utterance" is
a sequence of canonical vowels rendered through the vowel synthesizer with
per-segment jitter, so transcripts are known by construction.  The built-in
transcriber recovers the vowel sequence from formant tracks alone (it never
sees synthesis parameters), and the built-in embedder wraps the reference
speaker embedding.  Both present the same call shape as the subprocess
adapters so they are interchangeable in evaluation.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, evaluation, formant
from .errors import DataError

# Canonical vowel formant targets (Hz), chosen for mutual separation that
# survives per-speaker scaling: scale shifts log-formants uniformly, and
# these four stay apart in the scale-invariant direction.
VOWEL_TABLE = {
    "a": (730.0, 1090.0, 2440.0),
    "e": (530.0, 1840.0, 2480.0),
    "i": (270.0, 2290.0, 3010.0),
    "u": (300.0, 870.0, 2240.0),
}

# (F1, F2) multipliers; the warp is what makes an accent audible.
ACCENT_WARPS = {
    "nova": (1.0, 1.0),
    "keld": (0.94, 1.09),
}

_FADE_SECONDS = 0.005
_SCALE_GRID = np.arange(0.78, 1.30, 0.02)


@dataclass
class SpeakerProfile:
    speaker_id: str
    gender: str
    accent: str
    formant_scale: float
    f0_base: float


def sample_speakers(n_speakers, seed):
    """Alternating-gender speaker profiles with per-speaker formant scale,
    pitch base, and a cycling accent label."""
    if n_speakers < 1:
        raise DataError(f"n_speakers must be >= 1, got {n_speakers}")
    rng = np.random.default_rng(seed)
    accents = sorted(ACCENT_WARPS)
    speakers = []
    for i in range(n_speakers):
        if i % 2 == 0:
            gender, scale, f0 = "m", rng.uniform(0.85, 1.0), rng.uniform(95.0, 150.0)
        else:
            gender, scale, f0 = "f", rng.uniform(1.05, 1.2), rng.uniform(170.0, 230.0)
        speakers.append(SpeakerProfile(
            speaker_id=f"spk{i:02d}",
            gender=gender,
            accent=accents[(i // 2) % len(accents)],
            formant_scale=float(scale),
            f0_base=float(f0),
        ))
    return speakers


def _fade(segment, sample_rate):
    n = min(int(_FADE_SECONDS * sample_rate), len(segment) // 2)
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
        segment[:n] *= ramp
        segment[-n:] *= ramp[::-1]
    return segment


def synth_utterance(profile, vowels, rng, vowel_duration=0.22,
                    sample_rate=dsp.CANONICAL_RATE):
    """Render a vowel sequence for one speaker: canonical formants scaled by
    the profile, warped by its accent, jittered per segment."""
    if not vowels:
        raise DataError("utterance needs at least one vowel")
    warp_f1, warp_f2 = ACCENT_WARPS[profile.accent]
    segments = []
    for v in vowels:
        if v not in VOWEL_TABLE:
            raise DataError(f"unknown vowel {v!r}")
        f1, f2, f3 = VOWEL_TABLE[v]
        freqs = np.array([f1 * warp_f1, f2 * warp_f2, f3]) * profile.formant_scale
        freqs *= rng.uniform(0.97, 1.03, size=3)
        freqs = np.sort(freqs)
        f0 = profile.f0_base * rng.uniform(0.95, 1.05)
        bws = rng.uniform(70.0, 140.0, size=3)
        seg = formant.synth_vowel(f0, freqs, bws, vowel_duration, sample_rate)
        segments.append(_fade(seg.samples.copy(), sample_rate))
    return dsp.AudioBuffer(np.concatenate(segments), sample_rate)


def build_speech_corpus(out_dir, n_speakers=4, utterances_per_speaker=3, seed=0,
                        vowels_per_utterance=(3, 5), vowel_duration=0.22):
    """Write WAVs plus a manifest.tsv under out_dir; returns (manifest_path,
    rows, speakers).  Deterministic for a fixed seed."""
    if n_speakers < 2:
        raise DataError("corpus needs at least two speakers for trials")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = sample_speakers(n_speakers, seed)
    names = sorted(VOWEL_TABLE)
    rows = []
    for profile in speakers:
        for u in range(utterances_per_speaker):
            n_vowels = int(rng.integers(vowels_per_utterance[0],
                                        vowels_per_utterance[1] + 1))
            # adjacent repeats would merge into one indistinguishable segment
            vowels = []
            for _ in range(n_vowels):
                v = names[int(rng.integers(len(names)))]
                while vowels and v == vowels[-1]:
                    v = names[int(rng.integers(len(names)))]
                vowels.append(v)
            audio = synth_utterance(profile, vowels, rng, vowel_duration)
            wav_path = audio_dir / f"{profile.speaker_id}_u{u:02d}.wav"
            dsp.save_wav(wav_path, audio)
            rows.append(evaluation.ManifestRow(
                audio_path=str(wav_path.resolve()),
                speaker_id=profile.speaker_id,
                gender=profile.gender,
                accent=profile.accent,
                transcript=" ".join(vowels),
            ))
    manifest_path = out_dir / "manifest.tsv"
    evaluation.write_manifest(manifest_path, rows)
    return manifest_path, rows, speakers


def corpus_clips(rows):
    """Log-mel training clips (MelSpectrogram, speaker_id) from manifest rows."""
    return [(dsp.log_mel(dsp.load_wav(r.audio_path)), r.speaker_id) for r in rows]


# --- built-in adapters ----------------------------------------------------------


class BuiltinVowelTranscriber:
    """Formant-track vowel recognizer.

    Frames are classified against the canonical vowel table in log-formant
    space after estimating the speaker's overall formant scale (grid search
    over a plausible range), then run-length collapsed; runs shorter than
    ``min_run_frames`` are treated as transition noise and dropped.
    """

    def __init__(self, min_run_frames=4):
        self.min_run_frames = min_run_frames
        self._names = sorted(VOWEL_TABLE)
        self._log_table = np.log([VOWEL_TABLE[v][:2] for v in self._names])

    def _classify(self, tracks_hz):
        logs = np.log(np.maximum(tracks_hz[:, :2], 1.0))
        best_cost, best_labels = None, None
        for scale in _SCALE_GRID:
            centered = self._log_table + np.log(scale)
            d = ((logs[:, None, :] - centered[None, :, :]) ** 2).sum(axis=2)
            labels = d.argmin(axis=1)
            cost = d.min(axis=1).sum()
            if best_cost is None or cost < best_cost:
                best_cost, best_labels = cost, labels
        return best_labels

    def _collapse(self, names):
        out = []
        run_name, run_len = None, 0
        for name in list(names) + [None]:
            if name == run_name:
                run_len += 1
                continue
            if run_name is not None and run_len >= self.min_run_frames:
                if not out or out[-1] != run_name:
                    out.append(run_name)
            run_name, run_len = name, 1
        return out

    def transcribe(self, audio, audio_path=None):
        if audio.sample_rate != dsp.CANONICAL_RATE:
            raise DataError(
                f"transcriber expects {dsp.CANONICAL_RATE} Hz audio, got {audio.sample_rate}")
        try:
            track = formant.track_formants(audio)
        except DataError:
            # no stable formant structure anywhere: transcribes to nothing
            return ""
        labels = self._classify(track.hz)
        return " ".join(self._collapse(self._names[lab] for lab in labels))


class ReferenceEmbedder:
    """Speaker-embedding adapter wrapping the built-in mel-cepstral vector."""

    embedding_dim = 26

    def embed(self, audio, audio_path=None):
        return evaluation.reference_speaker_embedding(audio)
