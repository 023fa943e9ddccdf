import numpy as np
import pytest

from percevox import dsp, evaluation as ev, speechcorpus as sc
from percevox.errors import DataError


# --- speaker sampling -------------------------------------------------------------


def test_sample_speakers_deterministic():
    a = sc.sample_speakers(6, seed=3)
    b = sc.sample_speakers(6, seed=3)
    assert a == b
    c = sc.sample_speakers(6, seed=4)
    assert a != c


def test_sample_speakers_alternates_gender_and_cycles_accent():
    speakers = sc.sample_speakers(8, seed=0)
    assert [s.gender for s in speakers] == ["m", "f"] * 4
    assert [s.accent for s in speakers] == ["keld", "keld", "nova", "nova"] * 2
    assert len({s.speaker_id for s in speakers}) == 8


def test_sample_speakers_parameter_ranges():
    for s in sc.sample_speakers(20, seed=1):
        if s.gender == "m":
            assert 0.85 <= s.formant_scale <= 1.0
            assert 95.0 <= s.f0_base <= 150.0
        else:
            assert 1.05 <= s.formant_scale <= 1.2
            assert 170.0 <= s.f0_base <= 230.0


def test_sample_speakers_validation():
    with pytest.raises(DataError):
        sc.sample_speakers(0, seed=0)


# --- utterance synthesis ----------------------------------------------------------


def test_synth_utterance_duration_and_determinism():
    profile = sc.sample_speakers(2, seed=0)[0]
    a = sc.synth_utterance(profile, ["a", "i", "u"], np.random.default_rng(7))
    b = sc.synth_utterance(profile, ["a", "i", "u"], np.random.default_rng(7))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.sample_rate == 16000
    expected = 3 * round(0.22 * 16000)
    assert abs(len(a.samples) - expected) <= 3


def test_synth_utterance_validation():
    profile = sc.sample_speakers(2, seed=0)[0]
    with pytest.raises(DataError):
        sc.synth_utterance(profile, [], np.random.default_rng(0))
    with pytest.raises(DataError, match="vowel"):
        sc.synth_utterance(profile, ["a", "x"], np.random.default_rng(0))


def test_synth_utterance_segments_fade_to_zero():
    profile = sc.sample_speakers(2, seed=0)[0]
    audio = sc.synth_utterance(profile, ["a"], np.random.default_rng(3))
    assert audio.samples[0] == 0.0
    assert audio.samples[-1] == pytest.approx(0.0, abs=1e-6)
    assert np.max(np.abs(audio.samples)) <= 1.0


# --- corpus builder -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return sc.build_speech_corpus(out, n_speakers=4, utterances_per_speaker=3, seed=0)


def test_corpus_layout(small_corpus):
    manifest_path, rows, speakers = small_corpus
    assert manifest_path.exists()
    assert len(rows) == 12
    assert len(speakers) == 4
    for row in rows:
        assert row.audio_path.endswith(".wav")
        audio = dsp.load_wav(row.audio_path)
        assert audio.sample_rate == 16000
        assert len(audio.samples) > 0


def test_corpus_manifest_roundtrip(small_corpus):
    manifest_path, rows, _ = small_corpus
    back = ev.read_manifest(manifest_path)
    assert [r.audio_path for r in back] == [r.audio_path for r in rows]
    assert [r.transcript for r in back] == [r.transcript for r in rows]


def test_corpus_transcripts_are_vowel_sequences(small_corpus):
    _, rows, _ = small_corpus
    for row in rows:
        vowels = row.transcript.split()
        assert 3 <= len(vowels) <= 5
        assert set(vowels) <= set(sc.VOWEL_TABLE)
        # adjacent repeats are unrecoverable from audio, so the generator avoids them
        assert all(a != b for a, b in zip(vowels, vowels[1:]))


def test_corpus_deterministic(tmp_path):
    _, rows_a, _ = sc.build_speech_corpus(tmp_path / "a", n_speakers=2,
                                          utterances_per_speaker=2, seed=5)
    _, rows_b, _ = sc.build_speech_corpus(tmp_path / "b", n_speakers=2,
                                          utterances_per_speaker=2, seed=5)
    assert [r.transcript for r in rows_a] == [r.transcript for r in rows_b]
    for ra, rb in zip(rows_a, rows_b):
        wa = dsp.load_wav(ra.audio_path)
        wb = dsp.load_wav(rb.audio_path)
        np.testing.assert_array_equal(wa.samples, wb.samples)


def test_corpus_requires_two_speakers(tmp_path):
    with pytest.raises(DataError):
        sc.build_speech_corpus(tmp_path, n_speakers=1, utterances_per_speaker=2, seed=0)


def test_corpus_clips_shapes(small_corpus):
    _, rows, _ = small_corpus
    clips = sc.corpus_clips(rows[:3])
    assert len(clips) == 3
    for (mel, speaker_id), row in zip(clips, rows[:3]):
        assert speaker_id == row.speaker_id
        assert mel.frames.ndim == 2 and mel.frames.shape[1] == 80
        assert np.all(np.isfinite(mel.frames))


# --- builtin adapters ----------------------------------------------------------------


def test_transcriber_perfect_on_clean_corpus(small_corpus):
    _, rows, _ = small_corpus
    transcriber = sc.BuiltinVowelTranscriber()
    errors = []
    for row in rows:
        audio = dsp.load_wav(row.audio_path)
        hyp = transcriber.transcribe(audio, audio_path=row.audio_path)
        errors.append(ev.cer(hyp, row.transcript))
    assert np.mean(errors) == 0.0


def test_transcriber_single_vowel():
    profile = sc.sample_speakers(2, seed=2)[1]
    audio = sc.synth_utterance(profile, ["i"], np.random.default_rng(0))
    assert sc.BuiltinVowelTranscriber().transcribe(audio) == "i"


def test_transcriber_min_run_suppresses_flicker():
    # a run shorter than min_run_frames never appears in output
    transcriber = sc.BuiltinVowelTranscriber(min_run_frames=4)
    collapsed = transcriber._collapse(["a"] * 10 + ["e"] * 2 + ["a"] * 10)
    assert collapsed == ["a"]


def test_reference_embedder_adapter(small_corpus):
    _, rows, _ = small_corpus
    embedder = sc.ReferenceEmbedder()
    audio = dsp.load_wav(rows[0].audio_path)
    e = embedder.embed(audio, audio_path=rows[0].audio_path)
    assert e.shape == (26,)
    assert abs(np.linalg.norm(e) - 1.0) < 1e-9
