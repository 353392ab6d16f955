import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpc_speech.features import (FeatureConfig, FeatureSequence, ManifestEntry, SpeakerStats, Waveform,
                                 apply_speaker_stats, fbank, featurize_manifest, frame_count, load_wav,
                                 mel_filterbank, per_speaker_normalize, read_archive, read_feature_archive,
                                 read_manifest, read_speaker_stats, resample, stack_frames, write_archive,
                                 write_feature_archive, write_manifest, write_speaker_stats, write_wav)

from oracles import power_spectrum_dft


def _cfg_for_samples(L, S, sr=8000, **kw):
    return FeatureConfig(frame_length_ms=L * 1000.0 / sr, frame_shift_ms=S * 1000.0 / sr, **kw)


# ---------------------------------------------------------------------------
# WAV and manifest I/O


def test_wav_round_trip_is_exact(tmp_path):
    g = np.random.default_rng(0)
    ints = g.integers(-32768, 32768, size=500)
    path = tmp_path / "a.wav"
    write_wav(path, Waveform(ints / 32768.0, 8000))
    w = load_wav(path, "spk1")
    assert w.sample_rate == 8000 and w.speaker_id == "spk1" and w.utterance_id == "a"
    assert np.array_equal(np.round(w.samples * 32768).astype(int), ints)


def test_silence_and_full_scale_square(tmp_path):
    write_wav(tmp_path / "z.wav", Waveform(np.zeros(8000), 8000))
    assert np.array_equal(load_wav(tmp_path / "z.wav").samples, np.zeros(8000))
    sq = np.where(np.arange(100) % 20 < 10, 1.0, -1.0)
    write_wav(tmp_path / "s.wav", Waveform(sq, 8000))
    got = set(load_wav(tmp_path / "s.wav").samples.tolist())
    assert got == {-1.0, 32767 / 32768}


def test_load_wav_rejects_stereo_and_bad_files(tmp_path):
    import wave
    p = tmp_path / "st.wav"
    with wave.open(str(p), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(b"\0" * 40)
    with pytest.raises(ValueError, match="mono"):
        load_wav(p)
    bad = tmp_path / "junk.wav"
    bad.write_bytes(b"not a wav file at all")
    with pytest.raises(ValueError, match="junk.wav"):
        load_wav(bad)


def test_load_wav_rejects_unsupported_rate(tmp_path):
    write_wav(tmp_path / "r.wav", Waveform(np.zeros(10), 22050))
    with pytest.raises(ValueError, match="22050"):
        load_wav(tmp_path / "r.wav")


def test_manifest_round_trip(tmp_path):
    entries = [ManifestEntry("u1", str(tmp_path / "u1.wav"), "s1", "abc"),
               ManifestEntry("u2", str(tmp_path / "u2.wav"), "s2", "")]
    write_manifest(tmp_path / "m.tsv", entries)
    assert read_manifest(tmp_path / "m.tsv") == entries


def test_manifest_relative_paths_and_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("u1\tx.wav\ts1\thi\n")
    assert read_manifest(tmp_path / "m.tsv")[0].wav_path == str(tmp_path / "x.wav")
    (tmp_path / "bad.tsv").write_text("u1\tx.wav\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        read_manifest(tmp_path / "bad.tsv")


# ---------------------------------------------------------------------------
# resampling


def test_resample_length_and_dc():
    out = resample(Waveform(np.full(16000, 0.5), 16000))
    assert out.sample_rate == 8000 and out.samples.size == 8000
    np.testing.assert_allclose(out.samples, 0.5, atol=1e-3)
    assert resample(Waveform(np.zeros(7), 16000)).samples.size == 4


def test_resample_suppresses_above_nyquist_tone():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 6000 * t)
    y = resample(Waveform(x, 16000)).samples
    rms = lambda v: np.sqrt(np.mean(v ** 2))
    assert rms(y) <= 0.01 * rms(x)


def test_resample_preserves_band_limited_signal():
    g = np.random.default_rng(3)
    t = np.arange(16000) / 16000
    freqs = g.uniform(100, 3400, size=8)
    x = sum(np.sin(2 * np.pi * f * t + g.uniform(0, 6.3)) for f in freqs) / 8
    y = resample(Waveform(x, 16000)).samples
    ref = x[::2]
    core = slice(200, -200)  # zero-phase filter: no delay to align, edges excluded
    err = np.sqrt(np.mean((y[core] - ref[core]) ** 2)) / np.sqrt(np.mean(ref[core] ** 2))
    assert err <= 0.02


def test_resample_rejects_other_rates():
    with pytest.raises(ValueError):
        resample(Waveform(np.zeros(10), 44100))


# ---------------------------------------------------------------------------
# FBANK


def test_one_second_gives_98_frames():
    f = fbank(Waveform(np.zeros(8000), 8000))
    assert f.frames.shape == (98, 40)
    assert frame_count(8000, 200, 80) == 98


def test_zero_signal_hits_log_floor():
    f = fbank(Waveform(np.zeros(8000), 8000))
    assert np.all(f.frames == np.log(1e-10))


def test_short_audio_gives_empty_sequence():
    f = fbank(Waveform(np.zeros(150), 8000))
    assert f.frames.shape == (0, 40)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.integers(1, 200), st.integers(0, 4000))
def test_frame_count_formula(L, S, N):
    f = fbank(Waveform(np.zeros(N), 8000), _cfg_for_samples(L, S, fft_size=512, d_mel=4))
    expected = 0 if N < L else 1 + (N - L) // S
    assert f.num_frames == expected


def test_fbank_matches_direct_dft_oracle():
    g = np.random.default_rng(1)
    x = g.normal(size=400) * 0.1
    cfg = FeatureConfig()
    f = fbank(Waveform(x, 8000), cfg)
    emph = np.concatenate([x[:1], x[1:] - 0.97 * x[:-1]])
    frame = emph[80:280] * np.hamming(200)
    filters, _ = mel_filterbank(40, 256, 8000, 20.0, 4000.0)
    expected = np.log(np.maximum(filters @ power_spectrum_dft(frame, 256), 1e-10))
    np.testing.assert_allclose(f.frames[1], expected, rtol=1e-9, atol=1e-9)


def test_tone_peaks_in_nearest_mel_bin():
    t = np.arange(8000) / 8000
    f = fbank(Waveform(np.sin(2 * np.pi * 1000 * t), 8000))
    _, centres = mel_filterbank(40, 256, 8000, 20.0, 4000.0)
    assert int(np.argmax(f.frames[50])) == int(np.argmin(np.abs(centres - 1000)))


def test_filterbank_is_triangular_and_ordered():
    filters, centres = mel_filterbank(40, 256, 8000, 20.0, 4000.0)
    assert filters.shape == (40, 129)
    assert np.all(np.diff(centres) > 0)
    assert filters.min() >= 0 and filters.max() <= 1


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        fbank(Waveform(np.zeros(8000), 8000), FeatureConfig(mel_high_hz=6000))


# ---------------------------------------------------------------------------
# normalisation


def _seq(frames, spk, uid="u"):
    return FeatureSequence(np.asarray(frames, dtype=float), utterance_id=uid, speaker_id=spk)


def test_normalized_stats_per_speaker():
    g = np.random.default_rng(0)
    seqs = [_seq(g.normal(3, 2, size=(g.integers(5, 30), 6)), f"s{i % 3}", f"u{i}") for i in range(12)]
    normed, stats = per_speaker_normalize(seqs)
    for spk in ("s0", "s1", "s2"):
        allf = np.concatenate([n.frames for n in normed if n.speaker_id == spk])
        assert np.abs(allf.mean(0)).max() <= 1e-10
        assert np.abs(allf.var(0) - 1).max() <= 1e-8
    assert set(stats.mean) == {"s0", "s1", "s2"}


def test_constant_sequence_normalizes_to_zero():
    normed, _ = per_speaker_normalize([_seq(np.full((4, 3), 7.0), "s")])
    assert np.all(normed[0].frames == 0.0)


def test_offset_speakers_normalize_identically():
    g = np.random.default_rng(2)
    base = g.normal(size=(20, 5))
    normed, _ = per_speaker_normalize([_seq(base, "a"), _seq(base + 4.0, "b")])
    np.testing.assert_allclose(normed[0].frames, normed[1].frames, atol=1e-12)


def test_normalization_idempotent():
    g = np.random.default_rng(4)
    seqs = [_seq(g.normal(1, 3, size=(10, 4)), f"s{i % 2}", f"u{i}") for i in range(6)]
    once, _ = per_speaker_normalize(seqs)
    twice, _ = per_speaker_normalize(once)
    for a, b in zip(once, twice):
        np.testing.assert_allclose(a.frames, b.frames, atol=1e-10)


def test_unseen_speaker_uses_global_stats(caplog):
    g = np.random.default_rng(5)
    _, stats = per_speaker_normalize([_seq(g.normal(size=(10, 3)), "a")])
    with caplog.at_level(logging.WARNING):
        out = apply_speaker_stats([_seq(np.ones((2, 3)), "zz")], stats)
    assert "unseen" in caplog.text
    expected = (1 - stats.global_mean) / stats.global_std
    np.testing.assert_allclose(out[0].frames, np.broadcast_to(expected, (2, 3)))


def test_missing_speaker_id_rejected():
    with pytest.raises(ValueError):
        per_speaker_normalize([_seq(np.ones((2, 2)), "")])


# ---------------------------------------------------------------------------
# stacking


def test_stack_shapes_and_drop():
    f = _seq(np.arange(32.0).reshape(16, 2), "s")
    s = stack_frames(f, 8)
    assert s.frames.shape == (2, 16)
    assert s.frame_shift_ms == 80.0
    assert stack_frames(_seq(np.zeros((17, 2)), "s"), 8).num_frames == 2
    np.testing.assert_array_equal(s.frames[0], f.frames[:8].reshape(-1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(1, 5), st.integers(1, 9))
def test_stack_then_unstack_recovers_prefix(T, d, factor):
    x = np.random.default_rng(T * 100 + d).normal(size=(T, d))
    s = stack_frames(_seq(x, "s"), factor)
    assert s.num_frames == T // factor
    np.testing.assert_array_equal(s.frames.reshape(-1, d), x[: factor * (T // factor)])


def test_stack_rejects_zero_factor():
    with pytest.raises(ValueError):
        stack_frames(_seq(np.zeros((4, 2)), "s"), 0)


# ---------------------------------------------------------------------------
# archives


def test_feature_archive_round_trip(tmp_path):
    g = np.random.default_rng(6)
    seqs = [_seq(g.normal(size=(g.integers(0, 12), 5)).astype(np.float32), "s", f"utt{i}") for i in range(4)]
    write_feature_archive(tmp_path / "f.ark", seqs)
    back = read_feature_archive(tmp_path / "f.ark", {"utt1": "spkX"})
    assert [b.utterance_id for b in back] == [s.utterance_id for s in seqs]
    assert back[1].speaker_id == "spkX"
    for a, b in zip(seqs, back):
        assert np.array_equal(a.frames, b.frames)


def test_archive_rejects_corruption(tmp_path):
    write_archive(tmp_path / "a.ark", [("k", np.ones((3, 2)))])
    data = (tmp_path / "a.ark").read_bytes()
    (tmp_path / "trunc.ark").write_bytes(data[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_archive(tmp_path / "trunc.ark")
    (tmp_path / "magic.ark").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError, match="magic"):
        read_archive(tmp_path / "magic.ark")


def test_speaker_stats_round_trip(tmp_path):
    stats = SpeakerStats({"a": np.arange(3.0)}, {"a": np.ones(3)}, np.zeros(3), np.full(3, 2.0))
    write_speaker_stats(tmp_path / "s.ark", stats)
    back = read_speaker_stats(tmp_path / "s.ark")
    assert np.array_equal(back.mean["a"], stats.mean["a"])
    assert np.array_equal(back.global_std, stats.global_std)


def test_featurize_manifest_end_to_end(tmp_path):
    g = np.random.default_rng(7)
    entries = []
    for i, rate in enumerate((8000, 16000, 8000)):
        p = tmp_path / f"u{i}.wav"
        write_wav(p, Waveform(g.normal(size=rate) * 0.1, rate))
        entries.append(ManifestEntry(f"u{i}", str(p), f"s{i % 2}", "ab"))
    seqs, stats = featurize_manifest(entries)
    assert [s.num_frames for s in seqs] == [98, 98, 98]
    assert set(stats.mean) == {"s0", "s1"}
