"""Audio ingestion, log-mel filterbank extraction and frame stacking."""

from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

PIPELINE_RATE = 8000
ARCHIVE_MAGIC = b"MPCF"
ARCHIVE_VERSION = 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    utterance_id: str = ""
    speaker_id: str = ""


@dataclass
class FeatureSequence:
    frames: np.ndarray  # T x d
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    utterance_id: str = ""
    speaker_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class FeatureConfig:
    d_mel: int = 40
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int | None = None  # next power of two >= window length
    mel_low_hz: float = 20.0
    mel_high_hz: float | None = None  # Nyquist
    log_floor: float = 1e-10
    preemphasis: float = 0.97

    def validate(self, sample_rate: int) -> None:
        high = self.mel_high_hz if self.mel_high_hz is not None else sample_rate / 2
        if not (0 <= self.mel_low_hz < high <= sample_rate / 2):
            raise ValueError(f"need 0 <= mel_low_hz < mel_high_hz <= {sample_rate / 2}, "
                             f"got {self.mel_low_hz}, {high}")
        if self.d_mel < 1:
            raise ValueError("d_mel must be positive")


@dataclass
class SpeakerStats:
    mean: dict[str, np.ndarray] = field(default_factory=dict)
    std: dict[str, np.ndarray] = field(default_factory=dict)
    global_mean: np.ndarray | None = None
    global_std: np.ndarray | None = None


@dataclass
class ManifestEntry:
    utterance_id: str
    wav_path: str
    speaker_id: str
    transcript: str = ""


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, speaker_id: str = "", utterance_id: str | None = None) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise ValueError(f"{path}: compressed WAV ({w.getcomptype()}) is not supported")
            if channels != 1:
                raise ValueError(f"{path}: expected mono audio, found {channels} channels")
            if width != 2:
                raise ValueError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if rate not in (8000, 16000):
        raise ValueError(f"{path}: sample rate {rate} Hz is not supported (8000 or 16000)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    uid = utterance_id if utterance_id is not None else path.stem
    return Waveform(samples, rate, uid, speaker_id)


def write_wav(path, wav: Waveform) -> None:
    """Write ``wav`` as 16-bit PCM, clipping to the representable range."""
    ints = np.clip(np.round(np.asarray(wav.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(wav.sample_rate))
        w.writeframes(ints.tobytes())


def read_manifest(path) -> list[ManifestEntry]:
    """Parse ``utterance_id<TAB>wav_path<TAB>speaker_id<TAB>transcript`` lines.

    Relative wav paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 3:
            parts.append("")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        uid, wav_path, spk, text = parts
        wp = Path(wav_path)
        if not wp.is_absolute():
            wp = path.parent / wp
        entries.append(ManifestEntry(uid, str(wp), spk, text))
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    lines = [f"{e.utterance_id}\t{e.wav_path}\t{e.speaker_id}\t{e.transcript}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# signal processing


def _halfband_filter(numtaps: int = 255) -> np.ndarray:
    return signal.firwin(numtaps, 3800.0, window=("kaiser", 8.0), fs=16000.0)


def resample(w: Waveform, target_rate: int = PIPELINE_RATE) -> Waveform:
    """Downsample 16 kHz -> 8 kHz with a zero-phase windowed-sinc low-pass.

    Output length is ``ceil(len / 2)``.  A same-rate call returns a copy.
    """
    if w.sample_rate == target_rate:
        return Waveform(np.array(w.samples, dtype=np.float64), target_rate, w.utterance_id, w.speaker_id)
    if (w.sample_rate, target_rate) != (16000, 8000):
        raise ValueError(f"unsupported resampling {w.sample_rate} Hz -> {target_rate} Hz")
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        y = x.copy()
    else:
        # padtype="line" keeps DC and slow trends intact at the edges
        y = signal.resample_poly(x, 1, 2, window=_halfband_filter(), padtype="line")
    return Waveform(y, target_rate, w.utterance_id, w.speaker_id)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(d_mel: int, fft_size: int, sample_rate: int, low_hz: float, high_hz: float):
    """Triangular HTK-style mel filters, shape ``d_mel x (fft_size//2 + 1)``.

    Returns the filter matrix and the centre frequency (Hz) of each filter.
    """
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), d_mel + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, centre, upper = hz_points[:-2, None], hz_points[1:-1, None], hz_points[2:, None]
    rising = (bin_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - bin_freqs[None, :]) / (upper - centre)
    filters = np.maximum(0.0, np.minimum(rising, falling))
    return filters, hz_points[1:-1]


def frame_count(num_samples: int, window: int, hop: int) -> int:
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // hop


def fbank(w: Waveform, cfg: FeatureConfig | None = None) -> FeatureSequence:
    """Log mel-filterbank energies of ``w``.

    Pre-emphasis, Hamming-windowed frames, power spectrum, mel filters, then
    ``log(max(energy, log_floor))``.  Audio shorter than one window yields an
    empty ``0 x d_mel`` sequence.
    """
    cfg = cfg or FeatureConfig()
    sr = int(w.sample_rate)
    cfg.validate(sr)
    window = int(round(cfg.frame_length_ms * sr / 1000.0))
    hop = int(round(cfg.frame_shift_ms * sr / 1000.0))
    nfft = cfg.fft_size or 1 << (window - 1).bit_length()
    high = cfg.mel_high_hz if cfg.mel_high_hz is not None else sr / 2
    x = np.asarray(w.samples, dtype=np.float64)
    T = frame_count(x.size, window, hop)
    meta = dict(frame_shift_ms=cfg.frame_shift_ms, frame_length_ms=cfg.frame_length_ms,
                utterance_id=w.utterance_id, speaker_id=w.speaker_id)
    if T == 0:
        return FeatureSequence(np.zeros((0, cfg.d_mel)), **meta)
    emph = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    idx = np.arange(window)[None, :] + hop * np.arange(T)[:, None]
    frames = emph[idx] * np.hamming(window)[None, :]
    power = np.abs(np.fft.rfft(frames, n=nfft, axis=1)) ** 2
    filters, _ = mel_filterbank(cfg.d_mel, nfft, sr, cfg.mel_low_hz, high)
    energies = power @ filters.T
    return FeatureSequence(np.log(np.maximum(energies, cfg.log_floor)), **meta)


# ---------------------------------------------------------------------------
# normalisation and stacking


def per_speaker_normalize(seqs: Sequence[FeatureSequence]) -> tuple[list[FeatureSequence], SpeakerStats]:
    """Per speaker and mel dimension, subtract the mean and divide by the std.

    Returns the normalised sequences and the statistics for reuse with
    :func:`apply_speaker_stats` on held-out data.
    """
    by_speaker: dict[str, list[np.ndarray]] = {}
    for s in seqs:
        if not s.speaker_id:
            raise ValueError(f"utterance {s.utterance_id!r} has no speaker_id")
        by_speaker.setdefault(s.speaker_id, []).append(s.frames)
    stats = SpeakerStats()
    for spk, chunks in by_speaker.items():
        allf = np.concatenate(chunks, axis=0)
        if allf.shape[0] == 0:
            raise ValueError(f"speaker {spk!r} has no frames")
        stats.mean[spk] = allf.mean(axis=0)
        stats.std[spk] = np.maximum(allf.std(axis=0), 1e-8)
    everything = np.concatenate([s.frames for s in seqs], axis=0)
    stats.global_mean = everything.mean(axis=0)
    stats.global_std = np.maximum(everything.std(axis=0), 1e-8)
    return apply_speaker_stats(seqs, stats), stats


def apply_speaker_stats(seqs: Sequence[FeatureSequence], stats: SpeakerStats) -> list[FeatureSequence]:
    out = []
    for s in seqs:
        if s.speaker_id in stats.mean:
            mu, sd = stats.mean[s.speaker_id], stats.std[s.speaker_id]
        else:
            log.warning("speaker %r unseen in statistics; using global stats for %s",
                        s.speaker_id, s.utterance_id)
            mu, sd = stats.global_mean, stats.global_std
        out.append(FeatureSequence((s.frames - mu) / sd, s.frame_shift_ms, s.frame_length_ms,
                                   s.utterance_id, s.speaker_id))
    return out


def stack_frames(f: FeatureSequence, factor: int) -> FeatureSequence:
    """Concatenate ``factor`` consecutive frames; trailing remainder is dropped."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    T, d = f.frames.shape
    keep = (T // factor) * factor
    stacked = f.frames[:keep].reshape(T // factor, d * factor)
    return FeatureSequence(stacked, f.frame_shift_ms * factor, f.frame_length_ms,
                           f.utterance_id, f.speaker_id)


# ---------------------------------------------------------------------------
# binary feature archive


def _pack_record(key: str, matrix: np.ndarray) -> bytes:
    kb = key.encode("utf-8")
    m = np.ascontiguousarray(matrix, dtype="<f4")
    T, d = m.shape
    return (ARCHIVE_MAGIC + struct.pack("<II", ARCHIVE_VERSION, len(kb)) + kb
            + struct.pack("<II", T, d) + m.tobytes())


def write_archive(path, records: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write ``(key, T x d matrix)`` records as little-endian float32."""
    with open(path, "wb") as fh:
        for key, matrix in records:
            fh.write(_pack_record(key, np.atleast_2d(matrix) if np.ndim(matrix) < 2 else matrix))


def read_archive(path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos, out = 0, []
    while pos < len(data):
        if data[pos:pos + 4] != ARCHIVE_MAGIC:
            raise ValueError(f"{path}: bad record magic at byte {pos}")
        version, klen = struct.unpack_from("<II", data, pos + 4)
        if version != ARCHIVE_VERSION:
            raise ValueError(f"{path}: unsupported archive version {version}")
        pos += 12
        key = data[pos:pos + klen].decode("utf-8")
        pos += klen
        T, d = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = 4 * T * d
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated record {key!r}")
        m = np.frombuffer(data, dtype="<f4", count=T * d, offset=pos).reshape(T, d)
        out.append((key, m.astype(np.float64)))
        pos += nbytes
    return out


def write_feature_archive(path, seqs: Iterable[FeatureSequence]) -> None:
    write_archive(path, ((s.utterance_id, s.frames) for s in seqs))


def read_feature_archive(path, speakers: dict[str, str] | None = None) -> list[FeatureSequence]:
    speakers = speakers or {}
    return [FeatureSequence(m, utterance_id=k, speaker_id=speakers.get(k, ""))
            for k, m in read_archive(path)]


def write_speaker_stats(path, stats: SpeakerStats) -> None:
    records = [(spk, np.stack([stats.mean[spk], stats.std[spk]])) for spk in stats.mean]
    if stats.global_mean is not None:
        records.append(("", np.stack([stats.global_mean, stats.global_std])))
    write_archive(path, records)


def read_speaker_stats(path) -> SpeakerStats:
    stats = SpeakerStats()
    for key, m in read_archive(path):
        if m.shape[0] != 2:
            raise ValueError(f"{path}: speaker record {key!r} must have 2 rows")
        if key == "":
            stats.global_mean, stats.global_std = m[0], m[1]
        else:
            stats.mean[key], stats.std[key] = m[0], m[1]
    return stats


def featurize_manifest(entries: Sequence[ManifestEntry], cfg: FeatureConfig | None = None,
                       normalize: bool = True) -> tuple[list[FeatureSequence], SpeakerStats | None]:
    """Load, resample to 8 kHz and extract FBANK for every manifest entry."""
    seqs = []
    for e in entries:
        wav = resample(load_wav(e.wav_path, e.speaker_id, e.utterance_id))
        seqs.append(fbank(wav, cfg))
    if not normalize:
        return seqs, None
    return per_speaker_normalize(seqs)
