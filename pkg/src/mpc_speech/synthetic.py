"""Deterministic synthetic speech-like corpus.

Each character is a voiced segment: a harmonic series at the speaker's pitch
whose spectral envelope peaks at two character-specific formants.  Speakers
differ in pitch, formant scaling, loudness and background noise, so the
acoustic realisation of a character varies while its label is fixed.
Utterances are generated directly at 8 kHz.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureConfig, FeatureSequence, Waveform, fbank, per_speaker_normalize
from .numerics import Rng

ALPHABET = "abcdefgh"


@dataclass
class SyntheticUtterance:
    waveform: Waveform
    text: str


def character_formants(alphabet: str = ALPHABET) -> dict[str, tuple[float, float]]:
    """Two spectral-envelope peaks (Hz) per character, spread over 300-3300 Hz."""
    n = len(alphabet)
    low = np.linspace(350.0, 1100.0, n)
    high = np.linspace(1500.0, 3200.0, n)
    perm = [(3 * i + 1) % n for i in range(n)] if n % 3 else list(reversed(range(n)))
    return {c: (float(low[i]), float(high[perm[i]])) for i, c in enumerate(alphabet)}


def _segment(f0: float, formants: tuple[float, float], dur: int, sample_rate: int, rng: Rng) -> np.ndarray:
    t = np.arange(dur) / sample_rate
    harmonics = np.arange(1, int(3800 // f0) + 1) * f0
    envelope = 0.05 + sum(np.exp(-0.5 * ((harmonics - f) / 160.0) ** 2) for f in formants)
    phases = rng.uniform(0, 2 * np.pi, size=harmonics.size)
    wave_ = (envelope[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :] + phases[:, None])).sum(0)
    return wave_ * np.sin(np.pi * np.arange(dur) / dur) ** 0.5 / np.sqrt(np.sum(envelope ** 2))


def synth_utterance(text: str, speaker: int, rng: Rng, sample_rate: int = 8000,
                    alphabet: str = ALPHABET) -> np.ndarray:
    """Harmonic source at the speaker's pitch, shaped by each character's formants."""
    spk = Rng(1000 + speaker).substream("speaker")
    f0 = spk.uniform(110.0, 240.0)
    shift = spk.uniform(0.94, 1.06)
    gain = spk.uniform(0.2, 0.5)
    noise = spk.uniform(0.001, 0.004)
    formants = character_formants(alphabet)
    ms = sample_rate // 1000
    pieces = [np.zeros(int(rng.integers(40, 120)) * ms)]
    for ch in text:
        dur = int(rng.integers(150, 260)) * ms
        peaks = tuple(f * shift * rng.uniform(0.98, 1.02) for f in formants[ch])
        pieces.append(gain * _segment(f0 * rng.uniform(0.95, 1.05), peaks, dur, sample_rate, rng))
        pieces.append(np.zeros(int(rng.integers(30, 80)) * ms))
    x = np.concatenate(pieces)
    x = x + noise * rng.normal(size=x.size)
    return np.clip(x, -1.0, 1.0)


def make_corpus(num_utterances: int, seed: int, num_speakers: int = 20, min_chars: int = 3,
                max_chars: int = 6, alphabet: str = ALPHABET, prefix: str = "utt") -> list[SyntheticUtterance]:
    """Generate ``num_utterances`` labelled utterances; identical for identical arguments."""
    root = Rng(seed).substream("corpus", prefix)
    out = []
    for i in range(num_utterances):
        r = root.substream(i)
        n = int(r.integers(min_chars, max_chars + 1))
        text = "".join(alphabet[j] for j in r.integers(0, len(alphabet), size=n))
        speaker = int(r.integers(0, num_speakers))
        samples = synth_utterance(text, speaker, r, alphabet=alphabet)
        out.append(SyntheticUtterance(Waveform(samples, 8000, f"{prefix}{i:05d}", f"spk{speaker:03d}"), text))
    return out


def corpus_features(corpus: list[SyntheticUtterance], cfg: FeatureConfig | None = None) -> list[FeatureSequence]:
    """FBANK with per-speaker normalisation over the given corpus."""
    seqs = [fbank(u.waveform, cfg) for u in corpus]
    normed, _ = per_speaker_normalize(seqs)
    return normed
