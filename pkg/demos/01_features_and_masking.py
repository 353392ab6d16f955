"""
From waveform to masked encoder input
=====================================

A synthetic utterance is turned into FBANK frames, stacked eight-fold, and
then masked the way MPC pre-training sees it.
"""

import numpy as np

from mpc_speech.features import fbank, stack_frames
from mpc_speech.numerics import Rng
from mpc_speech.objectives import MaskPolicy, apply_mask, sample_mask_plan
from mpc_speech.synthetic import corpus_features, make_corpus

# one generated utterance: a harmonic voice whose formants spell the text
utt = make_corpus(1, seed=0)[0]
print("text:", utt.text, "| samples:", utt.waveform.samples.size, "at", utt.waveform.sample_rate, "Hz")

# 25 ms windows every 10 ms, 40 mel bins
raw = fbank(utt.waveform)
print("fbank frames:", raw.frames.shape)

# per-speaker normalised features are what training consumes
feats = corpus_features([utt])[0]
print("mean / std after normalisation: %.3f / %.3f" % (feats.frames.mean(), feats.frames.std()))

# eight neighbouring frames become one 320-dim encoder position
stacked = stack_frames(feats, 8)
print("stacked:", stacked.frames.shape)

# 15% of positions are selected; each becomes zero, a random other position, or stays
plan = sample_mask_plan(stacked.num_frames, MaskPolicy(), Rng(0).substream("demo"))
print("selected positions (position, action, source):")
print(plan.describe())

targets = apply_mask(stacked.frames, plan)
changed = np.flatnonzero(np.any(targets.masked != targets.original, axis=1))
print("positions whose input changed:", changed.tolist())
