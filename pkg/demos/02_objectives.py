"""
The three pre-training objectives on one batch
==============================================

MPC reconstructs masked positions with a Transformer encoder; APC predicts
frames three steps ahead with a GRU; CPC scores the true future latent
against negatives.  The APC gradient is then checked by finite differences.
"""

import numpy as np

from mpc_speech.model import RecurrentConfig, init_recurrent_model, recurrent_forward
from mpc_speech.numerics import Rng, finite_diff_check
from mpc_speech.objectives import apc_loss
from mpc_speech.synthetic import corpus_features, make_corpus
from mpc_speech.training import RunConfig, pretrain

feats = corpus_features(make_corpus(16, seed=1))

# a handful of steps per objective; losses are logged every step
for objective in ("mpc", "apc", "cpc"):
    cfg = RunConfig(objective=objective, total_steps=5, batch_size=8, k=0.02, warmup_n=5,
                    rnn_hidden=16, log_every=1)
    result = pretrain(cfg, feats)
    print(objective, "->", result.metrics[-1])

# the APC gradient agrees with central differences; noise_floor=0 shows the raw error
params = init_recurrent_model(RecurrentConfig(input_dim=40, hidden=8), "apc", Rng(0))
x = np.stack([f.frames[:20] for f in feats[:2]])


def apc_objective():
    y, _ = recurrent_forward(params, "apc", x)
    return apc_loss(x, y, n=3, reduction="mean")


err = finite_diff_check(apc_objective, params.tensors, max_entries=5, noise_floor=0.0)
print(f"APC max relative gradient error {err:.2e}")
