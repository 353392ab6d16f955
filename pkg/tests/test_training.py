import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpc_speech.model import Vocab, init_asr_model
from mpc_speech.numerics import Rng, Tensor
from mpc_speech.synthetic import ALPHABET, corpus_features, make_corpus
from mpc_speech.training import (AdamState, LabeledUtterance, PlateauState, RunConfig, ScheduleConfig,
                                 adam_step, bucket_batches, check_transcripts, clip_gradients, finetune,
                                 is_validation, load_config, lr_at_step, metrics_line, pad, parse_config,
                                 plateau_update, pretrain, scheduled_sample)

FULL_SCALE = ScheduleConfig(k=0.5, d_model=256, warmup_n=8000)


@pytest.fixture(scope="module")
def tiny_corpus():
    corpus = make_corpus(24, seed=3)
    feats = corpus_features(corpus)
    return corpus, feats


# ---------------------------------------------------------------------------
# schedule


def test_schedule_frozen_values():
    assert lr_at_step(1, FULL_SCALE) == pytest.approx(1.1180339887498948e-05, rel=1e-12)
    assert lr_at_step(8000, FULL_SCALE) == pytest.approx(0.08944271909999159, rel=1e-12)
    assert lr_at_step(32000, FULL_SCALE) == pytest.approx(lr_at_step(8000, FULL_SCALE) / 2, rel=1e-12)


def test_schedule_canonical_variant():
    canon = ScheduleConfig(k=1.0, d_model=512, warmup_n=4000, canonical_noam=True)
    assert lr_at_step(4000, canon) == pytest.approx(512 ** -0.5 * 4000 ** -0.5, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20000))
def test_schedule_rises_then_falls(warmup):
    cfg = ScheduleConfig(warmup_n=warmup)
    peak = lr_at_step(warmup, cfg)
    assert lr_at_step(max(1, warmup - 1), cfg) <= peak
    assert lr_at_step(warmup + 1, cfg) <= peak


def test_schedule_rejects_step_zero():
    with pytest.raises(ValueError):
        lr_at_step(0, FULL_SCALE)


# ---------------------------------------------------------------------------
# Adam and clipping


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first update lr * sign(g) up to eps
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.array([0.3, -5.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], rtol=1e-8)


def test_adam_weight_decay_adds_to_gradient():
    p = {"w": Tensor(np.array([2.0]))}
    adam_step(p, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=1e-5)
    g = 1e-5 * 2.0
    assert p["w"].data[0] == pytest.approx(2.0 - 0.1 * g / (g + 1e-9), rel=1e-12)


def test_adam_skips_non_finite():
    p = {"w": Tensor(np.array([1.0]))}
    state = AdamState()
    assert not adam_step(p, {"w": np.array([np.nan])}, state, lr=0.1)
    assert p["w"].data[0] == 1.0 and state.step == 0


def test_clip_gradients_to_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_gradients(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    small = {"a": np.array([0.1])}
    clip_gradients(small, 5.0)
    assert small["a"][0] == 0.1


# ---------------------------------------------------------------------------
# plateau and scheduled sampling


def test_plateau_fires_after_five_flat_epochs_only_once():
    state = PlateauState()
    actions = [plateau_update(state, v) for v in [5, 4, 4, 4.5, 4, 4, 4, 3, 3, 3, 3, 3, 3]]
    assert actions.index("divide_lr") == 6
    assert actions.count("divide_lr") == 1


def test_scheduled_sample_rates():
    gold = np.zeros(20000, dtype=int)
    model = np.ones(20000, dtype=int)
    frac = scheduled_sample(gold, model, 0.1, Rng(0)).mean()
    assert abs(frac - 0.1) < 0.01
    assert scheduled_sample(gold, model, 0.0, Rng(0)).sum() == 0
    assert scheduled_sample(gold, model, 1.0, Rng(0)).sum() == 20000
    with pytest.raises(ValueError):
        scheduled_sample(gold, model, 1.5, Rng(0))


# ---------------------------------------------------------------------------
# configuration


def test_parse_config_types_and_comments():
    cfg = parse_config("objective = apc  # baseline\nk=0.1\ncanonical_noam = yes\nseed = 4\n")
    assert cfg.objective == "apc" and cfg.k == 0.1 and cfg.canonical_noam is True and cfg.seed == 4


@pytest.mark.parametrize("text, fragment", [
    ("bogus = 1", "unknown config key"),
    ("k", "expected"),
    ("seed = x", "bad value"),
    ("objective = bert", "objective"),
])
def test_parse_config_rejects(text, fragment):
    with pytest.raises(ValueError, match=fragment):
        parse_config(text)


def test_load_config_reports_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("warmup = 3\n")
    with pytest.raises(ValueError, match="run.cfg:1"):
        load_config(path)


def test_toy_model_configs():
    enc, dec = RunConfig().model_configs()
    assert (enc.num_blocks, enc.d_model, enc.d_ff, enc.num_heads) == (2, 32, 64, 2)
    assert dec.num_blocks == 1
    enc, _ = RunConfig(profile="paper").model_configs()
    assert (enc.num_blocks, enc.d_model, enc.d_ff, enc.num_heads) == (12, 256, 2048, 4)


# ---------------------------------------------------------------------------
# batching and logging


def test_bucket_batches_cover_all_and_group_lengths():
    lengths = [9, 1, 5, 3, 7, 2, 8]
    batches = bucket_batches(lengths, 3, Rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(7))
    spans = [max(lengths[i] for i in b) - min(lengths[i] for i in b) for b in bucket_batches(lengths, 3, None)]
    assert max(spans) <= 4


def test_pad_zero_fills():
    x, lengths = pad([np.ones((2, 3)), np.ones((4, 3))])
    assert x.shape == (2, 4, 3) and lengths.tolist() == [2, 4]
    assert np.all(x[0, 2:] == 0)


def test_validation_split_is_stable_and_roughly_sized():
    ids = [f"utt{i:05d}" for i in range(4000)]
    chosen = [i for i in ids if is_validation(i, 0.05)]
    assert chosen == [i for i in ids if is_validation(i, 0.05)]
    assert 0.035 < len(chosen) / len(ids) < 0.065


def test_metrics_line_format():
    line = metrics_line(10, 2, "pretrain", 0.5, 1e-3, val_loss=None, grad_norm=2.0)
    assert line == "step=10 epoch=2 phase=pretrain loss=0.5 lr=0.001 grad_norm=2"


def test_check_transcripts_drops_bad(caplog):
    feats = corpus_features(make_corpus(3, seed=0))
    data = [LabeledUtterance(feats[0], ""), LabeledUtterance(feats[1], "abz"), LabeledUtterance(feats[2], "ab")]
    kept = check_transcripts(data, Vocab("ab"))
    assert [u.text for u in kept] == ["ab"]
    assert "empty transcript" in caplog.text and "out-of-vocabulary" in caplog.text


# ---------------------------------------------------------------------------
# training loops


def test_mpc_pretrain_is_deterministic_and_learns(tiny_corpus, tmp_path):
    _, feats = tiny_corpus
    cfg = RunConfig(total_steps=30, batch_size=8, k=0.02, warmup_n=10, seed=1, log_every=5)
    a = pretrain(cfg, feats, out_dir=tmp_path)
    b = pretrain(cfg, feats)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params.names())
    assert [s for s, _ in a.checkpoints] == [3 * i for i in range(1, 11)]
    assert (tmp_path / "pretrain_step30.mpck").exists()
    losses = [float(line.split("loss=")[1].split()[0]) for line in a.metrics]
    assert losses[-1] < losses[0]


@pytest.mark.parametrize("objective", ["apc", "cpc"])
def test_recurrent_pretrain_runs(tiny_corpus, objective):
    _, feats = tiny_corpus
    cfg = RunConfig(objective=objective, total_steps=4, batch_size=8, rnn_hidden=8, seed=0, log_every=1)
    result = pretrain(cfg, feats)
    losses = [float(line.split("loss=")[1].split()[0]) for line in result.metrics]
    assert len(losses) == 4 and all(math.isfinite(v) for v in losses)


def test_pretrain_different_seeds_differ(tiny_corpus):
    _, feats = tiny_corpus
    a = pretrain(RunConfig(total_steps=3, batch_size=8, seed=0), feats).params
    b = pretrain(RunConfig(total_steps=3, batch_size=8, seed=1), feats).params
    assert not np.array_equal(a["rec.w"].data, b["rec.w"].data)


def test_finetune_reduces_loss_and_returns_best(tiny_corpus):
    corpus, feats = tiny_corpus
    data = [LabeledUtterance(f, u.text) for f, u in zip(feats, corpus)]
    cfg = RunConfig(epochs=3, batch_size=8, k=0.05, warmup_n=5, seed=0)
    enc, dec = cfg.model_configs()
    seen = []
    result = finetune(cfg, init_asr_model(enc, dec, Vocab(ALPHABET), Rng(0)), data[:16], data[16:],
                      on_epoch=lambda e, p, v: seen.append(e))
    assert seen == [1, 2, 3]
    assert result.val_losses[-1] < result.val_losses[0]
    assert result.best_epoch == int(np.argmin(result.val_losses)) + 1


def test_pretrain_rejects_empty():
    with pytest.raises(ValueError):
        pretrain(RunConfig(), [])
