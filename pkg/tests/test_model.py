import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpc_speech import numerics as nx
from mpc_speech.model import (BLANK, EOS, SOS, DecoderConfig, EncoderConfig, ModelParams, RecurrentConfig, Vocab,
                              ctc_log_probs, ctc_loss, ctc_loss_batch, ctc_nll, decoder_forward,
                              encoder_forward, encoder_param_count, init_asr_model, init_finetune_model,
                              init_pretrain_model, init_recurrent_model, load_checkpoint, min_ctc_frames,
                              reconstruction_head, recurrent_forward, save_checkpoint, toy_profile)
from mpc_speech.numerics import Rng, Tensor

from oracles import ctc_nll_enum

VOCAB = Vocab("abcd")


def _toy():
    enc, dec = toy_profile(d_mel=6)
    return enc, dec


def test_vocab_layout_and_oov():
    assert VOCAB.symbols[:3] == ["<blank>", "<sos>", "<eos>"] and len(VOCAB) == 7
    assert VOCAB.encode("bad") == [4, 3, 6]
    assert VOCAB.decode([SOS, 4, 3, EOS, BLANK]) == "ba"
    with pytest.raises(KeyError):
        VOCAB.encode("abz")


def test_encoder_shapes_pretrain_and_finetune():
    enc, dec = _toy()
    pre = init_pretrain_model(enc, Rng(0))
    x = np.random.default_rng(0).normal(size=(2, 5, enc.input_dim("pretrain")))
    h, lengths = encoder_forward(pre, x, "pretrain", np.array([5, 3]))
    assert h.shape == (2, 5, 32) and lengths.tolist() == [5, 3]
    assert reconstruction_head(pre, h).shape == x.shape
    asr = init_asr_model(enc, dec, VOCAB, Rng(0))
    raw = np.random.default_rng(1).normal(size=(2, 43, 6))
    h, lengths = encoder_forward(asr, raw, "finetune", np.array([43, 17]))
    assert h.shape == (2, 5, 32) and lengths.tolist() == [5, 2]


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 257))
def test_finetune_length_is_floor_halved_three_times(T):
    enc, dec = _toy()
    asr = init_asr_model(enc, dec, VOCAB, Rng(0))
    with nx.no_grad():
        h, lengths = encoder_forward(asr, np.zeros((T, 6)), "finetune")
    assert h.shape[0] == ((T // 2) // 2) // 2 == int(lengths[0])


def test_encoder_rejects_wrong_input_dim():
    enc, _ = _toy()
    with pytest.raises(ValueError):
        encoder_forward(init_pretrain_model(enc, Rng(0)), np.zeros((4, 7)), "pretrain")


def test_padding_does_not_leak():
    enc, _ = _toy()
    p = init_pretrain_model(enc, Rng(3))
    g = np.random.default_rng(2)
    x = g.normal(size=(1, 6, enc.input_dim("pretrain")))
    padded = np.concatenate([x, g.normal(size=(1, 3, x.shape[2]))], axis=1)
    with nx.no_grad():
        a, _ = encoder_forward(p, x, "pretrain", np.array([6]))
        b, _ = encoder_forward(p, padded, "pretrain", np.array([6]))
    np.testing.assert_allclose(a.data[0], b.data[0, :6], atol=1e-12)


def test_encoder_is_position_sensitive():
    enc, dec = _toy()
    asr = init_asr_model(enc, dec, VOCAB, Rng(4))
    x = np.random.default_rng(4).normal(size=(64, 6))
    perm = np.random.default_rng(5).permutation(64)
    with nx.no_grad():
        a, _ = encoder_forward(asr, x, "finetune")
        b, _ = encoder_forward(asr, x[perm], "finetune")
    assert not np.allclose(a.data, b.data)


def test_decoder_is_causal():
    enc, dec = _toy()
    asr = init_asr_model(enc, dec, VOCAB, Rng(5))
    mem = np.random.default_rng(6).normal(size=(4, 32))
    toks = np.array([SOS, 3, 4, 5])
    changed = toks.copy()
    changed[3] = 6
    with nx.no_grad():
        a = decoder_forward(asr, mem, toks).data
        b = decoder_forward(asr, mem, changed).data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert a.shape == (4, len(VOCAB))


def test_ctc_log_probs_normalised():
    enc, dec = _toy()
    asr = init_asr_model(enc, dec, VOCAB, Rng(6))
    lp = ctc_log_probs(asr, np.random.default_rng(0).normal(size=(5, 32))).data
    np.testing.assert_allclose(np.logaddexp.reduce(lp, axis=-1), 0.0, atol=1e-10)
    asr.tensors["ctc.w"] = Tensor(np.zeros_like(asr["ctc.w"].data))
    lp = ctc_log_probs(asr, np.ones((3, 32))).data
    np.testing.assert_allclose(lp, -math.log(len(VOCAB)), atol=1e-12)


# ---------------------------------------------------------------------------
# CTC


def test_ctc_worked_examples():
    lp = np.log(np.array([[0.5, 0.5]]))
    assert ctc_loss(lp, [1]).item() == pytest.approx(math.log(2), abs=1e-12)
    uniform = np.log(np.full((2, 3), 1 / 3))
    assert ctc_loss(uniform, [1]).item() == pytest.approx(math.log(3), abs=1e-12)
    assert ctc_loss(uniform, []).item() == pytest.approx(math.log(9), abs=1e-12)


def test_ctc_matches_enumeration():
    g = np.random.default_rng(0)
    for _ in range(60):
        T, V = int(g.integers(1, 6)), int(g.integers(2, 5))
        lp = np.log(g.dirichlet(np.ones(V), size=T))
        labels = list(g.integers(1, V, size=int(g.integers(0, 4))))
        expected = ctc_nll_enum(lp, labels)
        got = ctc_loss(lp, labels).item()
        if math.isinf(expected):
            assert math.isinf(got)
        else:
            assert got == pytest.approx(expected, abs=1e-10)


def test_ctc_infeasible_is_inf_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        loss = ctc_loss(np.log(np.full((2, 3), 1 / 3)), [1, 1])
    assert math.isinf(loss.item())
    assert "infeasible" in caplog.text
    assert min_ctc_frames([1, 1, 2]) == 4
    assert math.isinf(ctc_nll(np.zeros((0, 3)), [1]))


def test_ctc_batch_is_mean():
    g = np.random.default_rng(1)
    lp = np.log(g.dirichlet(np.ones(3), size=(2, 4)))
    labels = [[1], [2, 1]]
    batch = ctc_loss_batch(Tensor(lp), np.array([4, 3]), labels).item()
    expected = (ctc_nll(lp[0], [1]) + ctc_nll(lp[1, :3], [2, 1])) / 2
    assert batch == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# recurrent model


def test_recurrent_is_causal():
    p = init_recurrent_model(RecurrentConfig(input_dim=3, hidden=5), "apc", Rng(0))
    x = np.random.default_rng(0).normal(size=(8, 3))
    y = x.copy()
    y[5] += 10
    a, _ = recurrent_forward(p, "apc", x)
    b, _ = recurrent_forward(p, "apc", y)
    np.testing.assert_array_equal(a.data[:5], b.data[:5])
    assert not np.allclose(a.data[5:], b.data[5:])


def test_recurrent_zero_weights_constant_output():
    p = init_recurrent_model(RecurrentConfig(input_dim=3, hidden=4), "apc", Rng(0))
    for n in p.names():
        p.tensors[n] = Tensor(np.zeros_like(p[n].data))
    p.tensors["apc.out.b"] = Tensor(np.arange(3.0))
    out, _ = recurrent_forward(p, "apc", np.random.default_rng(1).normal(size=(6, 3)))
    np.testing.assert_array_equal(out.data, np.tile(np.arange(3.0), (6, 1)))


def test_recurrent_rejects_unknown_objective():
    with pytest.raises(ValueError):
        init_recurrent_model(RecurrentConfig(), "mpc", Rng(0))


# ---------------------------------------------------------------------------
# parameters and transfer


def test_param_count_formula():
    for cfg in (toy_profile()[0], EncoderConfig(num_blocks=3, d_model=8, d_ff=16, num_heads=2, d_mel=5,
                                                 stack_factor=4, downsample_after=(1,))):
        assert init_pretrain_model(cfg, Rng(0)).num_parameters() == encoder_param_count(cfg)


def test_paper_profile_param_count():
    enc = EncoderConfig()
    d, f = 256, 2048
    per_block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    assert encoder_param_count(enc) == 12 * per_block + 2 * d + 2 * 320 * d + d + 320


def test_finetune_transfer_contract():
    enc, dec = _toy()
    pre = init_pretrain_model(enc, Rng(1))
    a = init_finetune_model(pre, enc, dec, VOCAB, Rng(9))
    b = init_finetune_model(pre, enc, dec, VOCAB, Rng(9))
    for n in pre.names("enc.block"):
        assert np.array_equal(a[n].data, pre[n].data)
    assert "rec.w" not in a and "enc.pre_in.w" not in a
    for n in a.names():
        assert np.array_equal(a[n].data, b[n].data)
    assert "ctc.w" in a and "dec.out.w" in a and "enc.ds2.w" in a


def test_finetune_rejects_mismatched_checkpoint():
    enc, dec = _toy()
    other = EncoderConfig(num_blocks=2, d_model=16, d_ff=64, num_heads=2, d_mel=6, downsample_after=(0, 0, 0))
    with pytest.raises(ValueError, match="enc.block0"):
        init_finetune_model(init_pretrain_model(other, Rng(0)), enc, dec, VOCAB, Rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=30, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(num_blocks=2, downsample_after=(2,))
    with pytest.raises(ValueError):
        DecoderConfig(vocab_size=2)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    enc, dec = _toy()
    asr = init_asr_model(enc, dec, VOCAB, Rng(2))
    save_checkpoint(tmp_path / "m.mpck", asr)
    back = load_checkpoint(tmp_path / "m.mpck")
    assert back.encoder == asr.encoder and back.decoder == asr.decoder and back.vocab == asr.vocab
    x = np.random.default_rng(3).normal(size=(40, 6))
    with nx.no_grad():
        h1, _ = encoder_forward(asr, x, "finetune")
        h2, _ = encoder_forward(back, x, "finetune")
    assert h1.data.tobytes() == h2.data.tobytes()
    assert (tmp_path / "m.mpck").read_bytes()[:4] == b"MPCK"


def test_recurrent_checkpoint_round_trip(tmp_path):
    p = init_recurrent_model(RecurrentConfig(input_dim=3, hidden=4), "cpc", Rng(0))
    save_checkpoint(tmp_path / "r.mpck", p)
    back = load_checkpoint(tmp_path / "r.mpck")
    assert back.recurrent == p.recurrent
    assert all(np.array_equal(back[n].data, p[n].data) for n in p.names())


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x.mpck").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError, match="x.mpck"):
        load_checkpoint(tmp_path / "x.mpck")


def test_model_params_copy_is_deep():
    enc, _ = _toy()
    p = init_pretrain_model(enc, Rng(0))
    q = p.copy()
    q["enc.pre_in.w"].data[0, 0] += 1
    assert p["enc.pre_in.w"].data[0, 0] != q["enc.pre_in.w"].data[0, 0]
    assert isinstance(q, ModelParams)
