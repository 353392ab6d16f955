"""Transformer encoder/decoder, reconstruction and CTC heads, the gated
recurrent predictor used by APC/CPC, and the binary checkpoint format.

Parameters live in a flat ``name -> Tensor`` mapping inside
:class:`ModelParams`.  Forward functions take padded batches
(``B x T x D`` plus per-utterance lengths) and also accept a single
unbatched ``T x D`` sequence for convenience.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1

BLANK, SOS, EOS = 0, 1, 2
SPECIAL_SYMBOLS = ("<blank>", "<sos>", "<eos>")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EncoderConfig:
    num_blocks: int = 12
    d_model: int = 256
    d_ff: int = 2048
    num_heads: int = 4
    d_mel: int = 40
    stack_factor: int = 8
    # number of blocks completed before each x2 time reduction (finetune mode);
    # 0 reduces right after the input projection, repeats are allowed
    downsample_after: tuple[int, ...] = (3, 6, 9)
    dropout: float = 0.0

    def __post_init__(self):
        self.downsample_after = tuple(int(i) for i in self.downsample_after)
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if any(not 0 <= i < self.num_blocks for i in self.downsample_after):
            raise ValueError(f"downsample_after {self.downsample_after} must index blocks < {self.num_blocks}")

    def input_dim(self, mode: str) -> int:
        if mode == "pretrain":
            return self.d_mel * self.stack_factor
        if mode == "finetune":
            return self.d_mel
        raise ValueError(f"unknown encoder mode {mode!r}")


@dataclass
class DecoderConfig:
    num_blocks: int = 6
    d_model: int = 256
    d_ff: int = 2048
    num_heads: int = 4
    vocab_size: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if self.vocab_size < len(SPECIAL_SYMBOLS):
            raise ValueError("vocabulary must contain blank, sos and eos")


@dataclass
class RecurrentConfig:
    """Small unidirectional model for the APC and CPC baselines."""

    input_dim: int = 40
    hidden: int = 64
    latent_dim: int = 32  # CPC encoder output
    context_dim: int = 32  # CPC context size
    cpc_offsets: int = 3


def toy_profile(d_mel: int = 40) -> tuple[EncoderConfig, DecoderConfig]:
    enc = EncoderConfig(num_blocks=2, d_model=32, d_ff=64, num_heads=2, d_mel=d_mel,
                        downsample_after=(0, 0, 0))
    dec = DecoderConfig(num_blocks=1, d_model=32, d_ff=64, num_heads=2)
    return enc, dec


def paper_profile(d_mel: int = 40) -> tuple[EncoderConfig, DecoderConfig]:
    return EncoderConfig(d_mel=d_mel), DecoderConfig()


class Vocab:
    """Character inventory; ids 0/1/2 are blank, sos and eos."""

    def __init__(self, chars: Iterable[str]):
        self.chars = list(dict.fromkeys(chars))
        if any(len(c) != 1 for c in self.chars):
            raise ValueError("vocabulary entries must be single characters")
        self.symbols = list(SPECIAL_SYMBOLS) + self.chars
        self.index = {c: i + len(SPECIAL_SYMBOLS) for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.chars == other.chars

    def encode(self, text: str) -> list[int]:
        missing = sorted({c for c in text if c not in self.index})
        if missing:
            raise KeyError(f"characters outside the vocabulary: {missing}")
        return [self.index[c] for c in text]

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i >= len(SPECIAL_SYMBOLS))

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        return cls(sorted({c for t in texts for c in t}))


@dataclass
class ModelParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    encoder: EncoderConfig | None = None
    decoder: DecoderConfig | None = None
    vocab: Vocab | None = None
    recurrent: RecurrentConfig | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def num_parameters(self, prefix: str = "") -> int:
        return sum(self.tensors[n].size for n in self.names(prefix))

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), name=n) for n, t in self.tensors.items()},
                           self.encoder, self.decoder, self.vocab, self.recurrent)


# ---------------------------------------------------------------------------
# initialisation


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class _Init:
    """Per-tensor substreams make each fresh weight depend only on (seed, name)."""

    def __init__(self, rng: Rng):
        self.rng = rng
        self.out: dict[str, Tensor] = {}

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        self.out[f"{name}.w"] = Tensor(_glorot(self.rng.substream(name), fan_in, fan_out), name=f"{name}.w")
        self.out[f"{name}.b"] = Tensor(np.zeros(fan_out), name=f"{name}.b")

    def norm(self, name: str, d: int) -> None:
        self.out[f"{name}.g"] = Tensor(np.ones(d), name=f"{name}.g")
        self.out[f"{name}.b"] = Tensor(np.zeros(d), name=f"{name}.b")

    def matrix(self, name: str, rows: int, cols: int) -> None:
        self.out[name] = Tensor(_glorot(self.rng.substream(name), rows, cols), name=name)

    def attention(self, name: str, d: int) -> None:
        for part in ("q", "k", "v", "o"):
            self.linear(f"{name}.{part}", d, d)

    def ffn(self, name: str, d: int, d_ff: int) -> None:
        self.linear(f"{name}.ff1", d, d_ff)
        self.linear(f"{name}.ff2", d_ff, d)


def _encoder_blocks(init: _Init, cfg: EncoderConfig) -> None:
    for i in range(cfg.num_blocks):
        p = f"enc.block{i}"
        init.norm(f"{p}.ln1", cfg.d_model)
        init.attention(f"{p}.att", cfg.d_model)
        init.norm(f"{p}.ln2", cfg.d_model)
        init.ffn(p, cfg.d_model, cfg.d_ff)
    init.norm("enc.ln_out", cfg.d_model)


def _finetune_heads(init: _Init, enc: EncoderConfig, dec: DecoderConfig) -> None:
    init.linear("enc.ft_in", enc.d_mel, enc.d_model)
    for j in range(len(enc.downsample_after)):
        init.linear(f"enc.ds{j}", 2 * enc.d_model, enc.d_model)
    init.matrix("dec.emb", dec.vocab_size, dec.d_model)
    for i in range(dec.num_blocks):
        p = f"dec.block{i}"
        init.norm(f"{p}.ln1", dec.d_model)
        init.attention(f"{p}.self", dec.d_model)
        init.norm(f"{p}.ln2", dec.d_model)
        init.attention(f"{p}.src", dec.d_model)
        init.norm(f"{p}.ln3", dec.d_model)
        init.ffn(p, dec.d_model, dec.d_ff)
    init.norm("dec.ln_out", dec.d_model)
    init.linear("dec.out", dec.d_model, dec.vocab_size)
    init.linear("ctc", enc.d_model, dec.vocab_size)


def init_pretrain_model(cfg: EncoderConfig, rng: Rng) -> ModelParams:
    init = _Init(rng)
    init.linear("enc.pre_in", cfg.input_dim("pretrain"), cfg.d_model)
    _encoder_blocks(init, cfg)
    init.linear("rec", cfg.d_model, cfg.input_dim("pretrain"))
    return ModelParams(init.out, encoder=cfg)


def init_asr_model(enc: EncoderConfig, dec: DecoderConfig, vocab: Vocab, rng: Rng) -> ModelParams:
    """Randomly initialised encoder-decoder (the no-pre-training baseline)."""
    dec = _with_vocab(dec, vocab)
    init = _Init(rng)
    _encoder_blocks(init, enc)
    _finetune_heads(init, enc, dec)
    return ModelParams(init.out, encoder=enc, decoder=dec, vocab=vocab)


def _with_vocab(dec: DecoderConfig, vocab: Vocab) -> DecoderConfig:
    if dec.vocab_size == len(vocab):
        return dec
    d = asdict(dec)
    d["vocab_size"] = len(vocab)
    return DecoderConfig(**d)


def transferable(name: str) -> bool:
    return name.startswith("enc.block") or name.startswith("enc.ln_out")


def init_finetune_model(pretrained: ModelParams, enc: EncoderConfig, dec: DecoderConfig,
                        vocab: Vocab, rng: Rng) -> ModelParams:
    """Drop the reconstruction head and pre-training input projection, copy the
    Transformer blocks, and attach freshly initialised fine-tuning parts."""
    fresh = init_asr_model(enc, dec, vocab, rng)
    problems = []
    for name, t in fresh.tensors.items():
        if not transferable(name):
            continue
        if name not in pretrained:
            problems.append(f"{name}: missing from checkpoint")
        elif pretrained[name].shape != t.shape:
            problems.append(f"{name}: checkpoint {pretrained[name].shape} vs config {t.shape}")
    if problems:
        raise ValueError("pre-trained encoder does not match fine-tune config:\n  " + "\n  ".join(problems))
    for name in fresh.tensors:
        if transferable(name):
            fresh.tensors[name] = Tensor(pretrained[name].data.copy(), name=name)
    return fresh


def init_recurrent_model(cfg: RecurrentConfig, objective: str, rng: Rng) -> ModelParams:
    init = _Init(rng)
    if objective == "apc":
        _gru(init, "apc", cfg.input_dim, cfg.hidden, cfg.input_dim)
    elif objective == "cpc":
        init.linear("cpc.genc", cfg.input_dim, cfg.latent_dim)
        _gru(init, "cpc.gar", cfg.latent_dim, cfg.hidden, cfg.context_dim)
        for k in range(1, cfg.cpc_offsets + 1):
            init.matrix(f"cpc.w{k}", cfg.latent_dim, cfg.context_dim)
    else:
        raise ValueError(f"recurrent model is for apc/cpc, not {objective!r}")
    return ModelParams(init.out, recurrent=cfg)


def _gru(init: _Init, name: str, d_in: int, hidden: int, d_out: int) -> None:
    init.linear(f"{name}.ih", d_in, 3 * hidden)
    init.linear(f"{name}.hh", hidden, 3 * hidden)
    init.linear(f"{name}.out", hidden, d_out)


def encoder_param_count(cfg: EncoderConfig) -> int:
    """Parameters of the pre-training encoder, including input projection and
    reconstruction head:

        blocks * (4*d^2 + 4*d        attention projections + biases
                  + 2*d*d_ff + d_ff + d   feed-forward
                  + 4*d)              two layer norms
        + 2*d                         final layer norm
        + 2 * (D_in*d) + d + D_in     input projection and reconstruction head
    """
    d, f, din = cfg.d_model, cfg.d_ff, cfg.input_dim("pretrain")
    per_block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    return cfg.num_blocks * per_block + 2 * d + 2 * din * d + d + din


# ---------------------------------------------------------------------------
# building blocks


def linear(p: ModelParams, name: str, x) -> Tensor:
    return nx.add(nx.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def norm(p: ModelParams, name: str, x, eps: float = 1e-5) -> Tensor:
    return nx.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], eps)


def sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def _dropout(x: Tensor, rate: float, rng: Rng | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, keep)


def attention(p: ModelParams, name: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is ``B x Tq x Tk``."""
    B, Tq, D = q_in.shape
    Tk = kv_in.shape[1]
    dh = D // heads

    def split(t: Tensor, T: int) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(linear(p, f"{name}.q", q_in), Tq)
    k = split(linear(p, f"{name}.k", kv_in), Tk)
    v = split(linear(p, f"{name}.v", kv_in), Tk)
    scores = nx.scale(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    weights = nx.softmax(scores, axis=-1, mask=mask[:, None, :, :])
    ctx = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, D))
    return linear(p, f"{name}.o", ctx)


def _ffn(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return linear(p, f"{name}.ff2", nx.relu(linear(p, f"{name}.ff1", x)))


def length_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def _batched(x, lengths):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        x = nx.reshape(nx.as_tensor(x), (1,) + arr.shape)
        lengths = np.array([arr.shape[0]])
    elif lengths is None:
        lengths = np.full(arr.shape[0], arr.shape[1])
    return nx.as_tensor(x), np.asarray(lengths, dtype=np.int64), single


def _downsample(p: ModelParams, name: str, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Concatenate adjacent frame pairs and project 2*d_model -> d_model."""
    B, T, D = x.shape
    half = T // 2
    if half == 0:
        raise ValueError("sequence too short to downsample")
    paired = nx.reshape(x[:, : 2 * half, :], (B, half, 2 * D))
    return linear(p, name, paired), lengths // 2


def encoder_forward(p: ModelParams, features, mode: str, lengths=None,
                    rng: Rng | None = None) -> tuple[Tensor, np.ndarray]:
    """Run the Transformer encoder.

    ``pretrain`` expects stacked frames and keeps the time resolution;
    ``finetune`` expects raw frames and halves time at each entry of
    ``downsample_after``.  The sinusoidal position code is added at the
    input of the first block.  Returns hidden states and output lengths
    (unbatched input gives an unbatched ``T' x d_model`` result).
    """
    cfg = p.encoder
    x, lengths, single = _batched(features, lengths)
    expected = cfg.input_dim(mode)
    if x.shape[-1] != expected:
        raise ValueError(f"{mode} encoder expects input_dim={expected}, got {x.shape[-1]}")
    h = linear(p, "enc.pre_in" if mode == "pretrain" else "enc.ft_in", x)
    ds_plan = list(cfg.downsample_after) if mode == "finetune" else []
    ds_index = 0
    drop = cfg.dropout
    for i in range(cfg.num_blocks):
        while ds_index < len(ds_plan) and ds_plan[ds_index] == i:
            h, lengths = _downsample(p, f"enc.ds{ds_index}", h, lengths)
            ds_index += 1
        if i == 0:
            h = nx.add(h, sinusoid(h.shape[1], cfg.d_model))
        valid = length_mask(lengths, h.shape[1])
        mask = np.broadcast_to(valid[:, None, :], (h.shape[0], h.shape[1], h.shape[1]))
        b = f"enc.block{i}"
        x = norm(p, f"{b}.ln1", h)
        a = attention(p, f"{b}.att", x, x, mask, cfg.num_heads)
        h = nx.add(h, _dropout(a, drop, rng and rng.substream(b, "att")))
        f = _ffn(p, b, norm(p, f"{b}.ln2", h))
        h = nx.add(h, _dropout(f, drop, rng and rng.substream(b, "ff")))
    h = norm(p, "enc.ln_out", h)
    if single:
        return nx.reshape(h, h.shape[1:]), lengths
    return h, lengths


def reconstruction_head(p: ModelParams, hidden) -> Tensor:
    return linear(p, "rec", hidden)


def decoder_forward(p: ModelParams, encoder_out, tokens, enc_lengths=None, token_lengths=None,
                    rng: Rng | None = None) -> Tensor:
    """Next-token logits for every prefix position.

    ``tokens``: ``B x U`` ids (or a single ``U`` sequence) beginning with sos.
    Self-attention is causal; cross-attention sees valid encoder frames.
    """
    cfg = p.decoder
    enc, enc_lengths, single = _batched(encoder_out, enc_lengths)
    tok = np.asarray(tokens, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None, :]
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    B, U = tok.shape
    if token_lengths is None:
        token_lengths = np.full(B, U)
    h = nx.add(nx.scale(nx.getitem(p["dec.emb"], tok), math.sqrt(cfg.d_model)), sinusoid(U, cfg.d_model))
    causal = np.tril(np.ones((U, U), dtype=bool))[None] & length_mask(token_lengths, U)[:, None, :]
    src = np.broadcast_to(length_mask(enc_lengths, enc.shape[1])[:, None, :], (B, U, enc.shape[1]))
    for i in range(cfg.num_blocks):
        b = f"dec.block{i}"
        x = norm(p, f"{b}.ln1", h)
        h = nx.add(h, _dropout(attention(p, f"{b}.self", x, x, causal, cfg.num_heads),
                               cfg.dropout, rng and rng.substream(b, "self")))
        x = norm(p, f"{b}.ln2", h)
        h = nx.add(h, _dropout(attention(p, f"{b}.src", x, enc, src, cfg.num_heads),
                               cfg.dropout, rng and rng.substream(b, "src")))
        h = nx.add(h, _dropout(_ffn(p, b, norm(p, f"{b}.ln3", h)),
                               cfg.dropout, rng and rng.substream(b, "ff")))
    logits = linear(p, "dec.out", norm(p, "dec.ln_out", h))
    if single and np.asarray(tokens).ndim == 1:
        return nx.reshape(logits, logits.shape[1:])
    return logits


def ctc_log_probs(p: ModelParams, encoder_out) -> Tensor:
    return nx.log_softmax(linear(p, "ctc", encoder_out), axis=-1)


# ---------------------------------------------------------------------------
# CTC


def _extend(labels: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_ctc_frames(labels: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _ctc_alpha_beta(lp: np.ndarray, labels: Sequence[int], blank: int):
    T = lp.shape[0]
    ext = _extend(labels, blank)
    S = ext.size
    # transitions from s-2 are allowed into non-blank labels that differ from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # T x S
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.full(S, -np.inf)
        a1[1:] = prev[:-1]
        a2 = np.full(S, -np.inf)
        a2[2:] = prev[:-2]
        a2[~skip] = -np.inf
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)  # from s to s+2
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.full(S, -np.inf)
        b1[:-1] = nxt[1:]
        b2 = np.full(S, -np.inf)
        b2[:-2] = nxt[2:]
        b2[~skip_next] = -np.inf
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]
    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, ext, tail


def ctc_nll(log_probs: np.ndarray, labels: Sequence[int], blank: int = BLANK) -> float:
    """Negative log-likelihood of ``labels`` under per-frame log-probs (numpy)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = list(labels)
    if lp.shape[0] < min_ctc_frames(labels) or lp.shape[0] == 0:
        return math.inf
    *_, tail = _ctc_alpha_beta(lp, labels, blank)
    return float(-tail)


def ctc_loss(log_probs, labels: Sequence[int], blank: int = BLANK) -> Tensor:
    """``-log`` of the summed probability of all blank-augmented alignments.

    The gradient comes from the forward-backward occupation probabilities.
    Infeasible label/length pairs give ``+inf`` (logged, not raised).
    """
    lp_t = nx.as_tensor(log_probs)
    lp = lp_t.data
    labels = list(labels)
    T = lp.shape[0]
    if T == 0 or T < min_ctc_frames(labels):
        log.warning("CTC infeasible: %d frames for %d labels", T, len(labels))
        return nx.custom(np.array(math.inf), (lp_t,), lambda g: (np.zeros_like(lp),), check=False)
    alpha, beta, ext, tail = _ctc_alpha_beta(lp, labels, blank)

    def back(g):
        emit = lp[:, ext]
        occ = np.exp(alpha + beta - emit - tail)  # T x S, posterior of each state
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occ)
        return (-g * grad,)

    return nx.custom(np.array(-tail), (lp_t,), back)


def ctc_loss_batch(log_probs: Tensor, lengths: np.ndarray, labels: Sequence[Sequence[int]],
                   blank: int = BLANK) -> Tensor:
    """Mean per-utterance CTC loss over a padded ``B x T x V`` batch."""
    terms = [ctc_loss(log_probs[b, : int(lengths[b])], labels[b], blank) for b in range(len(labels))]
    return nx.scale(nx.tsum(nx.stack(terms)), 1.0 / len(terms))


# ---------------------------------------------------------------------------
# recurrent predictor (APC / CPC)


def recurrent_forward(p: ModelParams, name: str, inputs) -> tuple[Tensor, Tensor]:
    """Unidirectional GRU followed by an affine read-out.

    Returns ``(outputs, hidden)``; step ``t`` depends only on inputs up to
    ``t``.  Accepts ``T x D`` or ``B x T x D``.
    """
    x, _, single = _batched(inputs, None)
    B, T, _ = x.shape
    H = p[f"{name}.hh.w"].shape[0]
    xi = linear(p, f"{name}.ih", x)  # B x T x 3H
    h = Tensor(np.zeros((B, H)))
    states = []
    for t in range(T):
        xt = xi[:, t, :]
        gh = linear(p, f"{name}.hh", h)
        r = nx.sigmoid(nx.add(xt[:, :H], gh[:, :H]))
        z = nx.sigmoid(nx.add(xt[:, H:2 * H], gh[:, H:2 * H]))
        n = nx.tanh(nx.add(xt[:, 2 * H:], nx.mul(r, gh[:, 2 * H:])))
        h = nx.add(nx.mul(nx.sub(1.0, z), n), nx.mul(z, h))
        states.append(h)
    hidden = nx.stack(states, axis=1)
    out = linear(p, f"{name}.out", hidden)
    if single:
        return nx.reshape(out, out.shape[1:]), nx.reshape(hidden, hidden.shape[1:])
    return out, hidden


# ---------------------------------------------------------------------------
# checkpoints


def _config_lines(p: ModelParams) -> str:
    lines = []
    for prefix, cfg in (("encoder", p.encoder), ("decoder", p.decoder), ("recurrent", p.recurrent)):
        if cfg is None:
            continue
        for f in fields(cfg):
            lines.append(f"{prefix}.{f.name}={json.dumps(getattr(cfg, f.name))}")
    if p.vocab is not None:
        lines.append(f"vocab={json.dumps(p.vocab.chars, ensure_ascii=False)}")
    return "\n".join(lines)


def _parse_config(text: str) -> dict:
    groups: dict[str, dict] = {}
    vocab = None
    for line in text.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "vocab":
            vocab = Vocab(json.loads(value))
            continue
        group, _, attr = key.partition(".")
        val = json.loads(value)
        groups.setdefault(group, {})[attr] = tuple(val) if isinstance(val, list) else val
    kinds = {"encoder": EncoderConfig, "decoder": DecoderConfig, "recurrent": RecurrentConfig}
    out = {k: kinds[k](**v) for k, v in groups.items()}
    out["vocab"] = vocab
    return out


def save_checkpoint(path, p: ModelParams) -> None:
    """Write ``p`` in the MPCK format (float64 tensors, sorted by name)."""
    cfg = _config_lines(p).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
              struct.pack("<I", len(p.tensors))]
    for name in sorted(p.tensors):
        t = p.tensors[name].data
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MPCK checkpoint")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg = _parse_config(data[pos:pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        tensors[name] = Tensor(arr, name=name)
    return ModelParams(tensors, cfg.get("encoder"), cfg.get("decoder"), cfg.get("vocab"), cfg.get("recurrent"))
