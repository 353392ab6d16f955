"""Optimisation: warmup learning-rate schedule, Adam with L2 decay, plateau
decay, scheduled sampling, and the pre-training / fine-tuning loops."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .features import FeatureSequence, stack_frames
from .model import (EOS, SOS, DecoderConfig, EncoderConfig, ModelParams, RecurrentConfig, Vocab,
                    ctc_log_probs, ctc_loss_batch, decoder_forward, encoder_forward,
                    init_pretrain_model, init_recurrent_model, length_mask, linear,
                    min_ctc_frames, reconstruction_head, recurrent_forward, save_checkpoint)
from .numerics import Rng, Tensor
from .objectives import MaskPolicy, apc_loss, apply_mask, cpc_batch_loss, masked_l1, sample_mask_plan

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# learning rate


@dataclass
class ScheduleConfig:
    k: float = 0.5
    d_model: int = 256
    warmup_n: int = 8000
    canonical_noam: bool = False
    plateau_patience_epochs: int = 5
    plateau_divisor: float = 10.0
    plateau_max_applications: int = 1

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.warmup_n < 1:
            raise ValueError("warmup_n must be >= 1")


def lr_at_step(n: int, cfg: ScheduleConfig) -> float:
    """``k * d_model**0.5 * min(n**-0.5, n * warmup_n**-1.5)``.

    With ``canonical_noam`` the model-size factor is ``d_model**-0.5`` instead.
    """
    if n < 1:
        raise ValueError(f"step must be >= 1, got {n}")
    exponent = -0.5 if cfg.canonical_noam else 0.5
    return cfg.k * cfg.d_model ** exponent * min(n ** -0.5, n * cfg.warmup_n ** -1.5)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> bool:
    """One bias-corrected Adam update in place; L2 decay is added to the gradient.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at optimiser step %d; batch skipped", state.step + 1)
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        log.debug("clipping gradient norm %.4g -> %.4g", total, max_norm)
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# ---------------------------------------------------------------------------
# plateau decay and scheduled sampling


@dataclass
class PlateauState:
    best: float = math.inf
    since_improvement: int = 0
    applications: int = 0


def plateau_update(state: PlateauState, val_loss: float, patience: int = 5,
                   max_applications: int = 1) -> str:
    """Return ``"divide_lr"`` once validation loss has failed to decrease for
    ``patience`` consecutive epochs, at most ``max_applications`` times."""
    if val_loss < state.best:
        state.best = val_loss
        state.since_improvement = 0
    else:
        state.since_improvement += 1
    if state.since_improvement >= patience and state.applications < max_applications:
        state.applications += 1
        state.since_improvement = 0
        return "divide_lr"
    return "no_action"


def scheduled_sample(gold_token, model_token, rate: float, rng: Rng):
    """Pick the model's token with probability ``rate``; works on arrays too."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    gold = np.asarray(gold_token)
    use_model = rng.random(gold.shape) < rate
    out = np.where(use_model, model_token, gold)
    return out.item() if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    objective: str = "mpc"
    profile: str = "toy"
    seed: int = 0
    batch_size: int = 16
    total_steps: int = 1000
    epochs: int = 30
    scheduled_sampling_rate: float = 0.1
    weight_decay: float = 1e-5
    ctc_weight: float = 0.3
    grad_clip: float = 5.0
    k: float = 0.5
    warmup_n: int = 8000
    canonical_noam: bool = False
    plateau_patience_epochs: int = 5
    plateau_divisor: float = 10.0
    plateau_max_applications: int = 1
    stack_factor: int = 8
    select_ratio: float = 0.15
    p_zero: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1
    apc_shift: int = 3
    cpc_candidates: int = 8
    cpc_offsets: int = 3
    rnn_hidden: int = 64
    checkpoint_every: int = 0  # 0 -> every 10% of total_steps
    log_every: int = 10
    val_fraction: float = 0.05
    beam: int = 10
    d_mel: int = 40
    enc_blocks: int = 0  # 0 -> profile default
    dec_blocks: int = 0
    d_model: int = 0
    d_ff: int = 0
    num_heads: int = 0
    dropout: float = 0.0
    train_manifest: str = ""
    valid_manifest: str = ""
    test_manifest: str = ""
    features: str = ""
    out: str = ""

    def __post_init__(self):
        if self.objective not in ("mpc", "apc", "cpc"):
            raise ValueError(f"objective must be mpc, apc or cpc, not {self.objective!r}")
        if self.profile not in ("toy", "paper"):
            raise ValueError(f"profile must be toy or paper, not {self.profile!r}")
        if not 0.0 <= self.scheduled_sampling_rate <= 1.0:
            raise ValueError("scheduled_sampling_rate must lie in [0, 1]")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")

    def schedule(self, d_model: int) -> ScheduleConfig:
        return ScheduleConfig(self.k, d_model, self.warmup_n, self.canonical_noam,
                              self.plateau_patience_epochs, self.plateau_divisor,
                              self.plateau_max_applications)

    def mask_policy(self) -> MaskPolicy:
        return MaskPolicy(self.select_ratio, self.p_zero, self.p_random, self.p_keep)

    def model_configs(self) -> tuple[EncoderConfig, DecoderConfig]:
        from .model import paper_profile, toy_profile

        enc, dec = (toy_profile if self.profile == "toy" else paper_profile)(self.d_mel)
        over = {"num_blocks": self.enc_blocks, "d_model": self.d_model, "d_ff": self.d_ff,
                "num_heads": self.num_heads}
        enc_kw = {f.name: getattr(enc, f.name) for f in fields(enc)}
        dec_kw = {f.name: getattr(dec, f.name) for f in fields(dec)}
        for key, value in over.items():
            if value:
                enc_kw[key] = value
                if key != "num_blocks":
                    dec_kw[key] = value
        if self.dec_blocks:
            dec_kw["num_blocks"] = self.dec_blocks
        enc_kw["stack_factor"] = self.stack_factor
        enc_kw["dropout"] = dec_kw["dropout"] = self.dropout
        if self.enc_blocks and self.profile == "paper":
            step = max(1, enc_kw["num_blocks"] // 4)
            enc_kw["downsample_after"] = tuple(i for i in (step, 2 * step, 3 * step) if i < enc_kw["num_blocks"])
        return EncoderConfig(**enc_kw), DecoderConfig(**dec_kw)


def _coerce(value: str, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}[kind]
    if kind is bool:
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    return kind(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        if key not in known:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(value, known[key])
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# batching


def bucket_batches(lengths: Sequence[int], batch_size: int, rng: Rng | None) -> list[np.ndarray]:
    """Group indices of similar length; batch order is shuffled by ``rng``."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def pad(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.shape[0] for a in arrays])
    out = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths


def is_validation(utterance_id: str, fraction: float) -> bool:
    digest = hashlib.md5(utterance_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") / 2 ** 32 < fraction


def metrics_line(step: int, epoch: int, phase: str, loss: float, lr: float, **extra) -> str:
    parts = [f"step={step}", f"epoch={epoch}", f"phase={phase}", f"loss={loss:.10g}", f"lr={lr:.10g}"]
    parts += [f"{k}={v:.10g}" for k, v in extra.items() if v is not None]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainResult:
    params: ModelParams
    checkpoints: list[tuple[int, ModelParams]]
    metrics: list[str]


def _mpc_batch_loss(params: ModelParams, seqs: Sequence[np.ndarray], uids: Sequence[str],
                    policy: MaskPolicy, rng: Rng, epoch: int, enc_rng: Rng | None = None) -> Tensor:
    masked, original, selected = [], [], []
    for frames, uid in zip(seqs, uids):
        plan = sample_mask_plan(frames.shape[0], policy, rng.substream("mask", epoch, uid))
        t = apply_mask(frames, plan)
        masked.append(t.masked)
        original.append(t.original)
        selected.append(plan.selected)
    x, lengths = pad(masked)
    target, _ = pad(original)
    sel = np.zeros(x.shape[:2], dtype=bool)
    for i, s in enumerate(selected):
        sel[i, : s.size] = s
    hidden, _ = encoder_forward(params, x, "pretrain", lengths, rng=enc_rng)
    return masked_l1(reconstruction_head(params, hidden), target, sel)


def _apc_batch_loss(params: ModelParams, seqs: Sequence[np.ndarray], shift: int) -> Tensor:
    x, lengths = pad(seqs)
    y, _ = recurrent_forward(params, "apc", x)
    return apc_loss(x, y, shift, valid=length_mask(lengths, x.shape[1]), reduction="mean")


def _cpc_batch_loss(params: ModelParams, seqs: Sequence[np.ndarray], rng: Rng, candidates: int) -> Tensor:
    x, lengths = pad(seqs)
    z = nx.relu(linear(params, "cpc.genc", x))
    c, _ = recurrent_forward(params, "cpc.gar", z)
    weights = [params[f"cpc.w{k}"] for k in range(1, params.recurrent.cpc_offsets + 1)]
    return cpc_batch_loss(z, c, weights, lengths, rng, candidates)


def pretrain(cfg: RunConfig, data: Sequence[FeatureSequence], out_dir=None,
             init: ModelParams | None = None) -> PretrainResult:
    """Self-supervised pre-training with the configured objective.

    MPC stacks ``stack_factor`` frames and reconstructs masked positions;
    APC/CPC run the recurrent model on raw frames.  A snapshot is taken every
    ``checkpoint_every`` steps (default: each 10% of ``total_steps``).
    """
    if not data:
        raise ValueError("pre-training needs at least one utterance")
    rng = Rng(cfg.seed)
    enc_cfg, _ = cfg.model_configs()
    if cfg.objective == "mpc":
        seqs = [stack_frames(s, cfg.stack_factor) for s in data]
        min_len = 1
    else:
        seqs = list(data)
        min_len = cfg.apc_shift + 1 if cfg.objective == "apc" else cfg.cpc_offsets + 1
    seqs = [s for s in seqs if s.num_frames >= min_len]
    if not seqs:
        raise ValueError("every utterance is too short for the objective")
    val = [s for s in seqs if is_validation(s.utterance_id, cfg.val_fraction)]
    train = [s for s in seqs if not is_validation(s.utterance_id, cfg.val_fraction)] or seqs
    if init is not None:
        params = init
    elif cfg.objective == "mpc":
        params = init_pretrain_model(enc_cfg, rng.substream("init"))
    else:
        rcfg = RecurrentConfig(input_dim=cfg.d_mel, hidden=cfg.rnn_hidden, cpc_offsets=cfg.cpc_offsets)
        params = init_recurrent_model(rcfg, cfg.objective, rng.substream("init"))
    sched = cfg.schedule(enc_cfg.d_model)
    policy = cfg.mask_policy()
    state = AdamState()
    every = cfg.checkpoint_every or max(1, cfg.total_steps // 10)
    metrics: list[str] = []
    checkpoints: list[tuple[int, ModelParams]] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def batch_loss(batch: list[FeatureSequence], epoch: int, stream: Rng, train_mode: bool) -> Tensor:
        frames = [s.frames for s in batch]
        if cfg.objective == "mpc":
            enc_rng = stream.substream("dropout") if train_mode else None
            return _mpc_batch_loss(params, frames, [s.utterance_id for s in batch], policy, stream, epoch, enc_rng)
        if cfg.objective == "apc":
            return _apc_batch_loss(params, frames, cfg.apc_shift)
        return _cpc_batch_loss(params, frames, stream.substream("negatives"), cfg.cpc_candidates)

    def validate() -> float | None:
        if not val:
            return None
        with nx.no_grad():
            vr = Rng(cfg.seed).substream("validation")
            losses = [batch_loss(val[i:i + cfg.batch_size], 0, vr.substream(i), False).item()
                      for i in range(0, len(val), cfg.batch_size)]
        return float(np.mean(losses))

    step, epoch = 0, 0
    while step < cfg.total_steps:
        epoch += 1
        ep_rng = rng.substream("epoch", epoch)
        for idx in bucket_batches([s.num_frames for s in train], cfg.batch_size, ep_rng.substream("order")):
            if step >= cfg.total_steps:
                break
            batch = [train[i] for i in idx]
            try:
                loss = batch_loss(batch, epoch, ep_rng.substream("batch", step), True)
            except nx.NonFiniteError:
                log.warning("non-finite loss at step %d; batch skipped", step + 1)
                continue
            grads = nx.backward(loss, params.tensors)
            clip_gradients(grads, cfg.grad_clip)
            lr = lr_at_step(step + 1, sched)
            if not adam_step(params.tensors, grads, state, lr, cfg.weight_decay):
                continue
            step += 1
            at_ckpt = step % every == 0 or step == cfg.total_steps
            val_loss = validate() if at_ckpt else None
            if step % cfg.log_every == 0 or at_ckpt:
                metrics.append(metrics_line(step, epoch, "pretrain", loss.item(), lr, val_loss=val_loss))
            if at_ckpt:
                snap = params.copy()
                checkpoints.append((step, snap))
                if out:
                    save_checkpoint(out / f"pretrain_step{step}.mpck", snap)
    if out:
        (out / "pretrain_metrics.log").write_text("\n".join(metrics) + "\n", encoding="utf-8")
    return PretrainResult(params, checkpoints, metrics)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class LabeledUtterance:
    features: FeatureSequence
    text: str


@dataclass
class FinetuneResult:
    params: ModelParams  # best-validation snapshot
    best_epoch: int
    val_losses: list[float]
    train_losses: list[float]
    metrics: list[str]


def check_transcripts(data: Sequence[LabeledUtterance], vocab: Vocab) -> list[LabeledUtterance]:
    """Drop utterances with empty or out-of-vocabulary transcripts, reporting each."""
    kept = []
    for u in data:
        bad = sorted({c for c in u.text if c not in vocab.index})
        if not u.text:
            log.warning("utterance %s rejected: empty transcript", u.features.utterance_id)
        elif bad:
            log.warning("utterance %s rejected: out-of-vocabulary characters %s", u.features.utterance_id, bad)
        else:
            kept.append(u)
    return kept


def asr_batch_loss(params: ModelParams, batch: Sequence[LabeledUtterance], ctc_weight: float,
                   sampling_rate: float = 0.0, rng: Rng | None = None) -> Tensor:
    """``ctc_weight * CTC + (1 - ctc_weight) * attention cross-entropy``.

    Both terms are per-utterance sums averaged over the batch.  With
    ``sampling_rate > 0`` each decoder input token after sos is replaced by the
    model's own greedy prediction with that probability.
    """
    vocab = params.vocab
    x, lengths = pad([u.features.frames for u in batch])
    labels = [vocab.encode(u.text) for u in batch]
    hidden, enc_len = encoder_forward(params, x, "finetune", lengths,
                                      rng=rng.substream("dropout") if rng is not None else None)
    U = max(len(l) for l in labels) + 1
    B = len(batch)
    dec_in = np.zeros((B, U), dtype=np.int64)
    dec_out = np.zeros((B, U), dtype=np.int64)
    tok_len = np.array([len(l) + 1 for l in labels])
    for i, l in enumerate(labels):
        dec_in[i, : len(l) + 1] = [SOS] + l
        dec_out[i, : len(l) + 1] = l + [EOS]
    if sampling_rate > 0 and rng is not None:
        with nx.no_grad():
            greedy = decoder_forward(params, Tensor(hidden.data), dec_in, enc_len, tok_len).data.argmax(-1)
        sampled = scheduled_sample(dec_in[:, 1:], greedy[:, :-1], sampling_rate, rng.substream("sampling"))
        valid = np.arange(1, U)[None, :] < tok_len[:, None]
        dec_in[:, 1:] = np.where(valid, sampled, dec_in[:, 1:])
    logits = decoder_forward(params, hidden, dec_in, enc_len, tok_len)
    logp = nx.log_softmax(logits, axis=-1)
    bi, ui = np.nonzero(length_mask(tok_len, U))
    att = nx.scale(nx.neg(nx.tsum(logp[bi, ui, dec_out[bi, ui]])), 1.0 / B)
    if ctc_weight == 0.0:
        return att
    ctc = ctc_loss_batch(ctc_log_probs(params, hidden), enc_len, labels)
    if ctc_weight == 1.0:
        return ctc
    return nx.add(nx.scale(ctc, ctc_weight), nx.scale(att, 1.0 - ctc_weight))


def evaluate_loss(params: ModelParams, data: Sequence[LabeledUtterance], ctc_weight: float,
                  batch_size: int) -> float:
    """Utterance-weighted mean of the joint loss, without scheduled sampling."""
    total = 0.0
    with nx.no_grad():
        for idx in bucket_batches([u.features.num_frames for u in data], batch_size, None):
            batch = [data[i] for i in idx]
            total += asr_batch_loss(params, batch, ctc_weight).item() * len(batch)
    return total / len(data)


def finetune(cfg: RunConfig, init: ModelParams, train: Sequence[LabeledUtterance],
             valid: Sequence[LabeledUtterance],
             on_epoch: Callable[[int, ModelParams, float], None] | None = None) -> FinetuneResult:
    """Supervised training of the encoder-decoder for ``cfg.epochs`` epochs.

    The learning rate follows the warmup schedule and is divided once by
    ``plateau_divisor`` on a validation plateau.  The returned parameters are
    the snapshot with the lowest validation loss.
    """
    vocab = init.vocab
    train = check_transcripts(train, vocab)
    valid = check_transcripts(valid, vocab)
    if not train:
        raise ValueError("fine-tuning needs labelled utterances")
    params = init.copy()
    enc_red = 2 ** len(params.encoder.downsample_after)
    for u in train:
        if u.features.num_frames // enc_red < min_ctc_frames(vocab.encode(u.text)):
            log.warning("utterance %s is too short for its transcript under CTC", u.features.utterance_id)
    rng = Rng(cfg.seed).substream("finetune")
    sched = cfg.schedule(params.encoder.d_model)
    state = AdamState()
    plateau = PlateauState()
    lr_factor = 1.0
    best_loss, best_epoch, best_params = math.inf, 0, params.copy()
    val_losses, train_losses, metrics = [], [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        ep_rng = rng.substream("epoch", epoch)
        running, count = 0.0, 0
        for idx in bucket_batches([u.features.num_frames for u in train], cfg.batch_size,
                                  ep_rng.substream("order")):
            batch = [train[i] for i in idx]
            try:
                loss = asr_batch_loss(params, batch, cfg.ctc_weight, cfg.scheduled_sampling_rate,
                                      ep_rng.substream("batch", step))
            except nx.NonFiniteError:
                log.warning("non-finite loss at step %d; batch skipped", step + 1)
                continue
            if not math.isfinite(loss.item()):
                log.warning("infinite loss at step %d (CTC infeasible); batch skipped", step + 1)
                continue
            grads = nx.backward(loss, params.tensors)
            clip_gradients(grads, cfg.grad_clip)
            lr = lr_at_step(step + 1, sched) * lr_factor
            if adam_step(params.tensors, grads, state, lr, cfg.weight_decay):
                step += 1
                running += loss.item()
                count += 1
        val_loss = evaluate_loss(params, valid, cfg.ctc_weight, cfg.batch_size) if valid else running / max(count, 1)
        train_losses.append(running / max(count, 1))
        val_losses.append(val_loss)
        if val_loss < best_loss:
            best_loss, best_epoch, best_params = val_loss, epoch, params.copy()
        if plateau_update(plateau, val_loss, cfg.plateau_patience_epochs, cfg.plateau_max_applications) == "divide_lr":
            lr_factor /= cfg.plateau_divisor
            log.info("validation plateau at epoch %d; learning rate divided by %g", epoch, cfg.plateau_divisor)
        metrics.append(metrics_line(step, epoch, "finetune", train_losses[-1],
                                    lr_at_step(max(step, 1), sched) * lr_factor, val_loss=val_loss))
        if on_epoch is not None:
            on_epoch(epoch, params, val_loss)
    return FinetuneResult(best_params, best_epoch, val_losses, train_losses, metrics)
