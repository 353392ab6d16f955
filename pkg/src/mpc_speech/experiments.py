"""Desk-scale pre-training benefit experiment on the synthetic corpus.

One *seed pair* pre-trains an MPC encoder, then fine-tunes two recognizers
with identical fine-tuning seeds: one from random initialisation and one from
the pre-trained encoder.  Fine-tuning is also repeated from the intermediate
pre-training snapshots (25% and 50% of the steps) to measure how the number
of pre-training steps changes convergence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .decoding import EvalReport, decode
from .model import Vocab, init_asr_model, init_finetune_model
from .numerics import Rng
from .synthetic import ALPHABET, corpus_features, make_corpus
from .training import LabeledUtterance, RunConfig, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    corpus_size: int = 2300
    corpus_seed: int = 0
    num_labelled: int = 150  # labelled subset of the unlabelled pool
    num_valid: int = 150
    num_test: int = 150
    pretrain_steps: int = 1500
    pretrain_batch: int = 32
    pretrain_k: float = 0.02
    pretrain_warmup: int = 200
    finetune_epochs: int = 20
    finetune_batch: int = 16
    finetune_k: float = 0.02
    finetune_warmup: int = 200
    beam: int = 10
    fractions: tuple[float, ...] = (0.25, 0.5, 1.0)


@dataclass
class DeskData:
    pool: list  # FeatureSequence, unlabelled pre-training data
    train: list[LabeledUtterance]
    valid: list[LabeledUtterance]
    test: list[LabeledUtterance]


@dataclass
class SeedPairResult:
    seed: int
    random_val: list[float]
    random_cer: float
    # keyed by fraction of pre-training steps
    pretrained_val: dict[float, list[float]] = field(default_factory=dict)
    pretrained_cer: dict[float, float] = field(default_factory=dict)

    @property
    def threshold(self) -> float:
        return self.random_val[-1]

    def epochs_to_threshold(self, fraction: float) -> float:
        """First epoch whose validation loss is at or below the random-init
        run's final validation loss; ``inf`` when never reached."""
        for epoch, v in enumerate(self.pretrained_val[fraction], start=1):
            if v <= self.threshold:
                return float(epoch)
        return math.inf

    def faster(self, ratio: float = 0.7) -> bool:
        return self.epochs_to_threshold(1.0) <= ratio * len(self.random_val)

    def lower_cer(self) -> bool:
        return self.pretrained_cer[1.0] < self.random_cer

    def monotone(self) -> bool:
        """Epochs-to-threshold non-increasing over the pre-training snapshots.

        A pair in which no snapshot reaches the threshold carries no trend
        information and does not count as monotone.
        """
        e = [self.epochs_to_threshold(f) for f in sorted(self.pretrained_val)]
        if all(math.isinf(x) for x in e):
            return False
        return all(a >= b for a, b in zip(e, e[1:]))

    def summary(self) -> str:
        parts = [f"seed={self.seed}", f"random_final_val={self.threshold:.4f}", f"random_cer={self.random_cer:.4f}"]
        for f in sorted(self.pretrained_val):
            parts.append(f"pre{int(round(100 * f))}%: epochs_to_threshold={self.epochs_to_threshold(f)}"
                         f" final_val={self.pretrained_val[f][-1]:.4f}")
        parts.append(f"mpc_cer={self.pretrained_cer[1.0]:.4f}")
        return " ".join(parts)


def build_data(setup: DeskSetup) -> DeskData:
    corpus = make_corpus(setup.corpus_size, setup.corpus_seed)
    feats = corpus_features(corpus)
    labelled = [LabeledUtterance(f, u.text) for f, u in zip(feats, corpus)]
    n_pool = setup.corpus_size - setup.num_valid - setup.num_test
    if n_pool < setup.num_labelled:
        raise ValueError("corpus too small for the requested splits")
    return DeskData(
        pool=feats[:n_pool],
        train=labelled[: setup.num_labelled],
        valid=labelled[n_pool: n_pool + setup.num_valid],
        test=labelled[n_pool + setup.num_valid: n_pool + setup.num_valid + setup.num_test],
    )


def corpus_cer(params, data: list[LabeledUtterance], beam: int, ctc_weight: float) -> float:
    report = EvalReport()
    for u in data:
        report.add(u.features.utterance_id, u.text, decode(params, u.features.frames, beam, ctc_weight).text)
    return report.cer


def run_seed_pair(seed: int, data: DeskData, setup: DeskSetup | None = None) -> SeedPairResult:
    setup = setup or DeskSetup()
    pre_cfg = RunConfig(objective="mpc", batch_size=setup.pretrain_batch, total_steps=setup.pretrain_steps,
                        k=setup.pretrain_k, warmup_n=setup.pretrain_warmup, seed=seed, log_every=10**9,
                        checkpoint_every=max(1, int(setup.pretrain_steps * min(setup.fractions))))
    ft_cfg = RunConfig(batch_size=setup.finetune_batch, epochs=setup.finetune_epochs, k=setup.finetune_k,
                       warmup_n=setup.finetune_warmup, seed=seed)
    enc, dec = ft_cfg.model_configs()
    vocab = Vocab(ALPHABET)
    head_rng = Rng(seed).substream("asr-init")

    log.info("seed %d: random-init fine-tuning", seed)
    base = finetune(ft_cfg, init_asr_model(enc, dec, vocab, head_rng), data.train, data.valid)
    result = SeedPairResult(seed, base.val_losses, corpus_cer(base.params, data.test, setup.beam, ft_cfg.ctc_weight))

    log.info("seed %d: MPC pre-training for %d steps", seed, setup.pretrain_steps)
    snapshots = dict(pretrain(pre_cfg, data.pool).checkpoints)
    for fraction in setup.fractions:
        step = int(round(fraction * setup.pretrain_steps))
        if step not in snapshots:
            raise ValueError(f"no pre-training snapshot at step {step}")
        init = init_finetune_model(snapshots[step], enc, dec, vocab, head_rng)
        run = finetune(ft_cfg, init, data.train, data.valid)
        result.pretrained_val[fraction] = run.val_losses
        if fraction == 1.0:
            result.pretrained_cer[fraction] = corpus_cer(run.params, data.test, setup.beam, ft_cfg.ctc_weight)
    log.info("%s", result.summary())
    return result
