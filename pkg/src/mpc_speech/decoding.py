"""Joint attention/CTC beam search and character error rate scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import BLANK, EOS, SOS, SPECIAL_SYMBOLS, ModelParams, ctc_log_probs, decoder_forward, encoder_forward

log = logging.getLogger(__name__)

NEG_INF = -math.inf


# ---------------------------------------------------------------------------
# CTC prefix scoring


@dataclass
class CTCState:
    """Forward variables of one prefix: log-prob of emitting it by frame ``t``
    ending in a non-blank (``r_n``) or a blank (``r_b``)."""

    r_n: np.ndarray
    r_b: np.ndarray
    last: int | None
    prefix_score: float


class CTCPrefixScorer:
    def __init__(self, log_probs: np.ndarray, blank: int = BLANK):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank

    def initial(self) -> CTCState:
        T = self.lp.shape[0]
        r_b = np.cumsum(self.lp[:, self.blank]) if T else np.zeros(0)
        total = float(np.sum(np.logaddexp.reduce(self.lp, axis=1))) if T else 0.0
        return CTCState(np.full(T, NEG_INF), r_b, None, total)

    def extend(self, state: CTCState, c: int) -> CTCState:
        """Forward variables and prefix probability of ``prefix + [c]``."""
        lp = self.lp
        T = lp.shape[0]
        r_n = np.full(T, NEG_INF)
        r_b = np.full(T, NEG_INF)
        if T == 0:
            return CTCState(r_n, r_b, c, NEG_INF)
        # mass available for starting a new emission of c right after frame t-1
        phi = state.r_b if state.last == c else np.logaddexp(state.r_n, state.r_b)
        r_n[0] = lp[0, c] if state.last is None else NEG_INF
        psi = r_n[0]
        for t in range(1, T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + lp[t, c]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lp[t, self.blank]
        if T > 1:
            psi = np.logaddexp.reduce(np.concatenate([[psi], phi[:-1] + lp[1:, c]]))
        return CTCState(r_n, r_b, c, float(psi))

    def final_score(self, state: CTCState) -> float:
        """Log-probability that the full CTC output equals the prefix."""
        if self.lp.shape[0] == 0:
            return 0.0 if state.last is None else NEG_INF
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))

    def score(self, prefix: Sequence[int]) -> CTCState:
        state = self.initial()
        for c in prefix:
            state = self.extend(state, c)
        return state


def ctc_prefix_score(log_probs: np.ndarray, prefix: Sequence[int], blank: int = BLANK) -> float:
    """Log-probability that the CTC output sequence begins with ``prefix``."""
    return CTCPrefixScorer(log_probs, blank).score(prefix).prefix_score


def ctc_sequence_score(log_probs: np.ndarray, labels: Sequence[int], blank: int = BLANK) -> float:
    """Log-probability that the CTC output sequence is exactly ``labels``."""
    scorer = CTCPrefixScorer(log_probs, blank)
    return scorer.final_score(scorer.score(labels))


# ---------------------------------------------------------------------------
# joint beam search


@dataclass
class Hypothesis:
    tokens: list[int]
    attention: float
    ctc: float
    score: float
    text: str = ""


@dataclass
class _Live:
    tokens: list[int]
    attention: float
    state: CTCState
    score: float


def joint_beam_search(att_fn: Callable[[list[list[int]]], np.ndarray], ctc_lp: np.ndarray,
                      symbols: Sequence[int], beam_width: int, ctc_weight: float,
                      max_len: int) -> Hypothesis:
    """Beam search scoring ``ctc_weight * ctc + (1 - ctc_weight) * attention``.

    ``att_fn`` maps a list of token prefixes (without sos) to next-token
    log-probabilities, one row per prefix.  Every live hypothesis is also
    offered as finished (its eos score, with the complete-sequence CTC score),
    and only the expansions compete for the ``beam_width`` live slots.  Both
    partial scores can only decrease along a path, so the search stops as soon
    as no live hypothesis can beat the best finished one.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError("ctc_weight must lie in [0, 1]")
    lam = ctc_weight
    scorer = CTCPrefixScorer(ctc_lp)

    def joint(att: float, ctc: float) -> float:
        # zero weights must not turn -inf into nan
        a = (1.0 - lam) * att if lam < 1.0 else 0.0
        c = lam * ctc if lam > 0.0 else 0.0
        return a + c

    init = scorer.initial()
    live = [_Live([], 0.0, init, joint(0.0, init.prefix_score))]
    best: Hypothesis | None = None
    for length in range(max_len + 1):
        if not live:
            break
        att_rows = att_fn([h.tokens for h in live])
        expansions: list[_Live] = []
        for h, row in zip(live, att_rows):
            ctc_full = scorer.final_score(h.state)
            att_end = h.attention + row[EOS]
            done = Hypothesis(list(h.tokens), att_end, ctc_full, joint(att_end, ctc_full))
            if best is None or done.score > best.score:
                best = done
            if length == max_len:
                continue
            for c in symbols:
                st = scorer.extend(h.state, c)
                att = h.attention + row[c]
                expansions.append(_Live(h.tokens + [c], att, st, joint(att, st.prefix_score)))
        expansions.sort(key=lambda h: h.score, reverse=True)
        live = [h for h in expansions[:beam_width] if h.score > best.score]
    return best


def decode(params: ModelParams, features: np.ndarray, beam_width: int = 10, ctc_weight: float = 0.3,
           max_len: int | None = None) -> Hypothesis:
    """Decode one utterance of raw FBANK frames with the fine-tuned model."""
    with nx.no_grad():
        enc, _ = encoder_forward(params, features, "finetune")
        lp = ctc_log_probs(params, enc).data
        enc_data = enc.data

        def att_fn(prefixes: list[list[int]]) -> np.ndarray:
            toks = np.array([[SOS] + p for p in prefixes], dtype=np.int64)
            B = toks.shape[0]
            batch_enc = np.broadcast_to(enc_data, (B,) + enc_data.shape)
            logits = decoder_forward(params, batch_enc, toks, np.full(B, enc_data.shape[0]))
            return nx.log_softmax(logits[:, -1, :]).data

    symbols = list(range(len(SPECIAL_SYMBOLS), params.decoder.vocab_size))
    limit = enc_data.shape[0] if max_len is None else max_len
    with nx.no_grad():
        hyp = joint_beam_search(att_fn, lp, symbols, beam_width, ctc_weight, limit)
    hyp.text = params.vocab.decode(hyp.tokens)
    return hyp


# ---------------------------------------------------------------------------
# character error rate


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_counts(reference: Sequence, hypothesis: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment with substitution/deletion/insertion counts."""
    n, m = len(reference), len(hypothesis)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    counts = EditCounts()
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            counts.substitutions += int(reference[i - 1] != hypothesis[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            counts.deletions += 1
            i -= 1
        else:
            counts.insertions += 1
            j -= 1
    return counts


def cer(reference: str, hypothesis: str) -> tuple[float, EditCounts]:
    counts = edit_counts(reference, hypothesis)
    if not reference:
        if hypothesis:
            raise ValueError("CER is undefined for an empty reference with a non-empty hypothesis")
        log.info("empty reference and hypothesis; CER taken as 0")
        return 0.0, counts
    return counts.distance / len(reference), counts


@dataclass
class UtteranceResult:
    utterance_id: str
    reference: str
    hypothesis: str
    counts: EditCounts

    @property
    def cer(self) -> float:
        return self.counts.distance / len(self.reference) if self.reference else 0.0


@dataclass
class EvalReport:
    utterances: list[UtteranceResult] = field(default_factory=list)

    def add(self, utterance_id: str, reference: str, hypothesis: str) -> UtteranceResult:
        _, counts = cer(reference, hypothesis)
        res = UtteranceResult(utterance_id, reference, hypothesis, counts)
        self.utterances.append(res)
        return res

    @property
    def substitutions(self) -> int:
        return sum(u.counts.substitutions for u in self.utterances)

    @property
    def deletions(self) -> int:
        return sum(u.counts.deletions for u in self.utterances)

    @property
    def insertions(self) -> int:
        return sum(u.counts.insertions for u in self.utterances)

    @property
    def cer(self) -> float:
        ref_chars = sum(len(u.reference) for u in self.utterances)
        errors = self.substitutions + self.deletions + self.insertions
        return errors / ref_chars if ref_chars else 0.0

    def to_tsv(self) -> str:
        return "".join(f"{u.utterance_id}\t{u.cer:.6f}\t{u.reference}\t{u.hypothesis}\n"
                       for u in self.utterances)

    def summary(self) -> str:
        return (f"utterances={len(self.utterances)} cer={self.cer:.6f} "
                f"sub={self.substitutions} del={self.deletions} ins={self.insertions}")
