"""Beam search over one model or an ensemble, plus batched greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError
from .model import Encodings, Seq2Seq, expand_encodings, pad_batch, reorder_state
from .vocab import BOS, EOS, PAD

RULES = ("mean-prob", "mean-logprob")


class StepScorer(Protocol):
    """What beam search needs from a model: per-step log-probabilities."""

    vocab_size: int

    def initial(self): ...

    def step(self, state, prev_ids: np.ndarray, t: int) -> tuple[np.ndarray, object]: ...

    def select(self, state, idx: np.ndarray): ...


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    finished: bool = False
    forced: bool = False

    def key(self, len_norm):
        return self.score / max(len(self.tokens), 1) if len_norm else self.score


@dataclass
class BeamResult:
    tokens: list[int]
    score: float
    forced: bool
    beam: list[Hypothesis] = field(default_factory=list)

    @property
    def content(self) -> list[int]:
        return [t for t in self.tokens if t != EOS]


class ModelScorer:
    """Adapter running one :class:`Seq2Seq` over a single utterance."""

    def __init__(self, model: Seq2Seq, x, f=None, discard_shift=False):
        if model.needs_visual and f is None:
            raise ContractError(f"model mode {model.mode!r} needs a visual feature")
        self.model = model
        self.vocab_size = model.cfg.vocab_size
        X = np.asarray(x, dtype=model.dtype)[None]
        mask = np.ones(X.shape[:2], dtype=model.dtype)
        fv = None if f is None else np.asarray(f, dtype=model.dtype)[None]
        self.f = fv
        self.enc = model.encode(X, mask, fv, training=False, discard_shift=discard_shift)
        self._expanded = {1: self.enc}

    def enc_for(self, n) -> Encodings:
        if n not in self._expanded:
            self._expanded[n] = expand_encodings(self.enc, n)
        return self._expanded[n]

    @property
    def encoded_length(self):
        return int(self.enc.mask.shape[1])

    def initial(self):
        return self.model.init_state(self.enc, self.f)

    def step(self, state, prev_ids, t):
        n = len(prev_ids)
        if t == 0:
            y = self.model.first_input(1, self.f)
            if n != 1:
                y = nc.tensor(np.repeat(y.data, n, axis=0))
        else:
            y = self.model.embed(prev_ids)
        logits, new = self.model.decoder_step(y, state, self.enc_for(n))
        return self.model.log_probs(logits), new

    def select(self, state, idx):
        return reorder_state(state, idx)


class EnsembleScorer:
    """Combines member scorers step by step; each keeps its own state."""

    def __init__(self, scorers: Sequence, rule="mean-prob"):
        if not scorers:
            raise ContractError("an ensemble needs at least one model")
        if rule not in RULES:
            raise ConfigError(f"ensemble rule must be one of {RULES}, got {rule!r}")
        sizes = {s.vocab_size for s in scorers}
        if len(sizes) != 1:
            raise ContractError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
        self.scorers = list(scorers)
        self.rule = rule
        self.vocab_size = sizes.pop()

    def initial(self):
        return [s.initial() for s in self.scorers]

    def step(self, state, prev_ids, t):
        outs = [s.step(st, prev_ids, t) for s, st in zip(self.scorers, state)]
        return combine([o[0] for o in outs], self.rule), [o[1] for o in outs]

    def select(self, state, idx):
        return [s.select(st, idx) for s, st in zip(self.scorers, state)]


def _logsumexp(a, axis=-1):
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def combine(logps: Sequence[np.ndarray], rule="mean-prob") -> np.ndarray:
    """Log of the combined per-step distribution of several models."""
    if rule not in RULES:
        raise ConfigError(f"ensemble rule must be one of {RULES}, got {rule!r}")
    sizes = {lp.shape[-1] for lp in logps}
    if len(sizes) != 1:
        raise ContractError(f"ensemble members disagree on vocabulary size: {sorted(sizes)}")
    if len(logps) == 1:
        return logps[0]
    stacked = np.stack(logps)
    if rule == "mean-prob":
        return _logsumexp(stacked, axis=0)[0] - np.log(len(logps))
    avg = stacked.mean(axis=0)
    return avg - _logsumexp(avg)


def ensemble_predict(dists: Sequence[np.ndarray], rule="mean-prob") -> np.ndarray:
    """Combined probability distribution from per-model distributions."""
    with np.errstate(divide="ignore"):
        logps = [np.log(np.asarray(d, dtype=np.float64)) for d in dists]
    return np.exp(combine(logps, rule))


def default_max_len(encoded_length: int) -> int:
    return 3 * encoded_length + 10


def beam_search(scorer, beam=10, max_len=None, len_norm=True, banned=(PAD, BOS), eos=EOS) -> BeamResult:
    """Standard beam search with finished hypotheses keeping their slot.

    Each step ranks retained finished hypotheses together with every
    expansion of the live ones (by length-normalized score when
    ``len_norm``), keeps the top ``beam``, and stops once all kept
    hypotheses are finished or ``max_len`` tokens were emitted. Ties go to
    the earlier parent, then to the lower token id.
    """
    if beam < 1:
        raise ConfigError("beam must be >= 1")
    if max_len is None:
        max_len = default_max_len(getattr(scorer, "encoded_length", 10))
    state = scorer.initial()
    hyps = [Hypothesis((), 0.0)]
    live = [0]
    prev = np.array([BOS])
    allowed = np.ones(scorer.vocab_size, dtype=bool)
    allowed[list(banned)] = False
    for t in range(max_len):
        logp, state = scorer.step(state, prev, t)
        cands = []
        for pos, h in enumerate(hyps):
            if h.finished:
                cands.append((-h.key(len_norm), pos, -1, h, None))
        for row, pos in enumerate(live):
            h = hyps[pos]
            for v in np.flatnonzero(allowed):
                lp = float(logp[row, v])
                child = Hypothesis(h.tokens + (int(v),), h.score + lp, finished=(v == eos))
                cands.append((-child.key(len_norm), pos, int(v), child, row))
        cands.sort(key=lambda c: (c[0], c[1], c[2]))
        kept = cands[:beam]
        hyps = [c[3] for c in kept]
        rows = [c[4] for c in kept if not c[3].finished]
        live = [i for i, c in enumerate(kept) if not c[3].finished]
        if not live:
            break
        state = scorer.select(state, np.array(rows))
        prev = np.array([hyps[i].tokens[-1] for i in live])
    for h in hyps:
        if not h.finished:
            h.finished = True
            h.forced = True
    order = sorted(range(len(hyps)), key=lambda i: (-hyps[i].key(len_norm), i))
    ranked = [hyps[i] for i in order]
    best = ranked[0]
    return BeamResult(list(best.tokens), best.score, best.forced, ranked)


def decode_utterance(models, x, f=None, beam=10, max_len=None, len_norm=True,
                     rule="mean-prob", discard_shift=False) -> BeamResult:
    """Beam search for one utterance over one model or a list of them."""
    if isinstance(models, Seq2Seq):
        models = [models]
    scorers = [ModelScorer(m, x, f if m.needs_visual else None,
                           discard_shift and m.mode == "vat") for m in models]
    scorer = scorers[0] if len(scorers) == 1 else EnsembleScorer(scorers, rule)
    if max_len is None:
        max_len = default_max_len(scorers[0].encoded_length)
    return beam_search(scorer, beam, max_len, len_norm)


def greedy_decode(model: Seq2Seq, feats: Sequence[np.ndarray], visuals=None, max_len=None,
                  discard_shift=False, banned=(PAD, BOS)) -> list[list[int]]:
    """Batched argmax decoding; token lists exclude eos."""
    X, M = pad_batch(list(feats), model.dtype)
    f = None
    if model.needs_visual:
        if visuals is None:
            raise ContractError(f"model mode {model.mode!r} needs visual features")
        f = np.asarray(np.stack(visuals), dtype=model.dtype)
    enc = model.encode(X, M, f, training=False, discard_shift=discard_shift)
    B = X.shape[0]
    lengths = enc.lengths
    limits = np.array([default_max_len(int(n)) for n in lengths]) if max_len is None else np.full(B, max_len)
    state = model.init_state(enc, f)
    y = model.first_input(B, f)
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    banned = list(banned)
    for t in range(int(limits.max())):
        logits, state = model.decoder_step(y, state, enc)
        scores = np.array(logits.data, dtype=np.float64)
        scores[:, banned] = -np.inf
        nxt = scores.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == EOS:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
                if len(out[b]) >= limits[b]:
                    done[b] = True
        if done.all():
            break
        y = model.embed(nxt)
    return out


def write_hypothesis_dump(path, entries) -> None:
    """entries: iterable of (utt_id, BeamResult, vocab). One line per beam entry."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt, res, vocab in entries:
            for h in res.beam:
                toks = " ".join(vocab.itos[t] for t in h.tokens)
                fh.write(f"{utt}\t{h.score:.6f}\t{toks}\n")
