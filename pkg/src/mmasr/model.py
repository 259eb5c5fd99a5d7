"""Attention-based encoder-decoder recognizer.

Encoder: a stack of bidirectional LSTMs, each followed by a tanh projection;
the middle two layers first drop every other time step. Decoder: two GRUs
with feed-forward attention between them and an output layer whose final
projection shares storage with the input embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import grounding as gr
from . import numcore as nc
from .errors import ConfigError, ContractError, DimensionError, RangeError
from .vocab import BOS, PAD


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int = 43
    hidden: int = 320
    enc_layers: int = 6
    dropout: float = 0.4
    mode: str = "none"
    visual_dim: int = 2048
    tie_embeddings: bool = True
    tie_init: bool = True
    # "d2": GRU1 is fed the previous GRU2 state (t > 0); "d1": its own previous state
    dec_feedback: str = "d2"
    # weights ~ U(±sqrt(init_gain / fan_in)); 1.0 is the textbook default but
    # starves a six-layer stack of signal (see README, "Initialization")
    init_gain: float = 6.0

    def __post_init__(self):
        gr.check_mode(self.mode)
        if self.dec_feedback not in ("d1", "d2"):
            raise ConfigError(f"dec_feedback must be 'd1' or 'd2', got {self.dec_feedback!r}")
        if self.enc_layers < 2:
            raise ConfigError("the encoder needs at least two layers to subsample")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def subsample_layers(self) -> tuple[int, int]:
        mid = self.enc_layers // 2
        return (mid - 1, mid)

    def to_dict(self):
        return asdict(self)


def encoded_length(T: int, n_subsample: int = 2) -> int:
    for _ in range(n_subsample):
        T = -(-T // 2)
    return T


class Params:
    """Named parameter tensors; aliases share storage with a canonical entry."""

    def __init__(self):
        self.tensors: dict[str, nc.Tensor] = {}
        self.aliases: dict[str, str] = {}

    def add(self, name, array) -> nc.Tensor:
        if name in self.tensors or name in self.aliases:
            raise ConfigError(f"parameter {name!r} already exists")
        t = nc.param(array, name)
        self.tensors[name] = t
        return t

    def alias(self, name, target):
        self.aliases[name] = self.canonical(target)

    def canonical(self, name):
        return self.aliases.get(name, name)

    def __getitem__(self, name) -> nc.Tensor:
        return self.tensors[self.canonical(name)]

    def __contains__(self, name):
        return self.canonical(name) in self.tensors

    def items(self) -> Iterator[tuple[str, nc.Tensor]]:
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def astype(self, dtype):
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays):
        for k, v in arrays.items():
            t = self.tensors[k]
            if t.data.shape != v.shape:
                raise DimensionError(f"parameter {k}: checkpoint shape {v.shape}, model shape {t.data.shape}")
            t.data = np.array(v, dtype=t.data.dtype)


def param_count(params: Params) -> int:
    """Scalar parameters, counting tied storage once."""
    return params.count()


@dataclass
class Encodings:
    E: nc.Tensor            # (B, T', H)
    mask: np.ndarray        # (B, T')
    e: nc.Tensor            # (B, H) mean over valid steps
    keys: nc.Tensor         # (B, T', H) attention keys U·E_t

    @property
    def lengths(self):
        return self.mask.sum(axis=1).astype(int)


@dataclass
class DecoderState:
    h1: nc.Tensor
    h2: nc.Tensor
    step: int = 0
    z: nc.Tensor | None = None
    logits: nc.Tensor | None = None
    alpha: np.ndarray | None = None


def pad_batch(seqs, dtype=np.float32):
    """List of (T_i, D) arrays -> (B, T_max, D) zero-padded array and mask."""
    T = max(len(s) for s in seqs)
    D = seqs[0].shape[1]
    X = np.zeros((len(seqs), T, D), dtype=dtype)
    M = np.zeros((len(seqs), T), dtype=dtype)
    for i, s in enumerate(seqs):
        X[i, :len(s)] = s
        M[i, :len(s)] = 1.0
    return X, M


class Seq2Seq:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = Params()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._build(rng)

    # ------------------------------------------------------------ construction

    def _uniform(self, rng, shape, fan_in):
        k = np.sqrt(self.cfg.init_gain / fan_in)
        return rng.uniform(-k, k, size=shape).astype(self.dtype)

    def _zeros(self, *shape):
        return np.zeros(shape, dtype=self.dtype)

    def _build(self, rng):
        c, P = self.cfg, self.params
        H = c.hidden
        d_in = c.feat_dim
        for k in range(c.enc_layers):
            for d in ("fw", "bw"):
                P.add(f"enc.{k}.{d}.W_ih", self._uniform(rng, (4 * H, d_in), d_in))
                P.add(f"enc.{k}.{d}.W_hh", self._uniform(rng, (4 * H, H), H))
                b = self._zeros(4 * H)
                b[H:2 * H] = 1.0  # forget gate
                P.add(f"enc.{k}.{d}.b", b)
            P.add(f"enc.{k}.proj.W", self._uniform(rng, (H, 2 * H), 2 * H))
            P.add(f"enc.{k}.proj.b", self._zeros(H))
            d_in = H
        P.add("dec.emb", self._uniform(rng, (c.vocab_size, H), H))
        if not gr.uses_decoder_init(c.mode):
            P.add("dec.init.W", self._uniform(rng, (H, H), H))
        for g in ("gru1", "gru2"):
            P.add(f"dec.{g}.W_ih", self._uniform(rng, (3 * H, H), H))
            P.add(f"dec.{g}.W_hh", self._uniform(rng, (3 * H, H), H))
            P.add(f"dec.{g}.b", self._zeros(3 * H))
        P.add("att.U", self._uniform(rng, (H, H), H))
        P.add("att.W", self._uniform(rng, (H, H), H))
        P.add("att.v", self._uniform(rng, (H,), H))
        P.add("out.W_o", self._uniform(rng, (H, H), H))
        P.add("out.b_o", self._zeros(H))
        if c.tie_embeddings:
            P.alias("out.W_p", "dec.emb")
        else:
            P.add("out.W_p", self._uniform(rng, (c.vocab_size, H), H))
        P.add("out.b_p", self._zeros(c.vocab_size))
        gr.attach(P, c.mode, c.feat_dim, H, c.visual_dim, rng, self.dtype, c.tie_init, c.init_gain)

    def attach_grounding(self, mode, seed=0):
        """Add grounding layers to a baseline model (used by visual adaptation)."""
        if self.cfg.mode != "none":
            raise ContractError(f"model already has grounding mode {self.cfg.mode!r}")
        if gr.uses_decoder_init(mode):
            raise ContractError("decoder-init modes replace a baseline layer; build them from scratch")
        gr.attach(self.params, mode, self.cfg.feat_dim, self.cfg.hidden, self.cfg.visual_dim,
                  np.random.default_rng(seed), self.dtype, self.cfg.tie_init, self.cfg.init_gain)
        self.cfg.mode = mode

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params.astype(dtype)
        return self

    @property
    def mode(self):
        return self.cfg.mode

    @property
    def needs_visual(self):
        return self.cfg.mode != "none"

    # ------------------------------------------------------------ encoder

    def _visual(self, f, B):
        if f is None:
            raise ContractError(f"grounding mode {self.mode!r} needs a visual feature per utterance")
        f = np.asarray(f, dtype=self.dtype)
        if f.ndim == 1:
            f = np.broadcast_to(f, (B, f.shape[0]))
        if f.shape[0] != B:
            raise DimensionError(f"{f.shape[0]} visual vectors for a batch of {B}")
        return f

    def encode(self, X, mask, f=None, training=False, rng=None, discard_shift=False,
               enc_init=None) -> Encodings:
        """Run the encoder on a padded (B, T, D) batch."""
        c, P = self.cfg, self.params
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 2:
            X, mask = X[None], np.ones((1, len(X)), dtype=self.dtype)
        if X.shape[-1] != c.feat_dim:
            raise DimensionError(f"acoustic width {X.shape[-1]} but the model expects {c.feat_dim}")
        if X.shape[1] < 1:
            raise DimensionError("empty acoustic sequence")
        B = X.shape[0]
        mask = np.asarray(mask, dtype=self.dtype)
        x = nc.tensor(X)
        if c.mode == "vat" and not discard_shift:
            x = gr.apply_shift(x, gr.vat_shift(self._visual(f, B), P))
        h0 = c0 = None
        if enc_init is not None:
            h0, c0 = enc_init
        elif gr.uses_encoder_init(c.mode):
            h0, c0 = gr.encoder_init_visual(self._visual(f, B), P, c.mode)
        sub = c.subsample_layers
        for k in range(c.enc_layers):
            if k in sub:
                x, mask = nc.subsample_time(x, mask)
            p = f"enc.{k}"
            fw = nc.lstm_sequence(x, mask, P[f"{p}.fw.W_ih"], P[f"{p}.fw.W_hh"], P[f"{p}.fw.b"], h0, c0)
            bw = nc.lstm_sequence(x, mask, P[f"{p}.bw.W_ih"], P[f"{p}.bw.W_hh"], P[f"{p}.bw.b"], h0, c0,
                                  reverse=True)
            x = nc.tanh(nc.affine(nc.concat([fw, bw]), P[f"{p}.proj.W"], P[f"{p}.proj.b"]))
        E = nc.dropout(x, c.dropout, training, rng)
        e = nc.masked_mean_time(E, mask)
        keys = nc.affine(E, P["att.U"])
        return Encodings(E, mask, e, keys)

    # ------------------------------------------------------------ decoder

    def init_decoder_mean(self, enc: Encodings) -> nc.Tensor:
        """h0 = tanh(W_h e), e the mean source encoding."""
        return nc.tanh(nc.affine(enc.e, self.params["dec.init.W"]))

    def init_state(self, enc: Encodings, f=None, dec_init=None) -> DecoderState:
        B = enc.E.shape[0]
        if dec_init is not None:
            h0 = dec_init
        elif gr.uses_decoder_init(self.mode):
            h0 = gr.decoder_init_visual(self._visual(f, B), self.params, self.mode)
        else:
            h0 = self.init_decoder_mean(enc)
        return DecoderState(h1=h0, h2=nc.tensor(np.zeros((B, self.cfg.hidden), self.dtype)))

    def first_input(self, B, f=None, bos_input=None) -> nc.Tensor:
        """Decoder input embedding at t=0."""
        if bos_input is not None:
            return bos_input
        if self.mode == "visual_bos":
            return gr.visual_bos(self._visual(f, B), self.params, self.mode)
        return nc.embedding(self.params["dec.emb"], np.full(B, BOS))

    def embed(self, ids) -> nc.Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        V = self.cfg.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= V):
            raise RangeError(f"token id outside [0, {V})")
        return nc.embedding(self.params["dec.emb"], ids)

    def decoder_step(self, y_in: nc.Tensor, state: DecoderState, enc: Encodings,
                     training=False, rng=None, return_hidden=False):
        """One decoder step from an input embedding; returns (logits, state).

        With ``return_hidden`` the pre-projection activation is returned in
        place of the logits so a caller can batch the output projection.
        """
        P, c = self.params, self.cfg
        if state.step == 0 or c.dec_feedback == "d1":
            carry = state.h1
        else:
            carry = state.h2
        h1 = nc.gru_cell(y_in, carry, P["dec.gru1.W_ih"], P["dec.gru1.W_hh"], P["dec.gru1.b"])
        q = nc.affine(h1, P["att.W"])
        z, alpha = nc.additive_attention(enc.E, enc.keys, q, P["att.v"], enc.mask)
        h2 = nc.gru_cell(z, h1, P["dec.gru2.W_ih"], P["dec.gru2.W_hh"], P["dec.gru2.b"])
        hid = nc.tanh(nc.affine(h2, P["out.W_o"], P["out.b_o"]))
        hid = nc.dropout(hid, c.dropout, training, rng)
        new = DecoderState(h1=h1, h2=h2, step=state.step + 1, z=z, alpha=alpha)
        if return_hidden:
            return hid, new
        logits = self.project(hid)
        new.logits = logits
        return logits, new

    def project(self, hid) -> nc.Tensor:
        return nc.affine(hid, self.params["out.W_p"], self.params["out.b_p"])

    # ------------------------------------------------------------ training objective

    def loss(self, X, mask, targets, f=None, training=False, rng=None, discard_shift=False):
        """Teacher-forced mean token cross-entropy.

        ``targets``: (B, S) int array of token ids ending in eos, pad-filled.
        """
        targets = np.asarray(targets, dtype=np.int64)
        B, S = targets.shape
        enc = self.encode(X, mask, f, training, rng, discard_shift)
        state = self.init_state(enc, f)
        y = self.first_input(B, f)
        hids = []
        for t in range(S):
            if t > 0:
                y = self.embed(targets[:, t - 1])
            hid, state = self.decoder_step(y, state, enc, training, rng, return_hidden=True)
            hids.append(hid)
        logits = self.project(nc.stack(hids, axis=1))
        return nc.cross_entropy(logits, targets, targets != PAD)

    # ------------------------------------------------------------ inference helpers

    def log_probs(self, logits: nc.Tensor) -> np.ndarray:
        return nc._log_softmax_np(np.asarray(logits.data, dtype=np.float64))

    def distribution(self, logits: nc.Tensor) -> np.ndarray:
        return nc._softmax_np(np.asarray(logits.data, dtype=np.float64))


def reorder_state(state: DecoderState, idx) -> DecoderState:
    """Select/duplicate batch rows of a decoder state (inference only)."""
    idx = np.asarray(idx, dtype=np.int64)
    return DecoderState(h1=nc.tensor(state.h1.data[idx]), h2=nc.tensor(state.h2.data[idx]),
                        step=state.step)


def expand_encodings(enc: Encodings, n: int) -> Encodings:
    """Repeat a single-utterance encoding ``n`` times along the batch axis."""
    rep = lambda a: np.repeat(a, n, axis=0)
    return Encodings(nc.tensor(rep(enc.E.data)), rep(enc.mask), nc.tensor(rep(enc.e.data)),
                     nc.tensor(rep(enc.keys.data)))
