"""Teacher-forced training with Adam, clipping, and WER-driven scheduling.

Also holds the checkpoint format and the two continuation procedures run on
a converged baseline: visual adaptation (a zero-initialized shift layer is
attached and everything is fine-tuned) and the plain restart control.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .decoding import greedy_decode
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, FormatError
from .metrics import corpus_stats
from .model import ModelConfig, Seq2Seq, pad_batch
from .vocab import PAD, Vocab, normalize_text

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_ALIAS = 0xFF


@dataclass
class TrainConfig:
    lr: float = 0.0004
    clip_norm: float = 1.0
    dropout: float = 0.4
    patience_stop: int = 10
    patience_lr: int = 2
    batch_size: int = 16
    max_epochs: int = 60
    seed: int = 1
    eval_beam: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.patience_lr >= self.patience_stop:
            raise ConfigError("patience_lr must be smaller than patience_stop")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- objective & optimizer

def cross_entropy_loss(logits, targets, pad_id=PAD) -> nc.Tensor:
    """Mean negative log-probability over non-pad target positions."""
    targets = np.asarray(targets)
    return nc.cross_entropy(logits, targets, targets != pad_id)


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(params, grads, moments: Adam, lr) -> None:
    moments.step(params, grads, lr)


# ---------------------------------------------------------------- data plumbing

@dataclass
class Split:
    """A dataset materialized for the model: features, visuals, targets, refs."""

    utt_ids: list[str]
    feats: list[np.ndarray]
    visuals: list[np.ndarray] | None
    targets: list[list[int]]
    refs: list[list[str]]

    def __len__(self):
        return len(self.utt_ids)


def materialize(dataset, vocab: Vocab, with_visual=True) -> Split:
    ids, feats, vis, tg, refs = [], [], [], [], []
    for rec in dataset.records:
        ids.append(rec.utt_id)
        feats.append(dataset.acoustic(rec))
        if with_visual and dataset.visual:
            vis.append(np.asarray(dataset.visual_for(rec)))
        tg.append(vocab.encode(rec.transcript))
        refs.append(normalize_text(rec.transcript).split())
    return Split(ids, feats, vis if vis else None, tg, refs)


def make_batches(lengths: Sequence[int], batch_size: int, rng) -> list[np.ndarray]:
    """Seeded shuffle, sort by length into buckets, shuffle bucket order."""
    order = rng.permutation(len(lengths))
    order = order[np.argsort(np.asarray(lengths)[order], kind="stable")]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _targets_array(targets):
    S = max(len(t) for t in targets)
    out = np.full((len(targets), S), PAD, dtype=np.int64)
    for i, t in enumerate(targets):
        out[i, :len(t)] = t
    return out


def batch_loss(model: Seq2Seq, split: Split, idx, training, rng, discard_shift=False) -> nc.Tensor:
    X, M = pad_batch([split.feats[i] for i in idx], model.dtype)
    f = None
    if model.needs_visual:
        if split.visuals is None:
            raise ContractError(f"mode {model.mode!r} needs visual features in the dataset")
        f = np.stack([split.visuals[i] for i in idx]).astype(model.dtype)
    return model.loss(X, M, _targets_array([split.targets[i] for i in idx]), f, training, rng,
                      discard_shift)


def decode_split(model: Seq2Seq, split: Split, vocab: Vocab, beam=1, batch_size=64,
                 discard_shift=False) -> list[list[str]]:
    """Word sequences hypothesized for every utterance of ``split``."""
    if beam == 1:
        hyps = []
        for s in range(0, len(split), batch_size):
            sl = slice(s, s + batch_size)
            vis = split.visuals[sl] if model.needs_visual else None
            hyps.extend(greedy_decode(model, split.feats[sl], vis, discard_shift=discard_shift))
    else:
        from .decoding import decode_utterance
        hyps = []
        for i in range(len(split)):
            f = split.visuals[i] if model.needs_visual else None
            hyps.append(decode_utterance(model, split.feats[i], f, beam=beam,
                                         discard_shift=discard_shift).content)
    return [normalize_text(vocab.decode(h)).split() for h in hyps]


def split_wer(model, split, vocab, beam=1, discard_shift=False) -> float:
    hyps = decode_split(model, split, vocab, beam, discard_shift=discard_shift)
    return corpus_stats(zip(split.refs, hyps)).rate


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    aliases: dict[str, str]
    model_config: dict
    meta: dict = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self):
        return self.meta.get("epoch", 0)

    @property
    def best_wer(self):
        return self.meta.get("best_wer")

    def build_model(self, vocab_size=None) -> Seq2Seq:
        cfg = ModelConfig(**self.model_config)
        if vocab_size is not None and vocab_size != cfg.vocab_size:
            raise DimensionError(f"checkpoint vocabulary size {cfg.vocab_size} != expected {vocab_size}")
        model = Seq2Seq(cfg, seed=0)
        model.params.load_arrays(self.params)
        return model


def config_digest(*dicts) -> str:
    blob = json.dumps(dicts, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def snapshot(model: Seq2Seq, meta=None, optimizer: Adam | None = None) -> Checkpoint:
    ck = Checkpoint(model.params.snapshot(), dict(model.params.aliases), model.cfg.to_dict(),
                    dict(meta or {}))
    if optimizer is not None:
        ck.adam_m = {k: v.copy() for k, v in optimizer.m.items()}
        ck.adam_v = {k: v.copy() for k, v in optimizer.v.items()}
        ck.meta["adam_t"] = optimizer.t
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = dict(ck.meta)
    meta["model_config"] = ck.model_config
    text = "\n".join(f"{k}={json.dumps(meta[k], sort_keys=True)}" for k in sorted(meta)).encode("utf-8")
    blobs = [(k, v) for k, v in ck.params.items()]
    blobs += [(f"adam.m/{k}", v) for k, v in sorted(ck.adam_m.items())]
    blobs += [(f"adam.v/{k}", v) for k, v in sorted(ck.adam_v.items())]
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<H", CKPT_VERSION)
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(blobs) + len(ck.aliases))
    for name, arr in blobs:
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    for alias, target in sorted(ck.aliases.items()):
        nb, tb = alias.encode("utf-8"), target.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", _ALIAS)
        out += struct.pack("<H", len(tb)) + tb
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated at offset {self.pos} (needed {n} bytes)")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, vocab_size=None) -> Checkpoint:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    (n_meta,) = r.unpack("<I")
    meta = {}
    for line in r.take(n_meta).decode("utf-8").split("\n"):
        if line:
            k, v = line.split("=", 1)
            meta[k] = json.loads(v)
    model_config = meta.pop("model_config")
    (n_blobs,) = r.unpack("<I")
    params, aliases, m, v = {}, {}, {}, {}
    for _ in range(n_blobs):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        if rank == _ALIAS:
            (tlen,) = r.unpack("<H")
            aliases[name] = r.take(tlen).decode("utf-8")
            continue
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes at offset {r.pos}")
    if vocab_size is not None and model_config["vocab_size"] != vocab_size:
        raise DimensionError(f"{path}: checkpoint vocabulary size {model_config['vocab_size']}"
                             f" != expected {vocab_size}")
    return Checkpoint(params, aliases, model_config, meta, m, v)


# ---------------------------------------------------------------- training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_wer: float
    lr: float
    wall_time: float = 0.0


@dataclass
class TrainLog:
    rows: list[EpochRecord] = field(default_factory=list)

    def append(self, row: EpochRecord):
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError("TrainLog epochs must strictly increase")
        self.rows.append(row)

    def best(self) -> EpochRecord:
        return min(self.rows, key=lambda r: (r.val_wer, r.epoch))

    def to_tsv(self) -> str:
        """Deterministic text form; wall time is kept out (see timing_tsv)."""
        lines = ["epoch\ttrain_loss\tval_wer\tlr"]
        for r in self.rows:
            loss = "-" if r.train_loss is None else f"{r.train_loss:.6f}"
            lines.append(f"{r.epoch}\t{loss}\t{r.val_wer:.6f}\t{r.lr:.8g}")
        return "\n".join(lines) + "\n"

    def timing_tsv(self) -> str:
        return "epoch\twall_time\n" + "".join(f"{r.epoch}\t{r.wall_time:.3f}\n" for r in self.rows)

    @classmethod
    def from_tsv(cls, text) -> "TrainLog":
        log = cls()
        for line in text.strip().split("\n")[1:]:
            e, loss, w, lr = line.split("\t")
            log.rows.append(EpochRecord(int(e), None if loss == "-" else float(loss), float(w), float(lr)))
        return log


@dataclass
class TrainResult:
    best: Checkpoint
    log: TrainLog
    model: Seq2Seq
    stopped_early: bool


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


def train(model: Seq2Seq, train_split: Split, val_split: Split, vocab: Vocab, cfg: TrainConfig,
          run_dir=None, evaluator: Callable[[Seq2Seq], float] | None = None,
          initial_eval=False, resume=False, on_epoch=None, extra_meta=None) -> TrainResult:
    """Train until validation WER stops improving; returns the best epoch.

    After every epoch the validation WER (greedy unless ``cfg.eval_beam``
    says otherwise) drives two counters: the learning rate halves after
    ``patience_lr`` epochs without a strict improvement, and training stops
    after ``patience_stop``. With ``initial_eval`` an epoch-0 evaluation
    of the untouched model is logged and competes for best.
    """
    model.cfg.dropout = cfg.dropout
    if evaluator is None:
        evaluator = lambda m: split_wer(m, val_split, vocab, cfg.eval_beam)
    run_dir = Path(run_dir) if run_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    log = TrainLog()
    lr = cfg.lr
    best_wer, best_ck = math.inf, None
    bad = lr_bad = 0
    start = 1
    digest = config_digest(model.cfg.to_dict(), cfg.to_dict())
    base_meta = {"config_digest": digest, "seed": cfg.seed, **(extra_meta or {})}

    def meta(epoch, final=False):
        return {**base_meta, "epoch": epoch, "best_wer": best_wer, "lr": lr, "bad": bad,
                "lr_bad": lr_bad, "rng": _rng_state(rng), "final": final}

    if resume and run_dir is not None and (run_dir / "last.ckpt").is_file():
        last = load_checkpoint(run_dir / "last.ckpt")
        if last.meta.get("config_digest") != digest:
            raise ContractError(f"{run_dir}: checkpoint was written with a different configuration")
        model.params.load_arrays(last.params)
        opt.m = {k: v.copy() for k, v in last.adam_m.items()}
        opt.v = {k: v.copy() for k, v in last.adam_v.items()}
        opt.t = last.meta["adam_t"]
        lr, bad, lr_bad = last.meta["lr"], last.meta["bad"], last.meta["lr_bad"]
        best_wer = last.meta["best_wer"]
        _set_rng_state(rng, last.meta["rng"])
        best_ck = load_checkpoint(run_dir / "best.ckpt")
        log = TrainLog.from_tsv((run_dir / "train_log.tsv").read_text())
        log.rows = [r for r in log.rows if r.epoch <= last.epoch]
        start = last.epoch + 1
        if last.meta.get("final"):
            start = cfg.max_epochs + 1
    elif initial_eval:
        t0 = time.perf_counter()
        w = evaluator(model)
        log.append(EpochRecord(0, None, w, lr, time.perf_counter() - t0))
        best_wer = w
        best_ck = snapshot(model, meta(0))

    def persist(epoch, final=False):
        if run_dir is None:
            return
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "last.ckpt", snapshot(model, meta(epoch, final), opt))
        best_ck.meta.update(final=final)
        save_checkpoint(run_dir / "best.ckpt", best_ck)
        (run_dir / "train_log.tsv").write_text(log.to_tsv())
        (run_dir / "timing.tsv").write_text(log.timing_tsv())

    if initial_eval and not resume:
        persist(0)

    lengths = [len(x) for x in train_split.feats]
    stopped = False
    for epoch in range(start, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for idx in make_batches(lengths, cfg.batch_size, rng):
            with nc.Tape() as tape:
                loss = batch_loss(model, train_split, idx, True, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: loss became {value}")
            grads = nc.clip_grad_norm(nc.backward(tape, loss), cfg.clip_norm)
            opt.step(model.params, grads, lr)
            n_tok = sum(len(train_split.targets[i]) for i in idx)
            losses.append(value * n_tok)
            weights.append(n_tok)
        train_loss = sum(losses) / sum(weights)
        w = evaluator(model)
        log.append(EpochRecord(epoch, train_loss, w, lr, time.perf_counter() - t0))
        if w < best_wer:
            best_wer = w
            bad = lr_bad = 0
            best_ck = snapshot(model, meta(epoch))
        else:
            bad += 1
            lr_bad += 1
            if bad >= cfg.patience_stop:
                stopped = True
            elif lr_bad >= cfg.patience_lr:
                lr /= 2.0
                lr_bad = 0
        if on_epoch is not None:
            on_epoch(epoch, log)
        final = stopped or epoch == cfg.max_epochs
        if best_ck is None:
            best_ck = snapshot(model, meta(epoch))
        best_ck.meta["best_wer"] = best_wer
        persist(epoch, final)
        if stopped:
            break
    if best_ck is None:
        best_ck = snapshot(model, meta(0))
    best_ck.meta["final"] = True
    if run_dir is not None:
        save_checkpoint(run_dir / "best.ckpt", best_ck)
    best_model = best_ck.build_model()
    return TrainResult(best_ck, log, best_model, stopped)


def _continue_from(pretrained: Checkpoint, what: str) -> Seq2Seq:
    if pretrained.model_config.get("mode", "none") != "none":
        raise ContractError(f"{what} needs a baseline (mode=none) model, got mode "
                            f"{pretrained.model_config['mode']!r}")
    if not pretrained.meta.get("final"):
        raise ContractError(f"{what} needs a converged baseline; checkpoint is not final")
    return pretrained.build_model()


def adapt_vat(pretrained: Checkpoint, train_split: Split, val_split: Split, vocab: Vocab,
              cfg: TrainConfig, visual_dim: int, run_dir=None, **kw) -> TrainResult:
    """Attach a zero-initialized shift layer to a converged baseline and fine-tune all of it."""
    model = _continue_from(pretrained, "visual adaptation")
    model.cfg.visual_dim = visual_dim
    model.attach_grounding("vat", seed=cfg.seed)
    return train(model, train_split, val_split, vocab, cfg, run_dir, initial_eval=True,
                 extra_meta={"procedure": "vat"}, **kw)


def restart(pretrained: Checkpoint, train_split: Split, val_split: Split, vocab: Vocab,
            cfg: TrainConfig, run_dir=None, **kw) -> TrainResult:
    """Keep training a converged baseline with fresh optimizer state, no new layers."""
    model = _continue_from(pretrained, "restart")
    return train(model, train_split, val_split, vocab, cfg, run_dir, initial_eval=True,
                 extra_meta={"procedure": "restart"}, **kw)
