"""Acoustic front-end, visual pooling, manifests and the synthetic corpus."""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (ConfigError, DimensionError, EmptyInputError, FormatError,
                     ManifestError, ResolutionError)

SAMPLE_RATE = 16000
WIN = 400          # 25 ms
HOP = 160          # 10 ms
NFFT = 512
N_MELS = 40
N_PITCH = 3
LOG_FLOOR = 1e-10
PREEMPH = 0.97

MMF_MAGIC = b"MMF1"


# ---------------------------------------------------------------- feature files

def write_matrix(path, mat) -> None:
    mat = np.asarray(mat, dtype="<f4")
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise DimensionError(f"feature matrices are 2-D, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(MMF_MAGIC)
        fh.write(struct.pack("<II", *mat.shape))
        fh.write(np.ascontiguousarray(mat).tobytes())


def read_matrix_header(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != MMF_MAGIC:
        raise FormatError(f"{path}: not an MMF1 feature file")
    return struct.unpack("<II", head[4:])


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MMF_MAGIC:
        raise FormatError(f"{path}: not an MMF1 feature file")
    rows, cols = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * rows * cols
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes for {rows}x{cols}, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)


def read_wav(path) -> np.ndarray:
    """16 kHz mono 16-bit PCM as float samples in the int16 range."""
    with wave.open(str(path), "rb") as w:
        if w.getframerate() != SAMPLE_RATE:
            raise FormatError(f"{path}: sample rate {w.getframerate()}, expected {SAMPLE_RATE}")
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono 16-bit PCM")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64)


def write_wav(path, samples) -> None:
    pcm = np.clip(np.round(samples), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- front-end

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, nfft=NFFT, sr=SAMPLE_RATE, fmin=0.0, fmax=None) -> np.ndarray:
    """(n_mels, nfft//2+1) triangular filters, equally spaced on the mel scale."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(nfft // 2 + 1) * sr / nfft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int) -> int:
    return (n_samples - WIN) // HOP + 1


def logmel_fbank(waveform, sample_rate=SAMPLE_RATE, n_mels=N_MELS) -> np.ndarray:
    """(T, n_mels) log mel energies, 25 ms Hamming windows every 10 ms."""
    if sample_rate != SAMPLE_RATE:
        raise FormatError(f"sample rate {sample_rate} not supported, expected {SAMPLE_RATE}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < WIN:
        raise EmptyInputError(f"need at least {WIN} samples, got {x.size}")
    T = num_frames(len(x))
    idx = np.arange(WIN)[None, :] + HOP * np.arange(T)[:, None]
    frames = x[idx]
    # per-frame pre-emphasis, first sample replicated
    prev = np.concatenate([frames[:, :1], frames[:, :-1]], axis=1)
    frames = (frames - PREEMPH * prev) * np.hamming(WIN)
    mag = np.abs(np.fft.rfft(frames, n=NFFT, axis=1))
    energies = mag @ mel_filterbank(n_mels).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def with_pitch(fbank, pitch=None) -> np.ndarray:
    """Append 3 pitch columns, zero-filled when none are supplied."""
    if pitch is None:
        pitch = np.zeros((len(fbank), N_PITCH))
    pitch = np.asarray(pitch)
    if pitch.shape != (len(fbank), N_PITCH):
        raise DimensionError(f"pitch block {pitch.shape} does not match {len(fbank)} frames")
    return np.concatenate([fbank, pitch], axis=1)


def cmvn_per_video(sequences: Mapping[str, np.ndarray], video_of: Mapping[str, str],
                   floor=1e-8) -> dict[str, np.ndarray]:
    """Normalize each utterance with statistics pooled over its whole video."""
    groups: dict[str, list[str]] = {}
    for utt in sequences:
        groups.setdefault(video_of[utt], []).append(utt)
    out = {}
    for utts in groups.values():
        pooled = np.concatenate([np.asarray(sequences[u], dtype=np.float64) for u in utts])
        mu = pooled.mean(axis=0)
        sd = np.maximum(pooled.std(axis=0), floor)
        for u in utts:
            x = np.asarray(sequences[u], dtype=np.float64)
            out[u] = ((x - mu) / sd).astype(np.asarray(sequences[u]).dtype)
    return out


def pool_visual(clips: Mapping[str, tuple[str, np.ndarray]], mode: str):
    """Average frame-level visual vectors.

    ``clips`` maps utt_id -> (video_id, frames[n, D_v]). Returns
    ``(table, key_of)``: the pooled vectors and, per utterance, the key that
    resolves to its vector (utt_id for per-clip, video_id for per-video).
    """
    if mode not in ("clip", "video"):
        raise ConfigError(f"visual granularity must be 'clip' or 'video', got {mode!r}")
    dims = {np.asarray(f).shape[-1] for _, f in clips.values()}
    if len(dims) > 1:
        raise DimensionError(f"ragged visual vector lengths {sorted(dims)}")
    for utt, (_, frames) in clips.items():
        if np.asarray(frames).ndim != 2 or len(frames) == 0:
            raise DimensionError(f"clip {utt} needs a non-empty (frames, D_v) matrix")
    table, key_of = {}, {}
    if mode == "clip":
        for utt, (_, frames) in clips.items():
            table[utt] = np.asarray(frames, dtype=np.float64).mean(axis=0)
            key_of[utt] = utt
        return table, key_of
    by_video: dict[str, list[np.ndarray]] = {}
    for utt, (vid, frames) in clips.items():
        by_video.setdefault(vid, []).append(np.asarray(frames, dtype=np.float64))
        key_of[utt] = vid
    for vid, blocks in by_video.items():
        table[vid] = np.concatenate(blocks).mean(axis=0)
    return table, key_of


# ---------------------------------------------------------------- manifests & datasets

@dataclass
class UtteranceRecord:
    utt_id: str
    video_id: str
    acoustic_path: str
    visual_key: str
    transcript: str


@dataclass
class Dataset:
    """Ordered utterance records plus a visual table.

    Acoustic features are read lazily from ``acoustic_path`` (relative to
    ``root``) unless already present in ``features``.
    """

    records: list[UtteranceRecord]
    visual: dict[str, np.ndarray] = field(default_factory=dict)
    split: str = "train"
    root: Path | None = None
    features: dict[str, np.ndarray] = field(default_factory=dict)
    zero_pitch: bool = True

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def _path(self, p):
        p = Path(p)
        return p if p.is_absolute() or self.root is None else self.root / p

    def acoustic(self, rec: UtteranceRecord) -> np.ndarray:
        feats = self.features.get(rec.utt_id)
        if feats is None:
            path = self._path(rec.acoustic_path)
            if path.suffix == ".wav":
                fb = logmel_fbank(read_wav(path))
                feats = with_pitch(fb) if self.zero_pitch else fb
                feats = feats.astype(np.float32)
            else:
                feats = read_matrix(path)
            self.features[rec.utt_id] = feats
        return feats

    def visual_for(self, rec: UtteranceRecord) -> np.ndarray:
        try:
            return self.visual[rec.visual_key]
        except KeyError:
            raise ResolutionError(f"utterance {rec.utt_id}: visual key {rec.visual_key!r} not found") from None

    @property
    def visual_dim(self) -> int | None:
        for v in self.visual.values():
            return int(np.asarray(v).shape[-1])
        return None

    @property
    def feat_dim(self) -> int:
        return int(self.acoustic(self.records[0]).shape[1])

    def transcripts(self) -> list[str]:
        return [r.transcript for r in self.records]

    def save(self, directory, name=None) -> Path:
        """Write manifest ``<name>.tsv`` plus MMF feature and visual files."""
        directory = Path(directory)
        name = name or self.split
        (directory / "feats" / name).mkdir(parents=True, exist_ok=True)
        (directory / "visual").mkdir(parents=True, exist_ok=True)
        lines = ["# utt_id\tvideo_id\tacoustic_path\tvisual_key\ttranscript"]
        for rec in self.records:
            rel = f"feats/{name}/{rec.utt_id}.mmf"
            write_matrix(directory / rel, self.acoustic(rec))
            lines.append("\t".join([rec.utt_id, rec.video_id, rel, rec.visual_key, rec.transcript]))
        for key, vec in sorted(self.visual.items()):
            write_matrix(directory / "visual" / f"{key}.mmf", np.asarray(vec)[None, :])
        manifest = directory / f"{name}.tsv"
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return manifest


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write("\t".join([r.utt_id, r.video_id, r.acoustic_path, r.visual_key, r.transcript]) + "\n")


def load_manifest(path, multimodal=False, visual_dir=None, split=None, feat_dim=None) -> Dataset:
    """Parse a TAB-separated manifest into a :class:`Dataset`.

    Visual keys resolve to ``<visual_dir>/<key>.mmf`` (default: ``visual/``
    next to the manifest). With ``multimodal`` every key must resolve.
    Feature-file headers are checked eagerly so width mismatches surface here.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    visual_dir = Path(visual_dir) if visual_dir is not None else root / "visual"
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ManifestError(path, lineno, f"expected 5 TAB-separated fields, found {len(parts)}")
            if not parts[0] or not parts[1]:
                raise ManifestError(path, lineno, "empty utt_id or video_id")
            if parts[0] in seen:
                raise ManifestError(path, lineno, f"duplicate utt_id {parts[0]!r}")
            seen.add(parts[0])
            records.append(UtteranceRecord(*parts))
    if not records:
        raise EmptyInputError(f"{path}: manifest has no records")
    visual = {}
    for rec in records:
        f = visual_dir / f"{rec.visual_key}.mmf"
        if rec.visual_key in visual:
            continue
        if f.is_file():
            visual[rec.visual_key] = read_matrix(f)[0]
        elif multimodal:
            raise ResolutionError(f"{path}: visual key {rec.visual_key!r} has no file {f}")
    dims = {len(v) for v in visual.values()}
    if len(dims) > 1:
        raise DimensionError(f"{path}: visual vectors have differing widths {sorted(dims)}")
    ds = Dataset(records, visual, split or path.stem, root)
    widths = set()
    for rec in records:
        p = ds._path(rec.acoustic_path)
        if p.suffix == ".wav":
            widths.add(N_MELS + N_PITCH)
        elif p.is_file():
            widths.add(read_matrix_header(p)[1])
        else:
            raise FileNotFoundError(f"{path}: acoustic file {p} for {rec.utt_id} not found")
    if len(widths) > 1 or (feat_dim is not None and widths != {feat_dim}):
        raise DimensionError(f"{path}: acoustic feature widths {sorted(widths)}"
                             + (f", expected {feat_dim}" if feat_dim is not None else ""))
    return ds


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class SynthConfig:
    n_train: int = 400
    n_val: int = 80
    n_test: int = 120
    vocab_size: int = 20
    n_contexts: int = 4
    ambiguity_rate: float = 0.2
    frames_per_token: int = 8
    noise_std: float = 0.3
    feat_dim: int = N_MELS + N_PITCH
    visual_dim: int = 16
    visual_noise: float = 0.3
    clips_per_video: int = 4
    frames_per_clip: int = 3
    min_tokens: int = 3
    max_tokens: int = 6

    def validate(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError("ambiguity_rate must lie in [0, 1]")
        if self.n_contexts < 2:
            raise ConfigError("n_contexts must be at least 2")
        n_homo = round(self.ambiguity_rate * self.vocab_size)
        if n_homo % 2:
            raise ConfigError(f"ambiguity_rate*vocab_size = {n_homo} homophone types cannot be paired")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if self.feat_dim < 1 or self.frames_per_token < 1:
            raise ConfigError("feat_dim and frames_per_token must be positive")


@dataclass
class SynthCorpus:
    train: Dataset
    val: Dataset
    test: Dataset
    words: list[str]
    homophones: set[str]
    # utt_id -> (video_id, per-frame visual vectors), for re-pooling
    visual_frames: dict[str, tuple[str, np.ndarray]] = field(default_factory=dict)

    @property
    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _smooth_template(rng, frames, dims):
    raw = rng.standard_normal((frames + 2, dims + 2))
    k = np.array([0.25, 0.5, 0.25])
    sm = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 0, raw)
    sm = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, sm)
    return sm / sm.std()


def synth_grounded_corpus(cfg: SynthConfig | None = None, seed: int = 0,
                          granularity: str = "video") -> SynthCorpus:
    """Toy audio-visual corpus where some words are homophones resolved by context.

    Every word type has an acoustic template; a fraction ``ambiguity_rate``
    of the types comes in pairs sharing one template. Each video draws a
    context; its clips' visual frames are noisy copies of that context's
    embedding, and every homophone in its transcripts is spelled with the
    pair member assigned to the context.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    V = cfg.vocab_size
    n_pairs = round(cfg.ambiguity_rate * V) // 2
    words = [f"w{i:03d}" for i in range(V)]
    pair_of = {}
    homo_idx = rng.permutation(V)[:2 * n_pairs]
    for p in range(n_pairs):
        a, b = sorted(int(i) for i in homo_idx[2 * p:2 * p + 2])
        pair_of[a] = (p, 0)
        pair_of[b] = (p, 1)
    template_of = {}
    templates = []
    pair_template = {}
    fbank_dims = min(cfg.feat_dim, N_MELS)
    for i in range(V):
        if i in pair_of and pair_of[i][0] in pair_template:
            template_of[i] = pair_template[pair_of[i][0]]
            continue
        templates.append(_smooth_template(rng, cfg.frames_per_token, fbank_dims))
        template_of[i] = len(templates) - 1
        if i in pair_of:
            pair_template[pair_of[i][0]] = template_of[i]
    members = {p: sorted(i for i, (q, _) in pair_of.items() if q == p) for p in range(n_pairs)}
    # balanced split of contexts between the two members of each pair
    side = {}
    for p in range(n_pairs):
        order = rng.permutation(cfg.n_contexts)
        side[p] = np.zeros(cfg.n_contexts, dtype=int)
        side[p][order[cfg.n_contexts // 2:]] = 1
    ctx_embed = rng.standard_normal((cfg.n_contexts, cfg.visual_dim))

    def make_split(name, n):
        records, feats, frames_of = [], {}, {}
        n_videos = -(-n // cfg.clips_per_video)
        for v in range(n_videos):
            vid = f"{name}_v{v:04d}"
            c = int(rng.integers(cfg.n_contexts))
            for k in range(cfg.clips_per_video):
                u = v * cfg.clips_per_video + k
                if u >= n:
                    break
                utt = f"{vid}_c{k:02d}"
                L = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
                types = rng.integers(V, size=L)
                toks = []
                for t in types:
                    t = int(t)
                    if t in pair_of:
                        p = pair_of[t][0]
                        t = members[p][side[p][c]]
                    toks.append(t)
                audio = np.concatenate([templates[template_of[t]] for t in toks])
                audio = audio + cfg.noise_std * rng.standard_normal(audio.shape)
                x = np.zeros((len(audio), cfg.feat_dim), dtype=np.float32)
                x[:, :fbank_dims] = audio
                vis = ctx_embed[c] + cfg.visual_noise * rng.standard_normal((cfg.frames_per_clip, cfg.visual_dim))
                feats[utt] = x
                frames_of[utt] = (vid, vis)
                records.append(UtteranceRecord(utt, vid, f"feats/{name}/{utt}.mmf", utt,
                                               " ".join(words[t] for t in toks)))
        norm = cmvn_per_video(feats, {r.utt_id: r.video_id for r in records})
        table, key_of = pool_visual(frames_of, granularity)
        for r in records:
            r.visual_key = key_of[r.utt_id]
        ds = Dataset(records, {k: v.astype(np.float32) for k, v in table.items()}, name,
                     features={u: a.astype(np.float32) for u, a in norm.items()})
        return ds, frames_of

    train, fr_tr = make_split("train", cfg.n_train)
    val, fr_va = make_split("val", cfg.n_val)
    test, fr_te = make_split("test", cfg.n_test)
    homophones = {words[i] for i in pair_of}
    return SynthCorpus(train, val, test, words, homophones, {**fr_tr, **fr_va, **fr_te})
