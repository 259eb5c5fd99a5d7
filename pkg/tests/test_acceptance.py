"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (collected again in the
terminal summary). Tolerances are fixed here, next to the check.
"""

import itertools
import time

import numpy as np
import pytest

from mmasr import experiment as ex
from mmasr import numcore as nc
from mmasr.config import load_config
from mmasr.data import (SynthConfig, cmvn_per_video, logmel_fbank, num_frames,
                        synth_grounded_corpus)
from mmasr.decoding import (EnsembleScorer, ModelScorer, beam_search, decode_utterance,
                            greedy_decode)
from mmasr.grounding import MODES
from mmasr.metrics import align
from mmasr.model import ModelConfig, Seq2Seq, encoded_length, param_count
from mmasr.training import TrainConfig, materialize, split_wer, train
from mmasr.vocab import BOS, EOS, PAD, build_vocab

from conftest import record, small_model
from oracles import edit_counts, mel_bin_of

GRAD_TOL = 1e-4
NORM_TOL = 1e-6
ENSEMBLE_TOL = 1e-7
VAT_TOL = 1e-6
OVERFIT_WER = 0.05
OVERFIT_SECONDS = 300
PIPELINE_SECONDS = 1800


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errs = ex.model_grad_suite(MODES)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{m}={e:.1e}" for m, e in errs.items()) + f"; {dt:.0f}s"
    record(1, "full-model gradient check, all modes", worst < GRAD_TOL and dt < 120, detail)


def test_criterion_02_shape_laws():
    m = small_model()
    lengths_ok = all(
        m.encode(np.zeros((1, T, 5)), np.ones((1, T))).E.shape[1] == encoded_length(T) == -(-(-(-T // 2)) // 2)
        for T in range(1, 65))
    rng = np.random.default_rng(0)
    enc = m.encode(rng.standard_normal((4, 13, 5)), np.ones((4, 13)))
    st, y = m.init_state(enc), m.first_input(4)
    worst_a = worst_p = 0.0
    for _ in range(6):
        logits, st = m.decoder_step(y, st, enc)
        worst_a = max(worst_a, float(np.abs(st.alpha.sum(axis=1) - 1).max()))
        worst_p = max(worst_p, float(np.abs(m.distribution(logits).sum(axis=1) - 1).max()))
        y = m.embed(logits.data.argmax(axis=1))
    ok = lengths_ok and worst_a < NORM_TOL and worst_p < NORM_TOL
    record(2, "encoder length law and normalization", ok,
           f"T'=ceil(ceil(T/2)/2) for T=1..64: {lengths_ok}; |sum(alpha)-1|={worst_a:.1e}; |sum(p)-1|={worst_p:.1e}")


def test_criterion_03_tying_contracts():
    m = small_model("edinit")
    P = m.params
    P["dec.emb"].data[2, 1] = 123.0
    P["vinit.W_h"].data[0, 0] = -9.0
    storage = P["out.W_p"].data[2, 1] == 123.0 and P["vinit.W_d"].data[0, 0] == -9.0

    # two-path gradient sum for the shared matrix
    rng = np.random.default_rng(1)
    X, M = rng.standard_normal((2, 8, 5)), np.ones((2, 8))
    f = rng.standard_normal((2, 4))
    tg = np.array([[4, 5, 2], [6, 2, PAD]])
    from test_grounding import teacher_forced
    from mmasr import grounding as gr

    def g(**kw):
        with nc.Tape() as tape:
            loss = teacher_forced(m, X, M, tg, f, **kw)
        return nc.backward(tape, loss)["vinit.W_h"]

    h0, c0 = gr.encoder_init_visual(f, P, "edinit")
    d0 = gr.decoder_init_visual(f, P, "edinit")
    joint = g()
    parts = g(enc_init=(nc.tensor(h0.data), nc.tensor(c0.data))) + g(dec_init=nc.tensor(d0.data))
    two_path = bool(np.allclose(joint, parts, rtol=1e-10, atol=1e-14))

    V, H, D, Dv = 10, 6, 5, 4
    base = param_count(small_model().params)
    deltas = {
        "untied-tied": param_count(small_model(tie_embeddings=False).params) - base == V * H,
        "vat": param_count(small_model("vat").params) - base == D * Dv + D,
        "einit": param_count(small_model("einit").params) - base == 2 * (H * Dv + H),
        "dinit": param_count(small_model("dinit").params) - base == H * Dv + H - H * H,
        "edinit": param_count(small_model("edinit").params) - base == 2 * (H * Dv + H) + H - H * H,
        "edinit untied": param_count(small_model("edinit", tie_init=False).params)
        - param_count(small_model("edinit").params) == H * Dv,
        "visual_bos": param_count(small_model("visual_bos").params) - base == H * Dv + H,
    }
    ok = storage and two_path and all(deltas.values())
    record(3, "tying contracts", ok,
           f"write-read={storage}; edinit two-path grad sum={two_path}; "
           f"param deltas exact={all(deltas.values())}")


@pytest.fixture(scope="module")
def trained_tiny():
    cor = synth_grounded_corpus(SynthConfig(n_train=60, n_val=20, n_test=20), seed=5)
    vocab = build_vocab(cor.train.transcripts())
    tr, va = materialize(cor.train, vocab), materialize(cor.val, vocab)
    model = Seq2Seq(ModelConfig(vocab_size=len(vocab), hidden=16, enc_layers=2, visual_dim=16), seed=3)
    res = train(model, tr, va, vocab, TrainConfig(lr=0.004, dropout=0.1, max_epochs=4))
    return vocab, tr, va, res


def _distributions(model, split, f_all):
    out = []
    for i in range(len(split)):
        X = split.feats[i][None]
        f = None if f_all is None else f_all[i][None]
        enc = model.encode(X, np.ones(X.shape[:2], np.float32), f)
        st, y = model.init_state(enc, f), model.first_input(1, f)
        for t, tok in enumerate(split.targets[i]):
            logits, st = model.decoder_step(y, st, enc)
            out.append(model.distribution(logits)[0])
            y = model.embed([tok])
    return np.array(out)


def test_criterion_04_vat_zero_init_equivalence(trained_tiny):
    vocab, tr, va, res = trained_tiny
    base = res.best.build_model()
    adapted = res.best.build_model()
    adapted.attach_grounding("vat", seed=1)
    w0, w1 = split_wer(base, va, vocab), split_wer(adapted, va, vocab)
    p0 = _distributions(base, va, None)
    p1 = _distributions(adapted, va, va.visuals)
    diff = float(np.abs(p0 - p1).max())
    ok = w0 == w1 and diff <= VAT_TOL
    record(4, "VAT zero-init equivalence", ok,
           f"val WER {w0:.4f} vs {w1:.4f}; max |p-p'|={diff:.1e} (bit-equal: {bool(np.array_equal(p0, p1))})")


def test_criterion_05_decoder_oracle():
    from test_decoding import TableScorer, exhaustive
    agree = 0
    for seed in range(20):
        sc = TableScorer(seed)
        agree += beam_search(sc, beam=64, max_len=3, banned=()).tokens == exhaustive(sc.logp, range(4), 3)
    rng = np.random.default_rng(7)
    same = 0
    t0 = time.perf_counter()
    for seed in range(100):
        m = small_model(V=7, H=5, layers=2, seed=seed)
        x = rng.standard_normal((int(rng.integers(3, 12)), 5))
        same += decode_utterance(m, x, beam=1).content == greedy_decode(m, [x])[0]
    dt = time.perf_counter() - t0
    record(5, "beam search vs exhaustive and greedy", agree == 20 and same == 100,
           f"beam 64 == exhaustive on {agree}/20 hand-set V=4 models; beam 1 == greedy on {same}/100; {dt:.1f}s")


def test_criterion_06_ensemble_identity():
    rng = np.random.default_rng(3)
    worst, same = 0.0, True
    for k in (2, 3):
        m = small_model(V=9, seed=8)
        copies = [small_model(V=9, seed=8) for _ in range(k)]
        for _ in range(5):
            x = rng.standard_normal((int(rng.integers(4, 14)), 5))
            s1, sk = ModelScorer(m, x), EnsembleScorer([ModelScorer(c, x) for c in copies])
            st1, stk = s1.initial(), sk.initial()
            prev = np.array([BOS])
            for t in range(4):
                l1, st1 = s1.step(st1, prev, t)
                lk, stk = sk.step(stk, prev, t)
                worst = max(worst, float(np.abs(np.exp(l1) - np.exp(lk)).max()))
                prev = l1.argmax(axis=1)
            same &= decode_utterance(m, x, beam=4).tokens == decode_utterance(copies, x, beam=4).tokens
    record(6, "ensemble of identical checkpoints", worst < ENSEMBLE_TOL and same,
           f"max |p_single - p_ensemble|={worst:.1e}; identical decodes={same}")


def test_criterion_07_wer_oracle():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        ref = list(rng.choice(list("abcdef"), size=rng.integers(0, 21)))
        hyp = list(rng.choice(list("abcdef"), size=rng.integers(0, 21)))
        st = align(ref, hyp)
        mismatches += (st.substitutions, st.insertions, st.deletions) != edit_counts(ref, hyp)
    record(7, "WER equals independent DP", mismatches == 0, f"{1000 - mismatches}/1000 exact count matches")


def test_criterion_08_front_end():
    counts_ok = all(len(logmel_fbank(np.zeros(n))) == (n - 400) // 160 + 1 == num_frames(n)
                    for n in range(400, 16401, 250))
    t = np.arange(16000) / 16000.0
    got = int(np.argmax(logmel_fbank(np.sin(2 * np.pi * 1000 * t)).mean(axis=0)))
    want = mel_bin_of(1000.0)
    rng = np.random.default_rng(2)
    seqs = {f"u{i}": rng.normal(2.0, 3.0, (int(rng.integers(5, 30)), 6)) for i in range(6)}
    vid = {u: f"v{i % 2}" for i, u in enumerate(seqs)}
    out = cmvn_per_video(seqs, vid)
    worst_m, worst_v = 0.0, 0.0
    for v in ("v0", "v1"):
        pooled = np.concatenate([out[u] for u in out if vid[u] == v])
        worst_m = max(worst_m, float(np.abs(pooled.mean(axis=0)).max()))
        worst_v = max(worst_v, float(np.abs(pooled.var(axis=0) - 1).max()))
    ok = counts_ok and got == want and worst_m < 1e-6 and worst_v <= 0.01
    record(8, "front-end frame counts, mel localization, CMVN", ok,
           f"counts={counts_ok}; 1 kHz peak bin {got} (oracle {want}); |mean|={worst_m:.1e}, |var-1|={worst_v:.1e}")


def test_criterion_09_overfit():
    cfg = load_config(preset="desk", overrides=["data.n_train=50"])
    cor = synth_grounded_corpus(cfg.synth_config(), seed=cfg.data.synth_seed)
    vocab = build_vocab(cor.train.transcripts())
    tr = materialize(cor.train, vocab)
    model = Seq2Seq(cfg.model_config(len(vocab)), seed=1)
    tc = TrainConfig(lr=cfg.train.lr, dropout=0.0, batch_size=10, max_epochs=200, patience_stop=30,
                     patience_lr=10)
    t0 = time.perf_counter()
    res = train(model, tr, tr, vocab, tc)
    dt = time.perf_counter() - t0
    w = split_wer(res.model, tr, vocab)
    ok = w <= OVERFIT_WER and len(res.log.rows) <= 200 and dt < OVERFIT_SECONDS
    record(9, "overfit 50 utterances", ok,
           f"train WER {100 * w:.2f}% after {len(res.log.rows)} epochs (best epoch {res.best.epoch}); {dt:.0f}s")


def test_criterion_10_grounding_efficacy(tmp_path):
    cfg = load_config(preset="desk")
    assert cfg.data.ambiguity_rate == 0.2
    t0 = time.perf_counter()
    rows = ex.run_pipeline(tmp_path, cfg, seeds=(1, 2, 3), log=lambda *_: None)
    dt = time.perf_counter() - t0
    print((tmp_path / "report.txt").read_text())
    by = {r.system: r for r in rows}
    base, rs = by["baseline"].avg_wer, by["restart"].avg_wer
    named = {n: by[n].avg_wer for n in ("vat_video", "edinit", "visual_bos")}
    grounded = {r.system: r.avg_wer for r in rows
                if r.mode != "none" and not r.system.endswith("_noshift")}
    beats = all(w < base for w in named.values())
    order = base > rs and all(rs >= w for w in grounded.values())
    csv_rows = ex.read_report_csv((tmp_path / "report.csv").read_text())
    layout = rows[0].system == "baseline" and [r.system for r in csv_rows] == [r.system for r in rows]
    ok = beats and order and layout and dt < PIPELINE_SECONDS
    detail = (f"avg test WER baseline {100 * base:.2f}, restart {100 * rs:.2f}, "
              + ", ".join(f"{k} {100 * v:.2f}" for k, v in grounded.items())
              + f"; VAT with shift discarded {100 * by['vat_video_noshift'].avg_wer:.2f}; {dt:.0f}s")
    record(10, "grounding efficacy and ordering", ok, detail)


def test_criterion_11_determinism(tmp_path):
    overrides = ["data.n_train=40", "data.n_val=16", "data.n_test=16", "train.max_epochs=3",
                 "decode.beam=3"]
    cfg = load_config(preset="desk", overrides=overrides)
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        data = ex.prepare(cfg, root / "data")
        ex.run_system("train", cfg.with_overrides(["grounding.mode=edinit"]), data, root / "sys", [1, 2])
        ex.evaluate_system(root / "sys", data, "test", cfg)
        files = sorted(p.relative_to(root) for p in root.rglob("*")
                       if p.is_file() and p.suffix in (".tsv", ".ckpt", ".hyp", ".mmf", ".ini", ".json")
                       and p.name not in ("timing.tsv", "run.json"))
        outputs.append({f: (root / f).read_bytes() for f in files})
    a, b = outputs
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    n_logs = sum(k.name == "train_log.tsv" for k in a)
    n_ckpt = sum(k.suffix == ".ckpt" for k in a)
    n_hyp = sum(k.suffix == ".hyp" for k in a)
    record(11, "byte-identical reruns", same,
           f"{len(a)} files compared ({n_logs} logs, {n_ckpt} checkpoints, {n_hyp} hypothesis files)")
