"""Train a small baseline on the synthetic corpus, then bolt on the visual
adaptation layer and check that nothing changes until it is trained.

Run: python demos/grounding_walkthrough.py   (a few seconds on one core)
"""

import numpy as np

from mmasr.config import load_config
from mmasr.data import synth_grounded_corpus
from mmasr.grounding import MODES
from mmasr.model import Seq2Seq, param_count
from mmasr.training import materialize, split_wer, train
from mmasr.vocab import build_vocab

cfg = load_config(preset="desk", overrides=["data.n_train=120", "data.n_val=40", "train.max_epochs=15"])
corpus = synth_grounded_corpus(cfg.synth_config(), seed=cfg.data.synth_seed)
vocab = build_vocab(corpus.train.transcripts())
tr, va = materialize(corpus.train, vocab), materialize(corpus.val, vocab)
print(f"{len(tr)} training utterances, vocabulary of {len(vocab)} (specials included)")

for mode in MODES:
    m = Seq2Seq(cfg.model_config(len(vocab), mode), seed=0)
    print(f"  {mode:<11} {param_count(m.params):>6} parameters")

base = Seq2Seq(cfg.model_config(len(vocab), "none"), seed=1)
res = train(base, tr, va, vocab, cfg.train_config(seed=1))
print(f"baseline best val WER {100 * res.best.best_wer:.1f}% at epoch {res.best.epoch}")

adapted = res.best.build_model()
adapted.attach_grounding("vat", seed=2)
print("VAT layer attached; the shift weights start at zero:",
      float(np.abs(adapted.params["vat.W_v"].data).max()))
print(f"val WER before adaptation: baseline {100 * split_wer(res.best.build_model(), va, vocab):.1f}%,"
      f" adapted {100 * split_wer(adapted, va, vocab):.1f}%")

res2 = train(adapted, tr, va, vocab, cfg.train_config(seed=1))
print(f"after adaptation: {100 * res2.best.best_wer:.1f}%; with the shift switched off:"
      f" {100 * split_wer(res2.best.build_model(), va, vocab, discard_shift=True):.1f}%")
