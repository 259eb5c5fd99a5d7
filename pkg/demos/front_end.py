"""Walk through the acoustic front end on synthetic audio.

Run: python demos/front_end.py
"""

import numpy as np

from mmasr.data import cmvn_per_video, logmel_fbank, mel_filterbank, num_frames, with_pitch

sr = 16000
t = np.arange(sr) / sr
tone = 0.5 * np.sin(2 * np.pi * 1000 * t) * 32767

fb = logmel_fbank(tone)
print(f"1 s of audio -> {len(fb)} frames (num_frames says {num_frames(len(tone))}), {fb.shape[1]} mel bins")

peaks = mel_filterbank().argmax(axis=1)
loudest = int(fb.mean(axis=0).argmax())
print(f"a 1 kHz tone peaks in bin {loudest}; that filter is centred near FFT bin {peaks[loudest]}"
      f" ({peaks[loudest] * sr / 512:.0f} Hz)")

feats = with_pitch(fb)
print(f"with the three zero pitch columns appended: {feats.shape}")

# Normalization uses statistics pooled over every utterance of a video.
rng = np.random.default_rng(0)
utts = {f"u{i}": rng.normal(5.0, 2.0, (40 + 10 * i, 4)) for i in range(4)}
video_of = {"u0": "a", "u1": "a", "u2": "b", "u3": "b"}
normed = cmvn_per_video(utts, video_of)
for v in "ab":
    pooled = np.concatenate([normed[u] for u in normed if video_of[u] == v])
    print(f"video {v}: pooled mean {pooled.mean():+.2e}, pooled var {pooled.var():.4f}")
