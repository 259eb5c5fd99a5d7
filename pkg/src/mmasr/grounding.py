"""Visual grounding mechanisms layered on the baseline recognizer.

* ``vat``: a linear adaptation layer maps the visual vector to a shift that
  is added to every acoustic frame.
* ``einit`` / ``dinit`` / ``edinit``: the visual vector initializes the
  encoder LSTM states, the first decoder GRU state, or both; ``edinit``
  shares one projection matrix between the encoder-hidden and decoder paths.
* ``visual_bos``: the decoder's first input embedding is a projection of the
  visual vector instead of the learned ``<bos>`` row.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, DimensionError

MODES = ("none", "vat", "einit", "dinit", "edinit", "visual_bos")
VISUAL_MODES = MODES[1:]


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ConfigError(f"grounding.mode must be one of {', '.join(MODES)}; got {mode!r}")
    return mode


def uses_encoder_init(mode):
    return mode in ("einit", "edinit")


def uses_decoder_init(mode):
    return mode in ("dinit", "edinit")


def _uniform(rng, shape, fan_in, dtype, gain):
    k = np.sqrt(gain / fan_in)
    return rng.uniform(-k, k, size=shape).astype(dtype)


def attach(params, mode, feat_dim, hidden, visual_dim, rng, dtype=np.float32, tie_init=True,
           gain=1.0):
    """Create the parameters ``mode`` needs inside ``params``."""
    check_mode(mode)
    z = lambda *s: np.zeros(s, dtype=dtype)
    if mode == "vat":
        # exact zeros: the adapted model starts as the pretrained one
        params.add("vat.W_v", z(feat_dim, visual_dim))
        params.add("vat.b_v", z(feat_dim))
    if uses_encoder_init(mode):
        params.add("vinit.W_h", _uniform(rng, (hidden, visual_dim), visual_dim, dtype, gain))
        params.add("vinit.b_h", z(hidden))
        params.add("vinit.W_c", _uniform(rng, (hidden, visual_dim), visual_dim, dtype, gain))
        params.add("vinit.b_c", z(hidden))
    if uses_decoder_init(mode):
        if mode == "edinit" and tie_init:
            params.alias("vinit.W_d", "vinit.W_h")
        else:
            params.add("vinit.W_d", _uniform(rng, (hidden, visual_dim), visual_dim, dtype, gain))
        params.add("vinit.b_d", z(hidden))
    if mode == "visual_bos":
        params.add("vbos.W_v", _uniform(rng, (hidden, visual_dim), visual_dim, dtype, gain))
        params.add("vbos.b_v", z(hidden))


def _check_visual(f, W, what):
    if f.shape[-1] != W.shape[1]:
        raise DimensionError(f"{what}: visual feature width D_v={f.shape[-1]} but layer expects D_v={W.shape[1]}")


def vat_shift(f, params):
    """s = W_v f + b_v, one shift per utterance: (B, D_v) -> (B, D)."""
    f = nc._as_tensor(f)
    _check_visual(f, params["vat.W_v"], "vat_shift")
    return nc.affine(f, params["vat.W_v"], params["vat.b_v"])


def apply_shift(x, s):
    """x'_t = x_t + s for every frame of a (B, T, D) batch."""
    return nc.add(x, s)


def encoder_init_visual(f, params, mode):
    """(h0, c0) shared by every encoder layer and both directions."""
    if not uses_encoder_init(mode):
        raise ContractError(f"encoder_init_visual requires einit or edinit, model mode is {mode!r}")
    f = nc._as_tensor(f)
    _check_visual(f, params["vinit.W_h"], "encoder_init_visual")
    h0 = nc.tanh(nc.affine(f, params["vinit.W_h"], params["vinit.b_h"]))
    c0 = nc.tanh(nc.affine(f, params["vinit.W_c"], params["vinit.b_c"]))
    return h0, c0


def decoder_init_visual(f, params, mode):
    """h0 of the first decoder GRU; replaces the mean-encoding init."""
    if not uses_decoder_init(mode):
        raise ContractError(f"decoder_init_visual requires dinit or edinit, model mode is {mode!r}")
    f = nc._as_tensor(f)
    _check_visual(f, params["vinit.W_d"], "decoder_init_visual")
    return nc.tanh(nc.affine(f, params["vinit.W_d"], params["vinit.b_d"]))


def visual_bos(f, params, mode="visual_bos"):
    """Decoder input at t=0: W_v f + b_v."""
    if mode != "visual_bos":
        raise ContractError(f"visual_bos requires mode visual_bos, model mode is {mode!r}")
    f = nc._as_tensor(f)
    _check_visual(f, params["vbos.W_v"], "visual_bos")
    return nc.affine(f, params["vbos.W_v"], params["vbos.b_v"])
