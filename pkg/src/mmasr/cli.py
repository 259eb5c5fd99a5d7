"""``mmasr`` command line: prepare, train, adapt, restart, decode, evaluate,
report, gradcheck, plus ``pipeline`` for the whole seven-system experiment.

Configuration comes from built-in defaults, an optional ``--preset``, an
optional ``--config`` INI file and finally ``--section.key=value``
overrides, in that order.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment as ex
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, MMASRError


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds needs distinct integers, got {text!r}")
    return seeds


def _parser():
    p = argparse.ArgumentParser(prog="mmasr", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help):
        c = sub.add_parser(name, help=help)
        c.add_argument("--config", help="INI file with data/vocab/model/grounding/train/decode sections")
        c.add_argument("--preset", choices=("full", "desk"), help="starting point before --config")
        return c

    c = cmd("prepare", "build a dataset directory")
    c.add_argument("--out", required=True)
    src = c.add_mutually_exclusive_group()
    src.add_argument("--synth", action="store_true", help="generate the synthetic grounded corpus")
    src.add_argument("--manifest-dir", help="directory holding train.tsv, val.tsv and test.tsv")
    c.add_argument("--visual-granularity", choices=("clip", "video"))
    c.add_argument("--seed", type=int, help="synthetic corpus seed")

    for name, help in (("train", "train a system from scratch"),
                       ("adapt", "visual adaptive training on top of a baseline"),
                       ("restart", "continue a baseline without new layers")):
        c = cmd(name, help)
        c.add_argument("--data", required=True)
        c.add_argument("--out", required=True, help="system directory; runs go to seed<k>/")
        c.add_argument("--seeds", default="1")
        if name == "train":
            c.add_argument("--mode", help="grounding mode (overrides grounding.mode)")
        else:
            c.add_argument("--from", dest="source", required=True, help="baseline system directory")

    c = cmd("decode", "beam-search a split with one checkpoint or an ensemble")
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--ckpt")
    g.add_argument("--ensemble", help="comma-separated checkpoints")
    c.add_argument("--beam", type=int)
    c.add_argument("--discard-shift", action="store_true", help="decode VAT models with the shift zeroed")
    c.add_argument("--out", required=True, help="hypothesis file (utt_id TAB text)")
    c.add_argument("--dump", help="also write the full final beam per utterance")

    c = cmd("evaluate", "score hypotheses, or decode and score a whole system directory")
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test")
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--hyp")
    g.add_argument("--system")
    c.add_argument("--scores", help="per-utterance score file (with --hyp)")
    c.add_argument("--discard-shift", action="store_true")

    c = sub.add_parser("report", help="Min/Avg/Ens WER table from evaluated system directories")
    c.add_argument("systems", nargs="+")
    c.add_argument("--split", default="test")
    c.add_argument("--csv", help="write the CSV form here")

    c = sub.add_parser("gradcheck", help="finite-difference verification of ops and full models")
    c.add_argument("--tol", type=float, default=1e-4)

    c = cmd("pipeline", "baseline, restart, VAT and the grounded systems over several seeds")
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", default="1,2,3")
    return p


def _split_overrides(rest):
    out = []
    for item in rest:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            out.append(item[2:])
        else:
            raise ConfigError(f"unrecognized argument {item!r} (overrides look like --section.key=value)")
    return out


def _config(args, overrides, extra=()):
    return load_config(getattr(args, "config", None), [*extra, *overrides], getattr(args, "preset", None))


def main(argv=None) -> int:
    parser = _parser()
    args, rest = parser.parse_known_args(argv)
    try:
        return _dispatch(args, _split_overrides(rest))
    except (MMASRError, FileNotFoundError) as err:
        print(f"error: {type(err).__name__}: {err}".replace("\n", " "), file=sys.stderr)
        return 2


def _dispatch(args, overrides) -> int:
    c = args.command
    if c == "prepare":
        extra = []
        if args.manifest_dir:
            if not Path(args.manifest_dir).is_dir():
                raise FileNotFoundError(f"manifest directory not found: {args.manifest_dir}")
            extra.append(f"data.source={args.manifest_dir}")
        elif args.synth:
            extra.append("data.source=synth")
        if args.visual_granularity:
            extra.append(f"data.granularity={args.visual_granularity}")
        if args.seed is not None:
            extra.append(f"data.synth_seed={args.seed}")
        out = ex.prepare(_config(args, overrides, extra), args.out)
        print(out)
    elif c in ("train", "adapt", "restart"):
        extra = [f"grounding.mode={args.mode}"] if c == "train" and args.mode else []
        cfg = _config(args, overrides, extra)
        res = ex.run_system(c, cfg, args.data, args.out, _seeds(args.seeds), getattr(args, "source", None))
        for run_dir, best in res:
            print(f"{run_dir}\tbest_val_wer={best:.4f}")
    elif c == "decode":
        extra = [f"decode.beam={args.beam}"] if args.beam else []
        if args.discard_shift:
            extra.append("decode.discard_shift=true")
        cfg = _config(args, overrides, extra)
        ckpts = [args.ckpt] if args.ckpt else [s for s in args.ensemble.split(",") if s]
        prep = ex.load_prepared(args.data, splits=(args.split,) if args.split == "train" else ("train", args.split))
        models = ex.load_models(ckpts, len(prep.vocab))
        if args.discard_shift and not any(m.mode == "vat" for m in models):
            print("warning: --discard-shift has no effect on models without an adaptation layer",
                  file=sys.stderr)
        data, results = ex.decode_split(models, prep, args.split, cfg, args.dump)
        ex.write_hypotheses(args.out, data.utt_ids, [prep.vocab.decode(r.content) for r in results])
    elif c == "evaluate":
        extra = ["decode.discard_shift=true"] if args.discard_shift else []
        cfg = _config(args, overrides, extra)
        if args.hyp:
            prep = ex.load_prepared(args.data, splits=("train", args.split))
            rate = ex.score(prep, args.split, ex.read_hypotheses(args.hyp), args.scores)
            print(f"WER {100 * rate:.2f}")
        else:
            s = ex.evaluate_system(args.system, args.data, args.split, cfg)
            for k, v in s["seeds"].items():
                print(f"{k}\tWER {100 * v:.2f}")
            print(f"ensemble\tWER {100 * s['ensemble']:.2f}")
    elif c == "report":
        rows = ex.collect_rows(args.systems, args.split)
        print(ex.report_text(rows), end="")
        if args.csv:
            Path(args.csv).write_text(ex.report_csv(rows))
    elif c == "gradcheck":
        return _gradcheck(args.tol)
    elif c == "pipeline":
        rows = ex.run_pipeline(args.out, _config(args, overrides), _seeds(args.seeds))
        print(ex.report_text(rows), end="")
    return 0


def _gradcheck(tol) -> int:
    ok = True
    for name, err in ex.op_grad_suite().items():
        flag = err < 1e-6
        ok &= flag
        print(f"op    {name:<18} max_rel_err={err:.2e}  {'ok' if flag else 'FAIL'}")
    for mode, err in ex.model_grad_suite().items():
        flag = err < tol
        ok &= flag
        print(f"model {mode:<18} max_rel_err={err:.2e}  {'ok' if flag else 'FAIL'}")
    if not ok:
        raise ContractError("gradient check failed")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
