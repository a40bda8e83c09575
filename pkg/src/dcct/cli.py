"""Command-line entry point: ``dcct <subcommand> ...``.

Exit codes: 0 success, 2 bad usage, 3 missing path, 4 unreadable or corrupt
file, 5 incompatible checkpoint, 6 invalid data, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cfa, io, pipeline as pl, synthdata as sd, theory
from .condmodel import CondModel

log = logging.getLogger("dcct")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_CORRUPT, EXIT_INCOMPATIBLE, EXIT_DATA = 0, 1, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


def worker_count() -> int:
    try:
        n = int(os.environ.get("DCCT_THREADS", "1"))
    except ValueError:
        raise UsageError("DCCT_THREADS must be an integer") from None
    return max(1, n)


def _fan_out(fn, items, workers):
    """Apply ``fn(chunk, offset)`` to contiguous chunks; results keep input order."""
    if not items:
        return []
    if workers == 1 or len(items) < 2:
        return [fn(items, 0)]
    size = -(-len(items) // workers)
    parts = [(items[i:i + size], i) for i in range(0, len(items), size)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda a: fn(*a), parts))


# ----------------------------------------------------------------------------
# argument plumbing


def _add_common(p, model_opts=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, help="flat key=value file of training settings")
    p.add_argument("--out", type=Path)
    if model_opts:
        p.add_argument("--preset", choices=("desk", "full"), default="desk")
        p.add_argument("--patch-size", type=int)
        p.add_argument("--t", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--bank", choices=("30", "reduced"))
        p.add_argument("--patches", type=int, help="crops per image at inference")
        p.add_argument("--threshold", type=float)
        p.add_argument("--percentile", type=float)


def config_from_args(args) -> pl.TrainConfig:
    base = pl.TrainConfig.desk() if getattr(args, "preset", "desk") == "desk" else pl.TrainConfig.full()
    if getattr(args, "config", None):
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        base = io.load_config(args.config, base)
    kw = {"seed": args.seed}
    for arg, key in (("patch_size", "patch_size"), ("t", "t"), ("k", "k"), ("bank", "bank"),
                     ("patches", "patches"), ("threshold", "threshold"), ("percentile", "percentile"),
                     ("steps", "steps"), ("cls_steps", "cls_steps"), ("finetune", "finetune"),
                     ("single_model", "single_model"), ("mask_mode", "mask_mode"), ("highpass", "highpass")):
        v = getattr(args, arg, None)
        if v is not None:
            kw[key] = v
    return base.replace(**kw)


def _need_out(args):
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def _images_in(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"no such path: {path}")
    files = [path] if path.is_file() else io.list_images(path)
    return files, [io.load_image(f) for f in files]


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    out = _need_out(args)
    kw = {"size": args.size, "seed": args.seed, "split": args.split, "sigma": args.sigma}
    for tag in ("photographic", "generated"):
        imgs, man = sd.make_corpus(tag, args.n, mode=args.mode, **kw)
        sd.write_corpus(out, imgs, man)
        log.info("wrote %d %s images to %s", len(imgs), tag, out / tag)
    return EXIT_OK


def cmd_train_cond(args):
    cfg = config_from_args(args)
    out = _need_out(args)
    src = args.data / args.cls if (args.data / args.cls).is_dir() else args.data
    _, images = _images_in(src)
    if not images:
        raise pl.DataError(f"no images under {src}")
    model = pl.train_conditional(images, args.cls, cfg, seed=args.seed, log_every=args.log_every)
    io.save_checkpoint(model, out)
    print(f"{out}\tfinal_nll={model.meta['final_nll']:.6f}")
    return EXIT_OK


def _load_cond(path, cfg, role):
    if path is None:
        return None
    obj = io.load_checkpoint(path, expect_t=cfg.t)
    if not isinstance(obj, CondModel):
        raise io.ParseError(f"{path} does not hold a conditional model")
    pl.check_compatible(obj, cfg, role)
    return obj


def cmd_train_cls(args):
    cfg = config_from_args(args)
    out = _need_out(args)
    p = _load_cond(args.p, cfg, "p")
    q = _load_cond(args.q, cfg, "q")
    paths, labels = io.load_dataset(args.data)
    if len(paths) == 0:
        raise pl.DataError(f"no images under {args.data}/photographic or {args.data}/generated")
    images = [io.load_image(f) for f in paths]
    clf, p, q = pl.train_classifier(images, labels, p, q, cfg, seed=args.seed, log_every=args.log_every)
    io.save_checkpoint(pl.DetectorBundle(p, q, clf, cfg.threshold, cfg), out)
    print(out)
    return EXIT_OK


def _load_bundle(args) -> pl.DetectorBundle:
    b = io.load_checkpoint(args.bundle)
    if not isinstance(b, pl.DetectorBundle):
        raise io.ParseError(f"{args.bundle} is not a detector bundle")
    if args.t is not None and args.t != b.config.t:
        raise pl.CompatibilityError(f"bundle has t={b.config.t} but t={args.t} was requested")
    return b


def cmd_detect(args):
    out = _need_out(args)
    bundle = _load_bundle(args)
    thr = bundle.threshold if args.threshold is None else args.threshold
    files, images = _images_in(args.input)
    P = args.patches or bundle.config.patches
    parts = _fan_out(lambda imgs, off: pl.patch_scores(imgs, bundle, P, args.seed, off), images, worker_count())
    scores = np.concatenate(parts).mean(axis=1) if parts else np.zeros(0)
    rows = [(str(f), float(s), int(s > thr)) for f, s in zip(files, scores)]
    io.write_csv(out, ("path", "score", "label"), rows)
    return EXIT_OK


def cmd_score_oc(args):
    out = _need_out(args)
    cfg = config_from_args(args)
    p = _load_cond(args.model, cfg, "p")
    files, images = _images_in(args.input)
    P = args.patches or cfg.patches
    parts = _fan_out(lambda imgs, off: pl.anomaly_scores(imgs, p, cfg, P, args.seed, off), images, worker_count())
    scores = np.concatenate(parts) if parts else np.zeros(0)
    io.write_csv(out, ("path", "D"), [(str(f), float(d)) for f, d in zip(files, scores)])
    return EXIT_OK


def cmd_calibrate(args):
    if not args.scores.exists():
        raise FileNotFoundError(f"no such score file: {args.scores}")
    tau = pl.calibrate_threshold(io.read_scores(args.scores), args.percentile)
    print(f"{tau:.6f}".rstrip("0").rstrip(".") if float(tau).is_integer() else f"{tau:.6f}")
    if args.out:
        io.atomic_write(args.out, f"percentile={args.percentile}\nthreshold={tau:.6f}\n")
    return EXIT_OK


def cmd_diagnose(args):
    out = args.out
    paths, labels = io.load_dataset(args.data)
    photo = [io.load_image(f) for f, lab in zip(paths, labels) if lab == 0]
    gen = [io.load_image(f) for f, lab in zip(paths, labels) if lab == 1]
    rep = theory.diagnose(photo, gen, radius=args.radius, kernel=args.kernel, seed=args.seed)
    text = "".join(f"{k},{io.fmt_float(v) if isinstance(v, float) else v}\n" for k, v in rep.as_rows())
    text = "field,value\n" + text
    if out:
        io.atomic_write(out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_spectrum(args):
    if args.input is not None:
        img = io.load_image(args.input)
        field = img[..., 1]
    else:
        field = sd.gen_scene(sd.SceneSpec(seed=args.seed, height=args.size, width=args.size))[..., 1]
    n = min(field.shape)
    n -= n % 2
    chk = cfa.cfa_spectrum_check(field[:n, :n])
    rows = [("baseband_energy", float(chk.baseband_energy.sum())),
            ("alias_energy", chk.alias_energy),
            ("alias_energy_at_nyquist", chk.alias_energy_at_nyquist),
            ("max_rel_error", chk.max_rel_error)]
    text = "quantity,value\n" + "".join(f"{k},{io.fmt_float(v)}\n" for k, v in rows)
    if args.out:
        io.atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def histogram_table(score_sets, bins=50):
    """Shared-edge histograms: edges span the pooled min/max."""
    pooled = np.concatenate([np.asarray(s, float) for s in score_sets])
    if pooled.size == 0:
        raise pl.DataError("no scores to bin")
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = [np.histogram(s, bins=edges)[0] for s in score_sets]
    return edges, counts


def cmd_export_hist(args):
    out = _need_out(args)
    if len(args.scores) != 2:
        raise UsageError("export-hist takes exactly two --scores files")
    labels = args.labels or ["photographic", "generated"]
    if len(labels) != 2:
        raise UsageError("--labels takes two names")
    for f in args.scores:
        if not f.exists():
            raise FileNotFoundError(f"no such score file: {f}")
    edges, counts = histogram_table([io.read_scores(f) for f in args.scores], args.bins)
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[0][i]), int(counts[1][i])) for i in range(args.bins)]
    io.write_csv(out, ("bin_lo", "bin_hi", f"count_{labels[0]}", f"count_{labels[1]}"), rows)
    return EXIT_OK


# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dcct", description="CFA-trace detector for synthesized images")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic photographic/generated corpora")
    _add_common(p, model_opts=False)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--mode", choices=sd.AI_MODES, default="independent")
    p.add_argument("--split", choices=sorted(sd.SPLIT_CODES), default="train")
    p.add_argument("--sigma", type=float, default=0.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-cond", help="Stage I: fit one conditional model")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--class", dest="cls", choices=("photographic", "generated"), required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--mask-mode", choices=pl.MASK_MODES)
    p.add_argument("--highpass", choices=pl.HIGHPASS)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train_cond)

    p = sub.add_parser("train-cls", help="Stage II: fit the classifier")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--p", type=Path)
    p.add_argument("--q", type=Path)
    p.add_argument("--cls-steps", type=int)
    p.add_argument("--finetune", choices=pl.FINETUNE)
    p.add_argument("--single-model", choices=pl.SINGLE_MODEL)
    p.add_argument("--mask-mode", choices=pl.MASK_MODES)
    p.add_argument("--highpass", choices=pl.HIGHPASS)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train_cls)

    p = sub.add_parser("detect", help="score a directory with a detector bundle")
    _add_common(p)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("score-oc", help="one-class anomaly scores D")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.set_defaults(fn=cmd_score_oc)

    p = sub.add_parser("calibrate", help="nearest-rank percentile of a score file")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("diagnose", help="spectral gap report for a dataset")
    _add_common(p, model_opts=False)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--radius", type=float, default=np.pi / 4)
    p.add_argument("--kernel", default="square3")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("spectrum", help="CFA aliasing superposition check")
    _add_common(p, model_opts=False)
    p.add_argument("--input", type=Path)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("export-hist", help="binned score counts for two classes")
    p.add_argument("--scores", type=Path, action="append", required=True)
    p.add_argument("--labels", nargs=2)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_export_hist)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        _fail(e)
        return EXIT_USAGE
    except FileNotFoundError as e:
        _fail(e)
        return EXIT_MISSING
    except pl.CompatibilityError as e:
        _fail(e)
        return EXIT_INCOMPATIBLE
    except io.ParseError as e:
        _fail(e)
        return EXIT_CORRUPT
    except (pl.DataError, theory.DataError, ValueError) as e:
        _fail(e)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic
        _fail(e)
        return EXIT_OTHER


def _fail(err):
    msg = str(err).splitlines()[0] if str(err) else type(err).__name__
    sys.stderr.write(f"dcct: error: {msg}\n")


if __name__ == "__main__":
    sys.exit(main())
