"""Command-line entry point: ``mvpad <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bsif, experiment, synth
from .common import atomic_write_text
from .imaging import decode_image

log = logging.getLogger("mvpad")

IMAGE_SUFFIXES = {".png", ".pgm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


# -- gen-filters ------------------------------------------------------------------------------

def load_corpus(corpus: str | Path) -> list[np.ndarray]:
    root = Path(corpus)
    if not root.is_dir():
        raise experiment.ExperimentError(f"patch corpus not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise experiment.ExperimentError(f"patch corpus {root} contains no images")
    return [decode_image(p).pixels for p in files]


def gen_filters(out: str | Path, corpus: str | Path, seed: int = 0) -> list[Path]:
    """Learn the 60 canonical banks (one per feasible l, n) from a natural-image corpus."""
    images = load_corpus(corpus)
    written = []
    for view in bsif.enumerate_views()[1:]:
        l = view.l
        need = 50 * l * l
        positions = sum((im.shape[0] - l + 1) * (im.shape[1] - l + 1) for im in images if min(im.shape) >= l)
        if positions < need:
            raise experiment.ExperimentError(
                f"patch corpus too small for {l}x{l} filters: {positions} patch positions, need {need}")
        patches = bsif.sample_patches(images, l, max(need, 10_000), seed + l)
        bank = bsif.learn_filter_bank(patches, view.n, seed + bsif.view_index(view))
        path = Path(out) / bsif.bank_filename(l, view.n)
        bsif.save_bank(bank, path)
        written.append(path)
        log.info("gen-filters: wrote %s", path)
    return written


# -- argument parsing -------------------------------------------------------------------------

def _experiment_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--manifest", action="append", help="dataset manifest (repeat to combine)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--banks", help="filter-bank directory (default: packaged banks)")
    p.add_argument("--views", nargs="+", help="view subset, e.g. raw 3x3x5")
    p.add_argument("--input-size", type=int, help="crop side / CNN input size")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--k", type=int, help="number of top-importance views")
    p.add_argument("--k-range", type=int, nargs=2, metavar=("LO", "HI"), help="search k in LO..HI")
    p.add_argument("--l", type=int, help="complements per top view")
    p.add_argument("--mode", choices=["rows", "columns"])
    p.add_argument("--union", action=argparse.BooleanOptionalAction, default=None,
                   help="feed the top-k views to the SVM along with their complements (default: on)")
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.manifest:
        o["manifests"] = args.manifest
    for key in ("out", "seed", "banks", "views"):
        if getattr(args, key, None) is not None:
            o[key] = getattr(args, key)
    if args.input_size is not None:
        o["input_size"] = args.input_size
    if args.epochs is not None:
        o.setdefault("train", {})["epochs"] = args.epochs
    sel = {}
    if getattr(args, "k", None) is not None:
        sel["k"] = args.k
    if getattr(args, "k_range", None):
        lo, hi = args.k_range
        sel["k_range"] = list(range(lo, hi + 1))
    if getattr(args, "l", None) is not None:
        sel["l"] = args.l
    if getattr(args, "mode", None):
        sel["mode"] = args.mode
    if getattr(args, "union", None) is not None:
        sel["union"] = args.union
    if sel:
        o["selection"] = sel
    return o


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvpad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _experiment_parent()

    p = sub.add_parser("gen-filters", help="learn the 60 BSIF filter banks by ICA")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", required=True, help="directory of natural images")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate the synthetic texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=float, default=4.0)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--unknown-period", type=float, default=7.0)
    p.add_argument("--unknown-amplitude", type=float, default=0.15)

    sub.add_parser("transform", parents=[parent], help="cache the 61 input maps per sample")
    sub.add_parser("train", parents=[parent], help="train one CNN per view (resumable)")
    sub.add_parser("predict", parents=[parent], help="score every sample with every view")
    p = sub.add_parser("fuse", parents=[parent], help="rf / mv / bwwva / bwwvi fusion")
    p.add_argument("--method", action="append", choices=[m for m in experiment.FUSION_METHODS if m != "meta"])
    sub.add_parser("select", parents=[parent], help="view selection and meta-SVM fusion")
    sub.add_parser("run", parents=[parent], help="every stage from transform to report")
    sub.add_parser("evaluate", parents=[parent], help="reports for test_known / test_unknown / overall")

    p = sub.add_parser("report", help="tables with error reduction against a baseline")
    p.add_argument("results", nargs="+", help="experiment output directories")
    p.add_argument("--baseline", default=experiment.BEST_VIEW)
    p.add_argument("--out", help="where to write report.md / report.csv (default: first results dir)")
    return parser


def _experiment(args) -> experiment.Experiment:
    cfg = experiment.load_config(args.config, _overrides(args))
    return experiment.Experiment(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(level)
    try:
        return _dispatch(args)
    except (experiment.ExperimentError, bsif.BankFormatError, bsif.ConvergenceError,
            ValueError, KeyError, OSError) as exc:
        print(f"mvpad {args.command}: error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-filters":
        files = gen_filters(args.out, args.corpus, args.seed)
        print(f"wrote {len(files)} filter banks to {args.out}")
        return 0
    if cmd == "synth":
        cfg = synth.SynthConfig(per_class=args.per_class, train_per_class=args.train_per_class,
                                size=args.size, seed=args.seed, period=args.period,
                                amplitude=args.amplitude, unknown_period=args.unknown_period,
                                unknown_amplitude=args.unknown_amplitude)
        ds = synth.generate(cfg, args.out)
        out = Path(args.out).resolve()
        conf = {"manifests": [str(out / "manifest.csv")], "name": "synthetic",
                "out": str(out / "run"), "input_size": args.size, "seed": args.seed}
        atomic_write_text(out / "experiment.json", json.dumps(conf, indent=2) + "\n")
        print(f"wrote {len(ds)} images, manifest and experiment.json to {args.out}")
        return 0
    if cmd == "report":
        text = experiment.write_report(args.results, args.out or args.results[0], args.baseline)
        print(text, end="")
        return 0

    exp = _experiment(args)
    if cmd == "transform":
        res = exp.transform()
        print(f"{res['computed']} maps computed, {res['cache_hits']} cache hits")
        for e in res["errors"]:
            print(f"  {e['id']}: {e['error']}", file=sys.stderr)
        return 1 if res["errors"] else 0
    if cmd == "train":
        rows = exp.train()
        print(f"{len(rows)} views trained; summary in {exp.path('train_summary.csv')}")
    elif cmd == "predict":
        exp.predict()
    elif cmd == "fuse":
        exp.fuse(args.method)
    elif cmd == "select":
        res = exp.select()
        print(f"selected {len(res.selected)} views" + (" (fallback to top-k)" if res.fallback else ""))
    elif cmd == "evaluate":
        exp.evaluate()
        print(f"reports written to {exp.path('reports.csv')}")
    elif cmd == "run":
        exp.run()
        print((exp.out / "report.md").read_text(encoding="utf-8"), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
