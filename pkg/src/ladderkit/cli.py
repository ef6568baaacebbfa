"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 backend error, 64 usage error.
Every run writes ``config.json`` and ``versions.txt`` next to its outputs;
``ladderkit rerun config.json`` repeats the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .backend import BackendError, EncodeSession, ExternalCommandBackend, ReplayBackend, generate_corpus
from .core import ADJACENT_PAIRS, LadderkitError, Resolution, ValidationError, load_measurements, \
    save_measurements, validate_curve
from .estimators import MethodConfig, estimate
from .eval import compare_ladders, corpus_report, write_report
from .features import (FEATURE_NAMES, KNEE_FEATURE_SUBSET, FeatureConfig, StreamInfo, extract_features_file,
                       read_features_csv, write_features_csv)
from .interp import fit_rq_curve
from .kneedle import knee_qp_or_prior, read_knees_csv, write_knees_csv
from .ladder import ladder_file_name, read_ladder_dir, write_ladder_json, write_ladders_csv
from .ml import (CROSSOVER_TARGETS, KNEE_TARGETS, chain_cv, load_chain, predict_crossovers_sequential,
                 predict_knees_sequential, rfe_select, save_chain, train_chain)
from .pareto import read_crossovers_csv, sequence_crossovers, write_crossovers_csv

logger = logging.getLogger("ladderkit")

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_USAGE = 0, 1, 2, 64
CACHE_ENV = "LADDERKIT_CACHE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _size(text: str):
    if text == "native":
        return None
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


# ----------------------------------------------------------------- helpers

def _write_run_files(out_dir: Path, argv: Sequence[str], args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k not in ("func",) and not callable(v)}
    config = {"command": settings.get("command_path", ""), "argv": list(argv), "settings": settings,
              "cache": os.environ.get(CACHE_ENV)}
    (out_dir / "config.json").write_text(json.dumps(config, indent=2, default=str) + "\n")
    import scipy
    lines = [f"ladderkit {__version__}", f"python {platform.python_version()}",
             f"numpy {np.__version__}", f"scipy {scipy.__version__}", f"platform {platform.platform()}"]
    (out_dir / "versions.txt").write_text("\n".join(lines) + "\n")


def _run_dir(out: Path, is_dir: bool) -> Path:
    return out if is_dir else (out.parent if str(out.parent) else Path("."))


def _session(args) -> EncodeSession:
    if args.measurements:
        backend = ReplayBackend(load_measurements(args.measurements))
    elif args.encoder_cmd:
        backend = ExternalCommandBackend(args.encoder_cmd, timeout=args.encoder_timeout)
    else:
        raise ValidationError("give --measurements (replay) or --encoder-cmd (external encoder)")
    session = EncodeSession(backend)
    cache = _cache_file()
    if cache and cache.exists() and backend.kind == "external":
        n = session.load_cache(cache)
        logger.info("loaded %d cached encodes from %s", n, cache)
    return session


def _cache_file() -> Optional[Path]:
    d = os.environ.get(CACHE_ENV)
    return Path(d) / "encodes.csv" if d else None


def _save_cache(session: EncodeSession) -> None:
    cache = _cache_file()
    if cache and session.kind == "external":
        cache.parent.mkdir(parents=True, exist_ok=True)
        session.save_cache(cache)


def _sequences(session: EncodeSession, args) -> List[str]:
    if args.sequences:
        return list(args.sequences)
    backend = session.backend
    if isinstance(backend, ReplayBackend):
        return backend.measurements.sequences
    raise ValidationError("the external backend needs --sequences")


def _parallel(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _curve_fits(mset, sid):
    fits = {}
    for res in mset.resolutions(sid):
        curve, report = validate_curve(mset[sid, res], repair=True)
        if not report.ok:
            logger.warning("%s/%s: repaired %d non-monotone samples", sid, res, len(report))
        fits[res] = fit_rq_curve(curve.records())
    return fits


# ---------------------------------------------------------------- commands

def cmd_corpus_synth(args) -> int:
    mset = generate_corpus(args.n, seed=args.seed, noise=args.noise)
    out = save_measurements(mset, args.out)
    truth = {sid: {"latent": s.latent,
                   "curves": {r.label: vars(p) for r, p in s.curves.items()}}
             for sid, s in mset.truth.items()}
    truth_path = out.with_name(out.stem + ".truth.json")
    truth_path.write_text(json.dumps(truth, indent=2, default=float) + "\n")
    print(f"wrote {len(mset.sequences)} sequences to {out}")
    return EXIT_OK


def _ladder_run(args, config: MethodConfig, knees=None, crossovers=None) -> int:
    session = _session(args)
    sids = _sequences(session, args)
    missing = [s for s in sids if (knees is not None and s not in knees)
               or (crossovers is not None and s not in crossovers)]
    if missing:
        raise ValidationError(f"no predictions for: {', '.join(missing[:5])}"
                              + (" ..." if len(missing) > 5 else ""))

    def one(sid):
        return estimate(session, sid, config, knees=None if knees is None else knees[sid],
                        crossovers=None if crossovers is None else crossovers[sid])

    try:
        results = _parallel(one, sids, args.jobs)
    finally:
        _save_cache(session)
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    with (out / "tally.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "tally", "budget"])
        for sid, r in zip(sids, results):
            write_ladder_json(r.ladder, out / ladder_file_name(sid))
            (out / "reports" / ladder_file_name(sid)).write_text(json.dumps(r.to_dict(), indent=2) + "\n")
            w.writerow([sid, r.tally, config.budget])
    write_ladders_csv([r.ladder for r in results], out / "ladders.csv")
    tallies = [r.tally for r in results]
    print(f"{config.method}: {len(results)} ladders in {out}; tally max {max(tallies)}, "
          f"mean {np.mean(tallies):.1f} (budget {config.budget})")
    return EXIT_OK


def _method_config(args, method: str) -> MethodConfig:
    return MethodConfig(method, n=getattr(args, "n", 5), v_high=args.v_high, epsilon=args.epsilon / 1000.0,
                        fl_rounding=getattr(args, "fl_rounding", "ceil"), jobs=1)


def cmd_ladder_reference(args) -> int:
    return _ladder_run(args, _method_config(args, "RL"))


def cmd_ladder_estimate(args) -> int:
    method = args.method.upper()
    config = _method_config(args, method)
    knees = crossovers = None
    if method == "CIL":
        if args.knees:
            knees = read_knees_csv(args.knees)
        elif args.model and args.features:
            chain = load_chain(args.model)
            knees = {sid: predict_knees_sequential(fv, chain) for sid, fv in read_features_csv(args.features).items()}
        else:
            raise ValidationError("CIL needs --knees, or --model with --features")
    elif method == "FL":
        if args.crossovers:
            crossovers = read_crossovers_csv(args.crossovers)
        elif args.model and args.features:
            chain = load_chain(args.model)
            crossovers = {sid: predict_crossovers_sequential(fv, chain)
                          for sid, fv in read_features_csv(args.features).items()}
        else:
            raise ValidationError("FL needs --crossovers, or --model with --features")
    return _ladder_run(args, config, knees, crossovers)


def cmd_knees(args) -> int:
    mset = load_measurements(args.measurements)
    out = {}
    for sid in mset.sequences:
        fits = _curve_fits(mset, sid)
        if set(fits) != set(Resolution):
            raise ValidationError(f"{sid}: needs all four resolutions")
        out[sid] = {r: knee_qp_or_prior(f, args.sensitivity, args.plane) for r, f in fits.items()}
    write_knees_csv(out, args.out)
    print(f"wrote knees for {len(out)} sequences to {args.out}")
    return EXIT_OK


def cmd_crossovers(args) -> int:
    mset = load_measurements(args.measurements)
    rows = {}
    for sid in mset.sequences:
        pairs = sequence_crossovers(_curve_fits(mset, sid), rounding=args.rounding)
        for key, p in pairs.items():
            if p is None:
                logger.warning("%s: no cross-over for %s/%s", sid, key[0], key[1])
        rows[sid] = list(pairs.values())
    write_crossovers_csv(rows, args.out)
    print(f"wrote cross-overs for {len(rows)} sequences to {args.out}")
    return EXIT_OK


def cmd_features_extract(args) -> int:
    config = FeatureConfig(levels=args.levels, tc_block=args.tc_block, ncc_radius=args.ncc_radius,
                           ncc_size=args.ncc_size, native=args.native)
    declared = None
    if args.width or args.height:
        if not (args.width and args.height):
            raise ValidationError("--width and --height go together")
        declared = StreamInfo(args.width, args.height, args.bit_depth, args.frames, args.chroma)

    def one(path):
        logger.info("extracting %s", path)
        return extract_features_file(path, declared, config)

    vectors = _parallel(one, [Path(p) for p in args.inputs], args.jobs)
    write_features_csv(vectors, args.out)
    print(f"wrote {len(vectors)} feature vectors to {args.out}")
    return EXIT_OK


def _training_rows(features_csv, targets: Dict[str, Dict[str, float]], names: Sequence[str]):
    feats = read_features_csv(features_csv)
    sids = sorted(set(feats) & set(targets))
    dropped = sorted(set(feats) ^ set(targets))
    if dropped:
        logger.warning("sequences without both features and targets are skipped: %s", ", ".join(dropped[:10]))
    if not sids:
        raise ValidationError("no sequence has both features and targets")
    x = np.array([feats[s].values for s in sids])
    y = {t: np.array([targets[s][t] for s in sids]) for t in names}
    return sids, x, y


def cmd_train(args) -> int:
    if args.target == "knees":
        raw = read_knees_csv(args.targets)
        targets = {sid: {r.label: v for r, v in row.items()} for sid, row in raw.items()}
        names = KNEE_TARGETS
    else:
        raw = read_crossovers_csv(args.targets)
        targets = {}
        for sid, pairs in raw.items():
            if all(p in pairs for p in ADJACENT_PAIRS):
                targets[sid] = {f"{h.label}/{l.label}:{side}": pairs[(h, l)][i]
                                for h, l in ADJACENT_PAIRS for i, side in enumerate(("high", "low"))}
        names = CROSSOVER_TARGETS
    sids, x, y = _training_rows(args.features, targets, names)
    subset_mode = args.subset or ("published" if args.target == "knees" else "rfe")
    if subset_mode == "published":
        subsets = {t: KNEE_FEATURE_SUBSET for t in names}
    elif subset_mode == "all":
        subsets = None
    else:
        k = min(10, len(sids))
        subsets = {t: rfe_select(x, y[t], args.min_features, cv_seed=args.seed, k=k) for t in names}
        for t, s in subsets.items():
            logger.info("%s: selected %s", t, ", ".join(FEATURE_NAMES[i] for i in s))
    chain = train_chain(x, y, names, subsets, chained=not args.no_chain)
    save_chain(chain, args.out)
    summary = {"sequences": len(sids), "subset_mode": subset_mode,
               "subsets": {t: [FEATURE_NAMES[i] for i in s] for t, s in (subsets or {}).items()}}
    if args.cv and len(sids) >= 10:
        metrics = chain_cv(x, y, names, k=10, seed=args.seed, chained=not args.no_chain, feature_subsets=subsets)
        summary["cv"] = {t: vars(m) for t, m in metrics.items()}
        for t, m in metrics.items():
            print(f"{t}: MAE {m.mae:.3f}  R2 {m.r2:.3f}  LCC {m.lcc:.3f}  SRCC {m.srcc:.3f}")
    out = Path(args.out)
    out.with_name(out.stem + ".summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained {len(names)}-link chain on {len(sids)} sequences; model in {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    chain = load_chain(args.model)
    feats = read_features_csv(args.features)
    if args.target == "knees":
        write_knees_csv({sid: predict_knees_sequential(fv, chain) for sid, fv in feats.items()}, args.out)
    else:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "high_res", "low_res", "qp_high", "qp_low", "log_rate"])
            for sid, fv in feats.items():
                for (h, l), (qh, ql) in predict_crossovers_sequential(fv, chain).items():
                    w.writerow([sid, h.label, l.label, repr(qh), repr(ql), ""])
    print(f"wrote {args.target} predictions for {len(feats)} sequences to {args.out}")
    return EXIT_OK


def _read_tallies(directory: Path) -> Dict[str, int]:
    path = directory / "tally.csv"
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        return {row["sequence"]: int(row["tally"]) for row in csv.DictReader(fh)}


def cmd_eval_bdrate(args) -> int:
    ref_dir, test_dir = Path(args.ref), Path(args.test)
    ref, test = read_ladder_dir(ref_dir), read_ladder_dir(test_dir)
    if not ref or not test:
        raise ValidationError(f"no ladders found in {ref_dir if not ref else test_dir}")
    results = compare_ladders(test, ref, _read_tallies(test_dir))
    if not results:
        raise ValidationError("the two ladder sets share no sequence")
    rl_tallies = _read_tallies(ref_dir)
    rl_tally = max(rl_tallies.values()) if rl_tallies else MethodConfig("RL").budget
    method = next(iter(test.values())).method
    report = corpus_report(results, rl_tally, method)
    write_report(report, args.out, args.bins)
    print(f"{method}: mean BD-Rate {report.mean_bd_rate:.3f}% (mad {report.mad_bd_rate:.3f}), "
          f"RL-hits {report.mean_rl_hits:.1f}%, encode reduction {report.encode_reduction:.1f}%")
    return EXIT_OK


def cmd_rerun(args) -> int:
    try:
        config = json.loads(Path(args.config).read_text())
        argv = list(config["argv"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{args.config}: not a run config: {exc}") from exc
    if argv and argv[0] == "rerun":
        raise ValidationError("refusing to rerun a rerun")
    return main(argv)


# ------------------------------------------------------------------ parser

def _backend_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--measurements", type=Path, help="measurement CSV/JSON to replay")
    g.add_argument("--encoder-cmd", help="external encoder: '<cmd> <sequence> <resolution> <qp>'")
    p.add_argument("--encoder-timeout", type=float, default=None)
    p.add_argument("--sequences", nargs="+", help="sequence ids (default: all in --measurements)")
    p.add_argument("--v-high", type=float, default=97.0, help="saturation VMAF (default 97)")
    p.add_argument("--epsilon", type=float, default=0.01, help="saturation slope in VMAF/Mbps (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="parallel sequences (default: logical cores)")

    p = _Parser(prog="ladderkit", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"ladderkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("corpus", help="synthetic corpora").add_subparsers(dest="sub", required=True,
                                                                           parser_class=_Parser)
    s = c.add_parser("synth", parents=[common], help="sample a synthetic measurement corpus")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="VMAF noise SD")
    s.add_argument("--out", type=Path, required=True, help="measurement CSV or JSON")
    s.set_defaults(func=cmd_corpus_synth, out_is_dir=False)

    lad = sub.add_parser("ladder", help="build ladders").add_subparsers(dest="sub", required=True,
                                                                        parser_class=_Parser)
    r = lad.add_parser("reference", parents=[common], help="exhaustive reference ladders (RL)")
    _backend_args(r)
    r.add_argument("--out", type=Path, default=Path("ladders/rl"))
    r.set_defaults(func=cmd_ladder_reference, out_is_dir=True)

    e = lad.add_parser("estimate", parents=[common], help="reduced-encode ladders")
    _backend_args(e)
    e.add_argument("--method", choices=("nil", "cil", "fl"), required=True)
    e.add_argument("--n", type=int, default=5, help="CIL initial encodes per resolution (4-7)")
    e.add_argument("--knees", type=Path, help="knee CSV for CIL")
    e.add_argument("--crossovers", type=Path, help="cross-over CSV for FL")
    e.add_argument("--model", type=Path, help="trained model chain, used with --features")
    e.add_argument("--features", type=Path, help="feature CSV")
    e.add_argument("--fl-rounding", choices=("nearest", "floor", "ceil"), default="ceil")
    e.add_argument("--out", type=Path, default=None)
    e.set_defaults(func=cmd_ladder_estimate, out_is_dir=True)

    k = sub.add_parser("knees", parents=[common], help="Kneedle knee QPs from full measurement curves")
    k.add_argument("--measurements", type=Path, required=True)
    k.add_argument("--sensitivity", type=float, default=1.0)
    k.add_argument("--plane", choices=("log_rate", "rate", "qp"), default="log_rate")
    k.add_argument("--out", type=Path, default=Path("knees.csv"))
    k.set_defaults(func=cmd_knees, out_is_dir=False)

    x = sub.add_parser("crossovers", parents=[common], help="cross-over QPs from full measurement curves")
    x.add_argument("--measurements", type=Path, required=True)
    x.add_argument("--rounding", choices=("nearest", "floor", "ceil"), default="nearest")
    x.add_argument("--out", type=Path, default=Path("crossovers.csv"))
    x.set_defaults(func=cmd_crossovers, out_is_dir=False)

    f = sub.add_parser("features", help="content features").add_subparsers(dest="sub", required=True,
                                                                            parser_class=_Parser)
    fx = f.add_parser("extract", parents=[common], help="F1-F17 from planar YUV files")
    fx.add_argument("inputs", nargs="+", help="YUV files (stream info from flags or <file>.json)")
    fx.add_argument("--width", type=int)
    fx.add_argument("--height", type=int)
    fx.add_argument("--bit-depth", type=int, choices=(8, 10), default=10)
    fx.add_argument("--frames", type=int)
    fx.add_argument("--chroma", choices=("400", "420", "422", "444"), default="420")
    fx.add_argument("--levels", type=int, default=32)
    fx.add_argument("--tc-block", type=int, default=32)
    fx.add_argument("--ncc-radius", type=int, default=8)
    fx.add_argument("--ncc-size", type=_size, default=(960, 540), help="WxH or 'native'")
    fx.add_argument("--native", type=_size, default=(3840, 2160), help="frame size treated as 2160p")
    fx.add_argument("--out", type=Path, default=Path("features.csv"))
    fx.set_defaults(func=cmd_features_extract, out_is_dir=False)

    t = sub.add_parser("train", parents=[common], help="train a sequential GP chain")
    t.add_argument("target", choices=("knees", "crossovers"))
    t.add_argument("--features", type=Path, required=True)
    t.add_argument("--targets", type=Path, required=True, help="knee CSV or cross-over CSV")
    t.add_argument("--subset", choices=("published", "all", "rfe"),
                   help="feature subset (default: published for knees, rfe for cross-overs)")
    t.add_argument("--min-features", type=int, default=1)
    t.add_argument("--no-chain", action="store_true", help="predict each target from features only")
    t.add_argument("--cv", action="store_true", help="report ten-fold cross-validation")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_train, out_is_dir=False)

    pr = sub.add_parser("predict", parents=[common], help="apply a trained chain")
    pr.add_argument("target", choices=("knees", "crossovers"))
    pr.add_argument("--model", type=Path, required=True)
    pr.add_argument("--features", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)
    pr.set_defaults(func=cmd_predict, out_is_dir=False)

    ev = sub.add_parser("eval", help="evaluate ladders").add_subparsers(dest="sub", required=True,
                                                                        parser_class=_Parser)
    b = ev.add_parser("bdrate", parents=[common], help="BD-Rate and RL-hits against reference ladders")
    b.add_argument("--ref", type=Path, required=True)
    b.add_argument("--test", type=Path, required=True)
    b.add_argument("--bins", type=int, default=20)
    b.add_argument("--out", type=Path, default=Path("report"))
    b.set_defaults(func=cmd_eval_bdrate, out_is_dir=True)

    rr = sub.add_parser("rerun", parents=[common], help="repeat a run from its config.json")
    rr.add_argument("config", type=Path)
    rr.set_defaults(func=cmd_rerun, out_is_dir=None)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        print("ladderkit: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "method", None) and args.out is None:
        args.out = Path("ladders") / args.method
    args.command_path = " ".join(a for a in (args.command, getattr(args, "sub", None)) if a)
    try:
        if args.out_is_dir is not None:
            _write_run_files(_run_dir(Path(args.out), args.out_is_dir), argv, args)
        return args.func(args)
    except BackendError as exc:
        logger.error("%s", exc)
        return EXIT_BACKEND
    except (ValidationError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except LadderkitError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
