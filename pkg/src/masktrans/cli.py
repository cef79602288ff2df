"""Command-line entry point: ``masktrans <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric check failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCHEMA, RunConfig, defaults, parse_config
from .errors import ConfigError, FormatError, MaskTransError, SamplerExhausted, ShapeMismatch, TooFewSamples

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(_dump(obj) + "\n")


def _environment(seed, dtype) -> dict:
    return {"seed": seed, "version": __version__, "dtype": dtype, "numpy": np.__version__,
            "python": platform.python_version()}


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .io import save_domain
    from .training import BiasSpec, gen_synthetic_dataset

    spec = BiasSpec()
    a, b = gen_synthetic_dataset(spec, args.n, args.size, np.random.default_rng(args.seed))
    out = Path(args.out)
    save_domain(out / "domainA", a)
    save_domain(out / "domainB", b)
    _write_json(out / "dataset.json", {
        "classes": list(spec.class_names), "biased_class": spec.class_names[spec.biased_class],
        "n": args.n, "size": args.size, "seed": args.seed,
        "colors": {d: spec.color_table(d).tolist() for d in ("A", "B")},
    })
    print(f"wrote {args.n} pairs per domain to {out}")
    return EXIT_OK


# -- sample-stats ----------------------------------------------------------------

def cmd_sample_stats(args) -> int:
    from .io import list_pairs, read_pgm
    from .sampling import SamplerConfig, acceptance_stats

    pa, pb = list_pairs(Path(args.data) / "domainA"), list_pairs(Path(args.data) / "domainB")
    n = min(len(pa), len(pb), args.pairs)
    cfg = SamplerConfig(global_crop=args.crop, threshold=args.threshold, local_ratio=max(1 / 8, 4 / args.crop))
    rng = np.random.default_rng(args.seed)
    rows = []
    for k in range(n):
        ca, cb = read_pgm(pa[k][1]), read_pgm(pb[k][1])
        stats = acceptance_stats(ca, cb, cfg, rng, args.draws, with_oracle=args.oracle)
        rows.append({"pair": k, "a": pa[k][0].stem, "b": pb[k][0].stem, **stats})
    text = "\n".join(json.dumps(r, sort_keys=True) for r in rows)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def _apply_overrides(cfg: dict, args) -> dict:
    for section, fields in SCHEMA.items():
        for key, f in fields.items():
            value = getattr(args, f"{section}__{key}")
            if value is not None:
                cfg[section][key] = f.check(f"{section}.{key}", value, None)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    if args.steps is not None:
        cfg["train"]["steps"] = SCHEMA["train"]["steps"].check("train.steps", args.steps, None)
    return cfg


def load_run_config(args) -> RunConfig:
    base = parse_config(args.config).to_dict() if args.config else defaults()
    cfg = _apply_overrides(base, args)
    if cfg["train"]["lr0"] < cfg["train"]["lr_floor"]:
        raise ConfigError("train.lr0 must be >= train.lr_floor")
    return RunConfig(**cfg)


def cmd_train(args) -> int:
    from .io import load_domain
    from .training import Trainer

    rc = load_run_config(args)
    data = args.data or rc.paths["data"]
    out = args.out or rc.paths["out"]
    if not data:
        raise ConfigError("no dataset: pass --data or set paths.data")
    if not out:
        raise ConfigError("no output directory: pass --out or set paths.out")
    tc = rc.train_config()
    domain_a, domain_b = load_domain(Path(data) / "domainA"), load_domain(Path(data) / "domainB")
    out = Path(out)
    if (out / "telemetry.jsonl").exists():
        (out / "telemetry.jsonl").unlink()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(rc.to_json() + "\n")
    trainer = Trainer(tc, domain_a, domain_b, out_dir=out)

    def log(row):
        print(json.dumps(row, sort_keys=True), file=sys.stderr)

    res = trainer.run(log_every=args.log_every, logger=log if args.log_every else None)
    _write_json(out / "report.json", {
        "steps": res.steps, "skipped": res.skipped, "telemetry": "telemetry.jsonl",
        "checkpoint": "final", "environment": _environment(tc.seed, tc.dtype),
    })
    print(f"trained {res.steps} steps ({res.skipped} skipped) in {res.seconds:.1f}s -> {out}")
    return EXIT_OK


# -- translate -------------------------------------------------------------------

def cmd_translate(args) -> int:
    from .io import read_pgm, read_ppm, save_ftc1, write_ppm
    from .training import load_generator, translate

    G, manifest = load_generator(args.ckpt)
    image, grid = read_ppm(args.inp), read_pgm(args.seg)
    if int(grid.max()) >= manifest["n_classes"]:
        raise DataError(f"class id {int(grid.max())} outside the model's {manifest['n_classes']} classes")
    result = translate(G, image, grid, manifest["n_classes"], dump_attention=args.dump_attention)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.dump_attention:
        result, maps = result
        adir = out.with_name(out.stem + "_attention")
        adir.mkdir(exist_ok=True)
        for name, arr in maps.items():
            save_ftc1(adir / f"{name}.ftc1", np.ascontiguousarray(arr))
    write_ppm(out, result)
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def _provider(spec: str):
    from .objectives import ToyFeatureProvider

    if spec == "toy":
        return ToyFeatureProvider()
    raise ConfigError(f"unknown feature provider {spec!r} (use toy or ftc1:DIR)")


def cmd_eval(args) -> int:
    from . import metrics
    from .io import load_ftc1, load_domain
    from .segmask import CkvdClassMap

    m = defaults()["metrics"]
    opts = {k: getattr(args, k) if getattr(args, k) is not None else m[k]
            for k in ("crop_ratio", "threshold", "pixel_threshold", "n_pairs", "seed", "features")}
    for k, v in opts.items():
        SCHEMA["metrics"][k].check(f"metrics.{k}", v, None)
    if opts["features"].startswith("ftc1:"):
        if args.metric != "kid":
            raise ConfigError("precomputed FTC1 features only support --metric kid")
        root = Path(opts["features"][5:])
        X, Y = load_ftc1(root / "source.ftc1"), load_ftc1(root / "target.ftc1")
        if X.ndim != 2 or Y.ndim != 2:
            raise FormatError("feature files must hold (n, d) matrices")
        raw = metrics.mmd2_unbiased(X, Y, estimator="mixed")
        rep = metrics.MetricReport("kid", raw * metrics.SCALE, raw, len(X), len(Y), config={"provider": opts["features"]})
    else:
        provider = _provider(opts["features"])
        src, tgt = load_domain(args.src), load_domain(args.tgt)
        if args.metric == "kid":
            rep = metrics.kid([i for i, _ in src], [i for i, _ in tgt], provider)
        elif args.metric == "skvd":
            rep = metrics.skvd(src, tgt, provider, opts["crop_ratio"], opts["threshold"], opts["n_pairs"], opts["seed"])
        else:
            cmap = CkvdClassMap.from_json(args.class_map) if args.class_map else CkvdClassMap.default()
            rep = metrics.ckvd(src, tgt, provider, cmap, opts["pixel_threshold"], opts["crop_ratio"],
                               opts["threshold"], opts["n_pairs"], opts["seed"])
    bundle = {"report": rep.to_dict(), "environment": _environment(opts["seed"], "float64")}
    if args.out:
        _write_json(args.out, bundle)
    print(_dump(bundle))
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradsuite import CASES, SEEDS, format_table, gradcheck_all

    names = args.ops or list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown ops {unknown}; choose from {sorted(CASES)}")
    results = gradcheck_all(names, SEEDS[: args.seeds])
    print(format_table(results))
    if args.out:
        _write_json(args.out, [{"op": r.name, "max_error": r.max_error, "seeds": r.seeds, "passed": r.passed}
                               for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -- parser ----------------------------------------------------------------------

def _schema_flags(p: argparse.ArgumentParser) -> None:
    for section, fields in SCHEMA.items():
        g = p.add_argument_group(f"{section} overrides")
        for key, f in fields.items():
            kind = f.kind
            if kind is bool:
                kind = _parse_bool
            g.add_argument(f"--{section}.{key}", dest=f"{section}__{key}", type=kind, default=None,
                           metavar=f.kind.__name__.upper(), help=f"{f.help} (default: {f.default})")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    ap = argparse.ArgumentParser(prog="masktrans", description=__doc__.splitlines()[0], formatter_class=fmt)
    ap.add_argument("--version", action="version", version=f"masktrans {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the biased synthetic two-domain dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset root (domainA/, domainB/)")
    p.add_argument("--n", type=int, default=200, help="image pairs per domain")
    p.add_argument("--size", type=int, default=32, help="image side in pixels (>= 32)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sample-stats", help="crop-pair acceptance statistics per image pair", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset root with domainA/ and domainB/")
    p.add_argument("--crop", type=int, default=SCHEMA["sampler"]["global_crop"].default, help="crop side")
    p.add_argument("--threshold", type=float, default=SCHEMA["sampler"]["threshold"].default,
                   help="overlap threshold (strict)")
    p.add_argument("--draws", type=int, default=1000, help="draws per image pair")
    p.add_argument("--pairs", type=int, default=10, help="number of image pairs (paired by index)")
    p.add_argument("--oracle", action="store_true", help="also enumerate all windows for the exact fraction")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", default=None, help="JSON-lines output (stdout if omitted)")
    p.set_defaults(func=cmd_sample_stats)

    p = sub.add_parser("train", help="train generator and discriminators", formatter_class=fmt)
    p.add_argument("--config", default=None, help="run configuration JSON")
    p.add_argument("--data", default=None, help="dataset root (overrides paths.data)")
    p.add_argument("--out", default=None, help="output directory (overrides paths.out)")
    p.add_argument("--seed", type=int, default=None, help="shortcut for --train.seed")
    p.add_argument("--steps", type=int, default=None, help="shortcut for --train.steps")
    p.add_argument("--log-every", type=int, default=0, help="print telemetry to stderr every N steps (0: never)")
    _schema_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one image with a trained generator", formatter_class=fmt)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--in", dest="inp", required=True, help="input PPM image")
    p.add_argument("--seg", required=True, help="input PGM class grid")
    p.add_argument("--out", required=True, help="output PPM image")
    p.add_argument("--dump-attention", action="store_true", help="also write attention maps as FTC1 files")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="kernel distance between two corpora", formatter_class=fmt)
    p.add_argument("--metric", choices=("kid", "skvd", "ckvd"), required=True, help="metric")
    p.add_argument("--src", default=None, help="source domain dir (images/, segs/)")
    p.add_argument("--tgt", default=None, help="target domain dir (images/, segs/)")
    p.add_argument("--features", default=None, help=f"toy or ftc1:DIR (default: {SCHEMA['metrics']['features'].default})")
    p.add_argument("--class-map", default=None, help='JSON {"<id>": "<category>"} overrides for cKVD')
    for key in ("crop_ratio", "threshold", "pixel_threshold", "n_pairs", "seed"):
        f = SCHEMA["metrics"][key]
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=f.kind, default=None,
                       help=f"{f.help} (default: {f.default})")
    p.add_argument("--out", default=None, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op", formatter_class=fmt)
    p.add_argument("--ops", nargs="*", default=None, help="subset of checks (default: all)")
    p.add_argument("--seeds", type=int, default=5, choices=range(1, 6), metavar="{1..5}", help="seeds per check")
    p.add_argument("--out", default=None, help="JSON summary path")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "eval" and not (args.features or "").startswith("ftc1:") and not (args.src and args.tgt):
        ap.error("eval needs --src and --tgt unless --features ftc1:DIR is given")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, FormatError, TooFewSamples, ShapeMismatch, SamplerExhausted,
            MaskTransError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # invalid option values rejected by constructors
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
