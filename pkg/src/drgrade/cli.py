"""Command line for the grading pipeline.

Subcommands: synth, train-enhance, train, predict, eval, serve. Every
command is deterministic given its seeds: rerunning with identical
arguments reproduces manifests, bundles, JSON, and heatmap files byte for
byte.

Exit codes:
    0  success
    2  command-line usage error (argparse)
    3  validation error: bad config value or file, malformed image or
       manifest, empty split, bad distribution
    4  filesystem I/O error
    5  bundle integrity error (magic, version, checksum, block table)
"""

import argparse
import csv
import json
import os
import sys

from . import bundle as bd
from . import explain as ex
from . import pipeline as pl
from . import synth
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .imaging import dequantize, load_pnm

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_BUNDLE = 5

REPORT_COLUMNS = ["variant", "split", "n", "accuracy", "binary_accuracy",
                  "sensitivity", "specificity", "precision", "f1", "mcc",
                  "auc", "map"]


class UsageError(Exception):
    pass


def _load_image(path):
    with open(path, "rb") as fh:
        return dequantize(load_pnm(fh.read()))


def _dump_json(payload, path=None):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    return cfg


def variant_name(model: pl.Model) -> str:
    off = [name for name, attr in
           [("no_enhance", "use_enhance"), ("no_hffn", "use_hffn"),
            ("no_multistage", "use_multistage")] if not getattr(model, attr)]
    return "+".join(off) if off else "full"


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    parts = args.dist.split(",")
    if len(parts) != 5:
        raise ValueError(f"--dist needs 5 comma-separated weights, got {args.dist!r}")
    dist = [float(p) for p in parts]
    manifest = synth.generate_dataset(args.n, args.seed, dist, args.out,
                                      size=args.size)
    rows = synth.read_manifest(manifest)
    by_grade = {g: 0 for g in range(5)}
    by_split = {"train": 0, "val": 0, "test": 0}
    for r in rows:
        by_grade[int(r["grade"])] += 1
        by_split[r["split"]] += 1
    print(f"wrote {len(rows)} samples to {manifest}")
    print("grades " + " ".join(f"{g}:{by_grade[g]}" for g in range(5)))
    print("splits " + " ".join(f"{s}:{by_split[s]}" for s in ("train", "val", "test")))
    return EXIT_OK


def cmd_train_enhance(args) -> int:
    cfg = _config_from_args(args)
    model = pl.init_model(cfg)
    from .enhance import EnhanceConfig, train_enhancer
    ecfg = EnhanceConfig(lam=cfg.lam, learning_rate=cfg.enhance_lr,
                         epochs=cfg.enhance_epochs, batch_size=cfg.enhance_batch,
                         seed=cfg.seed, max_pairs=cfg.enhance_pairs)
    params, history = train_enhancer(args.manifest, ecfg)
    model.params.update(params)
    pl.save_model(model, args.out)
    _dump_json({"enhance": history}, args.history or args.out + ".history.json")
    print(f"wrote {args.out} (stage 1 only, "
          f"final recon {history['train_recon'][-1]:.6f})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    progress = None if args.quiet else (lambda msg: print(msg, flush=True))
    model, history = pl.train_full(
        args.manifest, cfg, use_enhance=not args.no_enhance,
        use_hffn=not args.no_hffn, use_multistage=not args.no_multistage,
        progress=progress)
    pl.save_model(model, args.out)
    _dump_json(history, args.history or args.out + ".history.json")
    print(f"wrote {args.out} (variant {variant_name(model)})")
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.explain and not args.out_prefix:
        raise UsageError("--explain needs --out-prefix for the heatmap files")
    model = pl.load_model(args.model)
    img = _load_image(args.image)
    seed = model.config.seed if args.seed is None else args.seed
    pred = pl.predict(model, img, seed=seed, T=args.mc_samples)
    _dump_json(pred.to_dict(),
               args.out_prefix + ".json" if args.out_prefix else None)
    if args.explain:
        cfg = model.config
        prepared = pl.prepare_input(model, img)
        cam = ex.grad_cam(model.params, prepared, pred.severity)
        ex.render_overlay(prepared, cam, args.out_prefix, "cam")
        heat = ex.uncertainty_heatmap(model.params, prepared,
                                      T=max(pred.T, 2), seed=seed,
                                      p=cfg.dropout_p, tau=cfg.tau)
        ex.render_overlay(prepared, heat, args.out_prefix, "uncertainty")
        print(f"wrote {args.out_prefix}.json + cam/uncertainty maps")
    return EXIT_OK


def _report_row(name, report):
    return [name, report["split"], report["n"]] + \
        [repr(report[c]) for c in REPORT_COLUMNS[3:]]


def cmd_eval(args) -> int:
    model = pl.load_model(args.model)
    if args.ablation_sweep:
        if not args.csv:
            raise UsageError("--ablation-sweep needs --csv for the comparison table")
        results = pl.ablation_sweep(model, args.manifest, args.split)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for name, report in results:
                w.writerow(_report_row(name, report))
        _dump_json({name: report for name, report in results}, args.out)
        return EXIT_OK
    report = pl.evaluate(model, args.manifest, args.split)
    _dump_json(report, args.out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            w.writerow(_report_row(variant_name(model), report))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app
    app = create_app(model_path=args.model)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drgrade",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dist", default="0.2,0.2,0.2,0.2,0.2",
                   help="grade weights g0,g1,g2,g3,g4 summing to 1")
    p.add_argument("--size", type=int, default=96)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-enhance", help="train stage 1 (enhancer) only")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--history")
    p.set_defaults(fn=cmd_train_enhance)

    p = sub.add_parser("train", help="train the full two-stage model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--history")
    p.add_argument("--no-enhance", action="store_true")
    p.add_argument("--no-hffn", action="store_true")
    p.add_argument("--no-multistage", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="grade one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix")
    p.add_argument("--explain", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--mc-samples", type=int)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="score a model over a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--ablation-sweep", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--model")
    p.set_defaults(fn=cmd_serve)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except bd.BundleError as err:
        print(f"bundle error: {err}", file=sys.stderr)
        return EXIT_BUNDLE
    except (ConfigError, ValueError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
