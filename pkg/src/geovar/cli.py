"""Command-line entry point: ``geovar gen | variogram | fit | train | eval | weights audit``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .encoders import DualEncoder, EncoderDims, load_checkpoint, save_checkpoint
from .evalretrieval import build_gallery, evaluate_encoder, uniform_prediction_accuracy
from .reweighting import ReweightConfig, class_name, pair_terms_rows
from .semivariogram import (DEFAULT_BINS, DEFAULT_H_MAX_KM, DEFAULT_MAX_PAIRS, EmpiricalVariogram,
                            SphericalModel, estimate_empirical, evaluate_spherical_array, fit_spherical,
                            pair_index_to_ij, read_model, read_variogram_csv, worker_count,
                            write_model, write_variogram_csv)
from .training import TrainConfig, epoch_log_csv, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

AUDIT_HEADER = ["anchor_id", "neg_id", "d_km", "d_cos", "gamma_expected", "delta", "weight", "class"]
REPORT_HEADER = ["val_acc25", "val_acc200", "val_acc750", "n_queries", "median_error_km"]


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read(fn, path):
    """Load an input file, mapping unreadable or malformed files to an I/O failure."""
    try:
        return fn(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def _announce(args, primary: Path) -> dict:
    """Print the resolved configuration and store it next to the primary output."""
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in ("func", "verbose")}
    cfg["threads"] = worker_count()
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print(text)
    primary.parent.mkdir(parents=True, exist_ok=True)
    _sidecar(primary).write_text(text + "\n")
    return cfg


# ---------------------------------------------------------------------------
# gen

def cmd_gen(args) -> int:
    spec = ds.SyntheticSpec(n=args.n, dim=args.dim, latent_dim=args.latent_dim, cov_range_km=args.range_km,
                            cov_sill=args.sill, cov_nugget=args.nugget, seed=args.seed,
                            region=tuple(args.region), name=args.out.stem)
    _announce(args, args.out)
    d = ds.generate_synthetic(spec)
    ds.save_binary(d, args.out)
    print(f"wrote {len(d)} records of dim {d.dim} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# variogram / fit

def _fmt(x: float) -> str:
    return f"{x:.2f}"


def variogram_svg(ev: EmpiricalVariogram, model: SphericalModel | None = None,
                  width: int = 640, height: int = 400) -> str:
    """Minimal SVG: axes, empirical points joined by a polyline, optional model curve."""
    left, right, top, bottom = 60, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    ok = ev.counts > 0
    h, g = ev.centers[ok], ev.gamma[ok]
    y_max = max(float(g.max()) if len(g) else 0.0, model.sill if model is not None else 0.0)
    y_max = y_max * 1.1 if y_max > 0 else 1.0
    x_max = ev.h_max

    def px(x):
        return _fmt(left + pw * x / x_max)

    def py(y):
        return _fmt(top + ph * (1.0 - y / y_max))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(5):
        xv, yv = x_max * k / 4, y_max * k / 4
        out.append(f'<text x="{px(xv)}" y="{top + ph + 18}" font-size="11" text-anchor="middle">'
                   f'{xv:g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv)}" font-size="11" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:g}" y="{height - 10}" font-size="12" text-anchor="middle">'
               'lag distance (km)</text>')
    out.append(f'<text x="14" y="{top + ph / 2:g}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:g})">semivariance</text>')
    if len(h):
        pts = " ".join(f"{px(x)},{py(y)}" for x, y in zip(h, g))
        out.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>')
        out.extend(f'<circle cx="{px(x)}" cy="{py(y)}" r="2.5" fill="steelblue"/>' for x, y in zip(h, g))
    if model is not None:
        xs = np.linspace(0.0, x_max, 201)
        ys = evaluate_spherical_array(model, xs)
        pts = " ".join(f"{px(x)},{py(y)}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="firebrick" stroke-width="1.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _model_path(args) -> Path:
    return args.model_out if args.model_out is not None else args.out.with_suffix(".model")


def cmd_variogram(args) -> int:
    d = _read(ds.load_binary, args.data)
    _announce(args, args.out)
    ev = estimate_empirical(d, n_bins=args.bins, h_max_km=args.h_max_km, max_pairs=args.max_pairs,
                            seed=args.seed)
    write_variogram_csv(ev, args.out)
    model = None
    if args.fit:
        model = fit_spherical(ev)
        write_model(model, _model_path(args))
        print(f"model nugget={model.nugget:.6g} partial_sill={model.partial_sill:.6g} "
              f"range_km={model.range_km:.6g} -> {_model_path(args)}")
    svg = args.svg if args.svg is not None else args.out.with_suffix(".svg")
    svg.write_text(variogram_svg(ev, model))
    print(f"wrote {args.out} and {svg} ({ev.total_pairs_sampled} pairs)")
    return EXIT_OK


def cmd_fit(args) -> int:
    ev = _read(read_variogram_csv, args.variogram)
    _announce(args, args.out)
    model = fit_spherical(ev)
    write_model(model, args.out)
    print(f"nugget={model.nugget!r} partial_sill={model.partial_sill!r} range_km={model.range_km!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval

def _reweight_config(args, model: SphericalModel) -> ReweightConfig:
    return ReweightConfig(model, s1=args.s1, s2=args.s2, theta1_km=args.theta1_km, theta2_km=args.theta2_km,
                          delta_scale=args.delta_scale)


def cmd_train(args) -> int:
    if args.no_reweight and args.model is not None:
        raise UsageError("--model and --no-reweight are mutually exclusive")
    if not args.no_reweight and args.model is None:
        raise UsageError("reweighting needs --model (or pass --no-reweight)")
    d = _read(ds.load_binary, args.data)
    model = None if args.model is None else _read(read_model, args.model)
    out = args.out_dir
    ckpt = out / "model.gckpt"
    _announce(args, ckpt)
    train_set, val_set = ds.split(d, args.val_fraction, args.seed)
    rw = None if model is None else _reweight_config(args, model)
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                      queue_capacity=args.queue, augmentations=args.augmentations, tau=args.tau,
                      reweight=rw, augment_noise_sigma=args.noise_sigma)
    dims = EncoderDims(d_in=d.dim, hidden=args.hidden, d_emb=args.d_emb, n_scales=args.scales,
                       n_fourier=args.fourier)
    encoder = DualEncoder.init(dims, seed=args.seed, tau=args.tau)
    if args.checkpoint_every:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    result = train(cfg, train_set, encoder, val_set if len(val_set) else None,
                   checkpoint_every=args.checkpoint_every, checkpoint_dir=out / "checkpoints",
                   on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.mean_loss:.5f} "
                                            f"hard {r.hard_count} false {r.false_count}"
                                            + ("" if r.val is None else " " + r.val.text())))
    save_checkpoint(result.encoder, ckpt)
    (out / "epoch_log.csv").write_text(epoch_log_csv(result.epochs))
    print(f"wrote {ckpt} and {out / 'epoch_log.csv'}")
    return EXIT_OK


def _gallery_and_queries(args, encoder):
    d = _read(ds.load_binary, args.data)
    if d.dim != encoder.dims.d_in:
        raise InputError(f"{args.data} has {d.dim} features, checkpoint expects {encoder.dims.d_in}")
    if args.val_fraction > 0:
        train_set, queries = ds.split(d, args.val_fraction, args.seed)
    else:
        train_set, queries = d, d
    source = train_set if args.gallery is None else _read(ds.load_binary, args.gallery)
    if args.gallery_sample < 0:
        raise UsageError("--gallery-sample must be >= 0")
    if 0 < args.gallery_sample < len(source):
        pick = np.sort(np.random.default_rng(args.seed).choice(len(source), args.gallery_sample, replace=False))
        source = source.subset(pick)
    if len(queries) == 0:
        raise InputError("no query records")
    return build_gallery((source.lat, source.lon), encoder), queries


def cmd_eval(args) -> int:
    encoder = _read(load_checkpoint, args.checkpoint)
    gallery, queries = _gallery_and_queries(args, encoder)
    out = args.out if args.out is not None else args.checkpoint.with_name(args.checkpoint.stem + "_eval.csv")
    _announce(args, out)
    report = evaluate_encoder(encoder, gallery, queries.features, queries.lat, queries.lon)
    base = uniform_prediction_accuracy(gallery.lat, gallery.lon, queries.lat, queries.lon)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerow([repr(report.acc25), repr(report.acc200), repr(report.acc750), report.n_queries,
                repr(report.median_error_km)])
    out.write_text(buf.getvalue())
    print(report.text())
    print("uniform-gallery baseline acc@25km={:.4f} acc@200km={:.4f} acc@750km={:.4f}".format(*base))
    return EXIT_OK


# ---------------------------------------------------------------------------
# weights audit

def audit_rows(cfg: ReweightConfig, d: ds.Dataset, sample_size: int, seed: int) -> list[list[str]]:
    n = len(d)
    total = n * (n - 1) // 2
    if total == 0:
        raise ValueError("need at least 2 records")
    if sample_size >= total:
        k = np.arange(total)
    else:
        k = np.sort(np.random.default_rng(seed).choice(total, size=sample_size, replace=False))
    i, j = pair_index_to_ij(k, n)
    t = pair_terms_rows(cfg, d.features, d.lat, d.lon, i, j)
    return [[str(d.ids[a]), str(d.ids[b]), repr(float(t.d_km[r])), repr(float(t.d_cos[r])),
             repr(float(t.expected[r])), repr(float(t.delta[r])), repr(float(t.weight[r])),
             class_name(t.cls[r])] for r, (a, b) in enumerate(zip(i, j))]


def cmd_weights_audit(args) -> int:
    d = _read(ds.load_binary, args.data)
    model = _read(read_model, args.model)
    cfg = _reweight_config(args, model)
    _announce(args, args.out)
    rows = audit_rows(cfg, d, args.sample_size, args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_HEADER)
        w.writerows(rows)
    counts = {c: sum(r[-1] == c for r in rows) for c in ("hard", "false", "neutral")}
    print(f"wrote {len(rows)} pairs to {args.out}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_reweight_flags(p):
    p.add_argument("--s1", type=float, default=0.5, help="hard-negative temperature")
    p.add_argument("--s2", type=float, default=0.5, help="false-negative temperature")
    p.add_argument("--theta1-km", type=float, default=None, help="hard-negative distance (default: fitted range)")
    p.add_argument("--theta2-km", type=float, default=25.0, help="false-negative distance")
    p.add_argument("--delta-scale", type=int, choices=(1, 2), default=2,
                   help="multiplier on the model curve when comparing with cosine distance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geovar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic spatially correlated dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--range-km", type=float, default=2000.0)
    p.add_argument("--sill", type=float, default=1.0)
    p.add_argument("--nugget", type=float, default=0.1)
    p.add_argument("--region", type=float, nargs=4, default=[-30.0, 30.0, -30.0, 30.0],
                   metavar=("LAT_MIN", "LAT_MAX", "LON_MIN", "LON_MAX"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("variogram", help="empirical semivariogram CSV and SVG plot")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--h-max-km", type=float, default=DEFAULT_H_MAX_KM)
    p.add_argument("--max-pairs", type=int, default=DEFAULT_MAX_PAIRS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--svg", type=Path, default=None, help="default: OUT with .svg suffix")
    p.add_argument("--fit", action="store_true", help="also fit a spherical model and overlay it")
    p.add_argument("--model-out", type=Path, default=None, help="default: OUT with .model suffix")
    p.set_defaults(func=cmd_variogram)

    p = sub.add_parser("fit", help="fit a spherical model to a variogram CSV")
    p.add_argument("--variogram", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the dual encoder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, default=None, help="fitted variogram model file")
    p.add_argument("--no-reweight", action="store_true", help="plain InfoNCE baseline")
    _add_reweight_flags(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--queue", type=int, default=1024, help="negative queue capacity")
    p.add_argument("--augmentations", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--d-emb", type=int, default=16)
    p.add_argument("--scales", type=int, default=9)
    p.add_argument("--fourier", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="thresholded retrieval accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--gallery", type=Path, default=None,
                   help="dataset whose coordinates form the gallery (default: training split of --data)")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="query split; 0 uses every record as a query against the full gallery")
    p.add_argument("--gallery-sample", type=int, default=0,
                   help="seeded uniform sample of this many gallery coordinates (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weights", help="inspect reweighting")
    wsub = p.add_subparsers(dest="weights_command", required=True, parser_class=_Parser)
    p = wsub.add_parser("audit", help="per-pair deviation, weight and class CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    _add_reweight_flags(p)
    p.add_argument("--sample-size", type=int, default=1000, help="number of pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_weights_audit)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
