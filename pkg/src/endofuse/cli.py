"""Pipeline driver: feature extraction, training, evaluation, figures.

Subcommands: ``extract``, ``train``, ``eval``, ``plot``.  Every command
is deterministic given identical inputs, flags and seed; figures are
self-contained SVG files.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import dataset, metrics, radiomics, training
from .model import ModelConfig
from .training import TrainConfig


class CliError(Exception):
    """Fatal command error; message printed, nonzero exit."""


# ---------------------------------------------------------------------------
# config file


def parse_config(path):
    """Flat `key = value` file split into (ModelConfig, TrainConfig).

    Unknown keys are errors so misspelled hyperparameters cannot
    silently fall back to defaults.
    """
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_kwargs, train_kwargs = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key in model_fields:
                target, kind = model_kwargs, model_fields[key]
            elif key in train_fields:
                target, kind = train_kwargs, train_fields[key]
            else:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                target[key] = float(raw) if "float" in str(kind) else int(raw)
            except ValueError:
                raise CliError(f"{path}:{lineno}: bad value {raw!r} for {key!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


# ---------------------------------------------------------------------------
# extract


def _extract_one(args):
    path, label, root, side, radius, bins = args
    img = dataset.load_image(os.path.join(root, path), side)
    gray = radiomics.rgb_to_gray(img)
    central = radiomics.make_central_mask(side, side, radius)
    peripheral = radiomics.make_peripheral_mask(side, side, radius)
    rec_c = radiomics.extract_record(gray, central, bins)
    rec_p = radiomics.extract_record(gray, peripheral, bins)
    return path, label, rec_c, rec_p


def cmd_extract(args):
    manifest = dataset.load_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    jobs = [(p, lab, root, args.side, args.radius, args.bins)
            for p, lab in manifest.entries]
    workers = int(os.environ.get("ENDOFUSE_THREADS", "1"))
    results, failures = [], []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raw = []
            for job, fut in [(j, pool.submit(_extract_one, j)) for j in jobs]:
                try:
                    raw.append(fut.result())
                except Exception as exc:
                    failures.append((job[0], exc))
            results = raw
    else:
        for job in jobs:
            try:
                results.append(_extract_one(job))
            except Exception as exc:
                failures.append((job[0], exc))
    for path, exc in failures:
        print(f"warning: skipped {path}: {exc}", file=sys.stderr)
    if not results:
        raise CliError("no image produced features")
    if len(failures) > 0.10 * len(jobs):
        raise CliError(f"{len(failures)} of {len(jobs)} images failed")

    names = radiomics.record_names()
    ids = [r[0] for r in results]
    labels = [r[1] for r in results]
    central_tbl = dataset.FeatureTable(
        ids, names, np.array([[r[2][n] for n in names] for r in results]), labels
    )
    peripheral_tbl = dataset.FeatureTable(
        ids, names, np.array([[r[3][n] for n in names] for r in results]), labels
    )
    merged = radiomics.merge_tables(central_tbl, peripheral_tbl)
    dataset.write_feature_csv(merged, args.out)
    print(f"wrote {len(merged)} rows x {len(merged.columns)} features to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    model_cfg, train_cfg = parse_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    manifest = dataset.load_manifest(args.manifest)
    table = dataset.read_feature_csv(args.features)
    for path, _ in manifest.entries:
        if path not in table:
            raise CliError(f"manifest entry {path!r} missing from {args.features}")
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)

    def progress(row):
        print(f"epoch {row.epoch:3d}  train loss {row.train_loss:.4f} "
              f"acc {row.train_acc:.4f}  val loss {row.val_loss:.4f} "
              f"acc {row.val_acc:.4f}")

    training.fit(model_cfg, train_cfg, manifest, table, args.out, root,
                 progress=progress)
    print(f"wrote final.ckpt, best.ckpt, train_log.csv to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    params, model_cfg, stats, _seed, _epoch = training.load_checkpoint(
        args.checkpoint
    )
    manifest = dataset.load_manifest(args.manifest, model_cfg.num_classes)
    table = dataset.read_feature_csv(args.features)
    for col in stats.columns:
        if col not in table.columns:
            raise CliError(f"feature table missing checkpoint column {col!r}")
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    report, curves = metrics.evaluate(params, model_cfg, stats,
                                      manifest.entries, table, root)
    with open(os.path.join(args.out, "metrics.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    metrics.write_roc_csv(curves, os.path.join(args.out, "roc.csv"))
    print(f"ACC {report.accuracy:.4f}  Sensitivity {report.sensitivity:.4f}  "
          f"F1 {report.f1:.4f}  Precision {report.precision:.4f}")
    return 0


# ---------------------------------------------------------------------------
# plot


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _svg_panel(lines, x_label, y_label, title, width=420, height=300):
    """One chart panel: list of (label, color, xs, ys) polylines."""
    left, right, top, bottom = 55, 15, 30, 40
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for _, _, xs, _ in lines for x in xs]
    ys_all = [y for _, _, _, ys in lines for y in ys]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return left + pw * (x - x0) / (x1 - x0)

    def py(y):
        return top + ph * (1.0 - (y - y0) / (y1 - y0))

    parts = [
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
        f'font-size="13">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" '
        f'font-size="11">{x_label}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" '
        f'font-size="11" transform="rotate(-90 14 {height / 2:.1f})">'
        f'{y_label}</text>',
        f'<text x="{left - 5}" y="{py(y0) + 4:.1f}" text-anchor="end" '
        f'font-size="9">{y0:.3g}</text>',
        f'<text x="{left - 5}" y="{py(y1) + 4:.1f}" text-anchor="end" '
        f'font-size="9">{y1:.3g}</text>',
        f'<text x="{px(x0):.1f}" y="{top + ph + 12}" text-anchor="middle" '
        f'font-size="9">{x0:.3g}</text>',
        f'<text x="{px(x1):.1f}" y="{top + ph + 12}" text-anchor="middle" '
        f'font-size="9">{x1:.3g}</text>',
    ]
    for i, (label, color, xs, ys) in enumerate(lines):
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 13 * i
        parts.append(f'<line x1="{left + 8}" y1="{ly - 3}" x2="{left + 26}" '
                     f'y2="{ly - 3}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{left + 30}" y="{ly}" font-size="10">'
                     f'{label}</text>')
    return "\n".join(parts)


def _write_svg(path, panels, width=420, height=300):
    total_w = width * len(panels)
    body = []
    for i, panel in enumerate(panels):
        body.append(f'<g transform="translate({i * width} 0)">\n{panel}\n</g>')
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" '
           f'height="{height}" viewBox="0 0 {total_w} {height}">\n'
           '<rect width="100%" height="100%" fill="white"/>\n'
           + "\n".join(body) + "\n</svg>\n")
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(svg)


def _read_csv_rows(path, expected_header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected_header:
            raise CliError(f"{path}:1: expected header {','.join(expected_header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header):
                raise CliError(f"{path}:{lineno}: ragged row")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise CliError(f"{path}:{lineno}: non-numeric value")
    if not rows:
        raise CliError(f"{path}: no data rows")
    return rows


def cmd_plot(args):
    os.makedirs(args.out, exist_ok=True)
    log_rows = _read_csv_rows(
        args.log, ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    )
    epochs = [r[0] for r in log_rows]
    loss_panel = _svg_panel(
        [("train", _PALETTE[0], epochs, [r[1] for r in log_rows]),
         ("validation", _PALETTE[1], epochs, [r[3] for r in log_rows])],
        "epoch", "loss", "Loss over epochs",
    )
    acc_panel = _svg_panel(
        [("train", _PALETTE[0], epochs, [r[2] for r in log_rows]),
         ("validation", _PALETTE[1], epochs, [r[4] for r in log_rows])],
        "epoch", "accuracy", "Accuracy over epochs",
    )
    curves_path = os.path.join(args.out, "curves.svg")
    _write_svg(curves_path, [loss_panel, acc_panel])

    roc_rows = _read_csv_rows(args.roc, ["class", "fpr", "tpr"])
    by_class = {}
    for c, f, t in roc_rows:
        by_class.setdefault(int(c), ([], []))
        by_class[int(c)][0].append(f)
        by_class[int(c)][1].append(t)
    lines = []
    for i, c in enumerate(sorted(by_class)):
        fpr, tpr = by_class[c]
        auc = metrics.auc_trapezoid(np.array(fpr), np.array(tpr))
        lines.append((f"class {c} (AUC={auc:.4f})",
                      _PALETTE[i % len(_PALETTE)], fpr, tpr))
    lines.append(("chance", "#999999", [0.0, 1.0], [0.0, 1.0]))
    roc_panel = _svg_panel(lines, "false positive rate", "true positive rate",
                           "Per-class ROC", width=460, height=380)
    roc_path = os.path.join(args.out, "roc.svg")
    _write_svg(roc_path, [roc_panel], width=460, height=380)
    print(f"wrote {curves_path} and {roc_path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="endofuse",
        description="Texture-feature + CNN fusion pipeline for image "
                    "classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract masked texture features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--side", type=int, default=64)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the fusion model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="emit training-curve and ROC figures")
    p.add_argument("--log", required=True)
    p.add_argument("--roc", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
