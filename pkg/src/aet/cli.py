"""Command-line entry point: ``aet <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
standard error; results go to files or standard output.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import config as config_mod
from .data import read_cifar_batch
from .errors import AetError, ConfigError, MalformedCsv
from .traineval import (
    EncoderCheckpoint,
    import_metrics,
    knn_eval,
    knn_sweep,
    load_datasets,
    state_digest,
    train_aet,
    train_probe,
)
from .warp import warp_image
from .xform import sample

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p, seed=True):
    p.add_argument("--config", metavar="PATH", help="run-config file (flat dotted key = value)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   help="override one config key; repeatable; beats the file")
    if seed:
        p.add_argument("--seed", type=int, help="seed for every stochastic step (overrides seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aet", description="Transformation-prediction pre-training and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="AET pre-training; writes checkpoints and metrics.csv")
    _add_config_flags(p)
    p.add_argument("--epochs", type=int, help="override epochs")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir and $AET_OUT_DIR)")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")

    p = sub.add_parser("probe", help="train a probe on frozen block-2 features; prints probe_error=")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("fc_1", "fc_2", "fc_3", "conv"), help="probe architecture")

    p = sub.add_parser("knn", help="KNN error on pooled block-2 features; prints knn_error=")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--k", type=int, default=10, help="neighbors (default 10)")
    _add_config_flags(p, seed=False)

    p = sub.add_parser("sweep", help="KNN error over several K; prints k,knn_error lines")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--ks", default="1,3,5,10,20", help="comma-separated K values")
    p.add_argument("--out", metavar="FILE", help="also write the sweep as CSV")
    _add_config_flags(p, seed=False)

    p = sub.add_parser("warp-demo", help="original/transformed PPM pairs plus sampled target vectors")
    _add_config_flags(p)
    p.add_argument("--n", type=int, default=8, help="number of pairs")
    p.add_argument("--out", metavar="DIR", help="output directory")

    p = sub.add_parser("export-plots", help="plain-text x/y series from metrics (and sweep) CSVs")
    p.add_argument("--metrics", required=True, metavar="CSV")
    p.add_argument("--sweep", metavar="CSV", help="CSV written by 'sweep --out'")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint's manifest summary")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    return parser


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return values


def _run_config(args, base_flat=None):
    """Defaults (or a checkpoint's config), then --config, then --set and flags."""
    values = dict(base_flat or {})
    if args.config:
        with open(args.config) as fh:
            values.update(config_mod.parse_text(fh.read(), args.config))
    values.update(_overrides(args))
    return config_mod.from_flat(values)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args):
    extra = {}
    if args.epochs is not None:
        extra["epochs"] = str(args.epochs)
    if args.out:
        extra["out_dir"] = args.out
    resume = None
    base = None
    if args.resume:
        resume = EncoderCheckpoint.load(args.resume)
        base = config_mod.to_flat(resume.config)
    values = dict(base or {})
    if args.config:
        with open(args.config) as fh:
            values.update(config_mod.parse_text(fh.read(), args.config))
    values.update(_overrides(args))
    values.update(extra)
    cfg = config_mod.from_flat(values)
    cfg.check_paths()
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "run.cfg"), "w") as fh:
        fh.write(config_mod.dump_config(cfg))

    def progress(row):
        extras = "".join(f" {k}={getattr(row, k):.4f}" for k in ("probe_error", "knn_error")
                         if getattr(row, k) is not None)
        _log(f"epoch {row.epoch}/{cfg.epochs} aet_loss={row.aet_loss:.6f} lr={row.lr:g}{extras}")

    ckpt, log = train_aet(cfg, resume=resume, out_dir=out, progress=progress)
    _log(f"wrote {os.path.join(out, 'final.ckpt')} and {os.path.join(out, 'metrics.csv')}")
    return EXIT_OK


def _ckpt_and_data(args):
    ckpt = EncoderCheckpoint.load(args.ckpt)
    cfg = _run_config(args, config_mod.to_flat(ckpt.config))
    return ckpt, cfg, load_datasets(cfg)


def cmd_probe(args):
    ckpt, cfg, (train, test) = _ckpt_and_data(args)
    pcfg = cfg.probe
    if args.kind:
        pcfg = config_mod.from_flat({"probe.kind": args.kind}, cfg).probe
    _, err = train_probe(ckpt, pcfg.spec(train.class_count), train, test, pcfg, seed=cfg.seed)
    print(f"probe_error={err!r}")
    return EXIT_OK


def cmd_knn(args):
    ckpt, _, (train, test) = _ckpt_and_data(args)
    print(f"knn_error={knn_eval(ckpt, train, test, args.k)!r}")
    return EXIT_OK


def cmd_sweep(args):
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--ks expects comma-separated integers, got {args.ks!r}")
    if not ks:
        raise UsageError("--ks is empty")
    ckpt, _, (train, test) = _ckpt_and_data(args)
    result = knn_sweep(ckpt, train, test, ks)
    lines = ["k,knn_error"] + [f"{k},{format(e, '.17g')}" for k, e in result]
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _to_bytes(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6 from a ``(3, H, W)`` or ``(H, W)`` image in [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(_to_bytes(img).transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 image")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4], dtype=np.uint8)[: w * h * 3]
    return pix.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def cmd_warp_demo(args):
    if args.n <= 0:
        raise UsageError("--n must be positive")
    values = {}
    if args.out:
        values["out_dir"] = args.out
    cfg = config_mod.from_flat(values, _run_config(args))
    rng = np.random.default_rng(cfg.seed)
    if cfg.data.name == "cifar10":
        cfg.check_paths()
        images, _ = read_cifar_batch(os.path.join(cfg.data.path, "test_batch.bin"))
    else:
        images = load_datasets(cfg)[1].images
    picks = rng.choice(len(images), size=min(args.n, len(images)), replace=False)
    out = cfg.resolved_out_dir()
    os.makedirs(out, exist_ok=True)
    top, bottom, lines = [], [], []
    for i, j in enumerate(picks):
        s = sample(rng, cfg.xform)
        warped = warp_image(images[j], s.homography)
        write_ppm(os.path.join(out, f"pair{i:02d}_original.ppm"), images[j])
        write_ppm(os.path.join(out, f"pair{i:02d}_transformed.ppm"), warped)
        top.append(images[j])
        bottom.append(warped)
        lines.append(" ".join([str(i), str(int(j))] + [format(v, ".17g") for v in s.target]))
    # originals on the top row, their transformed counterparts below
    write_ppm(os.path.join(out, "pairs_grid.ppm"),
              np.concatenate([np.concatenate(top, axis=2), np.concatenate(bottom, axis=2)], axis=1))
    with open(os.path.join(out, "targets.txt"), "w") as fh:
        fh.write("# pair image_index m00 m01 m02 m10 m11 m12 m20 m21\n")
        fh.write("\n".join(lines) + "\n")
    _log(f"wrote {len(picks)} pairs to {out}")
    return EXIT_OK


def _series(path, pairs):
    with open(path, "w") as fh:
        fh.write("".join(f"{x} {y}\n" for x, y in pairs))


def cmd_export_plots(args):
    import_metrics(args.metrics)  # validates and reports line numbers
    with open(args.metrics, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    os.makedirs(args.out, exist_ok=True)
    written = []
    for col, name in ((1, "epoch_vs_aet_loss"), (3, "epoch_vs_probe_error"), (4, "epoch_vs_knn_error")):
        pairs = [(r[0], r[col]) for r in rows if r[col] != ""]
        if pairs:
            _series(os.path.join(args.out, f"{name}.txt"), pairs)
            written.append(name)
    if args.sweep:
        with open(args.sweep, newline="") as fh:
            srows = list(csv.reader(fh))
        if not srows or srows[0] != ["k", "knn_error"]:
            raise MalformedCsv(args.sweep, 1, "header must be k,knn_error")
        if len(srows) == 1:
            raise MalformedCsv(args.sweep, 1, "no data rows")
        for lineno, r in enumerate(srows[1:], 2):
            if len(r) != 2:
                raise MalformedCsv(args.sweep, lineno, "expected 2 cells")
            try:
                int(r[0]), float(r[1])
            except ValueError as e:
                raise MalformedCsv(args.sweep, lineno, str(e)) from e
        _series(os.path.join(args.out, "k_vs_knn_error.txt"), [tuple(r) for r in srows[1:]])
        written.append("k_vs_knn_error")
    _log(f"wrote {', '.join(written)} to {args.out}")
    return EXIT_OK


def cmd_inspect(args):
    ckpt = EncoderCheckpoint.load(args.ckpt)
    enc = ckpt.encoder()
    n_params = sum(p.data.size for p in enc.parameters())
    print(f"epoch={ckpt.epoch}")
    print(f"encoder_parameters={n_params}")
    print(f"encoder_sha256={state_digest(enc)}")
    print(f"arrays={len(ckpt.arrays)}")
    print(f"log_rows={len(ckpt.log_rows)}")
    for key, value in config_mod.to_flat(ckpt.config).items():
        print(f"config.{key}={value}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "probe": cmd_probe, "knn": cmd_knn, "sweep": cmd_sweep,
    "warp-demo": cmd_warp_demo, "export-plots": cmd_export_plots, "inspect-ckpt": cmd_inspect,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        _log(str(e))
        return EXIT_USAGE
    except (AetError, OSError, ValueError, KeyError) as e:
        _log(f"error: {e}")
        return EXIT_RUNTIME


def main():
    sys.exit(run())


__all__ = ["build_parser", "main", "read_ppm", "run", "write_ppm"]
