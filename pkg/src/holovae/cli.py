"""Command-line interface.

Exit codes:

====  =========================================
0     success
2     usage error (bad or missing flags)
3     parse error (malformed input file)
4     validation error (bad config, shapes, mode)
5     numeric failure (degenerate frame, NaN)
====  =========================================
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .exceptions import HoloError, NumericError, ParseError, ValidationError
from .fourier import (
    ZftConfig,
    inverse_sft,
    inverse_zft,
    read_point_clouds,
    read_signal_file,
    sft_grid,
    write_signal_file,
    zft_point_cloud,
)
from .metrics import evaluate, write_embeddings_csv
from .model import HolographicVAE, ModelConfig, load_checkpoint, save_checkpoint, train
from .so3 import cartesian_to_spherical
from .steerable import read_tensor_file, stack, write_tensor_file

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.started = time.time()
        self.record = {
            "command": command,
            "argv": [a for a in sys.argv[1:]],
            "toolkit_version": __version__,
            "seed": getattr(args, "seed", None),
            "config": None,
            "inputs": [],
            "outputs": [],
        }

    def config(self, path, config_hash=None):
        self.record["config"] = {"path": str(path), "sha256": _sha256(path), "config_hash": config_hash}

    def input(self, path):
        self.record["inputs"].append({"path": str(path), "sha256": _sha256(path)})

    def output(self, path):
        self.record["outputs"].append(str(path))

    def write(self, path):
        self.record["started_utc"] = datetime.fromtimestamp(self.started, timezone.utc).isoformat()
        self.record["wall_clock_seconds"] = time.time() - self.started
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return d


def _zft_config(d: dict) -> tuple[ZftConfig, tuple]:
    unknown = set(d) - {"L", "N", "r_max", "labels"}
    if unknown:
        raise ValidationError(f"unknown transform config fields: {sorted(unknown)}")
    try:
        cfg = ZftConfig(int(d["L"]), int(d["N"]), float(d.get("r_max", 1.0)))
        labels = tuple(str(x) for x in d["labels"])
    except KeyError as exc:
        raise ValidationError(f"transform config is missing {exc}") from None
    if not labels:
        raise ValidationError("labels must be a nonempty list")
    return cfg, labels


def _read_labels(path) -> dict:
    if not os.path.exists(path):
        raise ValidationError(f"label file {path} does not exist")
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["id", "label"]:
            raise ParseError(f"{path}:1: expected header 'id,label'")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields")
            out[row[0]] = row[1]
    return out


def _write_labels(path, ids, labels):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"])
        for i, lab in zip(ids, labels):
            w.writerow([i, lab])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_transform(args) -> int:
    man = Manifest("transform", args)
    d = _load_json(args.config)
    man.config(args.config)
    man.input(args.inp)
    if args.mode == "zft":
        cfg, labels = _zft_config(d)
        records = read_point_clouds(args.inp, labels)
        if not records:
            raise ParseError(f"{args.inp}: no point-cloud records")
        tensors, ids, classes = [], [], []
        for cid, cloud, cls in records:
            try:
                tensors.append(zft_point_cloud(cloud, cfg))
            except ValidationError as exc:
                raise type(exc)(f"record {cid!r}: {exc}") from None
            ids.append(cid)
            classes.append(cls)
    else:
        unknown = set(d) - {"L"}
        if unknown or "L" not in d:
            raise ValidationError("sft config must contain exactly the field 'L'")
        signals = read_signal_file(args.inp)
        if not signals:
            raise ParseError(f"{args.inp}: no spherical signals")
        tensors = [sft_grid(s, int(d["L"])) for s in signals]
        ids = [str(i) for i in range(len(signals))]
        classes = [None] * len(signals)
    write_tensor_file(args.out, stack(tensors), ids)
    man.output(args.out)
    if any(c is not None for c in classes):
        lab_path = args.out + ".labels.csv"
        _write_labels(lab_path, ids, ["" if c is None else c for c in classes])
        man.output(lab_path)
    man.write(args.out + ".manifest.json")
    print(f"wrote {len(tensors)} tensors with signature {tensors[0].signature} to {args.out}")
    return EXIT_OK


def _load_dataset(path, cfg: ModelConfig, man: Manifest):
    x, ids = read_tensor_file(path)
    man.input(path)
    if x.signature != cfg.signature:
        raise ValidationError(f"{path}: dataset signature {x.signature} does not match config signature {cfg.signature}")
    return x, ids


def _write_history(path, history):
    keys = ["epoch", "lr", "beta", "train_loss", "train_rec", "train_kl", "val_loss", "val_rec", "val_kl", "seconds"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in history:
            w.writerow([repr(row[k]) if k in row else "" for k in keys])


def cmd_train(args) -> int:
    man = Manifest("train", args)
    cfg = ModelConfig.load(args.config)
    man.config(args.config, cfg.config_hash())
    man.record["seed"] = cfg.seed
    train_x, _ = _load_dataset(args.train, cfg, man)
    val_x = _load_dataset(args.val, cfg, man)[0] if args.val else None
    os.makedirs(args.out, exist_ok=True)
    state = None
    if args.resume:
        man.input(args.resume)
        model, state, header = load_checkpoint(args.resume)
        if header["config_hash"] != cfg.config_hash():
            raise ValidationError(f"checkpoint {args.resume} was trained with a different config (hash mismatch)")
        if state is None:
            raise ValidationError(f"checkpoint {args.resume} holds no training state to resume from")
        model.config = cfg
    else:
        model = HolographicVAE(cfg)
    best_path = os.path.join(args.out, "best.ckpt")
    last_path = os.path.join(args.out, "last.ckpt")

    def on_epoch(st, last):
        row = st.history[-1]
        save_checkpoint(last_path, last, st, epoch=row["epoch"], val_loss=row.get("val_loss"))
        if args.verbose:
            extra = f" val {row['val_loss']:.6g}" if "val_loss" in row else ""
            print(f"epoch {row['epoch']}: train {row['train_loss']:.6g}{extra} ({row['seconds']:.1f}s)", flush=True)

    best, last, state = train(model, train_x, val_x, state=state, callback=on_epoch)
    if not state.history:
        save_checkpoint(last_path, last, state)
    save_checkpoint(best_path, best, epoch=state.best_epoch if state.best_epoch >= 0 else None,
                    val_loss=state.best_val if np.isfinite(state.best_val) else None)
    hist_path = os.path.join(args.out, "history.csv")
    _write_history(hist_path, state.history)
    for p in (best_path, last_path, hist_path):
        man.output(p)
    man.record["best_epoch"] = state.best_epoch
    man.write(os.path.join(args.out, "manifest.json"))
    print(f"trained {len(state.history)} epochs; best epoch {state.best_epoch}; outputs in {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    man = Manifest("evaluate", args)
    man.input(args.ckpt)
    model, _, _ = load_checkpoint(args.ckpt)
    x, ids = _load_dataset(args.data, model.config, man)
    ids = ids if ids is not None else [str(i) for i in range(len(x))]
    labels = None
    if args.labels is not None:
        table = _read_labels(args.labels)
        man.input(args.labels)
        missing = [i for i in ids if i not in table]
        if missing:
            raise ValidationError(f"no label for samples {missing[:5]}{'...' if len(missing) > 5 else ''}")
        labels = np.array([table[i] for i in ids])
    report, code = evaluate(model, x, labels, ids, audit=args.audit, n_folds=args.folds, seed=args.seed, linear=not args.no_linear)
    os.makedirs(args.out, exist_ok=True)
    rep_path = os.path.join(args.out, "report.json")
    with open(rep_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    emb_path = os.path.join(args.out, "embeddings.csv")
    write_embeddings_csv(emb_path, code, ids, labels)
    rec_path = os.path.join(args.out, "reconstructions.hvst")
    write_tensor_file(rec_path, model.decode(code), ids)
    for p in (rep_path, emb_path, rec_path):
        man.output(p)
    man.write(os.path.join(args.out, "manifest.json"))
    print(f"cosine loss {report.cosine_mean:.4g} ± {report.cosine_sd:.3g}; report in {rep_path}")
    if report.equivariance is not None and not report.equivariance["passed"]:
        raise NumericError(f"equivariance audit failed: max residual {max(report.equivariance[k] for k in ('invariant_drift', 'frame_residual', 'decode_residual')):.3g}")
    return EXIT_OK


def _rasterize(args, tensors, out_dir, stem, man):
    """Optional density grids from inverse transforms."""
    if args.sft_bw:
        sigs = [inverse_sft(t, args.sft_bw) for t in tensors]
        if sigs:
            path = os.path.join(out_dir, f"{stem}.hvsg")
            write_signal_file(path, sigs)
            man.output(path)
    if args.zft_config:
        cfg, labels = _zft_config(_load_json(args.zft_config))
        man.config(args.zft_config)
        g = np.linspace(-cfg.r_max, cfg.r_max, args.grid)
        xyz = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        r, theta, phi = cartesian_to_spherical(xyz)
        inside = r <= cfg.r_max
        dens = np.zeros((len(tensors), len(xyz), len(labels)))
        if len(tensors):
            dens[:, inside] = inverse_zft(tensors, r[inside], theta[inside], phi[inside], cfg)
        path = os.path.join(out_dir, f"{stem}_density.npy")
        np.save(path, dens.reshape(len(tensors), args.grid, args.grid, args.grid, len(labels)))
        man.output(path)


def cmd_sample(args) -> int:
    man = Manifest("sample", args)
    man.input(args.ckpt)
    model, _, _ = load_checkpoint(args.ckpt)
    samples = model.sample_prior(args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "samples.hvst")
    write_tensor_file(path, samples, [f"sample{i}" for i in range(args.n)])
    man.output(path)
    _rasterize(args, samples, args.out, "samples", man)
    man.write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {args.n} samples to {path}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    man = Manifest("interpolate", args)
    man.input(args.ckpt)
    model, _, _ = load_checkpoint(args.ckpt)
    x, ids = _load_dataset(args.data, model.config, man)
    ids = ids if ids is not None else [str(i) for i in range(len(x))]
    try:
        a, b = x[ids.index(args.a)], x[ids.index(args.b)]
    except ValueError:
        raise ValidationError(f"ids {args.a!r} and {args.b!r} must both be present in {args.data}") from None
    path_t, z = model.interpolate(a, b, args.steps)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "interpolation.hvst")
    write_tensor_file(path, path_t, [f"step{i}" for i in range(len(z))])
    lat = os.path.join(args.out, "latents.csv")
    with open(lat, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t"] + [f"z{i}" for i in range(z.shape[1])])
        for i, row in enumerate(z):
            w.writerow([i, repr(i / (args.steps + 1))] + [repr(float(v)) for v in row])
    man.output(path)
    man.output(lat)
    _rasterize(args, path_t, args.out, "interpolation", man)
    man.write(os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(z)} interpolation steps to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holovae", description="Rotation-equivariant autoencoders for steerable tensors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="print per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transform", help="point clouds or spherical grids -> tensor dataset")
    t.add_argument("--mode", choices=("zft", "sft"), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transform)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--train", required=True)
    tr.add_argument("--val")
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="reconstruction, latent-space and audit metrics")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--labels")
    ev.add_argument("--audit", action="store_true")
    ev.add_argument("--folds", type=_pos_int, default=5)
    ev.add_argument("--no-linear", action="store_true", help="skip the linear classifier")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    def raster_flags(sp):
        sp.add_argument("--sft-bw", type=_pos_int, help="also write spherical grids at this bandwidth")
        sp.add_argument("--zft-config", help="also write density cubes using this transform config")
        sp.add_argument("--grid", type=_pos_int, default=24, help="density cube size")

    sa = sub.add_parser("sample", help="decode draws from the prior")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("-n", type=_nonneg_int, required=True)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--out", required=True)
    raster_flags(sa)
    sa.set_defaults(func=cmd_sample)

    ip = sub.add_parser("interpolate", help="decode a straight latent path between two samples")
    ip.add_argument("--ckpt", required=True)
    ip.add_argument("--data", required=True, help="tensor dataset holding both endpoints")
    ip.add_argument("--a", required=True)
    ip.add_argument("--b", required=True)
    ip.add_argument("--steps", type=_nonneg_int, required=True, help="interior points between the endpoints")
    ip.add_argument("--out", required=True)
    raster_flags(ip)
    ip.set_defaults(func=cmd_interpolate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except HoloError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
