"""Command-line entry point: ``patchsr <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .. import biomatch, metrics, solvers
from ..errors import ConfigError, DataError
from ..imaging import read_image, write_image
from ..methods import METHODS, reconstruct
from ..patches import CoupledDictionary, load_dictionary, save_dictionary
from .config import ExperimentConfig, build_config, read_config_file, set_key
from .experiment import Frame, align_record, canonical_size, make_lr, run_experiment
from .manifest import load_manifest, save_manifest
from .synth import generate_synthetic_corpus

log = logging.getLogger("patchsr")

_CONFIG_FLAGS = [f.name for f in fields(ExperimentConfig) if f.name != "method_overrides"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (INI)")
    g = p.add_argument_group("config overrides")
    for name in _CONFIG_FLAGS:
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="VALUE")
    g.add_argument("--param", action="append", default=[], metavar="METHOD.KEY=VALUE",
                   help="method parameter override, e.g. lmcss.k=150 (repeatable)")


def _config_from_args(args) -> ExperimentConfig:
    raw = read_config_file(args.config) if args.config else {}
    for name in _CONFIG_FLAGS:
        value = getattr(args, "cfg_" + name, None)
        if value is not None:
            set_key(raw, name, value)
    for item in args.param:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--param expects METHOD.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_key(raw, key, value)
    return build_config(raw)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    man = generate_synthetic_corpus(args.seed, args.subjects, args.samples, args.modality, out)
    save_manifest(out / "manifest.csv", man)
    print(f"wrote {len(man)} images and {out / 'manifest.csv'}")
    return 0


def _training_stacks(cfg, manifest, step, exclude):
    w, h = canonical_size(cfg.modality)
    frame = Frame(w, h, cfg.factor(step))
    hrs, ids = [], []
    for r in sorted(manifest.records, key=lambda r: (r.subject, r.sample)):
        if r.subject in exclude:
            continue
        img = align_record(r)
        hrs.append(frame.pad(img))
        ids.append(r.key)
        if cfg.mirror:
            hrs.append(frame.pad(img[:, ::-1]))
            ids.append(r.key + "/mirror")
    if not hrs:
        raise DataError("no training images left")
    hr = np.stack(hrs)
    lr = np.stack([make_lr(im, frame, cfg) for im in hr])
    return frame, lr, hr, ids


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(args.manifest)
    step = args.step if args.step is not None else cfg.ladder[0]
    frame, lr, hr, ids = _training_stacks(cfg, manifest, step, set(args.exclude))
    out = Path(args.out)
    d = CoupledDictionary(lr, hr, frame.factor, "position", cfg.patch_size, cfg.stride, ids,
                          {"kind": "resize", "antialias": True, "blur_sigma": cfg.blur_sigma})
    save_dictionary(out, d)
    msg = f"dictionary: {d.M} samples, {d.n_positions} positions, factor {d.magnification} -> {out}"
    if args.eigen:
        g = CoupledDictionary(lr, hr, frame.factor, "global", sample_ids=ids)
        m = solvers.fit_eigenmodel(g.lr(0), g.hr(0), cfg.eigen_variance)
        path = out.with_suffix(".eigen.npz")
        np.savez(path, mean_lr=m.mean_lr, mean_hr=m.mean_hr, eigenfaces=m.eigenfaces,
                 eigenvectors=m.eigenvectors, eigenvalues=m.eigenvalues,
                 lr_centered=m.lr_centered, hr_centered=m.hr_centered,
                 hr_shape=np.array(hr.shape[1:]))
        msg += f"; eigenmodel rank {m.rank} -> {path}"
    print(msg)
    return 0


def _load_eigenmodel(path):
    try:
        z = np.load(path)
    except OSError as exc:
        raise DataError(f"cannot read eigenmodel {path}: {exc}") from exc
    model = solvers.EigenModel(z["mean_lr"], z["mean_hr"], z["eigenfaces"], z["eigenvectors"],
                               z["eigenvalues"], z["lr_centered"], z["hr_centered"])
    return model, tuple(int(v) for v in z["hr_shape"])


def cmd_reconstruct(args) -> int:
    cfg = _config_from_args(args)
    x = read_image(args.input)
    params = cfg.params(args.method)
    d = model = hr_shape = None
    mag = args.magnification
    if args.method == "eigen":
        if not args.model:
            raise ConfigError("eigen needs --model")
        model, hr_shape = _load_eigenmodel(args.model)
    elif args.method != "bicubic":
        if not args.dictionary:
            raise ConfigError(f"{args.method} needs --dictionary")
        d = load_dictionary(args.dictionary)
        mag = d.magnification
    if args.method == "bicubic" and mag is None:
        raise ConfigError("bicubic needs --magnification")
    try:
        res = reconstruct(x, params, d, model, mag, None, hr_shape)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    write_image(args.out, res.image)
    if args.npy:
        np.save(args.npy, res.image)
    for w in res.warnings:
        print("warning:", w, file=sys.stderr)
    print(f"{args.method}: {x.shape} -> {res.image.shape} in {res.seconds:.2f}s -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_manifest(args.manifest)
    report = run_experiment(cfg, manifest, args.out)
    print((Path(args.out) / "report.md").read_text() if args.out else report)
    return 0


def cmd_metrics(args) -> int:
    a, b = read_image(args.reference), read_image(args.test)
    if a.shape != b.shape:
        raise DataError(f"image sizes differ: {a.shape} vs {b.shape}")
    out = {"mse": metrics.mse(a, b), "psnr": metrics.psnr(a, b), "ssim": metrics.ssim(a, b)}
    if args.crop:
        ca, cb = metrics.central_crop(a, args.crop), metrics.central_crop(b, args.crop)
        out.update(psnr_crop=metrics.psnr(ca, cb), ssim_crop=metrics.ssim(ca, cb))
    print(json.dumps(out))
    return 0


def cmd_verify(args) -> int:
    manifest = load_manifest(args.manifest)
    grid = args.grid
    feats = {}
    for r in manifest.records:
        img = align_record(r) if args.align else read_image(r.path)
        feats[r.key] = biomatch.lbp_feature(img, grid, grid)
    enrol = [biomatch.Labeled(r.subject, r.sample, feats[r.key], r.key)
             for r in manifest.with_role("gallery", "probe")]
    queries = []
    for r in manifest.with_role("probe"):
        f = feats[r.key]
        if args.queries:
            path = Path(args.queries) / f"{r.subject}_{r.sample:02d}.png"
            if not path.exists():
                raise DataError(f"query image {path} not found (subject {r.subject}, sample {r.sample})")
            f = biomatch.lbp_feature(read_image(path), grid, grid)
        queries.append(biomatch.Labeled(r.subject, r.sample, f, r.key))
    try:
        scores = biomatch.run_verification(enrol, queries)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    gallery = [e for e in enrol if manifest_role(manifest, e.id) == "gallery"]
    if args.scores:
        biomatch.write_scores_csv(args.scores, scores)
    out = {"eer": biomatch.eer(scores), "auc": biomatch.auc(scores),
           "rank1": biomatch.rank_k(biomatch.identify(gallery, queries), 1),
           "n_genuine": int(scores.genuine.size), "n_impostor": int(scores.impostor.size)}
    print(json.dumps(out))
    return 0


def manifest_role(manifest, key):
    for r in manifest.records:
        if r.key == key:
            return r.role
    return None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchsr", description="Patch-based face and iris super-resolution")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus and its manifest")
    p.add_argument("--modality", choices=("face", "iris"), default="face")
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="build and save a coupled dictionary (and eigenmodel)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--step", type=int, help="ladder entry (face: target IED, iris: factor)")
    p.add_argument("--exclude", action="append", default=[], metavar="SUBJECT",
                   help="leave this subject out (repeatable)")
    p.add_argument("--eigen", action="store_true", help="also fit and save a global eigenmodel")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="super-resolve one low-resolution image")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--dictionary", help="dictionary container from 'train'")
    p.add_argument("--model", help="eigenmodel .npz from 'train --eigen'")
    p.add_argument("--magnification", type=float, help="factor for bicubic")
    p.add_argument("--out", required=True)
    p.add_argument("--npy", help="also save the float reconstruction")
    _add_config_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("bench", help="run a full experiment and write report files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--crop", type=float, help="also report a central crop keeping this fraction")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify", help="LBP features, score CSV and EER/AUC/rank-1")
    p.add_argument("--manifest", required=True)
    p.add_argument("--queries", help="directory of query images named <subject>_<sample>.png")
    p.add_argument("--no-align", dest="align", action="store_false",
                   help="use manifest images as they are")
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--scores", help="write the score CSV here")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
