"""Experiment engine: align, degrade, reconstruct, score and report.

The training pool is every image in the manifest.  Each probe is
reconstructed with a dictionary that leaves out all images of the probe's
own subject (and, for irises, their mirrored copies).  Enrolment uses the
aligned high-resolution images; queries use the reconstructions.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .. import biomatch, metrics, solvers
from ..errors import ConfigError
from ..imaging import (AcquisitionModel, align_affine, gaussian_blur, mirror_horizontal,
                       read_image, resize_bicubic, write_image)
from ..methods import reconstruct
from ..patches import CoupledDictionary
from .config import ExperimentConfig
from .manifest import Manifest, Record
from .report import Cell, Report, emit_report
from .synth import FACE_SIZE, IRIS_SIZE, face_canonical, iris_canonical, rng_stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("method", "magnification", "probe_id", "psnr", "ssim", "psnr_crop", "ssim_crop")


def canonical_size(modality: str) -> tuple[int, int]:
    """(width, height) of the aligned high-resolution frame."""
    return FACE_SIZE if modality == "face" else (IRIS_SIZE, IRIS_SIZE)


def align_record(rec: Record) -> np.ndarray:
    w, h = canonical_size(rec.modality)
    canon = face_canonical() if rec.modality == "face" else iris_canonical()
    return align_affine(read_image(rec.path), rec.landmarks, canon, w, h)


@dataclass(frozen=True)
class Frame:
    """Padding that makes the HR frame an exact multiple of the LR frame."""

    hr_w: int
    hr_h: int
    factor: Fraction

    @property
    def lr_size(self) -> tuple[int, int]:
        return (-(-self.hr_w * self.factor.denominator // self.factor.numerator),
                -(-self.hr_h * self.factor.denominator // self.factor.numerator))

    @property
    def padded(self) -> tuple[int, int]:
        lw, lh = self.lr_size
        return int(lw * self.factor), int(lh * self.factor)

    @property
    def offset(self) -> tuple[int, int]:
        pw, ph = self.padded
        return (pw - self.hr_w) // 2, (ph - self.hr_h) // 2

    def pad(self, img: np.ndarray) -> np.ndarray:
        pw, ph = self.padded
        ox, oy = self.offset
        return np.pad(img, ((oy, ph - self.hr_h - oy), (ox, pw - self.hr_w - ox)), mode="edge")

    def crop(self, img: np.ndarray) -> np.ndarray:
        ox, oy = self.offset
        return img[oy:oy + self.hr_h, ox:ox + self.hr_w]


def make_lr(hr_padded: np.ndarray, frame: Frame, cfg: ExperimentConfig, noise_rng=None) -> np.ndarray:
    """Acquisition: optional Gaussian blur, antialiased bicubic shrink, optional noise."""
    img = gaussian_blur(hr_padded, cfg.blur_sigma) if cfg.blur_sigma > 0 else hr_padded
    lw, lh = frame.lr_size
    out = resize_bicubic(img, lw, lh, antialias=True)
    if noise_rng is not None and cfg.noise_sigma > 0:
        out = out + noise_rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    return out


def acquisition_for(frame: Frame, cfg: ExperimentConfig) -> AcquisitionModel | None:
    """Forward model for re-projection; only defined for integer factors."""
    if frame.factor.denominator != 1:
        return None
    return AcquisitionModel(blur_sigma=cfg.blur_sigma, downsample_factor=int(frame.factor))


def check_protocol(cfg: ExperimentConfig, manifest: Manifest) -> None:
    if manifest.modality != cfg.modality:
        raise ConfigError(f"config modality {cfg.modality} does not match manifest ({manifest.modality})")
    probes = manifest.with_role("probe")
    gallery = manifest.with_role("gallery")
    if not probes or not gallery:
        raise ConfigError("manifest needs gallery and probe records")
    subjects = {r.subject for r in probes}
    if len(subjects) < 2:
        raise ConfigError("verification needs probes from at least two subjects")
    gal_subjects = {r.subject for r in gallery}
    for s in sorted(subjects):
        if s not in gal_subjects:
            raise ConfigError(f"subject {s} has probes but no gallery image")
        first = min(r.sample for r in gallery if r.subject == s)
        if not any(r.sample > first for r in probes if r.subject == s):
            raise ConfigError(f"subject {s} has no probe after its first gallery sample")
    need_dict = any(m != "bicubic" for m in cfg.methods)
    if need_dict and len(manifest.subjects()) < 2:
        raise ConfigError("leave-one-out training needs at least two subjects")


def _features(img, cfg):
    return biomatch.lbp_feature(img, cfg.lbp_grid, cfg.lbp_grid)


def run_experiment(cfg: ExperimentConfig, manifest: Manifest, out_dir=None) -> Report:
    """Run every (method, magnification) cell and return the report.

    When *out_dir* is given, score CSVs, per-image metrics and report files
    are written there; wall-clock timings go to ``timing.json`` so the other
    files stay byte-identical across runs.
    """
    cfg.validate()
    check_protocol(cfg, manifest)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "scores").mkdir(parents=True, exist_ok=True)

    records = sorted(manifest.records, key=lambda r: (r.subject, r.sample))
    hr = {r.key: align_record(r) for r in records}
    probes = [r for r in records if r.role == "probe"]
    eval_subjects = sorted({r.subject for r in probes})
    eval_recs = [r for r in records if r.subject in eval_subjects and r.role in ("gallery", "probe")]
    enrol = [biomatch.Labeled(r.subject, r.sample, _features(hr[r.key], cfg), r.key) for r in eval_recs]
    gallery = [e for e, r in zip(enrol, eval_recs) if r.role == "gallery"]

    report = Report(cfg.modality, cfg.digest(), cfg.as_dict())
    timing: dict = {}
    metric_rows: list[dict] = []

    # high-resolution queries: the reference operating point
    hr_queries = [biomatch.Labeled(r.subject, r.sample, _features(hr[r.key], cfg), r.key) for r in probes]
    report.baseline = _score_cell("hr", "none", 0.0, enrol, gallery, hr_queries, {}, out, [])

    w, h = canonical_size(cfg.modality)
    for step in cfg.ladder:
        label = cfg.label(step)
        frame = Frame(w, h, cfg.factor(step))
        t_mag = time.perf_counter()
        cells = _run_magnification(cfg, frame, label, records, probes, hr, out, metric_rows, timing)
        for method in cfg.methods:
            queries, per_image = cells[method]
            cell = _score_cell(method, label, float(frame.factor), enrol, gallery, queries,
                               cfg.params(method).as_dict(), out, per_image)
            report.rows.append(cell)
        timing[label] = timing.get(label, {}) | {"total_seconds": time.perf_counter() - t_mag}
        log.info("finished %s in %.1fs", label, timing[label]["total_seconds"])

    if out is not None:
        with open(out / "metrics.csv", "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            wr.writeheader()
            for row in metric_rows:
                wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        emit_report(report, "json", out / "report.json")
        emit_report(report, "csv", out / "report.csv")
        emit_report(report, "markdown", out / "report.md")
        (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return report


def _training_pool(cfg, frame, records, hr):
    """Stacks of padded HR images, their LR versions and sample ids (plus mirrors)."""
    ids, subjects, hrs = [], [], []
    for r in records:
        img = frame.pad(hr[r.key])
        ids.append(r.key)
        subjects.append(r.subject)
        hrs.append(img)
        if cfg.mirror:
            ids.append(r.key + "/mirror")
            subjects.append(r.subject)
            hrs.append(frame.pad(mirror_horizontal(hr[r.key])))
    hr_stack = np.stack(hrs)
    lr_stack = np.stack([make_lr(im, frame, cfg) for im in hr_stack])
    return hr_stack, lr_stack, ids, np.array(subjects)


def _run_magnification(cfg, frame, label, records, probes, hr, out, metric_rows, timing):
    needs_dict = [m for m in cfg.methods if m != "bicubic"]
    pool = _training_pool(cfg, frame, records, hr) if needs_dict else None
    results = {m: ([], []) for m in cfg.methods}
    seconds = {m: 0.0 for m in cfg.methods}
    acq = acquisition_for(frame, cfg)

    for subject in sorted({r.subject for r in probes}):
        fold_probes = [r for r in probes if r.subject == subject]
        dpos = model = None
        if pool is not None:
            hr_stack, lr_stack, ids, owners = pool
            keep = np.flatnonzero(owners != subject)
            if keep.size == 0:
                raise ConfigError(f"no training images left after excluding subject {subject}")
            fold_ids = [ids[i] for i in keep]
            # provenance check: the probe's subject never reaches its dictionary
            assert not any(s.split("/")[0] == subject for s in fold_ids)
            if any(m != "eigen" for m in needs_dict):
                dpos = CoupledDictionary(lr_stack[keep], hr_stack[keep], frame.factor, "position",
                                         cfg.patch_size, cfg.stride, fold_ids)
            if "eigen" in needs_dict:
                dglob = CoupledDictionary(lr_stack[keep], hr_stack[keep], frame.factor, "global",
                                          sample_ids=fold_ids)
                model = solvers.fit_eigenmodel(dglob.lr(0), dglob.hr(0), cfg.eigen_variance)
        for r in fold_probes:
            ref = hr[r.key]
            x = make_lr(frame.pad(ref), frame, cfg, rng_stream(cfg.seed, "noise", label, r.key))
            for method in cfg.methods:
                params = cfg.params(method)
                t0 = time.perf_counter()
                res = reconstruct(x, params, dpos, model, frame.factor, acq, frame.padded[::-1])
                seconds[method] += time.perf_counter() - t0
                y = frame.crop(res.image)
                row = {"method": method, "magnification": label, "probe_id": r.key,
                       "psnr": metrics.psnr(y, ref), "ssim": metrics.ssim(y, ref),
                       "psnr_crop": metrics.psnr(metrics.central_crop(y, cfg.crop_fraction),
                                                 metrics.central_crop(ref, cfg.crop_fraction)),
                       "ssim_crop": metrics.ssim(metrics.central_crop(y, cfg.crop_fraction),
                                                 metrics.central_crop(ref, cfg.crop_fraction))}
                metric_rows.append(row)
                queries, per_image = results[method]
                queries.append(biomatch.Labeled(r.subject, r.sample, _features(y, cfg), r.key))
                per_image.append(row)
                if out is not None and cfg.save_images:
                    d = out / "images" / f"{method}_{label}"
                    d.mkdir(parents=True, exist_ok=True)
                    stem = r.key.replace("/", "_")
                    np.save(d / f"{stem}.npy", y)
                    write_image(d / f"{stem}.png", y)
            if out is not None and cfg.save_images:
                d = out / "images" / "reference"
                d.mkdir(parents=True, exist_ok=True)
                np.save(d / f"{r.key.replace('/', '_')}.npy", ref)
        log.info("%s: subject %s done", label, subject)
    timing[label] = {f"{m}_seconds": s for m, s in seconds.items()}
    return results


def _mean(rows, key):
    if not rows:
        return None
    vals = [row[key] for row in rows]
    return float(np.mean(vals))


def _score_cell(method, label, factor, enrol, gallery, queries, params, out, per_image) -> Cell:
    scores = biomatch.run_verification(enrol, queries)
    ident = biomatch.identify(gallery, queries)
    cell = Cell(method, label, factor, len(queries),
                _mean(per_image, "psnr"), _mean(per_image, "ssim"),
                _mean(per_image, "psnr_crop"), _mean(per_image, "ssim_crop"),
                biomatch.eer(scores), biomatch.auc(scores), biomatch.rank_k(ident, 1),
                int(scores.genuine.size), int(scores.impostor.size), "", params)
    if out is not None:
        name = f"scores/{method}_{label}.csv"
        biomatch.write_scores_csv(out / name, scores)
        cell.scores_file = name
    return cell
