"""Experiment reports: one row per (method, magnification), emitted as CSV, JSON or markdown."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class Cell:
    method: str
    magnification: str
    factor: float
    n_probes: int = 0
    psnr: float | None = None
    ssim: float | None = None
    psnr_crop: float | None = None
    ssim_crop: float | None = None
    eer: float | None = None
    auc: float | None = None
    rank1: float | None = None
    n_genuine: int = 0
    n_impostor: int = 0
    scores_file: str = ""
    params: dict = field(default_factory=dict)


COLUMNS = tuple(f.name for f in fields(Cell))


@dataclass
class Report:
    modality: str
    config_hash: str
    config: dict = field(default_factory=dict)
    rows: list[Cell] = field(default_factory=list)
    baseline: Cell | None = None

    def cell(self, method: str, magnification: str) -> Cell:
        for r in self.rows:
            if r.method == method and r.magnification == magnification:
                return r
        raise KeyError((method, magnification))

    def to_dict(self) -> dict:
        return {"modality": self.modality, "config_hash": self.config_hash, "config": self.config,
                "rows": [asdict(r) for r in self.rows],
                "baseline": asdict(self.baseline) if self.baseline else None}

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        base = d.get("baseline")
        return cls(d["modality"], d["config_hash"], d.get("config", {}),
                   [Cell(**r) for r in d.get("rows", [])], Cell(**base) if base else None)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return json.dumps(v, sort_keys=True)
    return str(v)


def _json_safe(obj):
    # JSON has no infinity; store it as a string and restore on load
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _md_table(title, methods, mags, value):
    lines = [f"### {title}", "", "| method | " + " | ".join(mags) + " |",
             "|---" * (len(mags) + 1) + "|"]
    for m in methods:
        lines.append(f"| {m} | " + " | ".join(value(m, g) for g in mags) + " |")
    return lines


def render_markdown(report: Report) -> str:
    methods = list(dict.fromkeys(r.method for r in report.rows))
    mags = list(dict.fromkeys(r.magnification for r in report.rows))
    index = {(r.method, r.magnification): r for r in report.rows}

    def show(attr, digits=4):
        def value(m, g):
            r = index.get((m, g))
            v = getattr(r, attr) if r else None
            return "" if v is None else f"{v:.{digits}f}"
        return value

    def pair(a, b):
        def value(m, g):
            return f"{show(a)(m, g)} / {show(b)(m, g)}".strip(" /")
        return value

    lines = [f"# {report.modality} super-resolution report", "",
             f"config hash: `{report.config_hash}`", ""]
    lines += _md_table("PSNR / SSIM", methods, mags, pair("psnr", "ssim")) + [""]
    lines += _md_table("PSNR / SSIM (central crop)", methods, mags, pair("psnr_crop", "ssim_crop")) + [""]
    lines += _md_table("EER", methods, mags, show("eer")) + [""]
    lines += _md_table("AUC", methods, mags, show("auc")) + [""]
    lines += _md_table("Rank-1", methods, mags, show("rank1")) + [""]
    if report.baseline is not None:
        b = report.baseline
        lines += ["High-resolution queries: " + ", ".join(
            f"{k} {getattr(b, k):.4f}" for k in ("eer", "auc", "rank1") if getattr(b, k) is not None), ""]
    return "\n".join(lines)


def emit_report(report: Report, fmt: str, path) -> Path:
    """Write *report* to *path* in ``csv``, ``json`` or ``markdown``."""
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in report.rows + ([report.baseline] if report.baseline else []):
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    elif fmt == "json":
        path.write_text(json.dumps(_json_safe(report.to_dict()), indent=2, sort_keys=True) + "\n")
    elif fmt in ("markdown", "md"):
        path.write_text(render_markdown(report) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def _restore(obj):
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    return obj


def load_report(path) -> Report:
    return Report.from_dict(_restore(json.loads(Path(path).read_text())))
