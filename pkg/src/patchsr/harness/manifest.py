"""Dataset manifests: one record per image with identity, role and landmarks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import DataError
from ..imaging import LandmarkSet, read_image

ROLES = ("dictionary", "gallery", "probe")
CSV_FIELDS = ("path", "subject", "sample", "modality", "role",
              "left_eye_x", "left_eye_y", "right_eye_x", "right_eye_y", "mouth_x", "mouth_y",
              "iris_center_x", "iris_center_y", "radius", "sclera_center_x", "sclera_center_y")


@dataclass
class Record:
    path: Path
    subject: str
    sample: int
    modality: str
    role: str
    landmarks: LandmarkSet

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.sample}"


@dataclass
class Manifest:
    records: list[Record]
    root: Path

    def __len__(self) -> int:
        return len(self.records)

    @property
    def modality(self) -> str:
        mods = {r.modality for r in self.records}
        if len(mods) != 1:
            raise DataError(f"manifest mixes modalities {sorted(mods)}")
        return mods.pop()

    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.records})

    def with_role(self, *roles: str) -> list[Record]:
        return [r for r in self.records if r.role in roles]


def _landmarks_from_row(row: dict, modality: str, where: str) -> LandmarkSet:
    def num(key):
        val = row.get(key, "")
        if val in ("", None):
            raise DataError(f"{where}: missing {key}")
        try:
            return float(val)
        except (TypeError, ValueError):
            raise DataError(f"{where}: {key}={val!r} is not a number") from None

    try:
        if modality == "face":
            return LandmarkSet.face((num("left_eye_x"), num("left_eye_y")),
                                    (num("right_eye_x"), num("right_eye_y")),
                                    (num("mouth_x"), num("mouth_y")))
        return LandmarkSet.iris((num("iris_center_x"), num("iris_center_y")), num("radius"),
                                (num("sclera_center_x"), num("sclera_center_y")))
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{where}: {exc}") from exc


def _landmark_columns(lm: LandmarkSet) -> dict:
    out = {}
    for label, (x, y) in lm.points.items():
        out[f"{label}_x"], out[f"{label}_y"] = x, y
    if lm.radius is not None:
        out["radius"] = lm.radius
    return out


def _parse_record(row: dict, root: Path, where: str, check_images: bool) -> Record:
    modality = (row.get("modality") or "").strip()
    if modality not in ("face", "iris"):
        raise DataError(f"{where}: modality must be face or iris, got {modality!r}")
    role = (row.get("role") or "").strip()
    if role not in ROLES:
        raise DataError(f"{where}: role must be one of {ROLES}, got {role!r}")
    subject = str(row.get("subject", "")).strip()
    if not subject:
        raise DataError(f"{where}: empty subject")
    try:
        sample = int(row.get("sample"))
    except (TypeError, ValueError):
        raise DataError(f"{where}: sample must be an integer") from None
    where = f"{where} (subject {subject}, sample {sample})"
    path = Path(str(row.get("path", "")))
    if not str(path):
        raise DataError(f"{where}: empty path")
    if not path.is_absolute():
        path = root / path
    lm = _landmarks_from_row(row, modality, where)
    if check_images:
        if not path.exists():
            raise DataError(f"{where}: image {path} not found")
        img = read_image(path)
        try:
            lm.check_bounds(img.shape[1], img.shape[0])
        except ValueError as exc:
            raise DataError(f"{where}: {exc}") from exc
    return Record(path, subject, sample, modality, role, lm)


def load_manifest(path, check_images: bool = True) -> Manifest:
    """Read a CSV or JSON manifest and validate every record."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    root = path.parent
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            rows = json.loads(text) if text.strip() else []
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        if isinstance(rows, dict):
            rows = rows.get("records", [])
        flat = []
        for row in rows:
            row = dict(row)
            lm = row.pop("landmarks", {}) or {}
            for label, val in lm.items():
                if label == "radius":
                    row["radius"] = val
                else:
                    row[f"{label}_x"], row[f"{label}_y"] = val
            flat.append(row)
        rows = flat
    else:
        rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        raise DataError(f"{path}: no records")
    records = [_parse_record(row, root, f"{path.name} record {i + 1}", check_images)
               for i, row in enumerate(rows)]
    seen = set()
    for r in records:
        if (r.subject, r.sample) in seen:
            raise DataError(f"duplicate record for subject {r.subject}, sample {r.sample}")
        seen.add((r.subject, r.sample))
    return Manifest(records, root)


def save_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in manifest.records:
            try:
                rel = r.path.relative_to(path.parent)
            except ValueError:
                rel = r.path
            row = {"path": str(rel), "subject": r.subject, "sample": r.sample,
                   "modality": r.modality, "role": r.role}
            row.update({k: repr(v) for k, v in _landmark_columns(r.landmarks).items()})
            w.writerow(row)
