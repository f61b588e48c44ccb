"""Procedural face and iris corpora standing in for licensed datasets.

Each subject gets a fixed template (shape parameters plus an identity
texture); each sample re-renders the template under a random pose,
illumination and sensor noise, and records exact landmarks.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from ..imaging import LandmarkSet, gaussian_blur, sample_bicubic, write_image
from .manifest import Manifest, Record

FACE_SIZE = (80, 120)              # width, height of the aligned crop
FACE_CANONICAL = {"left_eye": (20.0, 46.0), "right_eye": (60.0, 46.0), "mouth": (40.0, 92.0)}
IRIS_SIZE = 319
IRIS_RADIUS = 145.0
IRIS_CENTER = ((IRIS_SIZE - 1) / 2, (IRIS_SIZE - 1) / 2)

_FACE_MARGIN = 16
_FACE_CANVAS = (96, 136)
_IRIS_CANVAS = 400
_WARP_PX = 2.0
_SHADE = 8.0
_IRIS_NOISE = 2.0


def rng_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stream derived from *seed*."""
    keys = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))


def face_canonical() -> LandmarkSet:
    return LandmarkSet.face(*(FACE_CANONICAL[k] for k in ("left_eye", "right_eye", "mouth")))


def iris_canonical() -> LandmarkSet:
    return LandmarkSet.iris(IRIS_CENTER, IRIS_RADIUS, IRIS_CENTER)


def _bandpass(rng, shape, lo, hi):
    n = rng.normal(size=shape)
    b = ndimage.gaussian_filter(n, lo, mode="wrap") - ndimage.gaussian_filter(n, hi, mode="wrap")
    return b / b.std()


def _smoothstep(t):
    return expit(t)


def _face_template(rng) -> np.ndarray:
    """Subject template in canonical coordinates, with a margin on every side."""
    m = _FACE_MARGIN
    w, h = FACE_SIZE[0] + 2 * m, FACE_SIZE[1] + 2 * m
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x, y = xx - m, yy - m

    bg = 60 + 15 * _bandpass(rng, (h, w), 6, 20)
    cx, cy = 40 + rng.normal(0, 1), 64 + rng.normal(0, 2)
    ax, ay = rng.uniform(33, 40), rng.uniform(50, 58)
    skin = rng.uniform(140, 185)
    rho = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
    inside = _smoothstep((1 - rho) * 25)
    shade = 1 + rng.uniform(-0.15, 0.15) * (x - 40) / 40 - 0.1 * ((y - cy) / ay) ** 2
    face = skin * shade

    feats = np.zeros_like(x)
    for ex in (FACE_CANONICAL["left_eye"][0], FACE_CANONICAL["right_eye"][0]):
        ey = FACE_CANONICAL["left_eye"][1]
        rx, ry = rng.uniform(5, 7), rng.uniform(2.5, 3.5)
        feats -= 60 * _smoothstep((1 - np.hypot((x - ex) / rx, (y - ey) / ry)) * 14)
        feats -= 50 * _smoothstep((1 - np.hypot(x - ex, y - ey) / rng.uniform(2, 3)) * 14)
        by, bt = ey - rng.uniform(7, 10), rng.uniform(1.5, 3)
        bw = rng.uniform(7, 10)
        feats -= rng.uniform(40, 80) * _smoothstep((1 - np.hypot((x - ex) / bw, (y - by) / bt)) * 10)
    ny = rng.uniform(70, 78)
    feats -= 25 * np.exp(-((x - 40) / 2.5) ** 2) * _smoothstep((y - 50) / 3) * _smoothstep((ny - y) / 3)
    for sx in (-1, 1):
        feats -= 40 * np.exp(-(((x - 40 - sx * rng.uniform(3, 5)) / 1.8) ** 2 + ((y - ny) / 1.5) ** 2))
    mx, my = FACE_CANONICAL["mouth"]
    mw, mh = rng.uniform(10, 16), rng.uniform(2, 3.5)
    feats -= rng.uniform(50, 80) * _smoothstep((1 - np.hypot((x - mx) / mw, (y - my) / mh)) * 12)

    texture = 10 * _bandpass(rng, (h, w), 2.5, 8.0) + 4 * _bandpass(rng, (h, w), 1.0, 2.5)
    return bg * (1 - inside) + (face + feats + texture) * inside


def _render_face(template, rng) -> tuple[np.ndarray, LandmarkSet]:
    theta = np.deg2rad(rng.normal(0, 3))
    scale = rng.uniform(0.95, 1.08)
    off = np.array([8.0, 8.0]) + rng.uniform(-3, 3, size=2)
    c, s = np.cos(theta), np.sin(theta)
    lin = scale * np.array([[c, -s], [s, c]])
    centre = np.array([40.0, 60.0])

    def forward(p):  # canonical -> canvas
        return (np.asarray(p) - centre) @ lin.T + centre + off

    cw, ch = _FACE_CANVAS
    gx, gy = np.meshgrid(np.arange(cw, dtype=np.float64), np.arange(ch, dtype=np.float64))
    pts = np.stack([gx - centre[0] - off[0], gy - centre[1] - off[1]], axis=-1) @ np.linalg.inv(lin).T + centre
    # smooth non-rigid displacement (expression, small pose changes) that alignment cannot undo
    warp = [_WARP_PX * _bandpass(rng, (ch, cw), 6.0, 30.0) for _ in range(2)]
    img = sample_bicubic(template, pts[..., 0] + warp[0] + _FACE_MARGIN,
                         pts[..., 1] + warp[1] + _FACE_MARGIN)

    gain, bias = rng.uniform(0.88, 1.12), rng.normal(0, 6)
    ramp = rng.uniform(-12, 12) * (gx - cw / 2) / cw
    img = gain * img + bias + ramp
    img += _SHADE * _bandpass(rng, img.shape, 3.0, 12.0) + 2 * _bandpass(rng, img.shape, 1.0, 3.5)
    img += rng.normal(0, 1.5, img.shape)
    lm = LandmarkSet.face(*(tuple(forward(FACE_CANONICAL[k])) for k in ("left_eye", "right_eye", "mouth")))
    return np.clip(img, 0, 255), lm


def _iris_texture(rng) -> dict:
    # polar texture: rows = normalized radius (pupil -> limbus), cols = angle.
    # Fine fibres share one spectrum across subjects; identity is carried
    # mostly by large dark crypts placed per subject.
    rows, cols = 48, 720
    fibres = _bandpass(rng, (rows, cols), 1.0, 3.0)
    fibres = ndimage.gaussian_filter1d(fibres, 1.5, axis=0, mode="nearest")
    rr, cc = np.mgrid[0:rows, 0:cols].astype(np.float64)
    crypts = np.zeros((rows, cols))
    for _ in range(rng.integers(15, 31)):
        r0, c0 = rng.uniform(4, rows - 4), rng.uniform(0, cols)
        sr, sc = rng.uniform(5, 9), rng.uniform(14, 30)
        dc = (cc - c0 + cols / 2) % cols - cols / 2
        crypts -= rng.uniform(1.5, 2.5) * np.exp(-((rr - r0) ** 2 / (2 * sr ** 2) + dc ** 2 / (2 * sc ** 2)))
    return {"tex": 0.6 * fibres + crypts,
            "base": rng.uniform(80, 130), "contrast": rng.uniform(22, 32),
            "pupil": rng.uniform(0.3, 0.42), "collarette": rng.uniform(0.25, 0.45)}


def _render_iris(tpl, rng) -> tuple[np.ndarray, LandmarkSet]:
    n = _IRIS_CANVAS
    radius = IRIS_RADIUS * rng.uniform(0.9, 1.12)
    cx, cy = n / 2 + rng.uniform(-8, 8), n / 2 + rng.uniform(-8, 8)
    scx, scy = cx + rng.uniform(-3, 3), cy + rng.uniform(-3, 3)
    rot = rng.normal(0, 3)
    pupil = np.clip(tpl["pupil"] + rng.normal(0, 0.03), 0.22, 0.5)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    rho = np.hypot(xx - cx, yy - cy) / radius
    ang = (np.degrees(np.arctan2(yy - cy, xx - cx)) - rot) % 360
    u = np.clip((rho - pupil) / (1 - pupil), 0, 1)
    tex = tpl["tex"]
    rows = u * (tex.shape[0] - 1)
    cols = ang / 360 * tex.shape[1]
    t = ndimage.map_coordinates(tex, [rows, cols], order=1, mode="grid-wrap")
    iris = tpl["base"] + tpl["contrast"] * t
    iris += 25 * np.exp(-((u - tpl["collarette"]) / 0.05) ** 2)
    iris *= 1 - 0.35 * _smoothstep((rho - 0.93) * 60)

    sclera = 195 + 6 * _bandpass(rng, (n, n), 4, 16)
    img = np.where(rho < 1, iris, sclera)
    img = np.where(rho < pupil, 25.0, img)
    edge = _smoothstep((1 - rho) * radius)  # soft limbus
    img = img * edge + sclera * (1 - edge)

    lid = cy - radius * rng.uniform(0.75, 1.05) + 0.0025 * (xx - cx) ** 2 / radius * 145
    img = np.where(yy < lid, 150 + 10 * _bandpass(rng, (n, n), 3, 10), img)
    lower = cy + radius * rng.uniform(0.95, 1.2) - 0.002 * (xx - cx) ** 2 / radius * 145
    img = np.where(yy > lower, 150.0, img)

    hx, hy = cx + rng.uniform(-0.2, 0.2) * radius, cy + rng.uniform(-0.2, 0.2) * radius
    img += 120 * np.exp(-(((xx - hx) ** 2 + (yy - hy) ** 2) / (2 * (0.03 * radius) ** 2)))

    img = gaussian_blur(img, rng.uniform(0.4, 1.2))
    img = rng.uniform(0.9, 1.1) * img + rng.normal(0, 5)
    img += rng.normal(0, _IRIS_NOISE, img.shape)
    return np.clip(img, 0, 255), LandmarkSet.iris((cx, cy), radius, (scx, scy))


def generate_synthetic_corpus(seed: int, n_subjects: int, samples_per_subject: int,
                              modality: str, out_dir) -> Manifest:
    """Render a corpus to ``out_dir`` (PNG files) and return its manifest.

    Sample 0 of each subject is the gallery image, the rest are probes.
    """
    if n_subjects < 2:
        raise ValueError("need at least two subjects")
    if samples_per_subject < 1:
        raise ValueError("need at least one sample per subject")
    if modality not in ("face", "iris"):
        raise ValueError(f"unknown modality {modality!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for s in range(n_subjects):
        subject = f"{modality}{s:03d}"
        trng = rng_stream(seed, "corpus", modality, "template", s)
        tpl = _face_template(trng) if modality == "face" else _iris_texture(trng)
        for k in range(samples_per_subject):
            srng = rng_stream(seed, "corpus", modality, "sample", s, k)
            img, lm = _render_face(tpl, srng) if modality == "face" else _render_iris(tpl, srng)
            path = out_dir / "images" / f"{subject}_{k:02d}.png"
            write_image(path, img)
            records.append(Record(path, subject, k, modality, "gallery" if k == 0 else "probe", lm))
    return Manifest(records, out_dir)
