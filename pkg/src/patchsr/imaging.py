"""Grayscale image handling: resampling, blur, acquisition simulation, alignment.

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, col]`` with a
nominal intensity range of [0, 255].  Nothing here clamps or quantizes; that
only happens in :func:`write_image`.

Landmark coordinates are ``(x, y)`` in pixel units with pixel centres on
integer coordinates, i.e. ``img[y, x]`` sits at ``(x, y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DegenerateGeometryError, DataError

CUBIC_A = -0.5

FACE_LABELS = ("left_eye", "right_eye", "mouth")
IRIS_LABELS = ("iris_center", "sclera_center")


def as_image(img) -> np.ndarray:
    """Validate and convert *img* to a 2-D float64 array (copy-free when possible)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


@dataclass(frozen=True)
class AcquisitionModel:
    """Forward model ``X = D B Y + noise``.

    ``blur_sigma`` is in HR pixels, ``noise_sigma`` in intensity units.
    """

    blur_sigma: float = 0.0
    downsample_factor: int = 1
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise ValueError("downsample_factor must be an integer >= 1")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be non-negative")

    def noiseless(self) -> "AcquisitionModel":
        return AcquisitionModel(self.blur_sigma, self.downsample_factor, 0.0, self.rng_seed)


@dataclass
class LandmarkSet:
    """Labelled sub-pixel landmarks.

    Faces carry ``left_eye``, ``right_eye`` and ``mouth``.  Irises carry
    ``iris_center``, ``sclera_center`` and a positive ``radius``.
    """

    points: dict[str, tuple[float, float]]
    radius: float | None = None
    modality: str = field(default="face")

    def __post_init__(self):
        self.points = {k: (float(v[0]), float(v[1])) for k, v in self.points.items()}
        expected = FACE_LABELS if self.modality == "face" else IRIS_LABELS
        if self.modality not in ("face", "iris"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if set(self.points) != set(expected):
            raise ValueError(f"{self.modality} landmarks must be exactly {expected}, got {sorted(self.points)}")
        if self.modality == "iris" and (self.radius is None or not self.radius > 0):
            raise ValueError("iris landmarks need a positive radius")

    @classmethod
    def face(cls, left_eye, right_eye, mouth) -> "LandmarkSet":
        return cls({"left_eye": left_eye, "right_eye": right_eye, "mouth": mouth}, modality="face")

    @classmethod
    def iris(cls, iris_center, radius, sclera_center=None) -> "LandmarkSet":
        if sclera_center is None:
            sclera_center = iris_center
        return cls({"iris_center": iris_center, "sclera_center": sclera_center},
                   radius=radius, modality="iris")

    def check_bounds(self, width: int, height: int) -> None:
        for label, (x, y) in self.points.items():
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise ValueError(f"landmark {label} at ({x:g}, {y:g}) outside {width}x{height} image")

    def array(self, labels=None) -> np.ndarray:
        labels = labels or (FACE_LABELS if self.modality == "face" else IRIS_LABELS)
        return np.array([self.points[k] for k in labels], dtype=np.float64)


# --------------------------------------------------------------------------
# Resampling


def cubic_kernel(x, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel (support [-2, 2])."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2 = ax * ax
    ax3 = ax2 * ax
    out = np.where(ax <= 1, (a + 2) * ax3 - (a + 3) * ax2 + 1, 0.0)
    out = np.where((ax > 1) & (ax <= 2), a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, out)
    return out


def resize_weights(in_len: int, out_len: int, antialias: bool = True) -> np.ndarray:
    """Dense ``(out_len, in_len)`` interpolation matrix along one axis.

    Output sample ``u`` (1-based) maps to input position
    ``u / scale + 0.5 * (1 - 1/scale)``.  When shrinking with antialiasing
    the kernel is stretched by ``1/scale``.  Out-of-range taps are clamped
    to the border sample (edge replication).
    """
    scale = out_len / in_len
    if antialias and scale < 1:
        width = 4.0 / scale

        def kernel(t):
            return scale * cubic_kernel(scale * t)
    else:
        width = 4.0
        kernel = cubic_kernel

    u = np.arange(1, out_len + 1, dtype=np.float64) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.intp) - 1

    mat = np.zeros((out_len, in_len))
    rows = np.repeat(np.arange(out_len), taps)
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    return mat


def resize_bicubic(img, out_width: int, out_height: int, antialias: bool = True) -> np.ndarray:
    """Bicubic resize with imresize-style coordinate mapping."""
    img = as_image(img)
    if out_width < 1 or out_height < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = img.shape
    if (out_height, out_width) == (h, w):
        return img.copy()
    wy = resize_weights(h, out_height, antialias)
    wx = resize_weights(w, out_width, antialias)
    return wy @ img @ wx.T


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, replicated borders."""
    img = as_image(img)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def degrade(img, model: AcquisitionModel) -> np.ndarray:
    """Simulate ``X = D B Y + noise``.

    With ``blur_sigma == 0`` and a factor above one, D is the antialiased
    bicubic shrink to ``ceil(dims / factor)``; otherwise the image is blurred
    and then decimated by taking every ``factor``-th sample.
    """
    img = as_image(img)
    f = int(model.downsample_factor)
    h, w = img.shape
    if model.blur_sigma == 0 and f > 1:
        out = resize_bicubic(img, -(-w // f), -(-h // f), antialias=True)
    else:
        out = gaussian_blur(img, model.blur_sigma)[::f, ::f].copy()
    if model.noise_sigma > 0:
        rng = np.random.default_rng(model.rng_seed)
        out = out + rng.normal(0.0, model.noise_sigma, size=out.shape)
    return out


def mirror_horizontal(img) -> np.ndarray:
    return as_image(img)[:, ::-1].copy()


# --------------------------------------------------------------------------
# Geometric alignment


def sample_bicubic(img, xs, ys) -> np.ndarray:
    """Point-sample *img* at sub-pixel ``(xs, ys)`` with the cubic kernel.

    Coordinates outside the image read the nearest border pixel.
    """
    img = as_image(img)
    h, w = img.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    out = np.zeros(np.broadcast(xs, ys).shape)
    norm = np.zeros_like(out)
    for dy in range(-1, 3):
        wy = cubic_kernel(ys - (y0 + dy))
        iy = np.clip(y0 + dy, 0, h - 1).astype(np.intp)
        for dx in range(-1, 3):
            wgt = wy * cubic_kernel(xs - (x0 + dx))
            ix = np.clip(x0 + dx, 0, w - 1).astype(np.intp)
            out += wgt * img[iy, ix]
            norm += wgt
    return out / norm


def affine_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 2x3 affine ``A`` with ``dst = A @ [src; 1]`` for three point pairs."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    e1 = src[1] - src[0]
    e2 = src[2] - src[0]
    area = abs(e1[0] * e2[1] - e1[1] * e2[0])
    scale = max(np.dot(e1, e1), np.dot(e2, e2), 1e-300)
    if area <= 1e-9 * scale:
        raise DegenerateGeometryError("landmarks are collinear; affine map is undefined")
    design = np.hstack([src, np.ones((3, 1))])
    return np.linalg.solve(design, dst).T


def align_affine(img, detected: LandmarkSet, canonical: LandmarkSet,
                 out_width: int, out_height: int) -> np.ndarray:
    """Warp *img* so that *detected* landmarks land on *canonical* ones.

    Faces use the exact three-point affine map.  Irises are rescaled so the
    radius matches the canonical radius, then cropped around the sclera
    centre so that it lands on the canonical sclera centre.
    """
    img = as_image(img)
    if detected.modality != canonical.modality:
        raise ValueError("detected and canonical landmarks have different modalities")
    if out_width < 1 or out_height < 1:
        raise ValueError("output size must be at least 1x1")
    gx, gy = np.meshgrid(np.arange(out_width, dtype=np.float64),
                         np.arange(out_height, dtype=np.float64))

    if detected.modality == "face":
        fwd = affine_from_points(detected.array(), canonical.array())
        lin, t = fwd[:, :2], fwd[:, 2]
        inv = np.linalg.inv(lin)
        dx, dy = gx - t[0], gy - t[1]
        sx = inv[0, 0] * dx + inv[0, 1] * dy
        sy = inv[1, 0] * dx + inv[1, 1] * dy
        return sample_bicubic(img, sx, sy)

    scale = canonical.radius / detected.radius
    h, w = img.shape
    if scale != 1.0:
        nw = max(1, int(round(w * scale)))
        nh = max(1, int(round(h * scale)))
        work = resize_bicubic(img, nw, nh, antialias=True)
        sxs, sys_ = nw / w, nh / h
    else:
        work, sxs, sys_ = img, 1.0, 1.0
    cx, cy = detected.points["sclera_center"]
    # imresize maps source pixel centre p to (p + 0.5) * s - 0.5
    mcx = (cx + 0.5) * sxs - 0.5
    mcy = (cy + 0.5) * sys_ - 0.5
    ox, oy = canonical.points["sclera_center"]
    return sample_bicubic(work, gx + (mcx - ox), gy + (mcy - oy))


# --------------------------------------------------------------------------
# File IO


def read_image(path) -> np.ndarray:
    """Load PNG/PGM (or anything Pillow reads) as float64 luma."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I", "I;16", "F"):
                arr = np.asarray(im, dtype=np.float64)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                arr = rgb @ np.array([0.299, 0.587, 0.114])
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_image(path, img) -> None:
    """Write an 8-bit PNG or binary PGM, clamping to [0, 255]."""
    arr = np.clip(np.rint(as_image(img)), 0, 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else None
    Image.fromarray(arr).save(path, format=fmt)
