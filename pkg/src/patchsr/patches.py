"""Overlapping patch tiling and coupled LR/HR dictionaries.

Patch vectors are column-major within the patch (``window.ravel(order="F")``)
so that containers written here read the same way anywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError
from .imaging import AcquisitionModel, as_image, degrade, resize_bicubic

MAGIC = b"PLDC"
VERSION = 1
_HEADER = struct.Struct("<4sIBIIIIIIIIIIddIq")


def _axis_positions(length: int, patch: int, stride: int) -> list[int]:
    pos = list(range(0, length - patch + 1, stride))
    if pos[-1] != length - patch:
        pos.append(length - patch)
    return pos


@dataclass(frozen=True)
class PatchGrid:
    image_width: int
    image_height: int
    patch_size: int
    stride: int
    xs: tuple[int, ...] = field(init=False)
    ys: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.patch_size < 1 or self.patch_size > min(self.image_width, self.image_height):
            raise ValueError(f"patch size {self.patch_size} does not fit a "
                             f"{self.image_width}x{self.image_height} image")
        if self.stride > self.patch_size:
            raise ValueError("stride larger than patch size leaves pixels uncovered")
        object.__setattr__(self, "xs", tuple(_axis_positions(self.image_width, self.patch_size, self.stride)))
        object.__setattr__(self, "ys", tuple(_axis_positions(self.image_height, self.patch_size, self.stride)))

    @property
    def positions(self) -> list[tuple[int, int]]:
        """Top-left corners ``(x, y)`` in raster order."""
        return [(x, y) for y in self.ys for x in self.xs]

    def __len__(self) -> int:
        return len(self.xs) * len(self.ys)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image_height, self.image_width

    def index_map(self) -> np.ndarray:
        """``(n_positions, patch_size**2)`` flat (C-order) pixel indices per patch vector."""
        p = self.patch_size
        rr, cc = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        # column-major within the patch
        local = (rr * self.image_width + cc).ravel(order="F")
        corners = np.array([y * self.image_width + x for x, y in self.positions], dtype=np.intp)
        return corners[:, None] + local[None, :]


def make_grid(image_width: int, image_height: int, patch_size: int, stride: int) -> PatchGrid:
    return PatchGrid(int(image_width), int(image_height), int(patch_size), int(stride))


def extract_patches(img, grid: PatchGrid) -> np.ndarray:
    """Return the ``(n_positions, patch_size**2)`` array of patch vectors."""
    img = as_image(img)
    if img.shape != grid.shape:
        raise ValueError(f"image shape {img.shape} does not match grid {grid.shape}")
    return img.ravel()[grid.index_map()]


def stitch_patches(patches, grid: PatchGrid) -> np.ndarray:
    """Average overlapping patch vectors back into an image.

    Accumulates deviations from one reference patch so that consistent
    patches reproduce their pixels bit-exactly.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape != (len(grid), grid.patch_size ** 2):
        raise ValueError(f"expected {len(grid)} patches of length {grid.patch_size ** 2}, "
                         f"got array of shape {patches.shape}")
    idx = grid.index_map()
    npix = grid.image_width * grid.image_height
    ref = np.empty(npix)
    ref[idx.ravel()] = patches.ravel()
    dev = np.bincount(idx.ravel(), weights=(patches - ref[idx]).ravel(), minlength=npix)
    count = np.bincount(idx.ravel(), minlength=npix)
    return (ref + dev / count).reshape(grid.shape)


def as_fraction(mag) -> Fraction:
    return mag if isinstance(mag, Fraction) else Fraction(mag).limit_denominator(1000)


def _scaled(value: int, mag: Fraction, what: str) -> int:
    v = value * mag
    if v.denominator != 1:
        raise ValueError(f"{what} {value} times magnification {mag} is not an integer")
    return int(v)


@dataclass
class CoupledDictionary:
    """Collocated LR/HR training samples, viewed per patch position.

    The image stacks are stored rather than the per-position matrices; the
    matrices ``L_j``/``H_j`` (columns = samples) are sliced out on demand
    with :meth:`lr` / :meth:`hr` or in batches with :meth:`blocks`.
    In ``global`` mode there is a single position holding whole images.
    """

    lr_images: np.ndarray  # (M, h, w)
    hr_images: np.ndarray  # (M, H, W)
    magnification: Fraction
    mode: str = "position"
    lr_patch_size: int = 0
    lr_stride: int = 0
    sample_ids: list[str] = field(default_factory=list)
    acquisition: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lr_images = np.ascontiguousarray(self.lr_images, dtype=np.float64)
        self.hr_images = np.ascontiguousarray(self.hr_images, dtype=np.float64)
        self.magnification = as_fraction(self.magnification)
        if self.mode not in ("position", "global"):
            raise ValueError(f"unknown dictionary mode {self.mode!r}")
        if self.lr_images.shape[0] != self.hr_images.shape[0]:
            raise ValueError("LR and HR stacks have different sample counts")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(self.M)]
        if len(self.sample_ids) != self.M:
            raise ValueError("sample_ids length does not match sample count")
        if self.mode == "position":
            h, w = self.lr_images.shape[1:]
            self.lr_grid = make_grid(w, h, self.lr_patch_size, self.lr_stride)
            self.hr_grid = make_grid(_scaled(w, self.magnification, "LR width"),
                                     _scaled(h, self.magnification, "LR height"),
                                     _scaled(self.lr_patch_size, self.magnification, "LR patch size"),
                                     _scaled(self.lr_stride, self.magnification, "LR stride"))
            if self.hr_grid.shape != self.hr_images.shape[1:]:
                raise ValueError(f"HR images {self.hr_images.shape[1:]} are not LR images "
                                 f"{(h, w)} scaled by {self.magnification}")
            if len(self.hr_grid) != len(self.lr_grid):
                raise ValueError("LR and HR grids have different position counts")
            self._lr_idx = self.lr_grid.index_map()
            self._hr_idx = self.hr_grid.index_map()
        else:
            self.lr_grid = self.hr_grid = None

    @property
    def M(self) -> int:
        return self.lr_images.shape[0]

    @property
    def n_positions(self) -> int:
        return 1 if self.mode == "global" else len(self.lr_grid)

    @property
    def lr_shape(self) -> tuple[int, int]:
        return self.lr_images.shape[1:]

    @property
    def hr_shape(self) -> tuple[int, int]:
        return self.hr_images.shape[1:]

    def _global(self, stack) -> np.ndarray:
        # column-major vectorization of each whole image -> (d, M)
        return stack.transpose(2, 1, 0).reshape(-1, stack.shape[0])

    def lr(self, j: int) -> np.ndarray:
        """``L_j`` with shape ``(d_l, M)``."""
        if self.mode == "global":
            return self._global(self.lr_images)
        return self.lr_images.reshape(self.M, -1)[:, self._lr_idx[j]].T

    def hr(self, j: int) -> np.ndarray:
        """``H_j`` with shape ``(d_h, M)``."""
        if self.mode == "global":
            return self._global(self.hr_images)
        return self.hr_images.reshape(self.M, -1)[:, self._hr_idx[j]].T

    def blocks(self, positions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Batched ``(L_j, H_j)`` for *positions*: shapes ``(n, d_l, M)``, ``(n, d_h, M)``."""
        if self.mode == "global":
            return self.lr(0)[None], self.hr(0)[None]
        positions = np.asarray(positions, dtype=np.intp)
        lr = self.lr_images.reshape(self.M, -1)[:, self._lr_idx[positions]]
        hr = self.hr_images.reshape(self.M, -1)[:, self._hr_idx[positions]]
        return lr.transpose(1, 2, 0), hr.transpose(1, 2, 0)

    def subset(self, columns) -> "CoupledDictionary":
        """Dictionary restricted to the given sample columns (index array or boolean mask)."""
        columns = np.asarray(columns)
        if columns.dtype == bool:
            columns = np.flatnonzero(columns)
        return CoupledDictionary(self.lr_images[columns], self.hr_images[columns],
                                 self.magnification, self.mode, self.lr_patch_size,
                                 self.lr_stride, [self.sample_ids[i] for i in columns],
                                 dict(self.acquisition))


def build_dictionaries(hr_images, magnification, lr_patch_size: int = 6, lr_stride: int = 3,
                       mode: str = "position", acquisition: AcquisitionModel | None = None,
                       degrader: Callable[[np.ndarray], np.ndarray] | None = None,
                       sample_ids: Sequence[str] | None = None) -> CoupledDictionary:
    """Degrade each HR training image and pair it with its LR version.

    The LR image comes from *degrader* when given, else from
    :func:`imaging.degrade` with *acquisition* (default: antialiased bicubic
    shrink by the integer magnification), else from an antialiased resize to
    ``HR / magnification`` for fractional factors.
    """
    mag = as_fraction(magnification)
    if mag < 2:
        raise ValueError("magnification must be at least 2")
    hr = [as_image(im) for im in hr_images]
    if not hr:
        raise ValueError("no training images")
    shape = hr[0].shape
    if any(im.shape != shape for im in hr):
        raise ValueError("training images have inconsistent sizes")

    if degrader is not None:
        acq_desc = {"kind": "custom"}
    elif acquisition is not None:
        acq_desc = {"kind": "degrade", "blur_sigma": acquisition.blur_sigma,
                    "downsample_factor": acquisition.downsample_factor,
                    "noise_sigma": acquisition.noise_sigma, "rng_seed": acquisition.rng_seed}

        def degrader(im):
            return degrade(im, acquisition)
    else:
        lw, lh = shape[1] / mag, shape[0] / mag
        if lw.denominator != 1 or lh.denominator != 1:
            raise ValueError(f"HR size {shape} is not divisible by magnification {mag}")
        acq_desc = {"kind": "resize", "antialias": True}

        def degrader(im):
            return resize_bicubic(im, int(lw), int(lh), antialias=True)

    lr = np.stack([degrader(im) for im in hr])
    return CoupledDictionary(lr, np.stack(hr), mag, mode, lr_patch_size, lr_stride,
                             list(sample_ids) if sample_ids is not None else [],
                             acq_desc)


# --------------------------------------------------------------------------
# Container IO


def save_dictionary(path, d: CoupledDictionary) -> Path:
    """Write the binary container plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    lh, lw = d.lr_shape
    hh, hw = d.hr_shape
    acq = d.acquisition
    header = _HEADER.pack(MAGIC, VERSION, 0 if d.mode == "global" else 1,
                          d.magnification.numerator, d.magnification.denominator,
                          d.lr_patch_size, d.lr_stride, lw, lh, hw, hh, d.M, d.n_positions,
                          float(acq.get("blur_sigma", 0.0)), float(acq.get("noise_sigma", 0.0)),
                          int(acq.get("downsample_factor", 0)), int(acq.get("rng_seed", 0)))
    with open(path, "wb") as fh:
        fh.write(header)
        for j in range(d.n_positions):
            for mat in (d.lr(j), d.hr(j)):
                fh.write(np.asfortranarray(mat, dtype="<f8").tobytes(order="F"))
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"sample_ids": d.sample_ids, "acquisition": acq}, indent=2))
    return sidecar


def load_dictionary(path) -> CoupledDictionary:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dictionary {path}: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise DataError(f"{path} is not a dictionary container")
    (_, version, mode, num, den, psize, stride, lw, lh, hw, hh, m, npos,
     _blur, _noise, _factor, _seed) = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    mode_name = "global" if mode == 0 else "position"
    mag = Fraction(num, den)

    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if mode_name == "global":
        dl, dh = lw * lh, hw * hh
    else:
        dl, dh = psize ** 2, (psize * mag.numerator // mag.denominator) ** 2
    if data.size != npos * (dl + dh) * m:
        raise DataError(f"{path}: payload size does not match header")
    blocks = data.reshape(npos, (dl + dh) * m)
    lmats = blocks[:, :dl * m].reshape(npos, m, dl)  # column-major -> rows are samples
    hmats = blocks[:, dl * m:].reshape(npos, m, dh)

    if mode_name == "global":
        lr = lmats[0].reshape(m, lw, lh).transpose(0, 2, 1)
        hr = hmats[0].reshape(m, hw, hh).transpose(0, 2, 1)
    else:
        lgrid = make_grid(lw, lh, psize, stride)
        hgrid = make_grid(hw, hh, int(psize * mag), int(stride * mag))
        lr = np.stack([stitch_patches(lmats[:, i, :], lgrid) for i in range(m)])
        hr = np.stack([stitch_patches(hmats[:, i, :], hgrid) for i in range(m)])
    return CoupledDictionary(lr, hr, mag, mode_name, psize, stride,
                             meta.get("sample_ids", []), meta.get("acquisition", {}))
