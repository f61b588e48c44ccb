"""Super-resolution methods built on coupled dictionaries.

Every patch-based method follows the same outline: slice the LR input into
the dictionary's LR grid, estimate one HR patch per position from that
position's ``(L_j, H_j)`` pair, and average the HR patches back together.
Positions are processed in batches; results do not depend on batch size.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from math import isqrt

import numpy as np

from . import solvers
from .imaging import AcquisitionModel, as_image, degrade, gaussian_blur, resize_bicubic, resize_weights
from .patches import CoupledDictionary, as_fraction, extract_patches, stitch_patches

log = logging.getLogger(__name__)

METHODS = ("bicubic", "eigen", "ne", "pp", "spp", "line", "lmcss", "eigenpatch")
PATCH_METHODS = ("ne", "pp", "spp", "line", "lmcss", "eigenpatch")

# cap on the HR block held in memory per batch of positions (float64 entries)
_BLOCK_BUDGET = 4_000_000


@dataclass(frozen=True)
class MethodParams:
    method: str = "bicubic"
    k: int = 50
    tau: float = 1e-3
    lambda_sparse: float = 1e-3          # on patches scaled to [0, 1]
    lambda_ridge: float | None = None    # None -> 1e-3 * trace(L L^T) / columns
    outer_B: int = 1
    inner_C: int = 3
    variance_keep: float = 0.99
    reproject: bool = False
    reproject_step: float = 0.25
    reproject_eps: float = 1e-3
    reproject_max_iter: int = 20
    lasso_max_iter: int = 5000
    lasso_tol: float = 1e-7

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.k < 1 or self.outer_B < 1 or self.inner_C < 1 or self.reproject_max_iter < 1:
            raise ValueError("k and iteration counts must be >= 1")
        for name in ("tau", "reproject_step", "reproject_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("lambda_sparse", "lambda_ridge"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def defaults(cls, method: str, **overrides) -> "MethodParams":
        base = {"ne": {"k": 5}, "line": {"k": 75}, "lmcss": {"k": 50}}.get(method, {})
        base.update(overrides)
        return cls(method=method, **base)

    def with_(self, **changes) -> "MethodParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionResult:
    image: np.ndarray
    support_sizes: np.ndarray | None = None
    residual_norms: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)
    seconds: float = 0.0


def _clamp_k(k: int, m: int, warnings: list[str]) -> int:
    if k > m:
        msg = f"k={k} exceeds dictionary size {m}; clamped to {m}"
        log.warning(msg)
        warnings.append(msg)
        return m
    return k


def _take_columns(block, idx):
    """``block[n, :, idx[n]]`` for a batch: ``(n, d, M)`` x ``(n, k)`` -> ``(n, d, k)``."""
    return np.take_along_axis(block, idx[:, None, :], axis=2)


def _batches(d: CoupledDictionary):
    per = max(1, _BLOCK_BUDGET // (d.hr_grid.patch_size ** 2 * d.M))
    for start in range(0, d.n_positions, per):
        yield np.arange(start, min(start + per, d.n_positions))


def _run_patches(x, d: CoupledDictionary, solve, warnings) -> ReconstructionResult:
    """Drive a per-position solver over all positions and stitch the result.

    ``solve(Lb, Hb, xb, positions)`` returns ``(hr_patches, support, residual)``.
    """
    t0 = time.perf_counter()
    x = as_image(x)
    if d.mode != "position":
        raise ValueError("patch methods need a position-patch dictionary")
    if x.shape != d.lr_shape:
        raise ValueError(f"input shape {x.shape} does not match dictionary LR shape {d.lr_shape}")
    xp = extract_patches(x, d.lr_grid)
    out = np.empty((d.n_positions, d.hr_grid.patch_size ** 2))
    support = np.empty(d.n_positions, dtype=np.intp)
    resid = np.empty(d.n_positions)
    for pos in _batches(d):
        Lb, Hb = d.blocks(pos)
        out[pos], support[pos], resid[pos] = solve(Lb, Hb, xp[pos], pos)
    img = stitch_patches(out, d.hr_grid)
    return ReconstructionResult(img, support, resid, warnings, time.perf_counter() - t0)


def _residual(A, w, x):
    return np.linalg.norm(x - np.einsum("ndk,nk->nd", A, w), axis=1)


# --------------------------------------------------------------------------
# Methods


def sr_bicubic(x, magnification) -> ReconstructionResult:
    t0 = time.perf_counter()
    x = as_image(x)
    mag = as_fraction(magnification)
    h, w = x.shape
    out = resize_bicubic(x, round(w * mag), round(h * mag), antialias=False)
    return ReconstructionResult(out, seconds=time.perf_counter() - t0)


def _infer_hr_shape(lr_shape, d_l, d_h):
    ratio = Fraction(d_h, d_l)
    num, den = isqrt(ratio.numerator), isqrt(ratio.denominator)
    if num * num != ratio.numerator or den * den != ratio.denominator:
        raise ValueError("cannot infer HR shape; pass hr_shape explicitly")
    mag = Fraction(num, den)
    return int(lr_shape[0] * mag), int(lr_shape[1] * mag)


def sr_eigentransformation(x, model: solvers.EigenModel, hr_shape=None) -> ReconstructionResult:
    """Global eigentransformation of a whole (column-major vectorized) image."""
    t0 = time.perf_counter()
    x = as_image(x)
    if x.size != model.mean_lr.size:
        raise ValueError(f"input has {x.size} pixels, model expects {model.mean_lr.size}")
    if hr_shape is None:
        hr_shape = _infer_hr_shape(x.shape, model.mean_lr.size, model.mean_hr.size)
    w = solvers.eigen_weights(x.ravel(order="F"), model)
    y = model.hr_centered @ w + model.mean_hr
    resid = np.linalg.norm(model.lr_centered @ w + model.mean_lr - x.ravel(order="F"))
    return ReconstructionResult(y.reshape(hr_shape, order="F"), np.array([model.rank]),
                                np.array([resid]), seconds=time.perf_counter() - t0)


def sr_neighbor_embedding(x, d: CoupledDictionary, params: MethodParams) -> ReconstructionResult:
    warnings: list[str] = []
    k = _clamp_k(params.k, d.M, warnings)

    def solve(Lb, Hb, xb, _):
        idx, _ = solvers.knn(xb, Lb, k)
        A = _take_columns(Lb, idx)
        w = solvers.solve_sum_to_one(A, xb)
        y = np.einsum("ndk,nk->nd", _take_columns(Hb, idx), w)
        return y, k, _residual(A, w, xb)

    return _run_patches(x, d, solve, warnings)


def sr_position_patch(x, d: CoupledDictionary, params: MethodParams | None = None) -> ReconstructionResult:
    def solve(Lb, Hb, xb, _):
        w = solvers.lstsq_pinv(Lb, xb)
        return np.einsum("ndk,nk->nd", Hb, w), d.M, _residual(Lb, w, xb)

    return _run_patches(x, d, solve, [])


def sr_sparse_position_patch(x, d: CoupledDictionary, params: MethodParams) -> ReconstructionResult:
    """Position patches with L1-penalized weights.

    The penalty is applied with patches scaled to [0, 1], so
    ``lambda_sparse`` does not depend on the 0..255 intensity range.
    """
    lam = params.lambda_sparse
    if not lam > 0:
        raise ValueError("lambda_sparse must be positive")

    def solve(Lb, Hb, xb, _):
        w = solvers.lasso_batch(Lb / 255.0, xb / 255.0, lam, params.lasso_max_iter, params.lasso_tol)
        return (np.einsum("ndk,nk->nd", Hb, w), np.count_nonzero(w, axis=1),
                _residual(Lb, w, xb))

    return _run_patches(x, d, solve, [])


def _upscale_patches(xb, p_lr, p_hr):
    """Bicubic upscaling of each LR patch vector (column-major) to an HR patch vector."""
    wmat = resize_weights(p_lr, p_hr, antialias=False)
    patches = xb.reshape(-1, p_lr, p_lr).swapaxes(1, 2)  # column-major -> row-major
    up = wmat @ patches @ wmat.T
    return up.swapaxes(1, 2).reshape(len(xb), p_hr * p_hr)


def sr_line(x, d: CoupledDictionary, params: MethodParams,
            acquisition: AcquisitionModel | None = None) -> ReconstructionResult:
    """Locality-constrained iterative neighbour embedding.

    The HR estimate of each patch starts from its bicubic upscaling; each
    inner step picks the *k* HR atoms nearest the current estimate, solves
    the distance-weighted ridge problem against the LR patch, and maps the
    weights through the HR atoms.  The intermediate LR dictionary is not
    updated between outer iterations.
    """
    warnings: list[str] = []
    k = _clamp_k(params.k, d.M, warnings)
    p_lr, p_hr = d.lr_grid.patch_size, d.hr_grid.patch_size

    def solve(Lb, Hb, xb, _):
        v = _upscale_patches(xb, p_lr, p_hr)
        for _b in range(params.outer_B):
            for _c in range(params.inner_C):
                idx, dist = solvers.knn(v, Hb, k)
                A = _take_columns(Lb, idx)
                w = solvers.solve_locality_regularized(A, xb, dist, params.tau)
                v = np.einsum("ndk,nk->nd", _take_columns(Hb, idx), w)
        return v, k, _residual(A, w, xb)

    res = _run_patches(x, d, solve, warnings)
    if params.reproject:
        res.image = _reproject_for(res.image, x, d, params, acquisition)
    return res


def _ridge_lambda(L, lam):
    if lam is not None:
        return np.full(L.shape[0], float(lam))
    return 1e-3 * np.einsum("ndm,ndm->n", L, L) / L.shape[-1]


def _ridge_batch(L, H, lams):
    out = np.empty(L.shape[:1] + (H.shape[1], L.shape[1]))
    for lam in np.unique(lams):
        sel = lams == lam
        out[sel] = solvers.solve_ridge(L[sel], H[sel], float(lam))
    return out


def sr_lmcss(x, d: CoupledDictionary, params: MethodParams) -> ReconstructionResult:
    """Two-step coupled sparse support: global ridge estimate, then ridge on its HR neighbours."""
    warnings: list[str] = []
    k = _clamp_k(params.k, d.M, warnings)

    def solve(Lb, Hb, xb, _):
        phi = _ridge_batch(Lb, Hb, _ridge_lambda(Lb, params.lambda_ridge))
        u = np.einsum("nhl,nl->nh", phi, xb)
        if k == d.M:
            return u, k, np.zeros(len(xb))
        idx, _ = solvers.knn(u, Hb, k)
        Ls, Hs = _take_columns(Lb, idx), _take_columns(Hb, idx)
        phi_s = _ridge_batch(Ls, Hs, _ridge_lambda(Ls, params.lambda_ridge))
        return np.einsum("nhl,nl->nh", phi_s, xb), k, np.zeros(len(xb))

    return _run_patches(x, d, solve, warnings)


def sr_eigen_patches(x, d: CoupledDictionary, params: MethodParams,
                     acquisition: AcquisitionModel | None = None) -> ReconstructionResult:
    """Eigentransformation applied independently at every patch position."""

    def solve(Lb, Hb, xb, _):
        y = solvers.eigentransform_batch(Lb, Hb, xb, params.variance_keep)
        return y, d.M, np.zeros(len(xb))

    res = _run_patches(x, d, solve, [])
    if params.reproject:
        res.image = _reproject_for(res.image, x, d, params, acquisition)
    return res


def _reproject_for(y0, x, d, params, acquisition):
    if acquisition is None:
        mag = d.magnification
        if mag.denominator != 1:
            raise ValueError("re-projection needs an integer magnification or an explicit acquisition model")
        acquisition = AcquisitionModel(downsample_factor=int(mag))
    return reproject(y0, x, acquisition, params.reproject_step, params.reproject_eps,
                     params.reproject_max_iter)


def reproject(y0, x, acq: AcquisitionModel, step: float = 0.25, eps: float = 1e-3,
              max_iter: int = 20, history: list | None = None) -> np.ndarray:
    """Gradient-style back-projection of the LR residual onto an HR estimate.

    ``y <- y - step * U(B(D B y - x))`` with U the bicubic upsampler, until
    the mean absolute per-pixel change drops below *eps*.  If *history* is a
    list, the data-fidelity ``||D B y - x||^2`` is appended before each step
    and after the last one.
    """
    y = as_image(y0).copy()
    x = as_image(x)
    fwd = acq.noiseless()
    if degrade(y, fwd).shape != x.shape:
        raise ValueError("degraded estimate does not match the LR input size")
    h, w = y.shape
    for _ in range(max_iter):
        r = degrade(y, fwd) - x
        if history is not None:
            history.append(float(np.sum(r * r)))
        if acq.blur_sigma > 0:
            r = gaussian_blur(r, acq.blur_sigma)
        delta = step * resize_bicubic(r, w, h, antialias=False)
        y = y - delta
        if np.mean(np.abs(delta)) < eps:
            break
    if history is not None:
        r = degrade(y, fwd) - x
        history.append(float(np.sum(r * r)))
    return y


def fuse_frames(frames, weights) -> np.ndarray:
    """Pixel-wise weighted mean of pre-aligned frames."""
    frames = [as_image(f) for f in frames]
    if not frames:
        raise ValueError("no frames to fuse")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(frames),):
        raise ValueError("need exactly one weight per frame")
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("frames have different sizes")
    return np.tensordot(weights, np.stack(frames), axes=1) / weights.sum()


def reconstruct(x, params: MethodParams, dictionary: CoupledDictionary | None = None,
                model: solvers.EigenModel | None = None, magnification=None,
                acquisition: AcquisitionModel | None = None, hr_shape=None) -> ReconstructionResult:
    """Dispatch on ``params.method``."""
    m = params.method
    if m == "bicubic":
        if magnification is None:
            raise ValueError("bicubic needs a magnification")
        return sr_bicubic(x, magnification)
    if m == "eigen":
        if model is None:
            raise ValueError("eigen needs an EigenModel")
        return sr_eigentransformation(x, model, hr_shape)
    if dictionary is None:
        raise ValueError(f"{m} needs a position-patch dictionary")
    if m == "ne":
        return sr_neighbor_embedding(x, dictionary, params)
    if m == "pp":
        return sr_position_patch(x, dictionary, params)
    if m == "spp":
        return sr_sparse_position_patch(x, dictionary, params)
    if m == "line":
        return sr_line(x, dictionary, params, acquisition)
    if m == "lmcss":
        return sr_lmcss(x, dictionary, params)
    return sr_eigen_patches(x, dictionary, params, acquisition)
