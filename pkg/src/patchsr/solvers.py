"""Numerical kernels shared by the reconstruction methods.

Dictionaries follow the column convention: ``A`` is ``(d, k)`` with one
training vector per column.  Most solvers also accept leading batch
dimensions (``(..., d, k)`` with ``(..., d)`` right-hand sides) so that all
patch positions of an image can be solved in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InsufficientDataError

SUM_TO_ONE_REG = 1e-9
SV_CUTOFF = 1e-10


@dataclass(frozen=True)
class EigenModel:
    mean_lr: np.ndarray        # (d_l,)
    mean_hr: np.ndarray        # (d_h,)
    eigenfaces: np.ndarray     # E, (d_l, r)
    eigenvectors: np.ndarray   # V_L, (M, r)
    eigenvalues: np.ndarray    # (r,), descending
    lr_centered: np.ndarray    # (d_l, M)
    hr_centered: np.ndarray    # (d_h, M)

    @property
    def rank(self) -> int:
        return self.eigenvalues.shape[0]


def _n_keep(evals: np.ndarray, variance_keep: float, limit: int) -> np.ndarray:
    """Smallest count whose eigenvalue mass reaches *variance_keep* (batched over rows)."""
    evals = np.clip(evals, 0.0, None)
    total = evals.sum(axis=-1, keepdims=True)
    top = evals.max(axis=-1, keepdims=True) if evals.shape[-1] else total
    positive = evals > 1e-12 * top
    safe_total = np.where(total > 0, total, 1.0)
    frac = np.cumsum(evals, axis=-1) / safe_total
    reached = frac >= variance_keep - 1e-12
    # first index where the mass is reached, +1
    n = np.where(reached.any(axis=-1), reached.argmax(axis=-1) + 1, evals.shape[-1])
    n = np.minimum(n, positive.sum(axis=-1))
    n = np.minimum(n, limit)
    return np.where(total[..., 0] > 0, n, 0)


def fit_eigenmodel(L, H, variance_keep: float = 0.99) -> EigenModel:
    """PCA of the LR training vectors via the ``M x M`` Gram matrix."""
    L = np.asarray(L, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if L.ndim != 2 or H.ndim != 2 or L.shape[1] != H.shape[1]:
        raise ValueError("L and H must be 2-D with the same number of columns")
    m = L.shape[1]
    if m < 2:
        raise InsufficientDataError("eigentransformation needs at least two training samples")
    if not 0 < variance_keep <= 1:
        raise ValueError("variance_keep must be in (0, 1]")
    mean_lr = L.mean(axis=1)
    mean_hr = H.mean(axis=1)
    lbar = L - mean_lr[:, None]
    hbar = H - mean_hr[:, None]

    evals, evecs = np.linalg.eigh(lbar.T @ lbar)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    r = int(_n_keep(evals, variance_keep, min(m - 1, L.shape[0])))
    evals, evecs = evals[:r], evecs[:, :r]
    eigenfaces = lbar @ evecs / np.sqrt(evals)
    return EigenModel(mean_lr, mean_hr, eigenfaces, evecs, evals, lbar, hbar)


def eigen_weights(x, model: EigenModel) -> np.ndarray:
    """``w = V_L Lambda^{-1/2} E^T (x - m_L)``; length ``M``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.mean_lr.shape:
        raise ValueError(f"input has dimension {x.shape}, model expects {model.mean_lr.shape}")
    coeff = model.eigenfaces.T @ (x - model.mean_lr) / np.sqrt(model.eigenvalues)
    return model.eigenvectors @ coeff


def eigentransform_batch(L, H, x, variance_keep: float = 0.99) -> np.ndarray:
    """Batched eigentransformation ``H_bar w + m_H`` for ``(n, d, M)`` stacks.

    Same estimator as :func:`fit_eigenmodel` + :func:`eigen_weights`, but
    decomposes whichever of ``L_bar^T L_bar`` or ``L_bar L_bar^T`` is smaller
    (they share their non-zero spectrum), and masks rather than truncates
    components so positions can be processed together.
    """
    L = np.asarray(L, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d, m = L.shape[-2:]
    if m < 2:
        raise InsufficientDataError("eigentransformation needs at least two training samples")
    mean_lr = L.mean(axis=-1)
    mean_hr = H.mean(axis=-1)
    lbar = L - mean_lr[..., None]
    hbar = H - mean_hr[..., None]
    xc = x - mean_lr

    if m <= d:
        evals, evecs = np.linalg.eigh(lbar.swapaxes(-1, -2) @ lbar)
        rhs = np.einsum("...dm,...d->...m", lbar, xc)
    else:
        evals, evecs = np.linalg.eigh(lbar @ lbar.swapaxes(-1, -2))
        rhs = xc
    evals, evecs = evals[..., ::-1], evecs[..., ::-1]
    n = _n_keep(evals, variance_keep, min(m - 1, d))
    mask = np.arange(evals.shape[-1]) < n[..., None]
    inv = np.where(mask, 1.0 / np.where(mask, evals, 1.0), 0.0)
    coeff = np.einsum("...ij,...i->...j", evecs, rhs) * inv
    proj = np.einsum("...ij,...j->...i", evecs, coeff)
    w = proj if m <= d else np.einsum("...dm,...d->...m", lbar, proj)
    return np.einsum("...dm,...m->...d", hbar, w) + mean_hr


def solve_sum_to_one(A, x) -> np.ndarray:
    """LLE weights: ``min ||x - A w||^2`` subject to ``sum(w) = 1``.

    Solves ``(G + load I) w = 1`` for the local Gram matrix
    ``G = Z^T Z``, ``Z = x 1^T - A``, with a ``1e-9 * trace(G) / k``
    diagonal load, then normalizes.  The system is diagonalized through the
    SVD of ``Z`` rather than by forming ``G``, so the loaded (possibly very
    ill-conditioned) Gram matrix costs no extra accuracy.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k = A.shape[-1]
    z = x[..., :, None] - A
    _, s, vt = np.linalg.svd(z, full_matrices=True)
    eig = np.zeros(s.shape[:-1] + (k,))
    eig[..., :s.shape[-1]] = s * s
    tr = eig.sum(axis=-1)
    # all columns equal to x: any positive load gives uniform weights
    load = np.where(tr > 0, SUM_TO_ONE_REG * tr / k, 1.0)
    coef = vt.sum(axis=-1) / (eig + load[..., None])  # V^T 1 scaled by the inverse spectrum
    w = np.einsum("...ji,...j->...i", vt, coef)
    return w / w.sum(axis=-1, keepdims=True)


def _filtered_pinv(mat, lam: float) -> np.ndarray:
    """``V diag(s / (s^2 + lam)) U^T``; for ``lam == 0`` singular values below the cutoff are dropped."""
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    if lam > 0:
        f = s / (s * s + lam)
    else:
        cutoff = SV_CUTOFF * s[..., :1]
        f = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (vt.swapaxes(-1, -2) * f[..., None, :]) @ u.swapaxes(-1, -2)


def solve_ridge(L, H, lam: float = 0.0) -> np.ndarray:
    """Projection ``Phi = H L^T (L L^T + lam I)^{-1}`` mapping LR vectors to HR vectors.

    Computed through the SVD of ``L``; with ``lam == 0`` this is
    ``H pinv(L)`` with a relative singular-value cutoff of 1e-10.
    """
    L = np.asarray(L, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if L.shape[-1] != H.shape[-1]:
        raise ValueError("L and H must have the same number of columns")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return H @ _filtered_pinv(L, lam)


def lstsq_pinv(A, x) -> np.ndarray:
    """Minimum-norm least squares ``pinv(A) x`` with the 1e-10 relative cutoff."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("...kd,...d->...k", _filtered_pinv(A, 0.0), x)


def solve_locality_regularized(A, x, dist, tau: float) -> np.ndarray:
    """``w = (A^T A + tau diag(dist)^2)^{-1} A^T x``.

    Systems whose penalty cannot guarantee a well-conditioned Gram matrix
    are solved through the pseudo-inverse of the stacked system
    ``[A; sqrt(tau) diag(dist)]`` instead.
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != A.shape[-1]:
        raise ValueError("distance vector length must equal column count")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    batch = A.shape[:-2]
    k = A.shape[-1]
    A2 = A.reshape((-1,) + A.shape[-2:])
    x2 = x.reshape(-1, x.shape[-1])
    p2 = tau * dist.reshape(-1, k) ** 2

    gram = A2.swapaxes(-1, -2) @ A2
    diag = np.einsum("nii->ni", gram)
    scale = np.maximum(diag.max(axis=-1), 1e-300)
    stable = p2.min(axis=-1) > 1e-10 * scale
    w = np.empty((A2.shape[0], k))
    if stable.any():
        g = gram[stable] + p2[stable][:, :, None] * np.eye(k)
        rhs = np.einsum("ndk,nd->nk", A2[stable], x2[stable])
        w[stable] = np.linalg.solve(g, rhs[..., None])[..., 0]
    if (~stable).any():
        idx = ~stable
        pen = np.sqrt(p2[idx])[:, :, None] * np.eye(k)
        aug = np.concatenate([A2[idx], pen], axis=1)
        rhs = np.concatenate([x2[idx], np.zeros((aug.shape[0], k))], axis=1)
        w[idx] = lstsq_pinv(aug, rhs)
    return w.reshape(batch + (k,))


@numba.njit(cache=True)
def _cd_sweeps(gram, corr, sq, lam, xx, w, q, max_iter, tol, history):
    """Cyclic coordinate descent on the Gram form, one system at a time.

    ``q`` tracks ``gram @ w``.  When ``history`` has more than one row, the
    objective is written to row 0 (start) and row ``t`` (after sweep ``t``).
    """
    n, k = corr.shape
    track = history.shape[0] > 1
    sweeps = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if track:
            history[0, i] = _objective(corr[i], q[i], w[i], lam[i], xx[i])
        for it in range(max_iter):
            max_delta = 0.0
            for j in range(k):
                if sq[i, j] <= 0.0:
                    continue
                rho = corr[i, j] - q[i, j] + sq[i, j] * w[i, j]
                mag = abs(rho) - lam[i]
                new = 0.0
                if mag > 0.0:
                    new = (mag if rho > 0.0 else -mag) / sq[i, j]
                delta = new - w[i, j]
                if delta != 0.0:
                    for m in range(k):
                        q[i, m] += gram[i, m, j] * delta
                    w[i, j] = new
                    if abs(delta) > max_delta:
                        max_delta = abs(delta)
            sweeps[i] = it + 1
            if track:
                history[it + 1, i] = _objective(corr[i], q[i], w[i], lam[i], xx[i])
            if max_delta < tol:
                if track:
                    for t in range(it + 2, history.shape[0]):
                        history[t, i] = history[it + 1, i]
                break
    return sweeps


@numba.njit(cache=True)
def _objective(c, q, w, lam, xx):
    # 1/2 ||x||^2 - c^T w + 1/2 w^T G w + lam |w|_1
    val = 0.5 * xx
    for j in range(w.shape[0]):
        val += -c[j] * w[j] + 0.5 * w[j] * q[j] + lam * abs(w[j])
    return val


def lasso_batch(A, x, lam, max_iter: int = 1000, tol: float = 1e-8,
                return_history: bool = False):
    """Cyclic coordinate descent for ``1/2 ||x - A w||^2 + lam ||w||_1``, batched over the first axis.

    Each coordinate update is the exact minimizer along that coordinate,
    ``soft(A_j^T r_j, lam) / ||A_j||^2``; this is the normalized-column
    update with the weights scaled back.  A system stops when the largest
    weight change in a sweep is below *tol*.  With ``return_history`` the
    objective before the first sweep and after every sweep is returned as a
    ``(sweeps + 1, n)`` array (systems that stopped early repeat their last
    value).
    """
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n, _, k = A.shape
    lam = np.ascontiguousarray(np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)))
    gram = np.ascontiguousarray(A.swapaxes(1, 2) @ A)
    corr = np.ascontiguousarray(np.einsum("ndk,nd->nk", A, x))
    sq = np.ascontiguousarray(np.einsum("nkk->nk", gram))
    xx = np.einsum("nd,nd->n", x, x)
    w = np.zeros((n, k))
    q = np.zeros((n, k))
    history = np.zeros((max_iter + 1, n) if return_history else (1, n))
    sweeps = _cd_sweeps(gram, corr, sq, lam, xx, w, q, int(max_iter), float(tol), history)
    if return_history:
        return w, history[:int(sweeps.max()) + 1]
    return w


def solve_lasso(A, x, lam: float, max_iter: int = 10000, tol: float = 1e-10,
                return_history: bool = False):
    """L1-regularized least squares ``argmin 1/2 ||x - A w||^2 + lam ||w||_1``.

    With ``return_history`` the objective after every sweep is returned as
    well (first entry is the objective at ``w = 0``).
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("dictionary has non-finite entries")
    out = lasso_batch(A[None], x[None], lam, max_iter, tol, return_history)
    if return_history:
        return out[0][0], out[1][:, 0]
    return out[0]


def knn(query, columns, k: int):
    """Indices and Euclidean distances of the *k* columns nearest to *query*.

    Ties go to the lower column index.
    """
    query = np.asarray(query, dtype=np.float64)
    columns = np.asarray(columns, dtype=np.float64)
    m = columns.shape[-1]
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    diff = columns - query[..., :, None]
    dist = np.sqrt(np.einsum("...dm,...dm->...m", diff, diff))
    order = np.argsort(dist, axis=-1, kind="stable")[..., :k]
    return order, np.take_along_axis(dist, order, axis=-1)
