"""LBP texture matching and verification / identification scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ProtocolError
from .imaging import as_image

# neighbour offsets (dy, dx), clockwise from top-left; bit i <-> entry i
LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


@dataclass(frozen=True)
class LbpFeature:
    hist: np.ndarray  # (rows, cols, 256), each cell L1-normalized

    @property
    def grid(self) -> tuple[int, int]:
        return self.hist.shape[:2]


def lbp_codes(img) -> np.ndarray:
    """Basic 8-neighbour LBP code of every interior pixel (bit set when neighbour >= centre)."""
    img = as_image(img)
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError("LBP needs an image of at least 3x3")
    centre = img[1:-1, 1:-1]
    codes = np.zeros(centre.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        nb = img[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        codes |= (nb >= centre).astype(np.int64) << bit
    return codes


def _cell_edges(n: int, parts: int) -> np.ndarray:
    return np.linspace(0, n, parts + 1).round().astype(int)


def lbp_feature(img, grid_rows: int = 8, grid_cols: int = 8) -> LbpFeature:
    img = as_image(img)
    if grid_rows < 1 or grid_cols < 1:
        raise ValueError("grid must have at least one cell")
    h, w = img.shape
    if h < 3 * grid_rows or w < 3 * grid_cols:
        raise ValueError(f"{h}x{w} image is too small for a {grid_rows}x{grid_cols} LBP grid")
    codes = lbp_codes(img)
    ys = _cell_edges(codes.shape[0], grid_rows)
    xs = _cell_edges(codes.shape[1], grid_cols)
    hist = np.zeros((grid_rows, grid_cols, 256))
    for r in range(grid_rows):
        for c in range(grid_cols):
            cell = codes[ys[r]:ys[r + 1], xs[c]:xs[c + 1]]
            counts = np.bincount(cell.ravel(), minlength=256)
            hist[r, c] = counts / counts.sum()
    return LbpFeature(hist)


def chi_square(f1: LbpFeature, f2: LbpFeature) -> float:
    if f1.hist.shape != f2.hist.shape:
        raise ValueError(f"feature grids differ: {f1.grid} vs {f2.grid}")
    a, b = f1.hist, f2.hist
    s = a + b
    nz = s > 0
    diff = a[nz] - b[nz]
    return float(np.sum(diff * diff / s[nz]))


# --------------------------------------------------------------------------
# Scores


@dataclass
class Trial:
    probe_id: str
    gallery_id: str
    score: float
    is_genuine: bool


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    polarity: str = "distance"
    trials: list[Trial] = field(default_factory=list)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        if self.polarity not in ("distance", "similarity"):
            raise ValueError("polarity must be 'distance' or 'similarity'")
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("scores must be finite")

    def as_distances(self) -> tuple[np.ndarray, np.ndarray]:
        if self.polarity == "distance":
            return self.genuine, self.impostor
        return -self.genuine, -self.impostor

    @classmethod
    def from_trials(cls, trials: list[Trial], polarity: str = "distance") -> "ScoreSet":
        gen = [t.score for t in trials if t.is_genuine]
        imp = [t.score for t in trials if not t.is_genuine]
        return cls(gen, imp, polarity, trials)


@dataclass(frozen=True)
class Labeled:
    """A feature with identity, sample index and a printable id."""

    label: str
    sample: int
    feature: LbpFeature
    id: str = ""


def run_verification(gallery: Sequence[Labeled], probes: Sequence[Labeled]) -> ScoreSet:
    """Genuine/impostor trials between enrolment and query features.

    Genuine: for every identity, each enrolled sample ``i`` against each
    query sample ``j`` with ``i < j`` (no symmetric or self matches).
    Impostor: the first sample of each identity against the second sample of
    every other identity.  Scores are chi-square distances.
    """
    labels = sorted({g.label for g in gallery} | {p.label for p in probes})
    if len(labels) < 2:
        raise ProtocolError("verification needs at least two identities")
    by_gal: dict[str, list[Labeled]] = {lab: [] for lab in labels}
    by_prb: dict[str, list[Labeled]] = {lab: [] for lab in labels}
    for g in gallery:
        by_gal[g.label].append(g)
    for p in probes:
        by_prb[p.label].append(p)
    for lab in labels:
        by_gal[lab].sort(key=lambda s: s.sample)
        by_prb[lab].sort(key=lambda s: s.sample)

    trials: list[Trial] = []
    for lab in labels:
        for g in by_gal[lab]:
            for p in by_prb[lab]:
                if g.sample < p.sample:
                    trials.append(Trial(p.id or f"{lab}/{p.sample}", g.id or f"{lab}/{g.sample}",
                                        chi_square(p.feature, g.feature), True))

    second: dict[str, Labeled] = {}
    for lab in labels:
        samples = sorted({s.sample for s in by_gal[lab]} | {s.sample for s in by_prb[lab]})
        if len(samples) < 2 or not by_gal[lab]:
            raise ProtocolError(f"identity {lab!r} needs an enrolled first sample and a second sample")
        match = [p for p in by_prb[lab] if p.sample == samples[1]]
        if not match:
            raise ProtocolError(f"identity {lab!r} has no query for its second sample")
        second[lab] = match[0]
    for a in labels:
        first = by_gal[a][0]
        for b in labels:
            if b == a:
                continue
            p = second[b]
            trials.append(Trial(p.id or f"{b}/{p.sample}", first.id or f"{a}/{first.sample}",
                                chi_square(p.feature, first.feature), False))
    if not any(t.is_genuine for t in trials):
        raise ProtocolError("no genuine trials could be formed")
    return ScoreSet.from_trials(trials)


def _check(scores: ScoreSet):
    gen, imp = scores.as_distances()
    if gen.size == 0 or imp.size == 0:
        raise ValueError("both genuine and impostor scores are required")
    return gen, imp


def operating_points(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at every distinct threshold, accepting distances ``<= t``.

    The sweep starts below the smallest score (FAR 0, FRR 1).
    """
    gen, imp = _check(scores)
    thr = np.unique(np.concatenate([gen, imp]))
    gs, im = np.sort(gen), np.sort(imp)
    far = np.searchsorted(im, thr, side="right") / im.size
    frr = 1.0 - np.searchsorted(gs, thr, side="right") / gs.size
    return np.concatenate([[0.0], far]), np.concatenate([[1.0], frr])


def _lower_hull(xs, ys):
    """Lower convex hull of points already sorted by x (monotone chain)."""
    hull: list[tuple[float, float]] = []
    for p in zip(xs, ys):
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(scores: ScoreSet) -> float:
    """Equal error rate on the convex hull of the (FAR, FRR) operating points.

    The hull edge that crosses FAR = FRR is interpolated linearly, so
    operating points dominated by a mix of neighbouring thresholds do not
    set the EER.
    """
    far, frr = operating_points(scores)
    # FAR is non-decreasing; for equal FAR keep the lowest FRR
    order = np.lexsort((frr, far))
    hull = _lower_hull(far[order], frr[order])
    for (a1, b1), (a2, b2) in zip(hull, hull[1:]):
        d1, d2 = b1 - a1, b2 - a2
        if d1 >= 0 >= d2:
            if d1 == d2:
                return float(a1)
            t = d1 / (d1 - d2)
            return float(a1 + t * (a2 - a1))
    return float(hull[-1][0]) if hull[-1][1] - hull[-1][0] >= 0 else float(hull[0][0])


def auc(scores: ScoreSet) -> float:
    """Mann-Whitney AUC: fraction of genuine/impostor pairs ordered correctly, ties count 1/2."""
    gen, imp = _check(scores)
    ranks = rankdata(np.concatenate([gen, imp]))
    r_imp = ranks[gen.size:].sum()
    u = r_imp - imp.size * (imp.size + 1) / 2.0
    return float(u / (gen.size * imp.size))


@dataclass
class IdentificationTrials:
    rankings: list[list[str]]
    truth: list[str]
    probe_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rankings) != len(self.truth):
            raise ValueError("one ranking per probe is required")
        for r in self.rankings:
            if len(set(r)) != len(r):
                raise ValueError("rankings must not repeat gallery labels")

    @property
    def missing(self) -> list[int]:
        """Probes whose true label is absent from their ranking."""
        return [i for i, (r, t) in enumerate(zip(self.rankings, self.truth)) if t not in r]


def identify(gallery: Sequence[Labeled], probes: Sequence[Labeled]) -> IdentificationTrials:
    """Rank gallery identities for each probe by the smallest chi-square distance (ties by label)."""
    labels = sorted({g.label for g in gallery})
    rankings, truth, ids = [], [], []
    for p in probes:
        best = {lab: np.inf for lab in labels}
        for g in gallery:
            best[g.label] = min(best[g.label], chi_square(p.feature, g.feature))
        rankings.append(sorted(labels, key=lambda lab: (best[lab], lab)))
        truth.append(p.label)
        ids.append(p.id or f"{p.label}/{p.sample}")
    return IdentificationTrials(rankings, truth, ids)


def cmc(trials: IdentificationTrials) -> np.ndarray:
    """Cumulative match curve; entry ``k-1`` is the rank-k identification rate."""
    if not trials.truth:
        raise ValueError("no identification trials")
    n = max(len(r) for r in trials.rankings)
    hits = np.zeros(n + 1)
    for r, t in zip(trials.rankings, trials.truth):
        if t in r:
            hits[r.index(t) + 1] += 1
    return np.cumsum(hits)[1:] / len(trials.truth)


def rank_k(trials: IdentificationTrials, k: int = 1) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    curve = cmc(trials)
    return float(curve[min(k, len(curve)) - 1])


def write_scores_csv(path, scores: ScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_id", "gallery_id", "score", "is_genuine"])
        for t in scores.trials:
            w.writerow([t.probe_id, t.gallery_id, repr(float(t.score)), int(t.is_genuine)])


def read_scores_csv(path, polarity: str = "distance") -> ScoreSet:
    trials = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            trials.append(Trial(row["probe_id"], row["gallery_id"], float(row["score"]),
                                row["is_genuine"] in ("1", "True", "true")))
    return ScoreSet.from_trials(trials, polarity)
