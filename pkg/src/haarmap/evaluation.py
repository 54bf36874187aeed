"""Reconstruction-quality evaluation against held-out frames.

Test points come from held-out observations: each valid beam contributes
its endpoint as an occupied sample and points strictly in front of the
surface band as free samples.  Map log-odds are the classifier scores;
unknown space (score exactly 0) is never counted as correct.
"""

from __future__ import annotations

import csv
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BANDS = ((-0.1, 0.05), (0.05, 0.2), (0.2, 0.5), (0.5, 2.0), (2.0, math.inf))
# endpoints further than this from any surface are discarded as mislabeled
SURFACE_TOLERANCE = 0.1
# map values are reconstructed from float32 coefficients; differences below
# this are rounding noise, so scores are snapped to this grid before ranking
SCORE_RESOLUTION = 1e-4


def split_indices(n_frames, test_every=20):
    if test_every < 1:
        raise ValueError("test_every must be at least 1")
    idx = np.arange(n_frames)
    test = idx % test_every == test_every - 1
    return idx[~test], idx[test]


def split_frames(observations, test_every=20):
    """Every ``test_every``-th frame (1-based) is held out for testing."""
    observations = list(observations)
    train, test = split_indices(len(observations), test_every)
    return [observations[i] for i in train], [observations[i] for i in test]


@dataclass
class TestPoints:
    __test__ = False  # not a pytest test class

    positions: np.ndarray
    occupied: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return self.occupied.shape[0]

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 3)), np.zeros(0, dtype=bool), np.zeros(0))
        return cls(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.occupied for p in parts]),
            np.concatenate([p.distance for p in parts]),
        )


def _beam_samples(obs, samples_per_ray, rng):
    proj, params = obs.projection, obs.params
    dirs = proj.beam_directions()
    # depth cameras report z; distance along the ray is z / dir_z
    scale = dirs[..., 2] if proj.kind == "pinhole" else np.ones(proj.shape)
    valid = obs.valid
    miss = obs.miss & ~valid
    z = obs.ranges
    occ_local = dirs[valid] * (z[valid] / scale[valid])[:, None]
    free_end = np.concatenate([(z[valid] - 3.0 * params.sigma_r(z[valid])) / scale[valid], proj.max_range / scale[miss]])
    free_dirs = np.concatenate([dirs[valid], dirs[miss]])
    keep = free_end > 0
    free_end, free_dirs = free_end[keep], free_dirs[keep]
    # uniform on (0, end): reject exact zeros so samples stay off the sensor origin
    u = rng.uniform(0.0, 1.0, (free_end.shape[0], samples_per_ray))
    u = np.where(u == 0.0, 0.5, u)
    free_local = free_dirs[:, None, :] * (u * free_end[:, None])[..., None]
    return obs.pose.to_world(occ_local), obs.pose.to_world(free_local.reshape(-1, 3))


def sample_test_points(test_observations, scene, samples_per_ray=10, rng=None, surface_tolerance=SURFACE_TOLERANCE):
    """Labeled test points from held-out frames, annotated with signed distance to ``scene``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    parts = []
    for obs in test_observations:
        occ, free = _beam_samples(obs, samples_per_ray, rng)
        d_occ = scene.signed_distance(occ)
        d_free = scene.signed_distance(free)
        occ_ok = np.abs(d_occ) <= surface_tolerance
        free_ok = d_free > 0
        parts.append(
            TestPoints(
                np.concatenate([occ[occ_ok], free[free_ok]]),
                np.concatenate([np.ones(int(occ_ok.sum()), dtype=bool), np.zeros(int(free_ok.sum()), dtype=bool)]),
                np.concatenate([d_occ[occ_ok], d_free[free_ok]]),
            )
        )
    return TestPoints.concatenate(parts)


def roc_curve(scores, labels):
    """ROC points for the rule ``score >= threshold``; ties move along the diagonal.

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0) with threshold +inf.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both occupied and free test points")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, s[last]]


def auc_trapezoid(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def band_index(distance, bands):
    """Index of the band holding each distance; the lowest band is open below, -1 if none."""
    d = np.asarray(distance, dtype=np.float64)
    out = np.full(d.shape, -1, dtype=np.int64)
    for k, (lo, hi) in enumerate(bands):
        lower_ok = (d >= lo) if k > 0 else np.ones(d.shape, dtype=bool)
        out = np.where((out < 0) & lower_ok & (d < hi), k, out)
    return out


@dataclass
class EvalReport:
    auc: float
    chosen_threshold: float
    roc: tuple
    bands: tuple
    band_accuracies: list
    band_counts: list
    n_occupied: int
    n_free: int
    n_unknown: int
    n_outside: int
    stats: dict = field(default_factory=dict)

    def summary(self):
        row = {
            "auc": self.auc,
            "threshold": self.chosen_threshold,
            "n_occupied": self.n_occupied,
            "n_free": self.n_free,
            "n_unknown": self.n_unknown,
            "n_outside": self.n_outside,
        }
        row.update(self.stats)
        return row


def map_scores(wmap, positions, resolution=SCORE_RESOLUTION):
    """Log-odds at ``positions`` snapped to ``resolution``; NaN outside the map."""
    scores = wmap.query_points(positions).astype(np.float64)
    return np.round(scores / resolution) * resolution if resolution else scores


def evaluate(wmap, test_points: TestPoints, bands=DEFAULT_BANDS, stats=None, resolution=SCORE_RESOLUTION) -> EvalReport:
    """Score test points inside the map extent; points outside it are not counted."""
    if len(test_points) == 0:
        raise ValueError("empty test set")
    scores = map_scores(wmap, test_points.positions, resolution)
    inside = ~np.isnan(scores)
    if not inside.any():
        raise ValueError("no test point lies inside the map")
    test_points = TestPoints(test_points.positions[inside], test_points.occupied[inside], test_points.distance[inside])
    scores = scores[inside]
    labels = test_points.occupied
    fpr, tpr, thr = roc_curve(scores, labels)
    auc = auc_trapezoid(fpr, tpr)
    best = int(np.argmax(tpr - fpr))
    threshold = float(thr[best])
    correct = ((scores >= threshold) == labels) & (scores != 0.0)
    idx = band_index(test_points.distance, bands)
    accs, counts = [], []
    for k in range(len(bands)):
        sel = idx == k
        counts.append(int(sel.sum()))
        accs.append(float(correct[sel].mean()) if sel.any() else math.nan)
    return EvalReport(
        auc=auc,
        chosen_threshold=threshold,
        roc=(fpr, tpr, thr),
        bands=tuple(tuple(b) for b in bands),
        band_accuracies=accs,
        band_counts=counts,
        n_occupied=int(labels.sum()),
        n_free=int((~labels).sum()),
        n_unknown=int((scores == 0.0).sum()),
        n_outside=int((~inside).sum()),
        stats=dict(stats or {}),
    )


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_report(report: EvalReport, out_dir):
    """Write ``roc.csv``, ``bands.csv`` and ``summary.csv`` into ``out_dir``."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fpr, tpr, thr = report.roc
    with open(out / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for row in zip(fpr, tpr, thr):
            w.writerow([_fmt(v) for v in row])
    with open(out / "bands.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band_lo_m", "band_hi_m", "count", "accuracy"])
        for (lo, hi), n, acc in zip(report.bands, report.band_counts, report.band_accuracies):
            w.writerow([_fmt(lo), _fmt(hi), n, _fmt(acc)])
    summary = report.summary()
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(summary))
        w.writerow([_fmt(v) for v in summary.values()])
    return out
