"""Estimator-style facade: fit on observations, score query points.

``fit`` consumes posed range frames (:class:`~haarmap.integrator.Observation`)
and builds a map; the query methods take ``(n, 3)`` world points.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import evaluation as ev
from .integrator import MODES, IntegratorConfig, Observation, integrate_multi_sensor
from .octree import MapConfig, WaveletOctree


class OccupancyMapEstimator(BaseEstimator):
    """Occupancy map with the fit/predict surface of a scikit-learn estimator.

    ``decision_function`` returns map log-odds (NaN outside the map),
    ``predict_proba`` the matching probabilities, ``predict`` the rule
    ``logodds > threshold`` and ``score`` the ROC AUC against labels.
    """

    def __init__(
        self,
        min_cell_width=0.05,
        tree_height=8,
        origin=(0.0, 0.0, 0.0),
        clamp_lo=-2.0,
        clamp_hi=4.0,
        epsilon_thresh=0.1,
        max_update_resolution=None,
        mode="beams",
        skip_saturated=True,
        threads=1,
        threshold=0.0,
    ):
        self.min_cell_width = min_cell_width
        self.tree_height = tree_height
        self.origin = origin
        self.clamp_lo = clamp_lo
        self.clamp_hi = clamp_hi
        self.epsilon_thresh = epsilon_thresh
        self.max_update_resolution = max_update_resolution
        self.mode = mode
        self.skip_saturated = skip_saturated
        self.threads = threads
        self.threshold = threshold

    def _configs(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        map_config = MapConfig(
            min_cell_width=float(self.min_cell_width),
            tree_height=int(self.tree_height),
            origin=tuple(float(x) for x in self.origin),
            clamp_lo=float(self.clamp_lo),
            clamp_hi=float(self.clamp_hi),
        )
        integ = IntegratorConfig(
            epsilon_thresh=float(self.epsilon_thresh),
            max_update_resolution=self.max_update_resolution,
            skip_saturated=bool(self.skip_saturated),
            mode=self.mode,
            threads=int(self.threads),
        )
        integ.update_depth(map_config)
        return map_config, integ

    @staticmethod
    def _frames(X):
        frames = [X] if isinstance(X, Observation) else list(X)
        for i, f in enumerate(frames):
            if not isinstance(f, Observation):
                raise TypeError(f"X[{i}]: expected an Observation, got {type(f).__name__}")
        return sorted(frames, key=lambda o: o.timestamp)

    def fit(self, X, y=None):
        """Build a fresh map from the observations in ``X`` (``y`` is ignored)."""
        map_config, _ = self._configs()
        self.map_ = WaveletOctree(map_config)
        self.n_frames_ = 0
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        """Integrate further observations into the current map."""
        if not hasattr(self, "map_"):
            return self.fit(X)
        _, integ = self._configs()
        frames = self._frames(X)
        configs = {f.sensor: integ for f in frames}
        self.update_stats_ = integrate_multi_sensor(self.map_, frames, configs)
        self.n_frames_ += len(frames)
        return self

    def _points(self, X):
        check_is_fitted(self, "map_")
        X = check_array(X, dtype=np.float64, ensure_min_samples=0)
        if X.shape[1] != 3:
            raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
        return X

    def decision_function(self, X):
        X = self._points(X)
        return self.map_.query_points(X).astype(np.float64)

    def transform(self, X):
        """Log-odds as a single feature column."""
        return self.decision_function(X)[:, None]

    def predict_proba(self, X):
        """Columns ``[P(free), P(occupied)]``; NaN rows outside the map."""
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X):
        """True where the log-odds exceed ``threshold``; points outside the map are False."""
        with np.errstate(invalid="ignore"):
            return self.decision_function(X) > self.threshold

    def score(self, X, y):
        """ROC AUC of the map log-odds for occupancy labels ``y``; points outside the map are ignored."""
        X = self._points(X)
        scores = ev.map_scores(self.map_, X)
        y = check_array(np.asarray(y), ensure_2d=False, dtype=None, ensure_min_samples=0).astype(bool)
        if y.shape != scores.shape:
            raise ValueError(f"{len(y)} labels for {len(scores)} points")
        inside = ~np.isnan(scores)
        fpr, tpr, _ = ev.roc_curve(scores[inside], y[inside])
        return ev.auc_trapezoid(fpr, tpr)
