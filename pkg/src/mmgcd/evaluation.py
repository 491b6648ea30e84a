"""Clustering accuracy, semi-supervised k-means and class-number estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.metrics import silhouette_score
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_semi_labels
from .data import UNLABELED


# -- accuracy ---------------------------------------------------------------

def _check_label_pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-D arrays of equal length")
    if len(y_true) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if (y_true < 0).any() or (y_pred < 0).any():
        raise ValueError("labels and predictions must be non-negative")
    return y_true, y_pred


def hungarian_acc(y_true, y_pred, num_classes=None):
    """Accuracy under the best one-to-one map from predicted to true labels.

    Returns ``(acc, matching)`` where ``matching`` maps each predicted label
    to the true label it is credited as.
    """
    y_true, y_pred = _check_label_pair(y_true, y_pred)
    D = max(int(y_true.max()), int(y_pred.max())) + 1
    if num_classes is not None:
        D = max(D, int(num_classes))
    w = np.zeros((D, D), dtype=np.int64)
    np.add.at(w, (y_pred, y_true), 1)
    rows, cols = linear_sum_assignment(w, maximize=True)
    matching = {int(r): int(c) for r, c in zip(rows, cols)}
    return float(w[rows, cols].sum()) / len(y_true), matching


@dataclass
class AccReport:
    acc_all: float
    acc_old: Optional[float]
    acc_new: Optional[float]
    matching: dict = field(repr=False)
    counts: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "acc_all": self.acc_all,
            "acc_old": self.acc_old,
            "acc_new": self.acc_new,
            "matching": {str(k): v for k, v in sorted(self.matching.items())},
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
        }


def grouped_acc(y_true, y_pred, old_classes, num_classes=None) -> AccReport:
    """All/Old/New accuracies under one matching computed over every instance."""
    y_true, y_pred = _check_label_pair(y_true, y_pred)
    acc, matching = hungarian_acc(y_true, y_pred, num_classes)
    mapped = np.array([matching.get(int(p), -1) for p in y_pred])
    correct = mapped == y_true
    is_old = np.isin(y_true, list(old_classes))

    def subset(mask):
        return float(correct[mask].mean()) if mask.any() else None

    counts = {}
    for c in np.unique(y_true):
        m = y_true == c
        counts[int(c)] = {"n": int(m.sum()), "correct": int(correct[m].sum())}
    return AccReport(acc, subset(is_old), subset(~is_old), matching, counts)


# -- semi-supervised k-means --------------------------------------------------

@dataclass
class ClusterAssignment:
    assignment: dict
    centroids: np.ndarray
    inertia: float


def _kmeanspp_extend(X, centers, n_new, rng):
    """Add ``n_new`` k-means++ centers to ``centers`` (possibly empty)."""
    centers = [c for c in centers]
    if not centers:
        centers.append(X[rng.integers(len(X))])
        n_new -= 1
    for _ in range(n_new):
        C = np.asarray(centers)
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(len(X))])
        else:
            centers.append(X[rng.choice(len(X), p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


class SemiSupervisedKMeans(ClusterMixin, BaseEstimator):
    """k-means whose labeled points are pinned to their class's cluster.

    Labeled class ``c`` (in sorted order) owns cluster ``class_to_cluster_[c]``
    and starts at the class mean; the remaining clusters are seeded by
    k-means++. ``y`` uses ``-1`` for unlabeled rows. With ``n_init > 1`` the
    k-means++ seeding is redrawn and the lowest-inertia run is kept.
    """

    def __init__(self, n_clusters=8, tol=1e-6, max_iter=300, n_init=10, seed=0):
        self.n_clusters = n_clusters
        self.tol = tol
        self.max_iter = max_iter
        self.n_init = n_init
        self.seed = seed

    def _init_centers(self, X, y, rng):
        labeled_classes = sorted(int(c) for c in np.unique(y[y != UNLABELED]))
        if self.n_clusters < len(labeled_classes):
            raise ValueError(
                f"n_clusters={self.n_clusters} is below the {len(labeled_classes)} labeled classes"
            )
        self.class_to_cluster_ = {c: i for i, c in enumerate(labeled_classes)}
        means = [X[y == c].mean(axis=0) for c in labeled_classes]
        return _kmeanspp_extend(X, means, self.n_clusters - len(means), rng)

    def fit(self, X, y=None, init=None):
        X = check_array(X, dtype=np.float64)
        y = np.full(len(X), UNLABELED) if y is None else check_semi_labels(y, len(X))
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if init is not None:
            labeled_classes = sorted(int(c) for c in np.unique(y[y != UNLABELED]))
            self.class_to_cluster_ = {c: i for i, c in enumerate(labeled_classes)}
            starts = [np.array(init, dtype=np.float64)]
        else:
            rng = np.random.default_rng(self.seed)
            starts = [self._init_centers(X, y, rng) for _ in range(self.n_init)]
        best = None
        for centers in starts:
            run = self._lloyd(X, y, centers)
            if best is None or run["inertia_"] < best["inertia_"]:
                best = run
        for key, value in best.items():
            setattr(self, key, value)
        return self

    def _lloyd(self, X, y, centers):
        out = {"init_centers_": centers.copy()}
        labeled = y != UNLABELED
        forced = np.array([self.class_to_cluster_.get(int(c), -1) for c in y])
        history = []
        for it in range(1, self.max_iter + 1):
            d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
            assign = np.where(labeled, forced, d2.argmin(axis=1))
            new = centers.copy()
            for k in range(self.n_clusters):
                members = assign == k
                if members.any():
                    new[k] = X[members].mean(axis=0)
            shift = np.sqrt(((new - centers) ** 2).sum())
            centers = new
            history.append(float(((X - centers[assign]) ** 2).sum()))
            if shift <= self.tol:
                break
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = np.where(labeled, forced, d2.argmin(axis=1))
        out.update(labels_=labels, cluster_centers_=centers, inertia_history_=history, n_iter_=it,
                   inertia_=float(((X - centers[labels]) ** 2).sum()))
        return out

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        d2 = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(-1)
        return d2.argmin(axis=1)


def ss_kmeans(features, labeled, K, seed=0, ids=None) -> ClusterAssignment:
    """Functional wrapper: ``labeled`` maps instance id (or row index) to class."""
    features = np.asarray(features, dtype=np.float64)
    ids = list(range(len(features))) if ids is None else list(ids)
    pos = {i: r for r, i in enumerate(ids)}
    y = np.full(len(features), UNLABELED)
    for key, c in labeled.items():
        y[pos[key]] = c
    km = SemiSupervisedKMeans(n_clusters=K, seed=seed).fit(features, y)
    return ClusterAssignment(dict(zip(ids, km.labels_.tolist())), km.cluster_centers_, km.inertia_)


def _normalize_rows(a):
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms > 0, norms, 1.0)


def concat_features(z_v, z_t):
    """Unit-normalise each part, concatenate, and unit-normalise the result."""
    z_v, z_t = np.asarray(z_v), np.asarray(z_t)
    if len(z_v) != len(z_t):
        raise ValueError(f"row mismatch: {len(z_v)} visual vs {len(z_t)} text rows")
    return _normalize_rows(np.hstack([_normalize_rows(z_v), _normalize_rows(z_t)]))


# -- class-number estimation ---------------------------------------------------

class ClassNumberEstimator(BaseEstimator):
    """Pick the total class count from a candidate range.

    Half of each labeled class constrains a semi-supervised k-means run per
    candidate k; the other half is held out and scored with Hungarian
    accuracy. Held-out accuracy alone cannot penalise an undersized k (new
    classes simply merge into old clusters), so candidates whose held-out
    accuracy is within ``acc_tolerance`` of the best are ranked by the cosine
    silhouette of the full clustering. Ties go to the smallest k.
    """

    def __init__(self, k_range=None, heldout_fraction=0.5, acc_tolerance=0.02, seed=0):
        self.k_range = k_range
        self.heldout_fraction = heldout_fraction
        self.acc_tolerance = acc_tolerance
        self.seed = seed

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_semi_labels(y, len(X))
        ks = sorted(set(int(k) for k in (self.k_range or [])))
        if not ks:
            raise ValueError("k_range must contain at least one candidate")
        classes = sorted(int(c) for c in np.unique(y[y != UNLABELED]))
        if ks[0] < len(classes) or ks[-1] > len(X):
            raise ValueError(f"k_range must lie within [{len(classes)}, {len(X)}]")
        rng = np.random.default_rng(self.seed)
        constraint = np.full(len(X), UNLABELED)
        heldout = np.zeros(len(X), dtype=bool)
        for c in classes:
            members = rng.permutation(np.flatnonzero(y == c))
            n_held = int(round(self.heldout_fraction * len(members)))
            if len(members) >= 2:
                n_held = min(max(n_held, 1), len(members) - 1)
            heldout[members[:n_held]] = True
            constraint[members[n_held:]] = c
        self.scores_ = {}
        for k in ks:
            km = SemiSupervisedKMeans(n_clusters=k, seed=self.seed).fit(X, constraint)
            acc = hungarian_acc(y[heldout], km.labels_[heldout])[0] if heldout.any() else float("nan")
            n_used = len(np.unique(km.labels_))
            sil = (silhouette_score(X, km.labels_, metric="cosine")
                   if 1 < n_used < len(X) else -1.0)
            self.scores_[k] = {"heldout_acc": float(acc), "silhouette": float(sil)}
        best_acc = max(s["heldout_acc"] for s in self.scores_.values())
        eligible = [k for k in ks if self.scores_[k]["heldout_acc"] >= best_acc - self.acc_tolerance]
        self.k_ = max(eligible, key=lambda k: (self.scores_[k]["silhouette"], -k))
        return self


def estimate_class_number(features, y_semi, k_range, seed=0):
    """Return ``(k_hat, per_k_scores)``; see :class:`ClassNumberEstimator`."""
    est = ClassNumberEstimator(k_range=list(k_range), seed=seed).fit(features, y_semi)
    return est.k_, est.scores_
