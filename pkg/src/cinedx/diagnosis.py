"""Feature extraction, Random Forest classifier and stratified cross-validation."""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import DIAGNOSES
from .metrics import UndefinedMetricError, confusion_and_accuracy, quantify
from .volume_io import CineStudy, LabelMap

FEATURE_NAMES = (
    "weight_kg", "height_cm",
    "lv_edv", "lv_esv", "rv_edv", "rv_esv", "myo_edv", "myo_esv",
    "lv_ef", "rv_ef",
    "rv_lv_ratio_ed", "rv_lv_ratio_es", "myo_lv_ratio_ed", "myo_lv_ratio_es",
)
N_FEATURES = len(FEATURE_NAMES)

FOREST_MAGIC = b"CINEDXRF"
FOREST_VERSION = 1


class FeatureExtractionError(ValueError):
    pass


class ForestFormatError(ValueError):
    pass


def extract_features(study: CineStudy, labels_ed: LabelMap, labels_es: LabelMap) -> np.ndarray:
    """The 14-entry feature vector in :data:`FEATURE_NAMES` order."""
    try:
        q = quantify(labels_ed, labels_es)
    except UndefinedMetricError as exc:
        raise FeatureExtractionError(f"{study.patient_id}: {exc}") from exc
    if q.lv_edv <= 0 or q.lv_esv <= 0:
        raise FeatureExtractionError(f"{study.patient_id}: LV volume is zero at ED or ES")
    x = np.array([
        study.weight_kg, study.height_cm,
        q.lv_edv, q.lv_esv, q.rv_edv, q.rv_esv, q.myo_edv, q.myo_esv,
        q.lv_ef, q.rv_ef,
        q.rv_edv / q.lv_edv, q.rv_esv / q.lv_esv,
        q.myo_edv / q.lv_edv, q.myo_esv / q.lv_esv,
    ], dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FeatureExtractionError(f"{study.patient_id}: non-finite feature value")
    return x


# ---------------------------------------------------------------------------
# Decision trees


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # [n_nodes, n_classes] weighted class counts
    gain: np.ndarray  # weighted impurity decrease at each split node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            f = self.feature[n]
            go_left = X[active, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node


def _gini(counts: np.ndarray, total: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / total[..., None]
    return np.where(total > 0, 1.0 - (p * p).sum(axis=-1), 0.0)


def _best_split(x: np.ndarray, onehot_w: np.ndarray):
    """Best Gini split of one feature: ``(weighted child impurity, threshold)`` or None."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    cum = np.cumsum(onehot_w[order], axis=0)[:-1]
    total = cum[-1] + onehot_w[order[-1]]
    n_left = cum.sum(axis=1)
    n_right = total.sum() - n_left
    right = total[None, :] - cum
    child = (n_left * _gini(cum, n_left) + n_right * _gini(right, n_right)) / total.sum()
    child = np.where(valid, child, np.inf)
    i = int(np.argmin(child))  # first minimum wins ties
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(child[i]), float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray, weight: np.ndarray, n_classes: int,
             max_features: int, seed: int) -> Tree:
    """Grow a tree to full depth on weighted samples.

    At every node the features are ranked by a random priority drawn from
    ``(seed, node id)``; features constant within the node are skipped and
    the first ``max_features`` remaining ones are searched for the best
    Gini split.  A node becomes a leaf when it is pure or when none of the
    searched features lowers the impurity.
    """
    keep = weight > 0
    X, y, weight = X[keep], y[keep], weight[keep].astype(np.float64)
    n_features = X.shape[1]
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = weight
    total_w = weight.sum()

    feature, threshold, left, right, value, gain = [], [], [], [], [], []

    def new_node(counts):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts)
        gain.append(0.0)
        return len(feature) - 1

    root = new_node(onehot.sum(axis=0))
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        counts = value[node]
        n_w = counts.sum()
        parent = float(_gini(counts, np.asarray(n_w)))
        if parent <= 0.0:
            continue
        rng = np.random.default_rng([seed, node])
        priority = rng.random(n_features)
        best = None
        searched = 0
        for f in np.argsort(priority, kind="stable"):
            xf = X[idx, f]
            if xf.min() == xf.max():
                continue
            searched += 1
            res = _best_split(xf, onehot[idx])
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], res[1], int(f))
            if searched >= max_features:
                break
        if best is None or best[0] >= parent:
            continue
        child_imp, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        gain[node] = n_w / total_w * (parent - child_imp)
        left[node] = new_node(onehot[li].sum(axis=0))
        right[node] = new_node(onehot[ri].sum(axis=0))
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], ri))
        stack.append((left[node], li))

    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64).reshape(-1, n_classes),
        gain=np.array(gain, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Forest


@dataclass
class Forest:
    trees: list[Tree]
    classes: tuple[str, ...] = DIAGNOSES
    n_features: int = N_FEATURES
    seed: int = 0
    max_features: int = 3
    feature_names: tuple[str, ...] = FEATURE_NAMES


@dataclass
class DiagnosisReport:
    posterior: np.ndarray
    predicted_class: str
    entropy_nats: float
    classes: tuple[str, ...] = DIAGNOSES

    @property
    def entropy_normalized(self) -> float:
        return self.entropy_nats / math.log(len(self.classes))

    def to_dict(self) -> dict:
        return {
            "posterior": {c: float(p) for c, p in zip(self.classes, self.posterior)},
            "predicted_class": self.predicted_class,
            "entropy_nats": self.entropy_nats,
            "entropy_normalized": self.entropy_normalized,
        }


def entropy_nats(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(max(0.0, -(nz * np.log(nz)).sum()))


def default_max_features(n_features: int) -> int:
    return max(1, int(math.floor(math.sqrt(n_features))))


def rf_train(samples: Sequence[Sequence[float]] | np.ndarray, labels: Sequence[str], n_trees: int = 1000,
             seed: int = 0, classes: Sequence[str] = DIAGNOSES,
             max_features: Optional[int] = None) -> Forest:
    """Fit ``n_trees`` full-depth Gini trees, each on an n-draw bootstrap resample.

    Per-tree seeds are spawned from ``seed``, so trees are independent and
    the forest is reproducible.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("empty training set")
    if len(labels) != len(X):
        raise ValueError("one label per sample required")
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[c] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"unknown class label {exc.args[0]!r}") from None
    mf = max_features or default_max_features(X.shape[1])
    n = len(X)
    trees = []
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        weight = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        tree_seed = int(child.generate_state(1)[0])
        trees.append(fit_tree(X, y, weight, len(classes), mf, tree_seed))
    return Forest(trees, classes, X.shape[1], seed, mf,
                  FEATURE_NAMES if X.shape[1] == N_FEATURES else tuple(f"f{i}" for i in range(X.shape[1])))


def rf_posteriors(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Mean of normalized leaf class distributions, one row per sample."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {X.shape[1]}")
    acc = np.zeros((len(X), len(forest.classes)))
    for tree in forest.trees:
        leaf = tree.value[tree.apply(X)]
        acc += leaf / leaf.sum(axis=1, keepdims=True)
    return acc / len(forest.trees)


def rf_predict(forest: Forest, x: Sequence[float]) -> DiagnosisReport:
    """Posterior, arg-max class (ties to the earlier class) and entropy for one sample."""
    post = rf_posteriors(forest, np.asarray(x, dtype=np.float64)[None, :])[0]
    return DiagnosisReport(post, forest.classes[int(np.argmax(post))], entropy_nats(post), forest.classes)


def feature_importance(forest: Forest) -> np.ndarray:
    """Mean decrease in Gini impurity per feature, normalized to sum to 1.

    A forest without any split has no preference and gets uniform importances.
    """
    total = np.zeros(forest.n_features)
    for tree in forest.trees:
        imp = np.zeros(forest.n_features)
        split = tree.feature >= 0
        np.add.at(imp, tree.feature[split], tree.gain[split])
        if imp.sum() > 0:
            total += imp / imp.sum()
    if total.sum() == 0:
        return np.full(forest.n_features, 1.0 / forest.n_features)
    return total / total.sum()


def save_forest(forest: Forest, path) -> Path:
    header = {
        "classes": list(forest.classes),
        "n_features": forest.n_features,
        "feature_names": list(forest.feature_names),
        "seed": forest.seed,
        "max_features": forest.max_features,
        "node_counts": [t.n_nodes for t in forest.trees],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(FOREST_MAGIC)
    buf.write(struct.pack("<II", FOREST_VERSION, len(head)))
    buf.write(head)
    for t in forest.trees:
        for arr, dt in ((t.feature, "<i4"), (t.threshold, "<f8"), (t.left, "<i4"), (t.right, "<i4"),
                        (t.value, "<f8"), (t.gain, "<f8")):
            buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_forest(path) -> Forest:
    raw = Path(path).read_bytes()
    if raw[:8] != FOREST_MAGIC:
        raise ForestFormatError("not a forest file (bad magic bytes)")
    if len(raw) < 16:
        raise ForestFormatError("truncated forest header")
    version, head_len = struct.unpack_from("<II", raw, 8)
    if version != FOREST_VERSION:
        raise ForestFormatError(f"unsupported forest version {version}")
    header = json.loads(raw[16:16 + head_len])
    pos = 16 + head_len
    n_cls = len(header["classes"])

    def take(dt, count):
        nonlocal pos
        size = np.dtype(dt).itemsize * count
        if pos + size > len(raw):
            raise ForestFormatError("truncated forest file")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).copy()
        pos += size
        return arr

    trees = []
    for n in header["node_counts"]:
        trees.append(Tree(
            feature=take("<i4", n), threshold=take("<f8", n), left=take("<i4", n), right=take("<i4", n),
            value=take("<f8", n * n_cls).reshape(n, n_cls), gain=take("<f8", n),
        ))
    if pos != len(raw):
        raise ForestFormatError("trailing bytes in forest file")
    return Forest(trees, tuple(header["classes"]), header["n_features"], header["seed"],
                  header["max_features"], tuple(header["feature_names"]))


# ---------------------------------------------------------------------------
# Cross-validation


def stratified_kfold(labels: Sequence, k: int = 4, seed: int = 0) -> list[np.ndarray]:
    """Split indices into ``k`` disjoint folds with per-class counts differing by at most one.

    Members of each class are shuffled and dealt round-robin; the dealing
    start rotates between classes to keep fold sizes balanced too.
    """
    labels = list(labels)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(labels):
        raise ValueError(f"k={k} exceeds the number of samples ({len(labels)})")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for c in sorted(set(labels), key=str):
        members = np.array([i for i, lab in enumerate(labels) if lab == c])
        if len(members) < k:
            raise ValueError(f"class {c!r} has {len(members)} members, fewer than k={k}")
        for j, i in enumerate(rng.permutation(members)):
            folds[(start + j) % k].append(int(i))
        start = (start + len(members)) % k
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


@dataclass
class CrossValResult:
    confusion: np.ndarray
    accuracy: float
    reports: list[dict]
    importance: np.ndarray
    folds: list[np.ndarray]
    classes: tuple[str, ...] = DIAGNOSES
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def top_features(self, n: int = 3) -> list[tuple[str, float]]:
        order = np.argsort(-self.importance, kind="stable")[:n]
        return [(self.feature_names[i], float(self.importance[i])) for i in order]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "confusion_matrix": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "feature_importance": {n: float(v) for n, v in zip(self.feature_names, self.importance)},
            "top_features": [{"feature": n, "importance": v} for n, v in self.top_features()],
            "folds": [f.tolist() for f in self.folds],
            "patients": self.reports,
        }


LabelSource = Mapping[str, tuple[LabelMap, LabelMap]]


def study_features(studies: Sequence[CineStudy], labels: Optional[LabelSource] = None) -> np.ndarray:
    """Feature matrix from ``labels`` (by patient id) or, if None, the reference labels."""
    rows = []
    for st in studies:
        if labels is None:
            if st.reference_labels is None:
                raise FeatureExtractionError(f"{st.patient_id}: no reference labels")
            lab = st.reference_labels
        else:
            if st.patient_id not in labels:
                raise FeatureExtractionError(f"{st.patient_id}: no segmentation available")
            lab = labels[st.patient_id]
        rows.append(extract_features(st, *lab))
    return np.array(rows).reshape(-1, N_FEATURES)


def cross_validate(studies: Sequence[CineStudy], k: int = 4, seed: int = 0,
                   feature_source: str = "reference", n_trees: int = 1000,
                   predicted_labels: Optional[LabelSource] = None,
                   segment_fold: Optional[Callable[[list, list], LabelSource]] = None) -> CrossValResult:
    """Stratified k-fold evaluation of the classifier.

    ``feature_source='reference'`` uses the reference segmentations.
    ``'automatic'`` uses ``predicted_labels`` if given, otherwise calls
    ``segment_fold(train_studies, test_studies)`` once per fold, which must
    return segmentations for both sets (the fold's own network).
    """
    if feature_source not in ("reference", "automatic"):
        raise ValueError(f"unknown feature source {feature_source!r}")
    if feature_source == "automatic" and predicted_labels is None and segment_fold is None:
        raise ValueError("automatic features need predicted_labels or a segment_fold callable")
    y = [st.diagnosis for st in studies]
    if any(lab is None for lab in y):
        raise ValueError("every study needs a diagnosis label")
    folds = stratified_kfold(y, k, seed)

    fixed = None
    if feature_source == "reference":
        fixed = study_features(studies)
    elif predicted_labels is not None:
        fixed = study_features(studies, predicted_labels)

    n = len(studies)
    truth, pred = [None] * n, [None] * n
    reports: list[Optional[dict]] = [None] * n
    importances = []
    fold_seeds = np.random.SeedSequence(seed).spawn(len(folds))
    for fi, test in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(n), test) if len(folds) > 1 else test
        if fixed is not None:
            X = fixed
        else:
            tr = [studies[i] for i in train_idx]
            te = [studies[i] for i in test]
            labels = segment_fold(tr, te)
            X = np.zeros((n, N_FEATURES))
            X[train_idx] = study_features(tr, labels)
            X[test] = study_features(te, labels)
        forest = rf_train(X[train_idx], [y[i] for i in train_idx], n_trees=n_trees,
                          seed=int(fold_seeds[fi].generate_state(1)[0]))
        importances.append(feature_importance(forest))
        post = rf_posteriors(forest, X[test])
        for row, i in enumerate(test):
            rep = DiagnosisReport(post[row], forest.classes[int(np.argmax(post[row]))],
                                  entropy_nats(post[row]), forest.classes)
            truth[i], pred[i] = y[i], rep.predicted_class
            reports[i] = {"patient_id": studies[i].patient_id, "fold": fi, "reference": y[i], **rep.to_dict()}
    cm, acc = confusion_and_accuracy(truth, pred, DIAGNOSES)
    imp = np.mean(importances, axis=0)
    return CrossValResult(cm, acc, reports, imp / imp.sum(), folds)


# ---------------------------------------------------------------------------
# Features CSV


def write_features_csv(path, patient_ids: Sequence[str], X: np.ndarray,
                       labels: Optional[Sequence[Optional[str]]] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", *FEATURE_NAMES, "label"])
        for i, pid in enumerate(patient_ids):
            lab = labels[i] if labels is not None and labels[i] is not None else ""
            w.writerow([pid, *(repr(float(v)) for v in X[i]), lab])


def read_features_csv(path) -> tuple[list[str], np.ndarray, list[Optional[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = [c for c in ("patient_id", *FEATURE_NAMES) if rows and c not in rows[0]]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    ids = [r["patient_id"] for r in rows]
    X = np.array([[float(r[c]) for c in FEATURE_NAMES] for r in rows]).reshape(-1, N_FEATURES)
    labels = [r.get("label") or None for r in rows]
    return ids, X, labels
