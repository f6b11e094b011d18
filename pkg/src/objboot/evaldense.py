"""Dense nearest-neighbour segmentation and linear-probe evaluation on frozen patch features."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .encoder import NumericError, Params, encode, log_softmax, softmax, view_patches
from .synthdata import SceneImage, full_view


@dataclass
class FeatureStore:
    features: np.ndarray  # (M, d)
    labels: np.ndarray  # (M,)
    image_ids: np.ndarray  # (M,)
    class_count: int

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class SegMetrics:
    per_class_iou: np.ndarray  # (C,), NaN where the class is absent from predictions and labels
    miou: float


def dense_features(params: Params, scenes: list[SceneImage], chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Frozen tokens (S, N, d) and patch labels (S, N) of un-augmented scenes."""
    views = [full_view(s) for s in scenes]
    feats = []
    for start in range(0, len(views), chunk):
        tokens, _ = encode(params, view_patches(views[start:start + chunk]))
        feats.append(tokens)
    return np.concatenate(feats), np.stack([v.patch_labels for v in views])


def subsample_indices(n_images: int, ratio: int, seed: int) -> np.ndarray:
    """ceil(n/ratio) distinct image indices on a stride of ``ratio`` from a seeded offset."""
    if ratio < 1:
        raise ConfigError("subsample ratio must be >= 1")
    if ratio > n_images:
        raise ConfigError(f"subsample ratio {ratio} exceeds the {n_images} training images")
    offset = int(np.random.default_rng(seed).integers(ratio))
    count = math.ceil(n_images / ratio)
    return np.sort((offset + ratio * np.arange(count)) % n_images)


def store_from_features(features: np.ndarray, labels: np.ndarray, image_ids, ratio: int, seed: int,
                        class_count: int) -> FeatureStore:
    idx = subsample_indices(len(features), ratio, seed)
    n = features.shape[1]
    store = FeatureStore(
        features=features[idx].reshape(-1, features.shape[-1]),
        labels=labels[idx].reshape(-1),
        image_ids=np.repeat(np.asarray(image_ids)[idx], n),
        class_count=class_count,
    )
    if len(store) == 0:
        raise ConfigError("empty feature store")
    if not np.all(np.isfinite(store.features)):
        raise NumericError("feature store")
    return store


def build_store(params: Params, scenes: list[SceneImage], ratio: int, seed: int = 0,
                class_count: int | None = None) -> FeatureStore:
    feats, labels = dense_features(params, scenes)
    c = class_count if class_count is not None else int(labels.max()) + 1
    return store_from_features(feats, labels, [s.image_id for s in scenes], ratio, seed, c)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def topk_neighbors(store_features: np.ndarray, queries: np.ndarray, k: int,
                   chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Indices and cosines of the k most similar store rows; ties go to the smaller index."""
    keys = _unit(store_features)
    all_idx, all_cos = [], []
    for start in range(0, len(queries), chunk):
        cos = _unit(queries[start:start + chunk]) @ keys.T
        kth = -np.partition(-cos, k - 1, axis=1)[:, k - 1]
        idx = np.empty((len(cos), k), dtype=np.int64)
        for q in range(len(cos)):
            cand = np.flatnonzero(cos[q] >= kth[q])
            order = np.lexsort((cand, -cos[q, cand]))[:k]
            idx[q] = cand[order]
        all_idx.append(idx)
        all_cos.append(np.take_along_axis(cos, idx, axis=1))
    return np.concatenate(all_idx), np.concatenate(all_cos)


def vote(neighbor_labels: np.ndarray, neighbor_cos: np.ndarray, class_count: int) -> np.ndarray:
    """Majority vote; ties by smallest summed cosine distance, then smallest class id."""
    q = len(neighbor_labels)
    rows = np.repeat(np.arange(q), neighbor_labels.shape[1])
    counts = np.zeros((q, class_count))
    dist = np.zeros((q, class_count))
    np.add.at(counts, (rows, neighbor_labels.ravel()), 1)
    np.add.at(dist, (rows, neighbor_labels.ravel()), (1.0 - neighbor_cos).ravel())
    leaders = counts == counts.max(axis=1, keepdims=True)
    return np.argmin(np.where(leaders, dist, np.inf), axis=1)


def knn_predict(store: FeatureStore, query_features: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    if len(store) == 0:
        raise ValueError("empty feature store")
    if not 1 <= k <= len(store):
        raise ConfigError(f"k={k} must be in [1, {len(store)}]")
    idx, cos = topk_neighbors(store.features, query_features, k, chunk)
    return vote(store.labels[idx], cos, store.class_count)


def miou(preds: np.ndarray, labels: np.ndarray, class_count: int) -> SegMetrics:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    conf = np.bincount(labels.ravel() * class_count + preds.ravel(),
                       minlength=class_count * class_count).reshape(class_count, class_count)
    inter = np.diag(conf).astype(float)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    iou = np.full(class_count, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return SegMetrics(iou, float(np.mean(iou[present])) if present.any() else float("nan"))


@dataclass
class ProbeResult:
    weights: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    losses: list[float]
    train_accuracy: float
    metrics: SegMetrics | None


def linear_probe(train: FeatureStore, val: FeatureStore | None, epochs: int, lr: float,
                 seed: int = 0) -> ProbeResult:
    """Full-batch gradient descent on a softmax-regression head over unit-normalised features."""
    if len(train) == 0 or (val is not None and len(val) == 0):
        raise ValueError("linear probe needs non-empty stores")
    x = _unit(train.features)
    c = train.class_count
    y = np.zeros((len(x), c))
    y[np.arange(len(x)), train.labels] = 1.0
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=(x.shape[1], c))
    b = np.zeros(c)
    losses = []
    for _ in range(epochs):
        logits = x @ w + b
        loss = float(-(y * log_softmax(logits)).sum(axis=1).mean())
        if not math.isfinite(loss):
            raise NumericError("linear probe", "non-finite loss")
        losses.append(loss)
        g = (softmax(logits) - y) / len(x)
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    train_acc = float(np.mean(np.argmax(x @ w + b, axis=1) == train.labels))
    metrics = None
    if val is not None:
        preds = np.argmax(_unit(val.features) @ w + b, axis=1)
        metrics = miou(preds, val.labels, c)
    return ProbeResult(w, b, losses, train_acc, metrics)
