"""Fréchet Motion Distance, Diversity and Multimodality.

Features come from a pluggable extractor.  ``flatten`` uses the raw
(channel-major) image vector; ``classifier`` uses the hidden activations of a
small action classifier trained on the real data.  Numbers are only
comparable between reports that used the same extractor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion_data import LabeledDataset, MotionSequence, to_image
from .optim import AdamState, adam_step

DEFAULT_N_PAIRS = 200
DEFAULT_N_PAIRS_PER_CLASS = 20


@dataclass(frozen=True, eq=False)
class FeatureSet:
    features: np.ndarray
    extractor_id: str = "flatten"
    labels: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"features must be a non-empty (n, d) matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", f)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).ravel()
            if lab.shape[0] != f.shape[0]:
                raise ValueError("one label per feature row required")
            object.__setattr__(self, "labels", lab)

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dimension {mu.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)


# -- feature extraction ------------------------------------------------------


def _flat(images: np.ndarray) -> np.ndarray:
    return images.reshape(images.shape[0], -1)


class FlattenExtractor:
    extractor_id = "flatten"

    def __init__(self, joints: int, frames: int):
        self.joints = joints
        self.frames = frames

    @property
    def dim(self) -> int:
        return 3 * self.joints * self.frames

    def _images(self, data) -> np.ndarray:
        if isinstance(data, LabeledDataset):
            imgs = data.images()
        elif isinstance(data, MotionSequence):
            imgs = to_image(data)[None]
        else:
            imgs = np.asarray(data, dtype=np.float64)
            if imgs.ndim == 3:
                imgs = imgs[None]
        if imgs.shape[1:] != (3, self.joints, self.frames):
            raise ValueError(
                f"geometry mismatch: extractor expects (3, {self.joints}, {self.frames}) images, "
                f"got {imgs.shape[1:]}"
            )
        return imgs

    def transform(self, data) -> np.ndarray:
        return _flat(self._images(data))


class ClassifierExtractor(FlattenExtractor):
    """Tanh MLP action classifier; features are its last hidden layer.

    Training is deliberately short (full-batch Adam, 100 iterations): a
    classifier driven to saturation collapses every input onto a few class
    corners and stops distinguishing realistic motion from noise.
    """

    extractor_id = "classifier"

    def __init__(self, joints: int, frames: int, num_classes: int, hidden=(128, 64)):
        super().__init__(joints, frames)
        self.num_classes = num_classes
        self.hidden = tuple(hidden)
        self.params: dict[str, np.ndarray] | None = None

    @property
    def dim(self) -> int:
        return self.hidden[-1]

    def fit(self, dataset: LabeledDataset, rng=None, iterations: int = 100, lr: float = 1e-3):
        rng = np.random.default_rng(rng)
        X = _flat(self._images(dataset))
        y = dataset.labels
        sizes = (X.shape[1], *self.hidden, self.num_classes)
        p = {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(n_in)
            p[f"w{i}"] = rng.uniform(-bound, bound, (n_in, n_out))
            p[f"b{i}"] = np.zeros(n_out)
        self.params = p
        state = AdamState.zeros_like(p)
        onehot = np.eye(self.num_classes)[y]
        for _ in range(iterations):
            acts = self._forward(X)
            logits = acts[-1]
            z = logits - logits.max(axis=1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(axis=1, keepdims=True)
            d = (prob - onehot) / X.shape[0]
            grads = {}
            n_layers = len(sizes) - 1
            for i in reversed(range(n_layers)):
                grads[f"w{i}"] = acts[i].T @ d
                grads[f"b{i}"] = d.sum(axis=0)
                if i:
                    d = (d @ p[f"w{i}"].T) * (1.0 - acts[i] ** 2)
            adam_step(p, grads, state, lr)
        return self

    def _forward(self, X) -> list[np.ndarray]:
        if self.params is None:
            raise RuntimeError("classifier extractor has not been fitted")
        acts = [X]
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            z = acts[-1] @ self.params[f"w{i}"] + self.params[f"b{i}"]
            acts.append(np.tanh(z) if i < n_layers - 1 else z)
        return acts

    def transform(self, data) -> np.ndarray:
        return self._forward(_flat(self._images(data)))[-2]

    def predict(self, data) -> np.ndarray:
        return np.argmax(self._forward(_flat(self._images(data)))[-1], axis=1)


def feature_extract(seq: MotionSequence, extractor) -> np.ndarray:
    return extractor.transform(seq)[0]


def feature_set(dataset: LabeledDataset, extractor) -> FeatureSet:
    return FeatureSet(extractor.transform(dataset), extractor.extractor_id, dataset.labels)


class LeastSquaresClassifier:
    """One-vs-all linear classifier fit by (minimum-norm) least squares on one-hot targets."""

    def fit(self, X, y, num_classes: int | None = None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        C = num_classes or int(y.max()) + 1
        A = np.c_[X, np.ones(len(X))]
        self.W = np.linalg.lstsq(A, np.eye(C)[y], rcond=None)[0]
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.argmax(np.c_[X, np.ones(len(X))] @ self.W, axis=1)

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


# -- Fréchet distance --------------------------------------------------------


def fit_gaussian(fs: FeatureSet | np.ndarray) -> GaussianStats:
    X = fs.features if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = X.mean(axis=0)
    centered = X - mean
    S = centered.T @ centered / (n - 1)
    return GaussianStats(mean, 0.5 * (S + S.T))


def _psd_eigh(S: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh(S)
    if w.min() < -tol:
        raise ValueError(f"covariance is not positive semi-definite (eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), V


def frechet_distance(g1: GaussianStats, g2: GaussianStats, tol: float = 1e-6, jitter: float = 1e-6) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` via symmetric eigendecompositions.

    ``Tr (S1 S2)^(1/2)`` is the sum of square-rooted eigenvalues of
    ``S1^(1/2) S2 S1^(1/2)``, evaluated in the range of ``S1`` so rank-deficient
    covariances (fewer samples than feature dimensions) do not pick up
    round-off from the null space.  If an eigensolver fails to converge,
    ``jitter * I`` is added to both covariances and it is retried.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValueError(f"dimension mismatch: {g1.mean.size} vs {g2.mean.size}")
    diff = g1.mean - g2.mean
    S1, S2 = g1.cov, g2.cov
    try:
        tr_sqrt = _trace_sqrt_product(S1, S2, tol)
    except np.linalg.LinAlgError:
        eye = jitter * np.eye(S1.shape[0])
        S1, S2 = S1 + eye, S2 + eye
        tr_sqrt = _trace_sqrt_product(S1, S2, tol)
    value = float(diff @ diff + np.trace(S1) + np.trace(S2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def _trace_sqrt_product(S1, S2, tol) -> float:
    _psd_eigh(S2, tol)
    w, V = _psd_eigh(S1, tol)
    keep = w > w.max() * S1.shape[0] * 1e-14
    if not keep.any():
        return 0.0
    U = V[:, keep] * np.sqrt(w[keep])
    M = U.T @ S2 @ U
    mu = np.linalg.eigvalsh(0.5 * (M + M.T))
    if mu.min() < -tol:
        raise ValueError(f"covariance product is not positive semi-definite (eigenvalue {mu.min():.3g})")
    return float(np.sqrt(np.clip(mu, 0.0, None)).sum())


# -- diversity ---------------------------------------------------------------


def draw_pairs(n: int, n_pairs: int, rng) -> np.ndarray:
    """``n_pairs`` independent index pairs ``(i, j)`` with ``i != j``, uniform over ``[0, n)``."""
    if n < 2:
        raise ValueError(f"need at least 2 samples to draw pairs, got {n}")
    rng = np.random.default_rng(rng)
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = j + (j >= i)
    return np.stack([i, j], axis=1)


def pair_distances(features: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    return np.linalg.norm(features[pairs[:, 0]] - features[pairs[:, 1]], axis=1)


def _mean_stderr(d: np.ndarray) -> tuple[float, float]:
    if d.size < 2:
        return float(d.mean()), 0.0
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))


def diversity(fs: FeatureSet | np.ndarray, n_pairs: int = DEFAULT_N_PAIRS, rng=None) -> tuple[float, float]:
    """Mean distance between random pairs drawn across all samples, and its standard error."""
    X = fs.features if isinstance(fs, FeatureSet) else np.asarray(fs, dtype=np.float64)
    pairs = draw_pairs(X.shape[0], n_pairs, rng)
    return _mean_stderr(pair_distances(X, pairs))


def multimodality(
    fs: FeatureSet, n_pairs_per_class: int = DEFAULT_N_PAIRS_PER_CLASS, rng=None
) -> tuple[float, float]:
    """Unweighted mean over classes of the within-class pair distance.

    The standard error is computed over all drawn pairs pooled together.
    """
    if fs.labels is None:
        raise ValueError("multimodality needs labeled features")
    rng = np.random.default_rng(rng)
    classes = np.unique(fs.labels)
    for c in classes:
        count = int(np.sum(fs.labels == c))
        if count < 2:
            raise ValueError(f"class {c} has {count} sample(s); multimodality needs at least 2")
    class_means, pooled = [], []
    for c in classes:
        X = fs.features[fs.labels == c]
        d = pair_distances(X, draw_pairs(X.shape[0], n_pairs_per_class, rng))
        class_means.append(d.mean())
        pooled.append(d)
    _, stderr = _mean_stderr(np.concatenate(pooled))
    return float(np.mean(class_means)), stderr
