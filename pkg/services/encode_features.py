import logging
import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus
from data.exceptions import FeatureKindMismatch, InvalidCodeSize, NotEnoughDescriptors
from data.models import Dictionary

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300
CENTROID_TOL = 1e-6
LLC_KAPPA = 5
LLC_LAMBDA = 1e-4
PYRAMID_LEVELS = (1, 2, 4)
CHUNK = 8192


def _nearest(x, centers):
    """Index of and squared distance to the nearest center, computed in chunks."""
    labels = np.empty(len(x), dtype=np.int64)
    distances = np.empty(len(x))
    for start in range(0, len(x), CHUNK):
        d2 = cdist(x[start:start + CHUNK], centers, 'sqeuclidean')
        labels[start:start + CHUNK] = np.argmin(d2, axis=1)
        distances[start:start + CHUNK] = d2[np.arange(len(d2)), labels[start:start + CHUNK]]
    return labels, distances


def lloyd(x, centers, max_iterations: int = MAX_ITERATIONS, tol: float = CENTROID_TOL):
    """Lloyd iterations from the given centers.

    Returns (centers, labels, objective history). An empty cluster is moved
    onto the point currently farthest from its center.
    """
    centers = np.array(centers, dtype=np.float64)
    history = []
    for iteration in range(max_iterations):
        labels, distances = _nearest(x, centers)
        history.append(float(distances.sum()))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-12) + 1e-12:
            raise ArithmeticError(f"k-means objective rose from {history[-2]} to {history[-1]}")
        updated = np.empty_like(centers)
        taken = set()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                updated[j] = x[members].mean(axis=0)
                continue
            farthest = next(int(i) for i in np.argsort(-distances, kind='stable') if int(i) not in taken)
            taken.add(farthest)
            logger.warning("k-means cluster %d emptied, reseeding at point %d", j, farthest)
            updated[j] = x[farthest]
        shift = float(np.max(np.linalg.norm(updated - centers, axis=1)))
        centers = updated
        if shift < tol:
            logger.debug("k-means converged after %d iteration(s)", iteration + 1)
            break
    labels, distances = _nearest(x, centers)
    history.append(float(distances.sum()))
    return centers, labels, history


def kmeans(descriptors, k: int, seed: int, kind: str = 'colorbank', training_digest: str = '') -> Dictionary:
    x = np.asarray(descriptors, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise NotEnoughDescriptors(f"need at least {k} distinct descriptors, got {len(np.unique(x, axis=0))}")
    initial, _ = kmeans_plusplus(x, k, random_state=seed)
    centers, _, history = lloyd(x, initial)
    logger.info("%s dictionary: k=%d from %d descriptors, objective %.4g", kind, k, len(x), history[-1])
    return Dictionary(kind=kind, words=centers, training_digest=training_digest)


def llc_encode(descriptors, dictionary, kappa: int = LLC_KAPPA, lam: float = LLC_LAMBDA) -> np.ndarray:
    """Locality-constrained linear codes over the dictionary words.

    Each descriptor is rebuilt from its kappa nearest words with weights summing
    to one; the local covariance is regularized by lam times its trace.
    """
    words = dictionary.words if isinstance(dictionary, Dictionary) else np.asarray(dictionary, dtype=np.float64)
    x = np.asarray(descriptors, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    k = len(words)
    if kappa > k:
        raise InvalidCodeSize(f"kappa={kappa} exceeds the {k} dictionary words")
    if x.shape[1] != words.shape[1]:
        raise FeatureKindMismatch(f"descriptors have {x.shape[1]} dims, dictionary words {words.shape[1]}")

    codes = np.zeros((len(x), k))
    eye = np.eye(kappa)
    for start in range(0, len(x), CHUNK):
        block = x[start:start + CHUNK]
        d2 = cdist(block, words, 'sqeuclidean')
        neighbors = np.argsort(d2, axis=1, kind='stable')[:, :kappa]
        z = words[neighbors] - block[:, None, :]
        covariance = z @ z.transpose(0, 2, 1)
        trace = np.trace(covariance, axis1=1, axis2=2)
        reg = np.where(trace > 0, lam * trace, lam)
        weights = np.linalg.solve(covariance + reg[:, None, None] * eye, np.ones((len(block), kappa, 1)))[..., 0]
        weights /= weights.sum(axis=1, keepdims=True)
        codes[start + np.arange(len(block))[:, None], neighbors] = weights
    return codes[0] if single else codes


def spatial_pyramid_max_pool(codes, positions, crop_size, levels=PYRAMID_LEVELS) -> np.ndarray:
    """Per-word maxima over pyramid cells, level-major then row-major; empty cells are zero."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    width, height = crop_size
    k = codes.shape[1]
    pooled = []
    for level in levels:
        cx = np.clip(np.floor(positions[:, 0] * level / width).astype(np.int64), 0, level - 1)
        cy = np.clip(np.floor(positions[:, 1] * level / height).astype(np.int64), 0, level - 1)
        cells = cy * level + cx
        out = np.zeros((level * level, k))
        order = np.argsort(cells, kind='stable')
        occupied, starts = np.unique(cells[order], return_index=True)
        if len(occupied):
            out[occupied] = np.maximum.reduceat(codes[order], starts, axis=0)
        pooled.append(out.reshape(-1))
    return np.concatenate(pooled)
