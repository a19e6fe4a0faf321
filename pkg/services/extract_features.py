import logging
from functools import lru_cache
import cv2
import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial.distance import cdist
from skimage.filters import gabor_kernel
from data.exceptions import FeatureKindMismatch, PatchTooLarge
from data.models import FEATURE_NAMES, Dictionary, FeatureVector, LocalDescriptorSet, Raster, digest_of
from services.card_geometry import rgb_to_lab_array
from services.encode_features import kmeans, llc_encode, spatial_pyramid_max_pool

logger = logging.getLogger(__name__)

LAB_BINS = 30
LAB_RANGES = ((0.0, 100.0), (-110.0, 110.0), (-110.0, 110.0))

GIST_SIZE = 256
GIST_FREQUENCIES = (0.25, 0.125, 0.0625, 0.03125)
GIST_ORIENTATIONS = 8
GIST_GRID = 4

COLOR_NAMES = {
    'black': (0, 0, 0),
    'blue': (30, 60, 200),
    'brown': (130, 80, 40),
    'grey': (128, 128, 128),
    'green': (40, 160, 60),
    'orange': (250, 140, 30),
    'pink': (245, 160, 200),
    'purple': (130, 50, 160),
    'red': (210, 30, 40),
    'white': (255, 255, 255),
    'yellow': (245, 225, 50),
}
COLOR_PATCH_SIZES = (8, 16, 24)

SIFT_STRIDE = 8
SIFT_PATCH_SIZES = (16, 24, 32)
SIFT_WINDOW = 6.0

DICTIONARY_SIZES = {'colorbank': 20, 'dsift': 256}
DICTIONARY_SAMPLE = 100_000


def lab_histogram(crop: Raster) -> FeatureVector:
    """Three 30-bin marginal L*a*b* histograms, each normalized to sum to one."""
    lab = rgb_to_lab_array(crop.pixels).reshape(-1, 3)
    blocks = []
    for channel, (low, high) in enumerate(LAB_RANGES):
        counts, _ = np.histogram(np.clip(lab[:, channel], low, high), bins=LAB_BINS, range=(low, high))
        blocks.append(counts / len(lab))
    return FeatureVector(kind='lab90', values=np.concatenate(blocks))


@lru_cache(maxsize=1)
def gabor_bank() -> tuple:
    kernels = []
    for frequency in GIST_FREQUENCIES:
        for k in range(GIST_ORIENTATIONS):
            kernel = gabor_kernel(frequency, theta=k * np.pi / GIST_ORIENTATIONS)
            kernels.append(kernel - kernel.mean())
    return tuple(kernels)


def gist(crop: Raster) -> FeatureVector:
    """Mean Gabor response magnitude of 32 filters over a 4x4 grid, L2-normalized.

    Blocks are ordered scale-major, then orientation, then grid cell.
    """
    gray = cv2.cvtColor(crop.pixels, cv2.COLOR_RGB2GRAY)
    if np.ptp(gray) == 0:
        return FeatureVector(kind='gist512', values=np.zeros(GIST_GRID * GIST_GRID * len(gabor_bank())))
    gray = cv2.resize(gray.astype(np.float64) / 255.0, (GIST_SIZE, GIST_SIZE), interpolation=cv2.INTER_AREA)
    cell = GIST_SIZE // GIST_GRID
    values = []
    for kernel in gabor_bank():
        ph, pw = kernel.shape[0] // 2, kernel.shape[1] // 2
        padded = np.pad(gray, ((ph, ph), (pw, pw)), mode='symmetric')
        response = np.abs(fftconvolve(padded, kernel, mode='valid'))
        values.append(response.reshape(GIST_GRID, cell, GIST_GRID, cell).mean(axis=(1, 3)).reshape(-1))
    values = np.concatenate(values)
    norm = np.linalg.norm(values)
    values = values / norm if norm > 1e-6 else np.zeros_like(values)
    return FeatureVector(kind='gist512', values=values)


@lru_cache(maxsize=1)
def _name_prototypes() -> np.ndarray:
    return rgb_to_lab_array(np.array([list(COLOR_NAMES.values())], dtype=np.float64))[0]


def color_name_map(crop: Raster) -> np.ndarray:
    """Index into COLOR_NAMES of the nearest prototype (in L*a*b*) for every pixel."""
    lab = rgb_to_lab_array(crop.pixels).reshape(-1, 3)
    names = np.argmin(cdist(lab, _name_prototypes(), 'sqeuclidean'), axis=1)
    return names.reshape(crop.height, crop.width)


def _patch_grid(width, height, size, stride):
    if size > width or size > height:
        raise PatchTooLarge(f"patch of {size} px does not fit a {width}x{height} image")
    xs = np.arange(0, width - size + 1, stride)
    ys = np.arange(0, height - size + 1, stride)
    return xs, ys


def extract_patch_histograms(name_map, patch_sizes=COLOR_PATCH_SIZES) -> LocalDescriptorSet:
    """11-bin color-name histograms of dense patches; stride is half the patch size."""
    name_map = np.asarray(name_map)
    height, width = name_map.shape
    n_names = len(COLOR_NAMES)
    one_hot = (name_map[None, :, :] == np.arange(n_names)[:, None, None]).astype(np.int64)
    integral = np.zeros((n_names, height + 1, width + 1), dtype=np.int64)
    integral[:, 1:, 1:] = one_hot.cumsum(axis=1).cumsum(axis=2)

    descriptors, positions, sizes = [], [], []
    for size in patch_sizes:
        xs, ys = _patch_grid(width, height, size, size // 2)
        y0, x0 = np.meshgrid(ys, xs, indexing='ij')
        y0, x0 = y0.reshape(-1), x0.reshape(-1)
        counts = (integral[:, y0 + size, x0 + size] - integral[:, y0, x0 + size]
                  - integral[:, y0 + size, x0] + integral[:, y0, x0])
        descriptors.append(counts.T / float(size * size))
        positions.append(np.stack([x0 + (size - 1) / 2, y0 + (size - 1) / 2], axis=1))
        sizes.append(np.full(len(x0), size))
    return LocalDescriptorSet(descriptors=np.vstack(descriptors), positions=np.vstack(positions),
                              patch_sizes=np.concatenate(sizes))


def _check_dictionary(dictionary: Dictionary, kind: str):
    if dictionary.kind != kind or dictionary.size != DICTIONARY_SIZES[kind]:
        raise FeatureKindMismatch(f"expected a {DICTIONARY_SIZES[kind]}-word {kind} dictionary, "
                                  f"got {dictionary.size} {dictionary.kind} words")


def _bank_feature(descriptors: LocalDescriptorSet, crop: Raster, dictionary: Dictionary) -> np.ndarray:
    codes = llc_encode(descriptors.descriptors, dictionary)
    return spatial_pyramid_max_pool(codes, descriptors.positions, crop.size)


def color_bank(crop: Raster, dictionary: Dictionary) -> FeatureVector:
    _check_dictionary(dictionary, 'colorbank')
    descriptors = extract_patch_histograms(color_name_map(crop))
    return FeatureVector(kind='colorbank420', values=_bank_feature(descriptors, crop, dictionary))


def dense_sift_descriptors(crop: Raster, stride: int = SIFT_STRIDE, patch_sizes=SIFT_PATCH_SIZES) -> LocalDescriptorSet:
    """Upright SIFT descriptors computed by OpenCV on a dense grid of square patches."""
    gray = cv2.cvtColor(crop.pixels, cv2.COLOR_RGB2GRAY)
    height, width = gray.shape
    sift = cv2.SIFT_create()
    descriptors, positions, sizes = [], [], []
    for size in patch_sizes:
        xs, ys = _patch_grid(width, height, size, stride)
        y0, x0 = np.meshgrid(ys, xs, indexing='ij')
        centers = np.stack([x0.reshape(-1) + (size - 1) / 2, y0.reshape(-1) + (size - 1) / 2], axis=1)
        # the 4x4 descriptor window spans SIFT_WINDOW keypoint diameters
        keypoints = [cv2.KeyPoint(float(x), float(y), size / SIFT_WINDOW, 0.0) for x, y in centers]
        _, block = sift.compute(gray, keypoints)
        descriptors.append(block.astype(np.float64))
        positions.append(centers)
        sizes.append(np.full(len(block), size))

    raw = np.vstack(descriptors)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    normalized = np.where(norms > 0, raw / np.where(norms > 0, norms, 1.0), 0.0)
    return LocalDescriptorSet(descriptors=normalized, positions=np.vstack(positions),
                              patch_sizes=np.concatenate(sizes))


def dense_sift_feature(crop: Raster, dictionary: Dictionary) -> FeatureVector:
    _check_dictionary(dictionary, 'dsift')
    return FeatureVector(kind='dsift5376', values=_bank_feature(dense_sift_descriptors(crop), crop, dictionary))


def combine(color: FeatureVector, sift: FeatureVector) -> FeatureVector:
    if color.kind != 'colorbank420' or sift.kind != 'dsift5376':
        raise FeatureKindMismatch(f"combine needs colorbank420 and dsift5376, got {color.kind} and {sift.kind}")
    return FeatureVector(kind='combined5796', values=np.concatenate([color.values, sift.values]))


def local_descriptors(crop: Raster, kind: str) -> np.ndarray:
    if kind == 'colorbank':
        return extract_patch_histograms(color_name_map(crop)).descriptors
    if kind == 'dsift':
        return dense_sift_descriptors(crop).descriptors
    raise FeatureKindMismatch(f"{kind} has no dictionary")


def train_dictionary(crops: list[Raster], kind: str, seed: int, sample: int = DICTIONARY_SAMPLE) -> Dictionary:
    """k-means dictionary over at most sample descriptors drawn evenly from the given crops.

    Only training crops may be passed in.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), len(crops)]))
    quota = -(-sample // max(len(crops), 1))
    pool = []
    for crop in crops:
        descriptors = local_descriptors(crop, kind)
        if len(descriptors) > quota:
            descriptors = descriptors[np.sort(rng.choice(len(descriptors), quota, replace=False))]
        pool.append(descriptors)
    pool = np.vstack(pool)
    if len(pool) > sample:
        pool = pool[np.sort(rng.choice(len(pool), sample, replace=False))]
    digest = digest_of({'kind': kind, 'seed': int(seed), 'sample': sample, 'crops': [c.digest() for c in crops]})
    return kmeans(pool, DICTIONARY_SIZES[kind], seed, kind=kind, training_digest=digest)


def extract_feature(crop: Raster, feature: str, dictionaries: dict[str, Dictionary] | None = None) -> FeatureVector:
    """Compute a named feature ('lab', 'gist', 'colorbank', 'dsift', 'colorbank+dsift')."""
    if feature not in FEATURE_NAMES:
        raise FeatureKindMismatch(f"unknown feature {feature!r}")
    dictionaries = dictionaries or {}

    def dictionary(kind):
        if kind not in dictionaries:
            raise FeatureKindMismatch(f"{feature} needs a {kind} dictionary")
        return dictionaries[kind]

    if feature == 'lab':
        return lab_histogram(crop)
    if feature == 'gist':
        return gist(crop)
    if feature == 'colorbank':
        return color_bank(crop, dictionary('colorbank'))
    if feature == 'dsift':
        return dense_sift_feature(crop, dictionary('dsift'))
    return combine(color_bank(crop, dictionary('colorbank')), dense_sift_feature(crop, dictionary('dsift')))


def dictionary_kinds(feature: str) -> list[str]:
    return [kind for kind in ('colorbank', 'dsift') if kind in feature.split('+')]
