import base64
import hashlib
import json
from typing import Annotated, Literal
import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_serializer,
    field_validator,
    model_validator,
)


def _to_array(value):
    if isinstance(value, np.ndarray):
        return value
    if isinstance(value, dict) and {'dtype', 'shape', 'data'} <= value.keys():
        dtype = np.dtype(value['dtype'])
        raw = base64.b64decode(value['data'])
        return np.frombuffer(raw, dtype=dtype.newbyteorder('<')).astype(dtype).reshape(value['shape'])
    return np.asarray(value)


def _from_array(array):
    array = np.ascontiguousarray(array)
    little = array.astype(array.dtype.newbyteorder('<'))
    return {
        'dtype': array.dtype.name,
        'shape': list(array.shape),
        'data': base64.b64encode(little.tobytes()).decode('ascii'),
    }


# Arrays travel through JSON as base64 little-endian blobs so files stay byte-stable.
NdArray = Annotated[np.ndarray, BeforeValidator(_to_array), PlainSerializer(_from_array, when_used='json')]

FloatList = Annotated[
    np.ndarray,
    BeforeValidator(lambda value: np.asarray(value, dtype=np.float64)),
    PlainSerializer(lambda array: array.tolist(), when_used='json'),
]

Point = tuple[float, float]
RGB = tuple[float, float, float]


class _Frozen(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True, populate_by_name=True)


def digest_of(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


# ---------------------------------------------------------------- core

class Rect(_Frozen):
    x: int
    y: int
    width: int = Field(ge=1)
    height: int = Field(ge=1)

    @property
    def right(self) -> int:
        return self.x + self.width

    @property
    def bottom(self) -> int:
        return self.y + self.height

    @property
    def center(self) -> Point:
        return (self.x + (self.width - 1) / 2, self.y + (self.height - 1) / 2)

    def contains(self, other: 'Rect') -> bool:
        return self.x <= other.x and self.y <= other.y and other.right <= self.right and other.bottom <= self.bottom

    def intersects(self, other: 'Rect') -> bool:
        return self.x < other.right and other.x < self.right and self.y < other.bottom and other.y < self.bottom

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.bottom), slice(self.x, self.right)

    def iou(self, other: 'Rect') -> float:
        w = min(self.right, other.right) - max(self.x, other.x)
        h = min(self.bottom, other.bottom) - max(self.y, other.y)
        inter = max(w, 0) * max(h, 0)
        union = self.width * self.height + other.width * other.height - inter
        return inter / union


class Raster(_Frozen):
    """An 8-bit RGB image stored row-major as (height, width, 3)."""

    pixels: NdArray

    @field_validator('pixels')
    @classmethod
    def _check_pixels(cls, pixels):
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"raster must be height x width x 3, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if pixels.dtype != np.uint8:
            raise ValueError(f"raster must be uint8, got {pixels.dtype}")
        return np.ascontiguousarray(pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 3

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def digest(self) -> str:
        h = hashlib.sha256(f'{self.width}x{self.height}:'.encode('ascii'))
        h.update(self.pixels.tobytes())
        return h.hexdigest()

    @classmethod
    def filled(cls, width, height, color=(255, 255, 255)):
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:] = np.asarray(color, dtype=np.uint8)
        return cls(pixels=pixels)


class CardLayout(_Frozen):
    lane_count: Literal[9, 12]
    canonical_size: tuple[int, int] = (730, 1220)
    crop_window: Rect
    lane_slots: list[int]
    lane_rects: list[Rect]
    timer_slot: int
    swipe_line_y: int
    finder_centers: list[Point]
    finder_module: int
    corner_marks: list[Point]
    corner_module: int
    wax_fiducials: list[Point]
    wax_template_size: int

    @model_validator(mode='after')
    def _check_geometry(self):
        width, height = self.canonical_size
        if not Rect(x=0, y=0, width=width, height=height).contains(self.crop_window):
            raise ValueError("crop window must lie within the canonical card")
        if self.swipe_line_y >= self.crop_window.bottom:
            raise ValueError("crop window must extend to the swipe line")
        if len(self.lane_rects) != self.lane_count or len(self.lane_slots) != self.lane_count:
            raise ValueError(f"expected {self.lane_count} lanes, got {len(self.lane_rects)}")
        crop = Rect(x=0, y=0, width=self.crop_window.width, height=self.crop_window.height)
        for i, rect in enumerate(self.lane_rects):
            if not crop.contains(rect):
                raise ValueError(f"lane {i} lies outside the crop window")
            for other in self.lane_rects[i + 1:]:
                if rect.intersects(other):
                    raise ValueError(f"lane {i} overlaps another lane")
        return self

    @property
    def crop_size(self) -> tuple[int, int]:
        return (self.crop_window.width, self.crop_window.height)

    @property
    def swipe_line_crop_y(self) -> int:
        return self.swipe_line_y - self.crop_window.y

    @property
    def reference_points(self) -> list[Point]:
        return list(self.finder_centers) + list(self.corner_marks)

    @property
    def timer_lane(self) -> int | None:
        if self.timer_slot in self.lane_slots:
            return self.lane_slots.index(self.timer_slot)
        return None


class LabColor(_Frozen):
    L: float = Field(ge=0, le=100)
    a: float
    b: float


# ---------------------------------------------------------------- synth

class ReactionColorModel(_Frozen):
    drugs: list[str]
    reagents: list[str]
    base_colors: NdArray
    timer_color: RGB = (236, 128, 178)
    jitter_sigma: float = Field(default=6.0, ge=0)
    blob_axis_x: tuple[float, float] = (14.0, 21.0)
    blob_axis_y: tuple[float, float] = (50.0, 90.0)
    residual_blob_rate: float = Field(default=0.5, ge=0, le=1)
    residual_margin: float = Field(default=20.0, ge=0)

    @field_validator('base_colors')
    @classmethod
    def _check_colors(cls, colors):
        colors = np.asarray(colors, dtype=np.float64)
        if colors.ndim != 3 or colors.shape[2] != 3:
            raise ValueError("base colors must be drugs x reagents x 3")
        if np.any(colors < 0) or np.any(colors > 255):
            raise ValueError("base colors must lie in [0, 255]")
        return colors

    @model_validator(mode='after')
    def _check_shape(self):
        if self.base_colors.shape[:2] != (len(self.drugs), len(self.reagents)):
            raise ValueError("base colors do not match the drug and reagent catalogs")
        return self

    def color(self, drug: int, reagent: int) -> np.ndarray:
        return self.base_colors[drug, reagent]


class DistortionParams(_Frozen):
    corner_jitter_px: float = Field(default=40.0, ge=0)
    rotation_deg: float = Field(default=10.0, ge=0)
    scale: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = Field(default=5.0, ge=0)
    background: tuple[int, int, int] = (245, 243, 238)
    backdrop: tuple[int, int, int] = (28, 28, 32)
    wax_offset_px: float = Field(default=0.0, ge=0)
    wax_rotation_deg: float = Field(default=0.0, ge=0)

    @field_validator('scale')
    @classmethod
    def _check_scale(cls, scale):
        low, high = scale
        if low <= 0 or high < low:
            raise ValueError(f"scale range must be positive and ordered, got {scale}")
        return scale

    @property
    def is_identity(self) -> bool:
        return (self.corner_jitter_px == 0 and self.rotation_deg == 0 and self.scale == (1.0, 1.0)
                and self.wax_offset_px == 0 and self.wax_rotation_deg == 0)

    @classmethod
    def none(cls, background=(245, 243, 238)):
        return cls(corner_jitter_px=0, rotation_deg=0, scale=(1.0, 1.0), noise_sigma=0, background=background)


class GroundTruth(_Frozen):
    homography: NdArray
    card_corners: NdArray
    lane_blob_centers: list[Point]
    lane_blob_colors: NdArray
    reaction_masks: list[NdArray]
    residual_colors: list[list[RGB]]
    wax_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)


class RenderedCard(_Frozen):
    raster: Raster
    truth: GroundTruth


class ManifestEntry(_Frozen):
    image_path: str
    drug_label: str
    split: Literal['train', 'test']
    fold: int = Field(ge=0)
    seed: int


class DatasetManifest(_Frozen):
    version: Literal[1] = 1
    entries: list[ManifestEntry]
    lane_count: Literal[9, 12]
    folds: int = Field(default=3, ge=1)
    panel: list[int]
    generator_digest: str

    @model_validator(mode='after')
    def _check_entries(self):
        for entry in self.entries:
            if entry.fold >= self.folds:
                raise ValueError(f"entry {entry.image_path} has fold {entry.fold} >= {self.folds}")
            if (entry.split == 'test') != (entry.fold == 0):
                raise ValueError(f"entry {entry.image_path} split disagrees with fold 0 assignment")
        return self

    @property
    def drugs(self) -> list[str]:
        from data.catalog import DRUGS
        present = {entry.drug_label for entry in self.entries}
        return [drug for drug in DRUGS if drug in present] + sorted(present - set(DRUGS))


# ---------------------------------------------------------------- rectify

class FiducialDetection(_Frozen):
    center: Point
    kind: Literal['finder', 'corner_mark', 'wax']
    score: float = Field(ge=0, le=1)
    module: float = 0.0


class Homography(_Frozen):
    h: NdArray
    residual: float = 0.0
    mean_error: float = 0.0

    @field_validator('h')
    @classmethod
    def _normalize(cls, h):
        h = np.asarray(h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)) or abs(h[2, 2]) < 1e-12:
            raise ValueError("homography must be finite with a nonzero h[2][2]")
        h = h / h[2, 2]
        if abs(np.linalg.det(h[:2, :2])) < 1e-12:
            raise ValueError("homography is degenerate")
        return h

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        mapped = np.hstack([pts, np.ones((len(pts), 1))]) @ self.h.T
        return mapped[:, :2] / mapped[:, 2:3]

    def inverse(self) -> 'Homography':
        return Homography(h=np.linalg.inv(self.h))

    @classmethod
    def identity(cls):
        return cls(h=np.eye(3))


class LaneCorrection(_Frozen):
    offset: Point
    angle_deg: float
    matched: list[Point]
    scores: list[float]


class AlignmentResult(_Frozen):
    image: Raster
    correction: LaneCorrection | None
    warning: bool


class RectificationResult(_Frozen):
    crop: Raster
    rectified: Raster
    homography: Homography
    detections: list[FiducialDetection]
    alignment_warning: bool


# ---------------------------------------------------------------- blobs

class Region(_Frozen):
    lane: int
    origin: tuple[int, int]
    mask: NdArray
    colors: NdArray = Field(exclude=True, repr=False)
    mean_rgb: RGB

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def bbox(self) -> Rect:
        ys, xs = np.nonzero(self.mask)
        return Rect(x=int(xs.min()) + self.origin[0], y=int(ys.min()) + self.origin[1],
                    width=int(xs.max() - xs.min()) + 1, height=int(ys.max() - ys.min()) + 1)

    @property
    def pixels(self) -> set[tuple[int, int]]:
        ys, xs = np.nonzero(self.mask)
        return {(int(x) + self.origin[0], int(y) + self.origin[1]) for x, y in zip(xs, ys)}

    @classmethod
    def from_mask(cls, lane, origin, mask, colors):
        if not mask.any():
            raise ValueError("a region needs at least one pixel")
        mean = colors[mask].astype(np.float64).mean(axis=0)
        return cls(lane=lane, origin=origin, mask=mask, colors=colors, mean_rgb=tuple(float(c) for c in mean))


class ReactionBlob(_Frozen):
    lane: int
    mean_rgb: RGB
    max_diff: float = Field(ge=0, le=255)
    size: int = Field(ge=1)


class Fingerprint(_Frozen):
    version: Literal[1] = 1
    lane_colors: list[RGB] = Field(alias='lanes')

    @field_validator('lane_colors')
    @classmethod
    def _check_channels(cls, lanes):
        for color in lanes:
            if any(c < 0 or c > 255 for c in color):
                raise ValueError(f"lane color {color} outside [0, 255]")
        return lanes

    @field_serializer('lane_colors', when_used='json')
    def _round_lanes(self, lanes):
        return [[round(float(c), 3) for c in color] for color in lanes]

    @property
    def descriptor(self) -> np.ndarray:
        return np.asarray(self.lane_colors, dtype=np.float64).reshape(-1)


# ---------------------------------------------------------------- reagentsel

class FingerprintDatabase(_Frozen):
    version: Literal[1] = 1
    drugs: list[str]
    reagents: list[str]
    records: dict[str, list[list[float]]]

    @staticmethod
    def key(drug: str, reagent: str) -> str:
        return f'{drug}|{reagent}'

    @model_validator(mode='after')
    def _check_records(self):
        for key, replicates in self.records.items():
            if not replicates:
                raise ValueError(f"record {key} has no replicates")
            for replicate in replicates:
                if len(replicate) != 27:
                    raise ValueError(f"record {key} must hold 9-lane fingerprints (27 values)")
        return self

    def replicates(self, drug: str, reagent: str) -> np.ndarray:
        from data.exceptions import MissingDatabaseRecord
        key = self.key(drug, reagent)
        if key not in self.records:
            raise MissingDatabaseRecord(f"No fingerprints recorded for {key}")
        return np.asarray(self.records[key], dtype=np.float64).reshape(-1, 9, 3)


class DistanceMatrix(_Frozen):
    m: NdArray
    drugs: list[str]
    reagents: list[str]

    @model_validator(mode='after')
    def _check_entries(self):
        if self.m.shape != (len(self.drugs), len(self.reagents)):
            raise ValueError(f"matrix shape {self.m.shape} does not match the catalogs")
        if np.any(self.m < 0) or np.any(self.m > 255 * np.sqrt(3) + 1e-9):
            raise ValueError("distance entries must lie in [0, 255*sqrt(3)]")
        return self


class SvdResult(_Frozen):
    u: NdArray
    s: NdArray
    v: NdArray


class ReagentPanel(_Frozen):
    version: Literal[1] = 1
    reagents: list[int]
    names: list[str]
    top1: list[int]

    @model_validator(mode='after')
    def _check_unique(self):
        if len(set(self.reagents)) != len(self.reagents):
            raise ValueError("panel reagents must be distinct")
        return self


class UniquenessReport(_Frozen):
    version: Literal[1] = 1
    passed: bool = Field(alias='pass')
    worst_pair: tuple[str, str] | None
    margins: dict[str, float]
    failing: list[str]
    stds: dict[str, float]


class ReagentSelectionConfig(_Frozen):
    panel_size: int = Field(default=12, ge=2)
    mode: Literal['white', 'blank_baseline'] = 'white'
    baseline_drug: str = 'DI water'
    required_reagents: list[int] = []


# ---------------------------------------------------------------- features

FeatureKind = Literal['lab90', 'gist512', 'colorbank420', 'dsift5376', 'combined5796']

FEATURE_LENGTHS = {
    'lab90': 90,
    'gist512': 512,
    'colorbank420': 420,
    'dsift5376': 5376,
    'combined5796': 5796,
}

FEATURE_NAMES = {
    'lab': 'lab90',
    'gist': 'gist512',
    'colorbank': 'colorbank420',
    'dsift': 'dsift5376',
    'colorbank+dsift': 'combined5796',
}


class FeatureVector(_Frozen):
    kind: FeatureKind
    values: FloatList

    @model_validator(mode='after')
    def _check_length(self):
        expected = FEATURE_LENGTHS[self.kind]
        if self.values.shape != (expected,):
            raise ValueError(f"{self.kind} vectors have {expected} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.kind} vector has non-finite values")
        return self


class Dictionary(_Frozen):
    version: Literal[1] = 1
    kind: Literal['colorbank', 'dsift']
    words: NdArray
    training_digest: str

    @field_validator('words')
    @classmethod
    def _check_words(cls, words):
        words = np.asarray(words, dtype=np.float64)
        if words.ndim != 2 or not np.all(np.isfinite(words)):
            raise ValueError("dictionary words must be a finite k x d matrix")
        if len(np.unique(words, axis=0)) != len(words):
            raise ValueError("dictionary words must be distinct")
        return words

    @property
    def size(self) -> int:
        return self.words.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.encode('ascii'))
        h.update(np.ascontiguousarray(self.words, dtype='<f8').tobytes())
        return h.hexdigest()


class LocalDescriptorSet(_Frozen):
    descriptors: NdArray
    positions: NdArray
    patch_sizes: NdArray

    @model_validator(mode='after')
    def _check_counts(self):
        n = self.descriptors.shape[0]
        if n < 1:
            raise ValueError("a descriptor set needs at least one descriptor")
        if self.positions.shape != (n, 2) or self.patch_sizes.shape != (n,):
            raise ValueError("positions and patch sizes must match the descriptor count")
        return self


class FeatureIndex(_Frozen):
    """Cache key of every manifest image's feature vector under a batch output directory."""
    version: Literal[1] = 1
    kind: FeatureKind
    entries: dict[str, str]


# ---------------------------------------------------------------- learn

class LabeledSet(_Frozen):
    kind: FeatureKind
    vectors: NdArray
    labels: NdArray
    ids: list[str]

    @model_validator(mode='after')
    def _check_lengths(self):
        n = len(self.ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("vectors, labels and ids must have equal lengths")
        if self.vectors.shape[1] != FEATURE_LENGTHS[self.kind]:
            raise ValueError(f"{self.kind} vectors must have {FEATURE_LENGTHS[self.kind]} values")
        return self

    @classmethod
    def from_vectors(cls, vectors: list[FeatureVector], labels, ids):
        kinds = {vector.kind for vector in vectors}
        if len(kinds) != 1:
            raise ValueError(f"a labeled set holds one feature kind, got {sorted(kinds)}")
        return cls(kind=kinds.pop(), vectors=np.vstack([v.values for v in vectors]),
                   labels=np.asarray(labels, dtype=np.int64), ids=list(ids))

    def subset(self, indices) -> 'LabeledSet':
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledSet(kind=self.kind, vectors=self.vectors[indices], labels=self.labels[indices],
                          ids=[self.ids[i] for i in indices])


class Standardizer(_Frozen):
    mean: NdArray
    scale: NdArray

    def transform(self, vectors) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / self.scale


class PairModel(_Frozen):
    classes: tuple[int, int]
    support: NdArray
    coef: NdArray
    bias: float
    converged: bool = True


class TrainedModel(_Frozen):
    version: Literal[1] = 1
    classifier: Literal['knn', 'svm']
    feature_kind: FeatureKind
    n_classes: int = Field(ge=1)
    class_names: list[str]
    standardizer: Standardizer
    exemplars: NdArray | None = None
    exemplar_labels: NdArray | None = None
    support_vectors: NdArray | None = None
    pairs: list[PairModel] = []
    gamma: float | None = None
    C: float | None = None
    dictionaries: dict[str, Dictionary] = {}
    fold: int | None = None
    lane_count: Literal[9, 12] = 12

    @model_validator(mode='after')
    def _check_classifier(self):
        if self.classifier == 'knn':
            if self.exemplars is None or len(self.exemplars) == 0:
                raise ValueError("a kNN model needs at least one exemplar")
        else:
            if self.support_vectors is None or self.gamma is None or self.C is None or not self.pairs:
                raise ValueError("an SVM model needs support vectors, pairs, gamma and C")
            for pair in self.pairs:
                if np.any(np.abs(pair.coef) > self.C + 1e-9):
                    raise ValueError(f"pair {pair.classes} has a dual coefficient above C")
                if abs(float(pair.coef.sum())) > 1e-6:
                    raise ValueError(f"pair {pair.classes} violates sum(alpha*y) = 0")
        return self


class Prediction(_Frozen):
    label: int
    name: str
    confidence: NdArray


class ConfusionMatrix(_Frozen):
    counts: NdArray
    confidence: NdArray
    class_names: list[str]


class Evaluation(_Frozen):
    top1_accuracy: float
    correct: int
    total: int
    confusion: ConfusionMatrix


class HyperparamSearch(_Frozen):
    C: float
    gamma: float
    scores: dict[str, float]


# ---------------------------------------------------------------- cli

class GeneratorConfig(_Frozen):
    drugs: list[str] | None = None
    images_per_drug: int = Field(default=30, ge=1)
    lane_count: Literal[9, 12] = 12
    panel: list[int] | None = None
    folds: int = Field(default=3, ge=1)
    color_seed: int = 0
    jitter_sigma: float = Field(default=6.0, ge=0)
    distortion: DistortionParams = DistortionParams(wax_offset_px=3.0, wax_rotation_deg=0.5)

    def digest(self) -> str:
        return digest_of(self.model_dump(mode='json'))


class ExperimentConfig(_Frozen):
    manifest: str
    features: list[str] = ['lab', 'colorbank+dsift']
    classifiers: list[Literal['knn', 'svm']] = ['knn', 'svm']
    folds: int = Field(default=3, ge=2)
    seed: int = 0
    perturbation: Literal['none', 'lane_permutation', 'unrectified'] = 'none'
    output_dir: str = 'report'
    c_grid: list[float] = [2.0 ** e for e in range(-2, 11, 2)]
    gamma_grid: list[float] = [2.0 ** e for e in range(-12, 3, 3)]
    dictionary_sample: int = Field(default=100_000, ge=1)

    @field_validator('features')
    @classmethod
    def _check_features(cls, features):
        unknown = [f for f in features if f not in FEATURE_NAMES]
        if unknown:
            raise ValueError(f"unknown feature kinds {unknown}; choose from {sorted(FEATURE_NAMES)}")
        return features

    def digest(self) -> str:
        return digest_of(self.model_dump(mode='json'))


class CellReport(_Frozen):
    feature: str
    classifier: str
    fold_correct: list[int]
    fold_total: list[int]
    fold_accuracies: list[float]
    mean_accuracy: float
    std_accuracy: float
    hyperparams: list[dict[str, float]]
    confusion: list[list[int]]
    confidence: list[list[float]]


class ExperimentReport(_Frozen):
    version: Literal[1] = 1
    config_digest: str
    seed: int
    perturbation: str
    class_names: list[str]
    cells: list[CellReport]
