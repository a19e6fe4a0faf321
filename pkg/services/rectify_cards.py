import logging
from itertools import combinations
import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import ValidationError
from data.exceptions import DegenerateFiducials, InvalidLayout, NotEnoughFiducials, WaxMarkNotFound
from data.models import (
    AlignmentResult,
    CardLayout,
    FiducialDetection,
    Homography,
    LaneCorrection,
    Raster,
    RectificationResult,
)
from services.card_geometry import wax_mark_template

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 64
ADAPTIVE_BLOCK = 31
ADAPTIVE_C = 10
MIN_PATTERN_PX = 14
MIN_HITS = 3
MAX_REFERENCE_POINTS = 6
FINDER_COUNT = 3
COLLINEAR_TOL = 1e-3
RANK_TOL = 1e-10
SEARCH_WINDOW = 15
NCC_THRESHOLD = 0.5
MIN_CORRECTION_PX = 0.05
MIN_CORRECTION_DEG = 0.01
WHITE = (255, 255, 255)


# ---------------------------------------------------------------- finder patterns

def _binarize(image: Raster) -> np.ndarray:
    gray = cv2.GaussianBlur(cv2.cvtColor(image.pixels, cv2.COLOR_RGB2GRAY), (3, 3), 0)
    adaptive = cv2.adaptiveThreshold(gray, 255, cv2.ADAPTIVE_THRESH_MEAN_C, cv2.THRESH_BINARY_INV,
                                     ADAPTIVE_BLOCK, ADAPTIVE_C) > 0
    # large dark cores average themselves out of the adaptive window
    otsu, _ = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    return adaptive | (gray < otsu)


def _runs(line):
    change = np.flatnonzero(line[1:] != line[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [line.size])))
    return starts, lengths, line[starts]


def _ratio_ok(lengths):
    """True where five consecutive runs read 1:1:3:1:1 within half a module."""
    total = lengths.sum(axis=-1)
    module = total / 7.0
    tolerance = module / 2
    outer = np.abs(lengths[..., [0, 1, 3, 4]] - module[..., None]) < tolerance[..., None]
    center = np.abs(lengths[..., 2] - 3 * module) < 3 * tolerance
    return outer.all(axis=-1) & center & (total >= MIN_PATTERN_PX)


def _scan_line(line):
    starts, lengths, values = _runs(line)
    if len(lengths) < 5:
        return np.empty(0), np.empty(0)
    windows = sliding_window_view(lengths, 5)
    hits = np.flatnonzero(values[:len(windows)] & _ratio_ok(windows))
    return starts[hits + 2] + windows[hits, 2] / 2 - 0.5, windows[hits].sum(axis=1)


def _cross_check(line, position, expected_total):
    starts, lengths, values = _runs(line)
    i = int(np.searchsorted(starts, position, side='right')) - 1
    if i < 2 or i + 2 >= len(lengths) or not values[i]:
        return None
    window = lengths[i - 2:i + 3]
    if not _ratio_ok(window):
        return None
    total = int(window.sum())
    if 5 * abs(total - expected_total) >= 2 * expected_total:
        return None
    return starts[i] + lengths[i] / 2 - 0.5, total


def _confirmed_centers(dark):
    confirmed = []
    for y in range(dark.shape[0]):
        for cx, total in zip(*_scan_line(dark[y])):
            vertical = _cross_check(dark[:, int(round(cx))], y, total)
            if vertical is None:
                continue
            cy, v_total = vertical
            horizontal = _cross_check(dark[int(round(cy))], cx, total)
            if horizontal is None:
                continue
            cx, h_total = horizontal
            confirmed.append((float(cx), float(cy), (h_total + v_total) / 14.0))
    return confirmed


def _cluster(confirmed):
    clusters = []
    for hit in confirmed:
        for cluster in clusters:
            x, y, module = np.mean(cluster, axis=0)
            if np.hypot(hit[0] - x, hit[1] - y) < 2 * module:
                cluster.append(hit)
                break
        else:
            clusters.append([hit])
    return [np.array(cluster) for cluster in clusters if len(cluster) >= MIN_HITS]


def detect_finder_patterns(image: Raster) -> list[FiducialDetection]:
    """Locate concentric-square marks by their 1:1:3:1:1 scanline profile.

    Row hits are confirmed along the column and then the row through the
    candidate; confirmed centers are clustered. At most six reference points
    are kept, best score first. The three with the largest modules are the
    finder patterns, the rest corner marks.
    """
    if image.width < MIN_IMAGE_SIDE or image.height < MIN_IMAGE_SIDE:
        raise NotEnoughFiducials(f"image is {image.width}x{image.height}, need at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    found = []
    for cluster in _cluster(_confirmed_centers(_binarize(image))):
        x, y, module = cluster.mean(axis=0)
        score = float(np.clip(len(cluster) / (3 * module), 0.0, 1.0))
        found.append((score, float(x), float(y), float(module)))
    found.sort(key=lambda d: -d[0])
    found = found[:MAX_REFERENCE_POINTS]
    logger.debug("found %d reference point(s)", len(found))
    if len(found) < 4:
        raise NotEnoughFiducials(f"found {len(found)} fiducial(s), need at least 4")

    largest = sorted(range(len(found)), key=lambda i: -found[i][3])[:FINDER_COUNT]
    return [FiducialDetection(center=(x, y), kind='finder' if i in largest else 'corner_mark',
                              score=score, module=module)
            for i, (score, x, y, module) in enumerate(found)]


def match_fiducials(detections: list[FiducialDetection], layout: CardLayout) -> list[tuple]:
    """Pair detections with layout reference points as (canonical, image) tuples.

    The finder at the corner closest to a right angle is top-left and the
    farther of the other two is bottom-left. Corner marks go to the nearest
    position predicted by the affine map through the three finders.
    """
    finders = [d for d in detections if d.kind == 'finder']
    marks = [d for d in detections if d.kind == 'corner_mark']
    if len(finders) < FINDER_COUNT:
        raise NotEnoughFiducials(f"found {len(finders)} finder pattern(s), need {FINDER_COUNT}")
    points = np.array([d.center for d in finders[:FINDER_COUNT]])

    def corner_cosine(i):
        a, b = (points[j] - points[i] for j in range(FINDER_COUNT) if j != i)
        return abs(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))

    top_left = min(range(FINDER_COUNT), key=corner_cosine)
    others = sorted((j for j in range(FINDER_COUNT) if j != top_left),
                    key=lambda j: np.linalg.norm(points[j] - points[top_left]))
    image_finders = points[[top_left, others[0], others[1]]]
    canonical_finders = np.array(layout.finder_centers)
    pairs = [(tuple(c), tuple(p)) for c, p in zip(canonical_finders, image_finders)]

    affine = cv2.getAffineTransform(canonical_finders.astype(np.float32), image_finders.astype(np.float32))
    canonical_marks = np.array(layout.corner_marks)
    predicted = np.hstack([canonical_marks, np.ones((len(canonical_marks), 1))]) @ affine.T
    tolerance = 0.2 * np.linalg.norm(image_finders[1] - image_finders[0])
    candidates = sorted((np.linalg.norm(np.array(mark.center) - predicted[i]), i, j)
                        for i in range(len(predicted)) for j, mark in enumerate(marks))
    used_marks, used_points = set(), set()
    for distance, i, j in candidates:
        if distance >= tolerance or i in used_points or j in used_marks:
            continue
        used_points.add(i)
        used_marks.add(j)
        pairs.append((tuple(canonical_marks[i]), marks[j].center))
    if len(pairs) < 4:
        raise NotEnoughFiducials(f"matched {len(pairs)} reference point(s), need at least 4")
    return pairs


# ---------------------------------------------------------------- homography

def _check_spread(points):
    for a, b, c in combinations(points, 3):
        area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        reach = max(np.sum((b - a) ** 2), np.sum((c - a) ** 2), np.sum((c - b) ** 2))
        if reach == 0 or area2 / reach < COLLINEAR_TOL:
            raise DegenerateFiducials(f"points {a}, {b}, {c} are collinear")


def _normalizer(points) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread == 0:
        raise DegenerateFiducials("all points coincide")
    scale = np.sqrt(2) / spread
    return np.array([[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]])


def _dlt(source, target) -> np.ndarray:
    t_src, t_dst = _normalizer(source), _normalizer(target)
    src = np.hstack([source, np.ones((len(source), 1))]) @ t_src.T
    dst = np.hstack([target, np.ones((len(target), 1))]) @ t_dst.T
    rows = []
    for (x, y, _), (u, v, _) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, singular, vt = np.linalg.svd(np.array(rows))
    if singular[7] <= RANK_TOL * singular[0]:
        raise DegenerateFiducials("correspondences do not determine a unique homography")
    return np.linalg.inv(t_dst) @ vt[-1].reshape(3, 3) @ t_src


def estimate_homography(correspondences, reject_outliers=None) -> Homography:
    """Least-squares DLT homography mapping each pair's first point onto its second.

    reject_outliers, if given, receives (source, target, errors) after the
    first fit and returns a keep mask; the fit is then repeated on the kept pairs.
    """
    if len(correspondences) < 4:
        raise NotEnoughFiducials(f"need at least 4 correspondences, got {len(correspondences)}")
    source = np.array([p[0] for p in correspondences], dtype=np.float64)
    target = np.array([p[1] for p in correspondences], dtype=np.float64)
    _check_spread(source)
    h = _dlt(source, target)

    def reprojection(h, source, target):
        mapped = np.hstack([source, np.ones((len(source), 1))]) @ h.T
        return np.linalg.norm(mapped[:, :2] / mapped[:, 2:3] - target, axis=1)

    errors = reprojection(h, source, target)
    if reject_outliers is not None:
        keep = np.asarray(reject_outliers(source, target, errors), dtype=bool)
        if keep.sum() >= 4 and not keep.all():
            logger.debug("refitting homography without %d outlier(s)", int((~keep).sum()))
            source, target = source[keep], target[keep]
            _check_spread(source)
            h = _dlt(source, target)
            errors = reprojection(h, source, target)
    try:
        return Homography(h=h, residual=float(errors.max()), mean_error=float(errors.mean()))
    except ValidationError as e:
        raise DegenerateFiducials(f"estimated homography is degenerate: {e}") from e


def warp_to_canonical(image: Raster, h: Homography, layout: CardLayout) -> Raster:
    """Sample image at h(p) for every canonical pixel p; outside the photo is white."""
    width, height = layout.canonical_size
    pixels = cv2.warpPerspective(image.pixels, h.h, (width, height),
                                 flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                                 borderMode=cv2.BORDER_CONSTANT, borderValue=WHITE)
    return Raster(pixels=pixels)


# ---------------------------------------------------------------- lane alignment

def _check_canonical(image: Raster, layout: CardLayout):
    if image.size != layout.canonical_size:
        raise InvalidLayout(f"expected a {layout.canonical_size} rectified card, got {image.size}")


def _subpixel(left, peak, right) -> float:
    denominator = left - 2 * peak + right
    if denominator >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denominator, -0.5, 0.5))


def _match_wax_mark(gray, expected, template, window, threshold):
    size = template.shape[0]
    half = (size - 1) / 2
    x0 = max(int(round(expected[0] - half)) - window, 0)
    y0 = max(int(round(expected[1] - half)) - window, 0)
    search = gray[y0:y0 + size + 2 * window, x0:x0 + size + 2 * window]
    if search.shape[0] < size or search.shape[1] < size:
        raise WaxMarkNotFound(f"search window around {expected} leaves the card")
    scores = np.nan_to_num(cv2.matchTemplate(search, template, cv2.TM_CCOEFF_NORMED))
    py, px = np.unravel_index(int(np.argmax(scores)), scores.shape)
    peak = float(scores[py, px])
    if peak < threshold:
        raise WaxMarkNotFound(f"wax mark near {expected} not found (peak {peak:.2f})", score=peak)
    dx = _subpixel(scores[py, px - 1], peak, scores[py, px + 1]) if 0 < px < scores.shape[1] - 1 else 0.0
    dy = _subpixel(scores[py - 1, px], peak, scores[py + 1, px]) if 0 < py < scores.shape[0] - 1 else 0.0
    return (x0 + px + dx + half, y0 + py + dy + half), peak


def find_lane_correction(rectified: Raster, layout: CardLayout, window: int = SEARCH_WINDOW,
                         threshold: float = NCC_THRESHOLD) -> LaneCorrection:
    """Measure where the two wax marks actually sit on a rectified card."""
    _check_canonical(rectified, layout)
    gray = cv2.cvtColor(rectified.pixels, cv2.COLOR_RGB2GRAY)
    template = wax_mark_template(layout.wax_template_size)
    matched, scores = zip(*(_match_wax_mark(gray, e, template, window, threshold) for e in layout.wax_fiducials))
    expected = np.array(layout.wax_fiducials, dtype=np.float64)
    measured = np.array(matched)
    offset = measured.mean(axis=0) - expected.mean(axis=0)
    angle = np.arctan2(*(measured[1] - measured[0])[::-1]) - np.arctan2(*(expected[1] - expected[0])[::-1])
    return LaneCorrection(offset=(float(offset[0]), float(offset[1])), angle_deg=float(np.degrees(angle)),
                          matched=[tuple(float(v) for v in m) for m in matched], scores=list(scores))


def refine_lane_alignment(rectified: Raster, layout: CardLayout) -> AlignmentResult:
    """Undo the wax layer's offset and rotation relative to the printed fiducials.

    A missing wax mark leaves the image untouched and sets the warning flag.
    """
    try:
        correction = find_lane_correction(rectified, layout)
    except WaxMarkNotFound as e:
        logger.warning("lane alignment skipped: %s", e)
        return AlignmentResult(image=rectified, correction=None, warning=True)
    if np.hypot(*correction.offset) < MIN_CORRECTION_PX and abs(correction.angle_deg) < MIN_CORRECTION_DEG:
        return AlignmentResult(image=rectified, correction=correction, warning=False)

    theta = -np.radians(correction.angle_deg)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    measured_mid = np.mean(correction.matched, axis=0)
    expected_mid = np.mean(layout.wax_fiducials, axis=0)
    rigid = np.hstack([rotation, (expected_mid - rotation @ measured_mid)[:, None]])
    pixels = cv2.warpAffine(rectified.pixels, rigid, rectified.size, flags=cv2.INTER_LINEAR,
                            borderMode=cv2.BORDER_CONSTANT, borderValue=WHITE)
    logger.debug("lane correction offset=%s angle=%.3f", correction.offset, correction.angle_deg)
    return AlignmentResult(image=Raster(pixels=pixels), correction=correction, warning=False)


def crop_salient(rectified: Raster, layout: CardLayout) -> Raster:
    _check_canonical(rectified, layout)
    return Raster(pixels=rectified.pixels[layout.crop_window.slices()])


def rectify_card(image: Raster, layout: CardLayout, reject_outliers=None) -> RectificationResult:
    detections = detect_finder_patterns(image)
    pairs = match_fiducials(detections, layout)
    homography = estimate_homography(pairs, reject_outliers)
    logger.debug("homography from %d points, mean error %.3f px", len(pairs), homography.mean_error)
    rectified = warp_to_canonical(image, homography, layout)
    aligned = refine_lane_alignment(rectified, layout)
    return RectificationResult(crop=crop_salient(aligned.image, layout), rectified=aligned.image,
                               homography=homography, detections=detections,
                               alignment_warning=aligned.warning)


def rectify_pipeline(image: Raster, layout: CardLayout) -> Raster:
    return rectify_card(image, layout).crop
