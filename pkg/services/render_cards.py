import logging
from pathlib import Path
import cv2
import numpy as np
from joblib import Parallel, delayed
from skimage import color as skcolor
from data import database
from data.catalog import BLANK_DRUG, DRUGS, REAGENTS, TIMER_LANE, slug
from data.exceptions import ConfigError, InvalidLayout, InvalidPermutation, UnknownDrug
from data.models import (
    CardLayout,
    DatasetManifest,
    DistortionParams,
    FingerprintDatabase,
    GeneratorConfig,
    GroundTruth,
    ManifestEntry,
    Raster,
    ReactionColorModel,
    ReagentPanel,
    RenderedCard,
)
from services import select_reagents
from services.card_geometry import canonical_layout, finder_pattern_mask, lane_slot_rect, wax_mark_mask
from services.extract_blobs import extract_fingerprint, max_diff
from services.train_classifiers import assign_folds

logger = logging.getLogger(__name__)

PAPER = (245, 243, 238)
INK = (20, 20, 20)
WAX_INK = (60, 60, 60)
SEPARATOR_INK = (70, 70, 78)
SWIPE_INK = (150, 150, 150)
SWIPE_BAND = 10

CONCENTRATION_STRENGTHS = (0.6, 0.8, 1.0)
REACTION_PROBABILITY = 0.75
MIN_REACTION_DISTANCE = 90.0
MIN_REACTION_SPREAD = 30.0
NEAR_PAPER_TINT = 8.0
MIN_RESIDUAL_STRENGTH = 0.15
MAX_RESIDUAL_STRENGTH = 0.6
BOUNDARY_RIPPLE = 0.06
POLYGON_VERTICES = 72
BLOB_CLEARANCE = 4
CANVAS_MARGIN = 16
COLOR_MODEL_ATTEMPTS = 50


def _generator(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def card_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _drug_index(color_model: ReactionColorModel, drug: str) -> int:
    try:
        return color_model.drugs.index(drug)
    except ValueError as e:
        raise UnknownDrug(f"{drug!r} is not in the drug catalog") from e


# ---------------------------------------------------------------- colors

def _reaction_color(rng, paper) -> np.ndarray:
    while True:
        hsv = np.array([rng.uniform(0, 1), rng.uniform(0.5, 1.0), rng.uniform(0.5, 0.95)])
        rgb = skcolor.hsv2rgb(hsv.reshape(1, 1, 3))[0, 0] * 255.0
        if np.linalg.norm(rgb - paper) >= MIN_REACTION_DISTANCE and max_diff(rgb) >= max_diff(paper) + MIN_REACTION_SPREAD:
            return rgb


def _draw_base_colors(rng, drugs, reagents, background) -> np.ndarray:
    paper = np.asarray(background, dtype=np.float64)
    colors = np.empty((len(drugs), len(reagents), 3))
    for d, drug in enumerate(drugs):
        for r in range(len(reagents)):
            if drug != BLANK_DRUG and rng.random() < REACTION_PROBABILITY:
                colors[d, r] = _reaction_color(rng, paper)
            else:
                colors[d, r] = paper - rng.uniform(0, NEAR_PAPER_TINT, 3)
    return colors


def default_color_model(seed: int = 0, drugs=None, reagents=None, jitter_sigma: float = 6.0,
                        background=PAPER) -> ReactionColorModel:
    """Seeded drug x reagent color table whose default panel passes the uniqueness check.

    About three in four (drug, reagent) pairs react with a saturated hue; the rest
    (and every reagent on the blank) leave a faint near-paper tint.
    """
    drugs = list(drugs or DRUGS)
    reagents = list(reagents or REAGENTS)
    rng = _generator(seed, 0xC010)
    for attempt in range(COLOR_MODEL_ATTEMPTS):
        model = ReactionColorModel(drugs=drugs, reagents=reagents, jitter_sigma=jitter_sigma,
                                   base_colors=_draw_base_colors(rng, drugs, reagents, background))
        panel = default_panel(model, background=background)
        db = build_fingerprint_database(model, replicates=3, seed=seed, background=background)
        report = select_reagents.verify_uniqueness(
            select_reagents.panel_fingerprints(db, panel, model.timer_color))
        if report.passed:
            logger.debug("color model accepted after %d attempt(s)", attempt + 1)
            return model
        logger.info("color model draw %d failed uniqueness (worst pair %s), redrawing", attempt + 1, report.worst_pair)
    raise ConfigError(f"No color table passed the uniqueness check after {COLOR_MODEL_ATTEMPTS} draws")


def default_panel(color_model: ReactionColorModel, panel_size: int = 12, required_reagents=(),
                  background=PAPER) -> ReagentPanel:
    db = build_fingerprint_database(color_model, replicates=1, seed=0, jitter=False, background=background)
    m = select_reagents.build_distance_matrix(db)
    return select_reagents.select_panel(m, select_reagents.svd(m), panel_size, required_reagents=required_reagents)


def _lane_plan(layout: CardLayout, panel, n_reagents: int) -> list[tuple[int, float]]:
    """(reagent index, concentration strength) for every lane of the layout."""
    panel = [int(r) for r in panel]
    if layout.lane_count == 12:
        if len(panel) != 12:
            raise ConfigError(f"a 12-lane card needs 12 panel entries, got {len(panel)}")
        plan = [(r, 1.0) for r in panel]
    else:
        if len(panel) != 1 or panel[0] == TIMER_LANE:
            raise ConfigError(f"a 9-lane card carries exactly one reagent, got {panel}")
        per_group = layout.lane_count // len(CONCENTRATION_STRENGTHS)
        plan = [(panel[0], s) for s in CONCENTRATION_STRENGTHS for _ in range(per_group)]
    for reagent, _ in plan:
        if reagent != TIMER_LANE and not 0 <= reagent < n_reagents:
            raise ConfigError(f"reagent index {reagent} is outside the catalog of {n_reagents}")
    return plan


def _jittered(rng, base, sigma, jitter=True) -> np.ndarray:
    noise = rng.normal(0.0, sigma, 3) if jitter and sigma > 0 else np.zeros(3)
    return np.clip(np.rint(np.asarray(base, dtype=np.float64) + noise), 0, 255)


def _paint_lane_colors(rng, drug_index, plan, color_model, background, jitter=True) -> np.ndarray:
    paper = np.asarray(background, dtype=np.float64)
    colors = []
    for reagent, strength in plan:
        if reagent == TIMER_LANE:
            base = np.asarray(color_model.timer_color, dtype=np.float64)
        else:
            base = paper + strength * (color_model.color(drug_index, reagent) - paper)
        colors.append(_jittered(rng, base, color_model.jitter_sigma, jitter))
    return np.array(colors)


def _residual_color(rng, color, background, margin):
    paper = np.asarray(background, dtype=np.float64)
    spread = max_diff(color - paper)
    if spread == 0:
        return None
    # rounding to 8 bits may add one level of spread
    t_max = min((max_diff(color) - margin - 1 - max_diff(paper)) / spread, MAX_RESIDUAL_STRENGTH)
    if t_max < MIN_RESIDUAL_STRENGTH:
        return None
    residual = np.clip(np.rint(paper + rng.uniform(MIN_RESIDUAL_STRENGTH, t_max) * (color - paper)), 0, 255)
    if max_diff(residual) > max_diff(color) - margin:
        return None
    return residual


# ---------------------------------------------------------------- shapes

def _blob_polygon(rng, center, axes) -> np.ndarray:
    theta = np.linspace(0, 2 * np.pi, POLYGON_VERTICES, endpoint=False)
    ripple = 1 + BOUNDARY_RIPPLE * np.sin(rng.integers(3, 7) * theta + rng.uniform(0, 2 * np.pi))
    return np.stack([center[0] + axes[0] * ripple * np.cos(theta),
                     center[1] + axes[1] * ripple * np.sin(theta)], axis=1)


def _fill_polygon(shape, polygon) -> np.ndarray:
    mask = np.zeros(shape, dtype=np.uint8)
    cv2.fillPoly(mask, [np.rint(polygon * 16).astype(np.int32)], 1, lineType=cv2.LINE_8, shift=4)
    return mask.astype(bool)


def _plant_lane(rng, width, height, color, color_model, background, residuals=True):
    """Masks (lane-local) and colors of the reaction blob and its fainter residual blobs."""
    reach = 1 + BOUNDARY_RIPPLE
    ax = min(rng.uniform(*color_model.blob_axis_x), (width / 2 - 2) / reach)
    ay = min(rng.uniform(*color_model.blob_axis_y), (height / 2 - 2 * BLOB_CLEARANCE) / reach)
    cx = (width - 1) / 2 + rng.uniform(-1.5, 1.5)
    cy = rng.uniform(ay * reach + BLOB_CLEARANCE, height - 1 - ay * reach - BLOB_CLEARANCE)
    reaction = _fill_polygon((height, width), _blob_polygon(rng, (cx, cy), (ax, ay)))

    planted = []
    count = rng.binomial(2, color_model.residual_blob_rate) if residuals else 0
    gaps = [(0.0, cy - ay * reach), (cy + ay * reach, float(height))]
    rng.shuffle(gaps)
    for top, bottom in gaps[:count]:
        rx, ry = rng.uniform(8, 14), rng.uniform(10, 22)
        free = bottom - top - 2 * BLOB_CLEARANCE
        if free < 2 * ry * reach + 2:
            continue
        residual = _residual_color(rng, color, background, color_model.residual_margin)
        if residual is None:
            continue
        ry_center = top + BLOB_CLEARANCE + ry * reach + rng.uniform(0, free - 2 * ry * reach)
        mask = _fill_polygon((height, width), _blob_polygon(rng, ((width - 1) / 2, ry_center), (rx, ry)))
        planted.append((mask & ~reaction, residual))
    return reaction, (cx, cy), planted


def _pattern_origin(center, size) -> tuple[int, int]:
    return (int(round(center[0] - (size - 1) / 2)), int(round(center[1] - (size - 1) / 2)))


def _stamp(image, origin, mask, color):
    x, y = origin
    h, w = mask.shape
    image[y:y + h, x:x + w][mask] = color


def render_canonical_card(drug_index: int, layout: CardLayout, color_model: ReactionColorModel, panel,
                          rng, background=PAPER, wax_shift=(0.0, 0.0, 0.0)):
    """Paint the unwarped card; returns (pixels, lane colors, blob centers, masks, residual colors)."""
    width, height = layout.canonical_size
    crop = layout.crop_window
    card = np.empty((height, width, 3), dtype=np.uint8)
    card[:] = background
    wax = card.copy()
    wax_mask = np.zeros((height, width), dtype=bool)

    lane_bottom = crop.y + layout.swipe_line_crop_y
    for rect in layout.lane_rects:
        for column in (rect.x - 1, rect.right):
            if 0 <= column < crop.width:
                wax[crop.y:lane_bottom, crop.x + column] = SEPARATOR_INK
                wax_mask[crop.y:lane_bottom, crop.x + column] = True
    mark = wax_mark_mask(layout.wax_template_size)
    for center in layout.wax_fiducials:
        origin = _pattern_origin(center, layout.wax_template_size)
        _stamp(wax, origin, mark, WAX_INK)
        _stamp(wax_mask, origin, mark, True)

    plan = _lane_plan(layout, panel, len(color_model.reagents))
    colors = _paint_lane_colors(rng, drug_index, plan, color_model, background)
    timer_rect = None
    if layout.timer_lane is None:
        timer_rect = lane_slot_rect(layout.timer_slot)
        timer_color = _jittered(rng, color_model.timer_color, color_model.jitter_sigma)

    centers, masks, residual_colors = [], [], []
    lanes = [(rect, colors[i], plan[i][0] != TIMER_LANE) for i, rect in enumerate(layout.lane_rects)]
    if timer_rect is not None:
        lanes.append((timer_rect, timer_color, False))
    for i, (rect, color, residuals) in enumerate(lanes):
        reaction, center, planted = _plant_lane(rng, rect.width, rect.height, color, color_model,
                                                background, residuals)
        origin = (crop.x + rect.x, crop.y + rect.y)
        for mask, residual in planted:
            _stamp(wax, origin, mask, residual)
            _stamp(wax_mask, origin, mask, True)
        _stamp(wax, origin, reaction, color)
        _stamp(wax_mask, origin, reaction, True)
        if i < layout.lane_count:
            centers.append((origin[0] + center[0], origin[1] + center[1]))
            masks.append(reaction)
            residual_colors.append([tuple(float(c) for c in residual) for _, residual in planted])

    dx, dy, angle = wax_shift
    if dx or dy or angle:
        pivot = ((width - 1) / 2, crop.y + (crop.height - 1) / 2)
        shift = cv2.getRotationMatrix2D(pivot, float(angle), 1.0)
        shift[:, 2] += (dx, dy)
        wax = cv2.warpAffine(wax, shift, (width, height), flags=cv2.INTER_NEAREST,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(int(c) for c in background))
        wax_mask = cv2.warpAffine(wax_mask.astype(np.uint8), shift, (width, height),
                                  flags=cv2.INTER_NEAREST, borderValue=0).astype(bool)
        centers = [tuple(float(v) for v in shift @ (x, y, 1.0)) for x, y in centers]
    card[wax_mask] = wax[wax_mask]

    finder = finder_pattern_mask(layout.finder_module)
    for center in layout.finder_centers:
        _stamp(card, _pattern_origin(center, finder.shape[0]), finder, INK)
    corner = finder_pattern_mask(layout.corner_module)
    for center in layout.corner_marks:
        _stamp(card, _pattern_origin(center, corner.shape[0]), corner, INK)
    card[layout.swipe_line_y:layout.swipe_line_y + SWIPE_BAND, crop.x:crop.right] = SWIPE_INK

    return card, colors, centers, masks, residual_colors


# ---------------------------------------------------------------- photograph

def canonical_corners(layout: CardLayout) -> np.ndarray:
    width, height = layout.canonical_size
    return np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)


def _canvas_size(layout: CardLayout, distortion: DistortionParams) -> tuple[int, int]:
    width, height = layout.canonical_size
    angles = np.deg2rad(np.linspace(0, min(distortion.rotation_deg, 90.0), 64))
    cos, sin = np.abs(np.cos(angles)), np.abs(np.sin(angles))
    pad = 2 * (distortion.corner_jitter_px + CANVAS_MARGIN)
    extent_x = np.max(width * cos + height * sin) * distortion.scale[1] + pad
    extent_y = np.max(width * sin + height * cos) * distortion.scale[1] + pad
    return int(np.ceil(extent_x)), int(np.ceil(extent_y))


def _photograph(card, layout, distortion, rng):
    canvas_w, canvas_h = _canvas_size(layout, distortion)
    corners = canonical_corners(layout)
    scale = rng.uniform(*distortion.scale)
    angle = np.deg2rad(rng.uniform(-distortion.rotation_deg, distortion.rotation_deg))
    rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    centered = (corners - corners.mean(axis=0)) * scale @ rotation.T
    jitter = rng.uniform(-distortion.corner_jitter_px, distortion.corner_jitter_px, size=(4, 2))
    target = centered + ((canvas_w - 1) / 2, (canvas_h - 1) / 2) + jitter
    h = cv2.getPerspectiveTransform(corners.astype(np.float32), target.astype(np.float32))
    pixels = cv2.warpPerspective(card, h, (canvas_w, canvas_h), flags=cv2.INTER_LINEAR,
                                 borderMode=cv2.BORDER_CONSTANT,
                                 borderValue=tuple(int(c) for c in distortion.backdrop))
    return pixels, h


def _add_noise(pixels, sigma, rng) -> np.ndarray:
    if sigma <= 0:
        return pixels
    noisy = pixels.astype(np.float64) + rng.normal(0.0, sigma, pixels.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def render_card(drug: str, layout: CardLayout, color_model: ReactionColorModel, distortion: DistortionParams,
                seed: int, panel=None) -> RenderedCard:
    """Render one photographed card of drug.

    panel lists the reagent per lane (TIMER_LANE for the timer) on 12-lane
    cards, or the single reagent on 9-lane cards. The same seed always gives
    the same bytes.
    """
    drug_index = _drug_index(color_model, drug)
    if panel is None:
        panel = default_panel(color_model, background=distortion.background).reagents \
            if layout.lane_count == 12 else [0]
    color_rng, warp_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3))

    offset, tilt = distortion.wax_offset_px, distortion.wax_rotation_deg
    wax_shift = (warp_rng.uniform(-offset, offset), warp_rng.uniform(-offset, offset), warp_rng.uniform(-tilt, tilt))
    card, colors, centers, masks, residuals = render_canonical_card(
        drug_index, layout, color_model, panel, color_rng, distortion.background, wax_shift)

    if distortion.is_identity:
        pixels, h = card, np.eye(3)
    else:
        pixels, h = _photograph(card, layout, distortion, warp_rng)
    pixels = _add_noise(pixels, distortion.noise_sigma, noise_rng)

    h = h / h[2, 2]
    corners = canonical_corners(layout)
    mapped = np.hstack([corners, np.ones((4, 1))]) @ h.T
    truth = GroundTruth(
        homography=h,
        card_corners=mapped[:, :2] / mapped[:, 2:3],
        lane_blob_centers=centers,
        lane_blob_colors=colors,
        reaction_masks=masks,
        residual_colors=residuals,
        wax_shift=tuple(float(v) for v in wax_shift),
    )
    return RenderedCard(raster=Raster(pixels=pixels), truth=truth)


# ---------------------------------------------------------------- datasets

def _resolve_drugs(names) -> list[str]:
    unknown = [name for name in names if name not in DRUGS]
    if unknown:
        raise UnknownDrug(f"Unknown drug(s): {', '.join(unknown)}")
    return list(names)


def _render_to_disk(out_dir, rel_path, drug, layout, color_model, distortion, seed, panel):
    rendered = render_card(drug, layout, color_model, distortion, seed, panel)
    database.insert_image(Path(out_dir) / rel_path, rendered.raster)


def generate_dataset(config: GeneratorConfig, seed: int, out_dir, jobs: int = 1) -> DatasetManifest:
    """Render config.images_per_drug cards per drug into out_dir and write manifest.json.

    Fold 0 of a per-drug stratified split is the test split.
    """
    drugs = _resolve_drugs(config.drugs or DRUGS)
    layout = canonical_layout(config.lane_count)
    color_model = default_color_model(config.color_seed, jitter_sigma=config.jitter_sigma,
                                      background=config.distortion.background)
    if config.panel is not None:
        panel = list(config.panel)
    elif config.lane_count == 12:
        panel = default_panel(color_model, background=config.distortion.background).reagents
    else:
        panel = [0]
    _lane_plan(layout, panel, len(color_model.reagents))

    jobs_list = []
    for d, drug in enumerate(drugs):
        for k in range(config.images_per_drug):
            index = d * config.images_per_drug + k
            jobs_list.append((f'images/{slug(drug)}_{k:02d}.png', drug, card_seed(seed, index)))
    logger.info("rendering %d cards with %d job(s)", len(jobs_list), jobs)
    Parallel(n_jobs=jobs, backend='threading')(
        delayed(_render_to_disk)(out_dir, path, drug, layout, color_model, config.distortion, s, panel)
        for path, drug, s in jobs_list)

    folds = min(config.folds, config.images_per_drug)
    assignment = assign_folds([drug for _, drug, _ in jobs_list], folds, seed)
    entries = [
        ManifestEntry(image_path=path, drug_label=drug, split='test' if fold == 0 else 'train',
                      fold=int(fold), seed=s)
        for (path, drug, s), fold in zip(jobs_list, assignment)
    ]
    manifest = DatasetManifest(entries=entries, lane_count=config.lane_count, folds=folds,
                               panel=panel, generator_digest=config.digest())
    database.insert_document(Path(out_dir) / 'manifest.json', manifest)
    return manifest


def permute_lanes(crop: Raster, layout: CardLayout, permutation) -> Raster:
    """Output lane i shows the content of input lane permutation[i]; pixels outside lanes are kept."""
    permutation = [int(p) for p in permutation]
    if sorted(permutation) != list(range(layout.lane_count)):
        raise InvalidPermutation(f"{permutation} is not a permutation of 0..{layout.lane_count - 1}")
    if crop.size != layout.crop_size:
        raise InvalidLayout(f"crop is {crop.width}x{crop.height}, layout expects {layout.crop_size}")
    if len({(r.width, r.height) for r in layout.lane_rects}) != 1:
        raise InvalidLayout("lanes of different sizes cannot be permuted")
    pixels = crop.pixels.copy()
    for target, source in enumerate(permutation):
        pixels[layout.lane_rects[target].slices()] = crop.pixels[layout.lane_rects[source].slices()]
    return Raster(pixels=pixels)


def _planted_fingerprint(color_model, layout, d, r, seed, jitter, background) -> list[float]:
    plan = _lane_plan(layout, [r], len(color_model.reagents))
    colors = _paint_lane_colors(_generator(seed), d, plan, color_model, background, jitter)
    return [float(v) for v in colors.reshape(-1)]


def _imaged_fingerprint(color_model, layout, d, r, seed, background) -> list[float]:
    rendered = render_card(color_model.drugs[d], layout, color_model, DistortionParams.none(background), seed, [r])
    crop = Raster(pixels=rendered.raster.pixels[layout.crop_window.slices()])
    return [float(v) for v in extract_fingerprint(crop, layout).descriptor]


def build_fingerprint_database(color_model: ReactionColorModel, replicates: int = 3, seed: int = 0,
                               from_images: bool = False, jitter: bool = True, background=PAPER,
                               jobs: int = 1) -> FingerprintDatabase:
    """Replicate 9-lane fingerprints for every (drug, reagent) pair.

    By default the planted lane colors are recorded directly; with from_images
    each replicate is rendered as a single-reagent card and read back through
    blob extraction.
    """
    layout = canonical_layout(9)
    tasks = [(d, r, k) for d in range(len(color_model.drugs))
             for r in range(len(color_model.reagents)) for k in range(replicates)]
    seeds = [card_seed(seed, i) for i in range(len(tasks))]
    if from_images:
        values = Parallel(n_jobs=jobs, backend='threading')(
            delayed(_imaged_fingerprint)(color_model, layout, d, r, s, background)
            for (d, r, _), s in zip(tasks, seeds))
    else:
        values = [_planted_fingerprint(color_model, layout, d, r, s, jitter, background)
                  for (d, r, _), s in zip(tasks, seeds)]
    records = {}
    for (d, r, _), fingerprint in zip(tasks, values):
        key = FingerprintDatabase.key(color_model.drugs[d], color_model.reagents[r])
        records.setdefault(key, []).append(fingerprint)
    return FingerprintDatabase(drugs=color_model.drugs, reagents=color_model.reagents, records=records)
