import logging
import numpy as np
from scipy import ndimage
from data.exceptions import EmptyRegionList, InvalidLayout, LaneTooShort
from data.models import CardLayout, Fingerprint, Raster, ReactionBlob, Rect, Region

logger = logging.getLogger(__name__)

GROWTH_TAU = 40.0
MERGE_OVERLAP_RATIO = 0.35
SEEDS_PER_LANE = 5


def max_diff(mean_rgb) -> float:
    r, g, b = (float(c) for c in mean_rgb)
    return max(abs(r - g), abs(g - b), abs(b - r))


def _check_lane(crop: Raster, lane_rect: Rect):
    if not Rect(x=0, y=0, width=crop.width, height=crop.height).contains(lane_rect):
        raise InvalidLayout(f"lane {lane_rect} lies outside the {crop.width}x{crop.height} crop")


def seed_regions(crop: Raster, lane_rect: Rect) -> list[tuple[int, int]]:
    """Centroids of five equal-height bands of the lane area above the swipe line."""
    _check_lane(crop, lane_rect)
    if lane_rect.height < SEEDS_PER_LANE:
        raise LaneTooShort(f"lane height {lane_rect.height} is below {SEEDS_PER_LANE} px")
    x = lane_rect.x + lane_rect.width // 2
    band = lane_rect.height / SEEDS_PER_LANE
    return [(x, int(np.floor(lane_rect.y + (k + 0.5) * band))) for k in range(SEEDS_PER_LANE)]


def grow_region(crop: Raster, lane_rect: Rect, seed, tau: float = GROWTH_TAU, lane: int = 0) -> Region:
    """Grow a 4-connected region from seed, restricted to lane_rect.

    Growth proceeds in waves: every pixel reachable from the region through
    pixels within tau (RGB Euclidean) of the current region mean joins, then
    the mean is recomputed. The region only ever grows, so the loop ends once a
    wave adds nothing.
    """
    _check_lane(crop, lane_rect)
    sx, sy = int(seed[0]) - lane_rect.x, int(seed[1]) - lane_rect.y
    if not (0 <= sx < lane_rect.width and 0 <= sy < lane_rect.height):
        raise ValueError(f"seed {seed} is outside lane {lane_rect}")

    colors = crop.pixels[lane_rect.slices()]
    patch = colors.astype(np.float64)
    region = np.zeros(patch.shape[:2], dtype=bool)
    region[sy, sx] = True
    size = 1
    mean = patch[sy, sx]
    while True:
        admissible = np.sum((patch - mean) ** 2, axis=2) <= tau * tau
        admissible |= region
        labels, _ = ndimage.label(admissible)
        grown = labels == labels[sy, sx]
        grown_size = int(np.count_nonzero(grown))
        if grown_size == size:
            break
        region, size = grown, grown_size
        mean = patch[region].mean(axis=0)
    return Region.from_mask(lane, (lane_rect.x, lane_rect.y), region, colors)


def merge_overlapping(regions: list[Region], ratio: float = MERGE_OVERLAP_RATIO) -> list[Region]:
    """Merge pairs sharing more than ratio * (bigger region size) pixels, to a fixpoint.

    Candidate pairs are visited by descending combined size; after each merge
    the scan restarts.
    """
    current = list(regions)
    for region in current[1:]:
        if region.mask.shape != current[0].mask.shape or region.origin != current[0].origin:
            raise ValueError("regions to merge must come from the same lane")
    while True:
        sizes = [r.size for r in current]
        pairs = [(i, j) for i in range(len(current)) for j in range(i + 1, len(current))]
        pairs.sort(key=lambda p: -(sizes[p[0]] + sizes[p[1]]))
        for i, j in pairs:
            overlap = int(np.count_nonzero(current[i].mask & current[j].mask))
            if overlap > ratio * max(sizes[i], sizes[j]):
                a, b = current[i], current[j]
                current[i] = Region.from_mask(a.lane, a.origin, a.mask | b.mask, a.colors)
                del current[j]
                break
        else:
            return current


def select_reaction_region(regions: list[Region]) -> Region:
    if not regions:
        raise EmptyRegionList("cannot select a reaction blob from no regions")
    return max(regions, key=lambda r: (max_diff(r.mean_rgb), r.size, -r.bbox.y))


def select_reaction_blob(regions: list[Region]) -> ReactionBlob:
    region = select_reaction_region(regions)
    return ReactionBlob(lane=region.lane, mean_rgb=region.mean_rgb,
                        max_diff=max_diff(region.mean_rgb), size=region.size)


def extract_lane_blob(crop: Raster, lane_rect: Rect, lane: int, tau: float = GROWTH_TAU) -> ReactionBlob:
    regions = [grow_region(crop, lane_rect, seed, tau, lane) for seed in seed_regions(crop, lane_rect)]
    merged = merge_overlapping(regions)
    logger.debug("lane %d: %d regions after merging", lane, len(merged))
    return select_reaction_blob(merged)


def extract_reaction_blobs(crop: Raster, layout: CardLayout, tau: float = GROWTH_TAU) -> list[ReactionBlob]:
    if crop.size != layout.crop_size:
        raise InvalidLayout(f"crop is {crop.width}x{crop.height}, layout expects {layout.crop_size}")
    return [extract_lane_blob(crop, rect, lane, tau) for lane, rect in enumerate(layout.lane_rects)]


def extract_fingerprint(crop: Raster, layout: CardLayout, tau: float = GROWTH_TAU,
                        include_timer: bool = True) -> Fingerprint:
    blobs = extract_reaction_blobs(crop, layout, tau)
    timer = layout.timer_lane
    if not include_timer and timer is not None:
        blobs = [blob for blob in blobs if blob.lane != timer]
    return Fingerprint(lane_colors=[blob.mean_rgb for blob in blobs])
