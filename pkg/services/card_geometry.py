from functools import lru_cache
import numpy as np
from skimage import color as skcolor
from data.exceptions import InvalidLayout
from data.models import CardLayout, LabColor, Rect

# All positions are pixel-center coordinates on the 730 x 1220 canonical card.
CANONICAL_SIZE = (730, 1220)
CROP_WINDOW = Rect(x=47, y=540, width=636, height=490)

LANE_SLOTS = 12
LANE_PITCH = 53
LANE_GUTTER = 2
LANE_TOP = 10
SWIPE_LINE_Y = 990
SWIPE_BAND = 10

FINDER_MODULE = 7
FINDER_ORIGINS = [(16, 16), (665, 16), (16, 1155)]
CORNER_MODULE = 4
CORNER_ORIGINS = [(686, 1176), (236, 286), (466, 286)]

WAX_FIDUCIALS = [(100.0, 515.0), (630.0, 515.0)]
WAX_TEMPLATE_SIZE = 21

PANEL_TIMER_SLOT = 0
SINGLE_REAGENT_SLOTS = [0, 1, 2, 4, 5, 6, 8, 9, 10]
SINGLE_REAGENT_TIMER_SLOT = 11

WHITE = (255.0, 255.0, 255.0)


def _pattern_center(origin, module):
    side = 7 * module
    return (origin[0] + (side - 1) / 2, origin[1] + (side - 1) / 2)


def lane_slot_rect(slot: int) -> Rect:
    """Rectangle of a physical lane slot in crop coordinates, above the swipe line."""
    height = SWIPE_LINE_Y - CROP_WINDOW.y - LANE_TOP
    return Rect(x=slot * LANE_PITCH + LANE_GUTTER // 2, y=LANE_TOP,
                width=LANE_PITCH - LANE_GUTTER, height=height)


@lru_cache(maxsize=None)
def canonical_layout(lane_count: int) -> CardLayout:
    if lane_count == 12:
        slots = list(range(LANE_SLOTS))
        timer_slot = PANEL_TIMER_SLOT
    elif lane_count == 9:
        slots = list(SINGLE_REAGENT_SLOTS)
        timer_slot = SINGLE_REAGENT_TIMER_SLOT
    else:
        raise InvalidLayout(f"lane_count must be 9 or 12, got {lane_count}")
    return CardLayout(
        lane_count=lane_count,
        canonical_size=CANONICAL_SIZE,
        crop_window=CROP_WINDOW,
        lane_slots=slots,
        lane_rects=[lane_slot_rect(slot) for slot in slots],
        timer_slot=timer_slot,
        swipe_line_y=SWIPE_LINE_Y,
        finder_centers=[_pattern_center(o, FINDER_MODULE) for o in FINDER_ORIGINS],
        finder_module=FINDER_MODULE,
        corner_marks=[_pattern_center(o, CORNER_MODULE) for o in CORNER_ORIGINS],
        corner_module=CORNER_MODULE,
        wax_fiducials=list(WAX_FIDUCIALS),
        wax_template_size=WAX_TEMPLATE_SIZE,
    )


def finder_pattern_mask(module: int) -> np.ndarray:
    """Dark cells of a concentric-square mark whose scanline profile is 1:1:3:1:1."""
    side = 7 * module
    mask = np.ones((side, side), dtype=bool)
    mask[module:side - module, module:side - module] = False
    mask[2 * module:side - 2 * module, 2 * module:side - 2 * module] = True
    return mask


def wax_mark_mask(size: int) -> np.ndarray:
    arm = max(size // 4, 1)
    mask = np.zeros((size, size), dtype=bool)
    lo = (size - arm) // 2
    mask[lo:lo + arm, :] = True
    mask[:, lo:lo + arm] = True
    return mask


def wax_mark_template(size: int, ink=60, paper=240) -> np.ndarray:
    template = np.full((size, size), paper, dtype=np.uint8)
    template[wax_mark_mask(size)] = ink
    return template


def rgb_to_lab_array(pixels) -> np.ndarray:
    rgb = np.asarray(pixels, dtype=np.float64) / 255.0
    lab = skcolor.rgb2lab(rgb)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


def rgb_to_lab(r, g, b) -> LabColor:
    L, a, b_ = rgb_to_lab_array(np.array([[[r, g, b]]], dtype=np.float64))[0, 0]
    return LabColor(L=float(L), a=float(a), b=float(b_))


def lab_to_rgb(lab: LabColor) -> tuple[int, int, int]:
    rgb = skcolor.lab2rgb(np.array([[[lab.L, lab.a, lab.b]]], dtype=np.float64))[0, 0]
    r, g, b = np.clip(np.rint(rgb * 255.0), 0, 255).astype(int)
    return (int(r), int(g), int(b))
