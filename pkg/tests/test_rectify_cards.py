import os
import unittest
import numpy as np
from data.exceptions import DegenerateFiducials, InvalidLayout, NotEnoughFiducials
from data.models import DistortionParams, FiducialDetection, Homography, Raster, Rect
from services.card_geometry import canonical_layout
from services.extract_blobs import extract_fingerprint
from services.rectify_cards import (
    crop_salient,
    detect_finder_patterns,
    estimate_homography,
    find_lane_correction,
    match_fiducials,
    rectify_card,
    rectify_pipeline,
    refine_lane_alignment,
    warp_to_canonical,
)
from services.render_cards import PAPER, default_color_model, default_panel, render_canonical_card, render_card

H_TRUE = np.array([[0.9, -0.12, 40.0], [0.08, 1.05, 25.0], [1e-5, 2e-5, 1.0]])


def project(h, points):
    mapped = np.hstack([points, np.ones((len(points), 1))]) @ h.T
    return mapped[:, :2] / mapped[:, 2:3]


def bounds(points) -> Rect:
    x0, y0 = np.floor(points.min(axis=0)).astype(int)
    x1, y1 = np.ceil(points.max(axis=0)).astype(int)
    return Rect(x=int(x0), y=int(y0), width=int(x1 - x0), height=int(y1 - y0))


class EstimateHomography_Should(unittest.TestCase):

    def setUp(self):
        self.source = np.array(canonical_layout(12).reference_points)
        self.target = project(H_TRUE, self.source)

    def test_recover_an_exact_homography(self):
        h = estimate_homography(list(zip(self.source, self.target)))

        np.testing.assert_allclose(h.h, H_TRUE, rtol=1e-6, atol=1e-8)
        self.assertLess(h.residual, 1e-6)

    def test_need_four_correspondences(self):
        with self.assertRaises(NotEnoughFiducials):
            estimate_homography(list(zip(self.source[:3], self.target[:3])))

    def test_reject_collinear_points(self):
        line = np.array([[0, 0], [10, 10], [20, 20], [30, 30], [50, 0]], dtype=float)

        with self.assertRaises(DegenerateFiducials):
            estimate_homography(list(zip(line, line)))

    def test_refit_without_rejected_points(self):
        target = self.target.copy()
        target[4] += (30.0, -25.0)

        h = estimate_homography(list(zip(self.source, target)),
                                reject_outliers=lambda s, t, errors: np.arange(len(s)) != 4)

        np.testing.assert_allclose(h.h, H_TRUE, rtol=1e-6, atol=1e-8)

    def test_report_residuals_without_a_rejecter(self):
        target = self.target.copy()
        target[4] += (30.0, -25.0)

        h = estimate_homography(list(zip(self.source, target)))

        self.assertGreater(h.residual, 0.5)
        self.assertGreaterEqual(h.residual, h.mean_error)


class MatchFiducials_Should(unittest.TestCase):

    def test_order_shuffled_detections_against_the_layout(self):
        layout = canonical_layout(12)
        angle = np.radians(25)
        affine = np.array([[np.cos(angle), -np.sin(angle), 300.0], [np.sin(angle), np.cos(angle), 50.0], [0, 0, 1]])
        finders = project(affine, np.array(layout.finder_centers))
        marks = project(affine, np.array(layout.corner_marks))
        detections = [FiducialDetection(center=tuple(p), kind='finder', score=1.0, module=7.0) for p in finders]
        detections += [FiducialDetection(center=tuple(p), kind='corner_mark', score=0.9, module=4.0) for p in marks]
        detections = [detections[i] for i in (4, 1, 5, 0, 3, 2)]

        pairs = match_fiducials(detections, layout)

        self.assertEqual(len(pairs), 6)
        for canonical, image in pairs:
            np.testing.assert_allclose(project(affine, np.array([canonical]))[0], image, atol=1e-6)

    def test_need_three_finders(self):
        detections = [FiducialDetection(center=(10.0 * i, 5.0 * i * i), kind='corner_mark', score=1.0)
                      for i in range(5)]

        with self.assertRaises(NotEnoughFiducials):
            match_fiducials(detections, canonical_layout(12))


class DetectFinderPatterns_Should(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.layout = canonical_layout(12)
        cls.model = default_color_model(0)
        cls.panel = default_panel(cls.model).reagents

    def test_find_all_reference_points_on_a_clean_card(self):
        card = render_card('quinine', self.layout, self.model, DistortionParams.none(), 2, self.panel)

        detections = detect_finder_patterns(card.raster)

        self.assertEqual(len(detections), 6)
        finders = np.array(sorted(d.center for d in detections if d.kind == 'finder'))
        np.testing.assert_allclose(finders, np.array(sorted(self.layout.finder_centers)), atol=1.0)

    def test_fail_on_a_blank_image(self):
        with self.assertRaises(NotEnoughFiducials):
            detect_finder_patterns(Raster.filled(400, 400))

    def test_fail_on_a_tiny_image(self):
        with self.assertRaises(NotEnoughFiducials):
            detect_finder_patterns(Raster.filled(20, 20))


class RectifyCard_Should(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.layout = canonical_layout(12)
        cls.model = default_color_model(0)
        cls.panel = default_panel(cls.model).reagents

    def test_recover_the_photograph_homography(self):
        for seed in (1, 2, 3):
            card = render_card('artesunate', self.layout, self.model, DistortionParams(), seed, self.panel)

            result = rectify_card(card.raster, self.layout)

            points = np.array(self.layout.reference_points)
            error = np.linalg.norm(result.homography.apply(points) - project(card.truth.homography, points), axis=1)
            self.assertLess(error.mean(), 2.0)
            self.assertEqual(result.crop.size, (636, 490))

    def test_keep_lane_colors_readable_after_rectification(self):
        card = render_card('ampicillin', self.layout, self.model, DistortionParams(), 9, self.panel)

        crop = rectify_card(card.raster, self.layout).crop

        measured = np.asarray(extract_fingerprint(crop, self.layout).lane_colors)
        planted = card.truth.lane_blob_colors
        strong = np.linalg.norm(planted - np.array(PAPER), axis=1) >= 60
        np.testing.assert_allclose(measured[strong], planted[strong], atol=10.0)

    def test_leave_an_undistorted_card_untouched(self):
        card = render_card('talc', self.layout, self.model, DistortionParams.none(), 4, self.panel)

        result = rectify_card(card.raster, self.layout)

        np.testing.assert_allclose(result.homography.h, np.eye(3), atol=1e-6)
        np.testing.assert_array_equal(result.crop.pixels, card.raster.pixels[self.layout.crop_window.slices()])

    def test_return_only_the_crop_from_the_pipeline(self):
        card = render_card('talc', self.layout, self.model, DistortionParams(), 6, self.panel)

        crop = rectify_pipeline(card.raster, self.layout)

        self.assertEqual(crop.digest(), rectify_card(card.raster, self.layout).crop.digest())

    def test_fail_on_a_blank_photograph(self):
        with self.assertRaises(NotEnoughFiducials):
            rectify_card(Raster.filled(900, 1300), self.layout)

    def test_invert_the_estimated_homography(self):
        card = render_card('artesunate', self.layout, self.model, DistortionParams(), 5, self.panel)

        h = rectify_card(card.raster, self.layout).homography

        np.testing.assert_allclose(h.h @ h.inverse().h / (h.h @ h.inverse().h)[2, 2], np.eye(3), atol=1e-8)
        points = np.array(self.layout.reference_points)
        np.testing.assert_allclose(h.inverse().apply(h.apply(points)), points, atol=1e-6)


class LaneAlignment_Should(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.layout = canonical_layout(12)
        cls.model = default_color_model(0)
        cls.panel = default_panel(cls.model).reagents

    def _card(self, shift):
        pixels, *_ = render_canonical_card(5, self.layout, self.model, self.panel, np.random.default_rng(0),
                                           wax_shift=shift)
        return Raster(pixels=pixels)

    def test_measure_a_wax_offset(self):
        correction = find_lane_correction(self._card((4.0, 0.0, 0.0)), self.layout)

        self.assertAlmostEqual(correction.offset[0], 4.0, delta=0.5)
        self.assertAlmostEqual(correction.offset[1], 0.0, delta=0.5)
        self.assertAlmostEqual(correction.angle_deg, 0.0, delta=0.2)

    def test_move_the_wax_marks_back_into_place(self):
        aligned = refine_lane_alignment(self._card((3.0, -2.0, 0.0)), self.layout)

        again = find_lane_correction(aligned.image, self.layout)
        self.assertFalse(aligned.warning)
        self.assertLess(np.hypot(*again.offset), 0.5)

    def test_warn_when_wax_marks_are_missing(self):
        blank = Raster.filled(730, 1220)

        aligned = refine_lane_alignment(blank, self.layout)

        self.assertTrue(aligned.warning)
        self.assertIsNone(aligned.correction)
        self.assertEqual(aligned.image.digest(), blank.digest())

    def test_require_a_canonical_sized_card(self):
        with self.assertRaises(InvalidLayout):
            crop_salient(Raster.filled(100, 100), self.layout)

    def test_identity_warp_is_lossless(self):
        card = self._card((0.0, 0.0, 0.0))

        warped = warp_to_canonical(card, Homography.identity(), self.layout)

        self.assertEqual(warped.digest(), card.digest())


@unittest.skipUnless(os.getenv('PAD_RUN_SLOW') == '1', 'set PAD_RUN_SLOW=1 for protocol-scale runs')
class RectificationAccuracy_Should(unittest.TestCase):

    def test_rectify_nearly_every_default_card(self):
        layout = canonical_layout(12)
        model = default_color_model(0)
        panel = default_panel(model).reagents
        points = np.array(layout.reference_points)
        window = layout.crop_window
        corners = np.array([(window.x, window.y), (window.right, window.y), (window.x, window.bottom),
                            (window.right, window.bottom)], dtype=float)
        successes, errors, overlaps = 0, [], []
        for seed in range(200):
            card = render_card(model.drugs[seed % 26], layout, model, DistortionParams(), seed, panel)
            try:
                result = rectify_card(card.raster, layout)
            except (NotEnoughFiducials, DegenerateFiducials):
                continue
            successes += 1
            errors.extend(np.linalg.norm(result.homography.apply(points) - project(card.truth.homography, points),
                                         axis=1))
            truth = bounds(project(card.truth.homography, corners))
            overlaps.append(bounds(result.homography.apply(corners)).iou(truth))

        self.assertGreaterEqual(successes, 198)
        self.assertLessEqual(np.mean(errors), 2.0)
        self.assertGreaterEqual(np.mean(overlaps), 0.98)
