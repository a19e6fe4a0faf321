import os
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch
import numpy as np
from data import database
from data.models import CellReport, Dictionary, ExperimentConfig, ExperimentReport, GeneratorConfig, Raster
from services.card_geometry import canonical_layout
from services.extract_features import extract_feature
from services.render_cards import generate_dataset
from services.run_experiment import (
    evaluate_from_manifest,
    features_from_manifest,
    fold_permutation,
    load_crop,
    pipeline_predict,
    render_table,
    run_experiment,
    train_from_manifest,
)

DRUGS = ['quinine', 'talc', 'chloroquine']


class FoldPermutation_Should(unittest.TestCase):

    def test_never_be_the_identity(self):
        for fold in range(20):
            permutation = fold_permutation(0, fold, 12)

            self.assertEqual(sorted(permutation), list(range(12)))
            self.assertNotEqual(permutation, list(range(12)))

    def test_depend_only_on_seed_and_fold(self):
        self.assertEqual(fold_permutation(5, 1, 9), fold_permutation(5, 1, 9))
        self.assertNotEqual(fold_permutation(5, 1, 12), fold_permutation(5, 2, 12))


class RenderTable_Should(unittest.TestCase):

    def test_show_folds_average_and_spread(self):
        accuracies = [0.8, 0.9, 1.0]
        cell = CellReport(feature='lab', classifier='knn', fold_correct=[8, 9, 10], fold_total=[10, 10, 10],
                          fold_accuracies=accuracies, mean_accuracy=0.9, std_accuracy=float(np.std(accuracies)),
                          hyperparams=[{}, {}, {}], confusion=[[27]], confidence=[[1.0]])
        report = ExperimentReport(config_digest='ab' * 32, seed=3, perturbation='none', class_names=['quinine'],
                                  cells=[cell])

        table = render_table(report)

        lines = table.splitlines()
        self.assertEqual(lines[0], f"# config {'ab' * 6} seed 3 perturbation none")
        self.assertIn('Fold 3', lines[1])
        self.assertIn('8/10 (80.00%)', lines[2])
        self.assertIn('9/10 (90.00%)', lines[2])
        self.assertTrue(lines[2].endswith('8.16'))


class LoadCrop_Should(unittest.TestCase):

    def setUp(self):
        self.dir = Path(tempfile.mkdtemp())
        self.layout = canonical_layout(12)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_resize_the_photograph_when_unrectified(self):
        path = database.insert_image(self.dir / 'photo.png', Raster.filled(900, 1300, (200, 10, 10)))

        crop = load_crop(path, self.layout, perturbation='unrectified')

        self.assertEqual(crop.size, self.layout.crop_size)
        np.testing.assert_array_equal(crop.pixels[0, 0], [200, 10, 10])

    def test_fall_back_to_resizing_when_rectification_fails(self):
        path = database.insert_image(self.dir / 'blank.png', Raster.filled(900, 1300))

        with self.assertLogs('services.run_experiment', level='WARNING'):
            crop = load_crop(path, self.layout)

        self.assertEqual(crop.size, self.layout.crop_size)

    def test_reuse_cached_crops(self):
        path = database.insert_image(self.dir / 'photo.png', Raster.filled(900, 1300, (10, 200, 10)))
        cache = self.dir / 'cache'

        first = load_crop(path, self.layout, 'unrectified', cache)
        second = load_crop(path, self.layout, 'unrectified', cache)

        self.assertEqual(len(list((cache / 'crops').iterdir())), 1)
        self.assertEqual(first.digest(), second.digest())


class Experiment_Should(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dir = Path(tempfile.mkdtemp())
        config = GeneratorConfig(drugs=DRUGS, images_per_drug=6, folds=3)
        cls.manifest = generate_dataset(config, 21, cls.dir / 'data', jobs=2)
        cls.manifest_path = str(cls.dir / 'data' / 'manifest.json')

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir)

    def _config(self, name, **overrides):
        defaults = {'manifest': self.manifest_path, 'features': ['lab'], 'classifiers': ['knn', 'svm'],
                    'c_grid': [1.0], 'gamma_grid': [0.01], 'output_dir': str(self.dir / name)}
        return ExperimentConfig(**{**defaults, **overrides})

    def test_report_every_cell_over_every_fold(self):
        report = run_experiment(self._config('plain'), jobs=2)

        self.assertEqual([(c.feature, c.classifier) for c in report.cells], [('lab', 'knn'), ('lab', 'svm')])
        for cell in report.cells:
            self.assertEqual(sum(cell.fold_total), 18)
            self.assertEqual(int(np.sum(cell.confusion)), 18)
            self.assertEqual(len(cell.fold_accuracies), 3)
        self.assertEqual(report.cells[1].hyperparams, [{'C': 1.0, 'gamma': 0.01}] * 3)
        self.assertTrue((self.dir / 'plain' / 'report.json').exists())
        self.assertIn('Average', (self.dir / 'plain' / 'table.txt').read_text())

    def test_give_the_same_cells_with_and_without_a_cache(self):
        cache = self.dir / 'cache'

        first = run_experiment(self._config('uncached'), cache=None)
        second = run_experiment(self._config('cached'), cache=cache)

        self.assertEqual([c.model_dump() for c in first.cells], [c.model_dump() for c in second.cells])
        self.assertTrue(any((cache / 'features').iterdir()))

    def test_leave_color_histograms_unmoved_by_lane_permutation(self):
        plain = run_experiment(self._config('knn-plain', classifiers=['knn']))
        permuted = run_experiment(self._config('knn-permuted', classifiers=['knn'], perturbation='lane_permutation'))

        self.assertEqual(plain.cells[0].fold_correct, permuted.cells[0].fold_correct)

    def test_train_evaluate_and_predict_from_stored_models(self):
        model = train_from_manifest(self.manifest_path, 'lab', 'knn', seed=1)
        model_path = database.insert_document(self.dir / 'model.json', model)

        report = evaluate_from_manifest(self.manifest_path, model_path)
        test_entry = next(e for e in self.manifest.entries if e.split == 'test')
        prediction = pipeline_predict(self.dir / 'data' / test_entry.image_path, model_path, self.dir / 'dump')

        self.assertEqual(model.class_names, self.manifest.drugs)
        self.assertEqual(set(model.class_names), set(DRUGS))
        self.assertEqual(len(model.exemplars), 12)
        self.assertEqual(report.cells[0].fold_total, [6])
        self.assertIn(prediction.name, DRUGS)
        for name in ('rectified.png', 'crop.png', 'fingerprint.json', 'feature.json'):
            self.assertTrue((self.dir / 'dump' / name).exists(), name)

    def test_classify_an_already_cropped_image(self):
        model = train_from_manifest(self.manifest_path, 'lab', 'knn')
        model_path = database.insert_document(self.dir / 'crop-model.json', model)
        crop = load_crop(self.dir / 'data' / self.manifest.entries[0].image_path, canonical_layout(12))
        crop_path = database.insert_image(self.dir / 'crop.png', crop)

        prediction = pipeline_predict(crop_path, model_path)

        self.assertAlmostEqual(float(prediction.confidence.sum()), 1.0)


    def test_rank_combined_features_with_svm_at_least_as_high_as_color_histograms_with_knn(self):
        report = run_experiment(self._config('ranking', features=['lab', 'colorbank+dsift'], c_grid=[1.0, 16.0],
                                             gamma_grid=[2.0 ** -12, 2.0 ** -9], dictionary_sample=20000), jobs=2,
                                cache=self.dir / 'ranking-cache')

        cells = {(cell.feature, cell.classifier): cell for cell in report.cells}
        best = cells[('colorbank+dsift', 'svm')]
        self.assertGreaterEqual(best.mean_accuracy, 0.5)
        self.assertGreaterEqual(best.mean_accuracy, cells[('lab', 'knn')].mean_accuracy)
        for cell in report.cells:
            self.assertAlmostEqual(cell.std_accuracy, float(np.std(cell.fold_accuracies)))
            self.assertEqual(cell.fold_total, [6, 6, 6])

    def test_write_each_manifest_feature_once(self):
        out_dir = self.dir / 'batch-features'

        with patch('services.run_experiment.extract_feature', wraps=extract_feature) as mock_extract:
            first = features_from_manifest(self.manifest_path, 'lab', out_dir)
            calls = mock_extract.call_count
            second = features_from_manifest(self.manifest_path, 'lab', out_dir)

        self.assertEqual(calls, 18)
        self.assertEqual(mock_extract.call_count, 18)
        self.assertEqual(first, second)
        self.assertEqual(len(list((out_dir / 'features').iterdir())), 18)
        self.assertTrue((out_dir / 'index.json').exists())

    def test_train_missing_dictionaries_for_manifest_features(self):
        out_dir = self.dir / 'batch-colorbank'

        index = features_from_manifest(self.manifest_path, 'colorbank', out_dir)

        self.assertEqual(index.kind, 'colorbank420')
        self.assertEqual(database.read_document(out_dir / 'colorbank.dictionary.json', Dictionary).size, 20)


@unittest.skipUnless(os.getenv('PAD_RUN_SLOW') == '1', 'set PAD_RUN_SLOW=1 for protocol-scale runs')
class Protocol_Should(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dir = Path(tempfile.mkdtemp())
        cls.jobs = int(os.getenv('PAD_JOBS') or 4)
        cls.manifest = generate_dataset(GeneratorConfig(images_per_drug=30, folds=3), 0, cls.dir / 'data', cls.jobs)
        cls.cache = cls.dir / 'cache'

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir)

    def _run(self, name, **overrides):
        config = ExperimentConfig(manifest=str(self.dir / 'data' / 'manifest.json'),
                                  output_dir=str(self.dir / name), **overrides)
        report = run_experiment(config, jobs=self.jobs, cache=self.cache)
        return {(cell.feature, cell.classifier): cell for cell in report.cells}

    def test_rank_combined_features_with_svm_above_color_histograms_with_knn(self):
        cells = self._run('protocol', features=['lab', 'colorbank+dsift'])

        best = cells[('colorbank+dsift', 'svm')]
        self.assertEqual(best.fold_total, [260, 260, 260])
        self.assertGreaterEqual(best.mean_accuracy, 0.85)
        self.assertGreater(best.mean_accuracy, cells[('lab', 'knn')].mean_accuracy)

    def test_collapse_when_test_lanes_are_reordered(self):
        plain = self._run('ordered', features=['colorbank+dsift'], classifiers=['svm'])
        permuted = self._run('permuted', features=['colorbank+dsift'], classifiers=['svm'],
                             perturbation='lane_permutation')

        key = ('colorbank+dsift', 'svm')
        self.assertLessEqual(permuted[key].mean_accuracy, 0.5 * plain[key].mean_accuracy)
