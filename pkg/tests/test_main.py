import io
import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch
from data import database
from data.exceptions import ConfigError, DegenerateFiducials, ImageDecodeError, NotEnoughFiducials, UnknownDrug
from data.models import CellReport, DistortionParams, ExperimentReport, Raster
from main import EXIT_CONFIG, EXIT_DECODE, EXIT_FIDUCIALS, EXIT_OK, EXIT_UNEXPECTED, exit_code, main
from services.card_geometry import canonical_layout
from services.render_cards import default_color_model, default_panel, render_card


class Main_Should(unittest.TestCase):

    def setUp(self):
        self.dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_main_without_a_command(self):
        with patch('sys.stdout', new_callable=io.StringIO) as mock_stdout:
            code = main([])

        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("Error:", mock_stdout.getvalue())

    def test_main_negative_seed(self):
        with patch('builtins.print') as mock_print:
            code = main(['rectify', '--in', 'card.png', '--out', 'crop.png', '--seed', '-1'])

        self.assertEqual(code, EXIT_CONFIG)
        mock_print.assert_any_call('Error: --seed must be nonnegative, got -1')

    def test_main_unknown_feature(self):
        with patch('builtins.print'):
            code = main(['features', '--in', 'crop.png', '--feature', 'hog', '--out', 'f.json'])

        self.assertEqual(code, EXIT_CONFIG)

    def test_main_blank_photograph(self):
        image = database.insert_image(self.dir / 'blank.png', Raster.filled(900, 1300))

        with patch('sys.stdout', new_callable=io.StringIO) as mock_stdout:
            code = main(['rectify', '--in', str(image), '--out', str(self.dir / 'crop.png')])

        self.assertEqual(code, EXIT_FIDUCIALS)
        self.assertIn("Error:", mock_stdout.getvalue())
        self.assertFalse((self.dir / 'crop.png').exists())

    def test_main_corrupt_image(self):
        image = self.dir / 'corrupt.png'
        image.write_bytes(b'\x89PNG\r\n\x1a\ntruncated')

        with patch('builtins.print'):
            code = main(['fingerprint', '--in', str(image), '--out', str(self.dir / 'fp.json')])

        self.assertEqual(code, EXIT_DECODE)

    def test_main_missing_experiment_config(self):
        with patch('builtins.print') as mock_print:
            code = main(['experiment', '--config', str(self.dir / 'absent.json')])

        self.assertEqual(code, EXIT_CONFIG)
        mock_print.assert_any_call(f"Error: {self.dir / 'absent.json'} does not exist")

    def test_main_invalid_experiment_config(self):
        config = self.dir / 'experiment.json'
        config.write_text(json.dumps({'manifest': 'm.json', 'features': ['hog']}))

        with patch('builtins.print'):
            code = main(['experiment', '--config', str(config)])

        self.assertEqual(code, EXIT_CONFIG)

    @patch('routers.model_commands.run_experiment')
    def test_main_experiment_reads_its_config_document(self, mock_run_experiment):
        cell = CellReport(feature='lab', classifier='knn', fold_correct=[1], fold_total=[1], fold_accuracies=[1.0],
                          mean_accuracy=1.0, std_accuracy=0.0, hyperparams=[{}], confusion=[[1]], confidence=[[1.0]])
        mock_run_experiment.return_value = ExperimentReport(config_digest='ab' * 32, seed=0, perturbation='none',
                                                            class_names=['quinine'], cells=[cell])
        pinned = self.dir / 'pinned.json'
        pinned.write_text(json.dumps({'manifest': 'm.json', 'seed': 7}))
        loose = self.dir / 'loose.json'
        loose.write_text(json.dumps({'manifest': 'm.json'}))

        with patch('builtins.print'):
            codes = [main(['experiment', '--config', str(path), '--seed', '3']) for path in (pinned, loose)]

        seeds = [c.args[0].seed for c in mock_run_experiment.call_args_list]
        self.assertEqual(codes, [EXIT_OK, EXIT_OK])
        self.assertEqual(seeds, [7, 3])

    def test_main_feature_without_its_dictionary(self):
        crop = database.insert_image(self.dir / 'crop.png', Raster.filled(636, 490))

        with patch('builtins.print'):
            code = main(['features', '--in', str(crop), '--feature', 'dsift', '--out', str(self.dir / 'f.json')])

        self.assertEqual(code, EXIT_CONFIG)

    @patch('routers.card_commands.rectify_card')
    def test_main_unexpected_failure(self, mock_rectify_card):
        mock_rectify_card.side_effect = RuntimeError("boom")
        image = database.insert_image(self.dir / 'card.png', Raster.filled(100, 100))

        with patch('builtins.print') as mock_print:
            code = main(['rectify', '--in', str(image), '--out', str(self.dir / 'crop.png')])

        self.assertEqual(code, EXIT_UNEXPECTED)
        mock_print.assert_any_call('Error: boom')

    def test_main_rectify_and_fingerprint(self):
        layout = canonical_layout(12)
        model = default_color_model(0)
        card = render_card('quinine', layout, model, DistortionParams(), 2, default_panel(model).reagents)
        image = database.insert_image(self.dir / 'card.png', card.raster)
        crop = self.dir / 'crop.png'

        with patch('builtins.print') as mock_print:
            first = main(['rectify', '--in', str(image), '--out', str(crop), '--jobs', '1'])
            second = main(['fingerprint', '--in', str(crop), '--out', str(self.dir / 'fp.json')])

        self.assertEqual((first, second), (EXIT_OK, EXIT_OK))
        self.assertEqual(database.read_image(crop).size, layout.crop_size)
        fingerprint = json.loads((self.dir / 'fp.json').read_text())
        self.assertNotIn('drug', fingerprint)
        self.assertEqual(len(fingerprint['lanes']), 12)
        mock_print.assert_any_call(f"Fingerprint of 12 lanes written to {self.dir / 'fp.json'}.")

    def _manifest(self):
        entries = [{'image_path': f'card-{i}.png', 'drug_label': drug, 'split': 'test' if i % 2 == 0 else 'train',
                    'fold': 0 if i % 2 == 0 else 1, 'seed': i}
                   for i, drug in enumerate(['quinine', 'quinine', 'talc', 'talc'])]
        manifest = self.dir / 'manifest.json'
        manifest.write_text(json.dumps({'entries': entries, 'lane_count': 12, 'folds': 2, 'panel': list(range(12)),
                                        'generator_digest': 'ab' * 32}))
        return manifest

    @patch('services.run_experiment.load_crop')
    def test_main_features_for_a_manifest(self, mock_load_crop):
        mock_load_crop.side_effect = lambda path, *args: Raster.filled(636, 490, (40 * int(path.stem[-1]), 90, 90))
        out_dir = self.dir / 'features'

        with patch('builtins.print') as mock_print:
            code = main(['features', '--manifest', str(self._manifest()), '--kind', 'lab', '--out-dir', str(out_dir)])

        self.assertEqual(code, EXIT_OK)
        index = json.loads((out_dir / 'index.json').read_text())
        self.assertEqual(index['kind'], 'lab90')
        self.assertEqual(sorted(index['entries']), [f'card-{i}.png' for i in range(4)])
        self.assertEqual(len(list((out_dir / 'features').glob('*.json'))), 4)
        mock_print.assert_any_call(f"4 lab90 feature(s) written under {out_dir}.")

    def test_main_features_for_a_manifest_without_out_dir(self):
        with patch('builtins.print') as mock_print:
            code = main(['features', '--manifest', str(self._manifest()), '--kind', 'lab'])

        self.assertEqual(code, EXIT_CONFIG)
        mock_print.assert_any_call("Error: features --manifest writes to a directory; pass --out-dir")

    def test_main_features_refuses_both_sources(self):
        with patch('builtins.print'):
            code = main(['features', '--in', 'crop.png', '--manifest', 'm.json', '--kind', 'lab', '--out', 'f.json'])

        self.assertEqual(code, EXIT_CONFIG)

    def test_main_rectify_saves_the_rectified_card(self):
        layout = canonical_layout(12)
        model = default_color_model(0)
        card = render_card('talc', layout, model, DistortionParams(), 4, default_panel(model).reagents)
        image = database.insert_image(self.dir / 'card.png', card.raster)

        with patch('builtins.print'):
            code = main(['rectify', '--in', str(image), '--out', str(self.dir / 'crop.png'),
                         '--save-rectified', str(self.dir / 'rectified.png')])

        self.assertEqual(code, EXIT_OK)
        self.assertEqual(database.read_image(self.dir / 'rectified.png').size, layout.canonical_size)

    def test_main_select_reagents_writes_the_report(self):
        db = self.dir / 'db.json'
        panel = self.dir / 'panel.json'
        report = self.dir / 'uniqueness.json'

        with patch('builtins.print'):
            first = main(['fingerprint-db', '--out', str(db), '--seed', '0'])
            second = main(['select-reagents', '--db', str(db), '--out', str(panel), '--report', str(report)])

        uniqueness = json.loads(report.read_text())
        self.assertEqual(first, EXIT_OK)
        self.assertEqual(second, EXIT_OK if uniqueness['pass'] else EXIT_CONFIG)
        self.assertEqual(len(json.loads(panel.read_text())['reagents']), 12)

    def test_map_errors_to_exit_codes(self):
        self.assertEqual(exit_code(NotEnoughFiducials("x")), EXIT_FIDUCIALS)
        self.assertEqual(exit_code(DegenerateFiducials("x")), EXIT_FIDUCIALS)
        self.assertEqual(exit_code(ImageDecodeError("x")), EXIT_DECODE)
        self.assertEqual(exit_code(ConfigError("x")), EXIT_CONFIG)
        self.assertEqual(exit_code(UnknownDrug("x")), EXIT_UNEXPECTED)


if __name__ == '__main__':
    unittest.main()
