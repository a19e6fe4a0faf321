import argparse
import logging
import sys
from data.exceptions import ConfigError, DegenerateFiducials, ImageDecodeError, NotEnoughFiducials, PadError
from data.models import FEATURE_NAMES
from data.settings import default_jobs, default_seed, log_level
from routers import card_commands, dataset_commands, model_commands

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_FIDUCIALS = 2
EXIT_DECODE = 3
EXIT_CONFIG = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--jobs', type=int, default=None)
    common.add_argument('--layout', type=int, choices=(9, 12), default=None)
    common.add_argument('--verbose', action='store_true')

    parser = _Parser(prog='pad', description='Paper analytical device card classification pipeline.')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    synth = commands.add_parser('synth', parents=[common], help='render a synthetic card dataset')
    synth.add_argument('--config')
    synth.add_argument('--count', type=int)
    synth.add_argument('--out', required=True)
    synth.set_defaults(handler=dataset_commands.synth)

    fpdb = commands.add_parser('fingerprint-db', parents=[common], help='build the single-reagent fingerprint database')
    fpdb.add_argument('--out', required=True)
    fpdb.add_argument('--replicates', type=int, default=3)
    fpdb.add_argument('--from-images', action='store_true')
    fpdb.set_defaults(handler=dataset_commands.fingerprint_db)

    select = commands.add_parser('select-reagents', parents=[common], help='choose the reagent panel')
    select.add_argument('--db', required=True)
    select.add_argument('--out', required=True)
    select.add_argument('--config')
    select.add_argument('--panel-size', type=int)
    select.add_argument('--report')
    select.set_defaults(handler=dataset_commands.select_reagents_command)

    rectify = commands.add_parser('rectify', parents=[common], help='rectify a photograph and cut the salient crop')
    rectify.add_argument('--in', dest='input', required=True)
    rectify.add_argument('--out', required=True)
    rectify.add_argument('--save-rectified')
    rectify.set_defaults(handler=card_commands.rectify)

    fingerprint = commands.add_parser('fingerprint', parents=[common], help='extract lane reaction colors')
    fingerprint.add_argument('--in', dest='input', required=True)
    fingerprint.add_argument('--out', required=True)
    fingerprint.add_argument('--exclude-timer', action='store_true')
    fingerprint.set_defaults(handler=card_commands.fingerprint)

    features = commands.add_parser('features', parents=[common], help='compute feature vectors for one image or a manifest')
    source = features.add_mutually_exclusive_group(required=True)
    source.add_argument('--in', dest='input')
    source.add_argument('--manifest')
    features.add_argument('--feature', '--kind', dest='feature', choices=sorted(FEATURE_NAMES), required=True)
    features.add_argument('--dictionary', '--dict', dest='dictionary', action='append')
    features.add_argument('--model')
    features.add_argument('--out')
    features.add_argument('--out-dir')
    features.set_defaults(handler=card_commands.features)

    train = commands.add_parser('train', parents=[common], help='train a classifier on a manifest')
    train.add_argument('--manifest', required=True)
    train.add_argument('--feature', choices=sorted(FEATURE_NAMES), required=True)
    train.add_argument('--classifier', choices=('knn', 'svm'), required=True)
    train.add_argument('--out', required=True)
    train.set_defaults(handler=model_commands.train)

    predict = commands.add_parser('predict', parents=[common], help='classify one photograph')
    predict.add_argument('--model', required=True)
    predict.add_argument('--in', dest='input', required=True)
    predict.add_argument('--dump')
    predict.set_defaults(handler=model_commands.predict)

    evaluate = commands.add_parser('eval', parents=[common], help='score a model on a manifest test split')
    evaluate.add_argument('--manifest', required=True)
    evaluate.add_argument('--model', required=True)
    evaluate.add_argument('--report', required=True)
    evaluate.set_defaults(handler=model_commands.evaluate)

    experiment = commands.add_parser('experiment', parents=[common], help='run the cross-validated protocol')
    experiment.add_argument('--config', required=True)
    experiment.set_defaults(handler=model_commands.experiment)
    return parser


def _configure(args):
    logging.basicConfig(level=logging.DEBUG if args.verbose else log_level(),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    if args.seed is None:
        args.seed = default_seed()
    if args.seed < 0:
        raise ConfigError(f"--seed must be nonnegative, got {args.seed}")
    if args.jobs is None:
        args.jobs = default_jobs()
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")


def exit_code(error: Exception) -> int:
    if isinstance(error, (NotEnoughFiducials, DegenerateFiducials)):
        return EXIT_FIDUCIALS
    if isinstance(error, ImageDecodeError):
        return EXIT_DECODE
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(sys.argv[1:] if argv is None else argv)
        _configure(args)
        args.handler(args)
    except PadError as e:
        print(f"Error: {e}")
        return exit_code(e)
    except Exception as e:
        logging.getLogger(__name__).debug("unexpected failure", exc_info=True)
        print(f"Error: {e}")
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
