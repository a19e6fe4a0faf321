import logging
from data import database
from data.exceptions import ConfigError
from data.models import Dictionary, TrainedModel
from data.settings import cache_dir
from services.card_geometry import canonical_layout
from services.extract_blobs import extract_fingerprint
from services.extract_features import dictionary_kinds, extract_feature
from services.rectify_cards import rectify_card
from services.run_experiment import features_from_manifest

logger = logging.getLogger(__name__)


def _layout(args):
    return canonical_layout(args.layout or 12)


def _crop(path, layout):
    """Images already at crop size are used as they are; anything else is rectified first."""
    image = database.read_image(path)
    if image.size == layout.crop_size:
        return image
    return rectify_card(image, layout).crop


def rectify(args):
    layout = _layout(args)
    result = rectify_card(database.read_image(args.input), layout)
    database.insert_image(args.out, result.crop)
    if args.save_rectified:
        database.insert_image(args.save_rectified, result.rectified)
    if result.alignment_warning:
        logger.warning("wax marks not found in %s; crop uses the homography alone", args.input)
    print(f"Crop written to {args.out} (mean reprojection error {result.homography.mean_error:.2f} px).")


def fingerprint(args):
    layout = _layout(args)
    fp = extract_fingerprint(_crop(args.input, layout), layout, include_timer=not args.exclude_timer)
    database.insert_document(args.out, fp)
    print(f"Fingerprint of {len(fp.lane_colors)} lanes written to {args.out}.")


def _dictionaries(args) -> dict[str, Dictionary]:
    if args.model:
        return database.read_document(args.model, TrainedModel).dictionaries
    loaded = [database.read_document(path, Dictionary) for path in args.dictionary or []]
    return {dictionary.kind: dictionary for dictionary in loaded}


def features(args):
    dictionaries = _dictionaries(args)
    if args.manifest:
        if not args.out_dir:
            raise ConfigError("features --manifest writes to a directory; pass --out-dir")
        index = features_from_manifest(args.manifest, args.feature, args.out_dir, dictionaries, seed=args.seed,
                                       jobs=args.jobs, cache=cache_dir())
        print(f"{len(index.entries)} {index.kind} feature(s) written under {args.out_dir}.")
        return
    if not args.out:
        raise ConfigError("features --in writes one file; pass --out")
    layout = _layout(args)
    missing = [kind for kind in dictionary_kinds(args.feature) if kind not in dictionaries]
    if missing:
        raise ConfigError(f"{args.feature} needs a {' and a '.join(missing)} dictionary (--dict or --model)")
    vector = extract_feature(_crop(args.input, layout), args.feature, dictionaries)
    database.insert_document(args.out, vector)
    print(f"{vector.kind} feature written to {args.out}.")
