import logging
from pathlib import Path
import numpy as np
from pydantic import ValidationError
from data import database
from data.catalog import DRUGS, REAGENTS
from data.exceptions import ConfigError
from data.models import FingerprintDatabase, GeneratorConfig, ReagentSelectionConfig
from services import select_reagents
from services.render_cards import build_fingerprint_database, default_color_model, generate_dataset

logger = logging.getLogger(__name__)


def _config(path, model_cls):
    return model_cls() if path is None else database.read_document(path, model_cls)


def synth(args):
    config = _config(args.config, GeneratorConfig)
    overrides = {}
    if args.count is not None:
        overrides['images_per_drug'] = args.count
    if args.layout is not None:
        overrides['lane_count'] = args.layout
    try:
        config = GeneratorConfig.model_validate({**config.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigError(f"Invalid generator settings: {e}") from e
    manifest = generate_dataset(config, args.seed, args.out, jobs=args.jobs)
    print(f"Rendered {len(manifest.entries)} cards into {args.out}.")


def fingerprint_db(args):
    color_model = default_color_model(args.seed)
    db = build_fingerprint_database(color_model, replicates=args.replicates, seed=args.seed,
                                    from_images=args.from_images, jobs=args.jobs)
    database.insert_document(args.out, db)
    print(f"Fingerprint database with {len(db.records)} records written to {args.out}.")


def select_reagents_command(args):
    """Distance matrix, SVD ranking, panel choice and uniqueness check in one run."""
    config = _config(args.config, ReagentSelectionConfig)
    if args.panel_size is not None:
        config = config.model_copy(update={'panel_size': args.panel_size})
    db = database.read_document(args.db, FingerprintDatabase)
    unknown = [name for name in db.drugs if name not in DRUGS] + [name for name in db.reagents if name not in REAGENTS]
    if unknown:
        logger.warning("database names outside the catalog: %s", ', '.join(unknown))

    matrix = select_reagents.build_distance_matrix(db, config.mode, config.baseline_drug)
    result = select_reagents.svd(matrix)
    panel = select_reagents.select_panel(matrix, result, config.panel_size, config.required_reagents)
    report = select_reagents.verify_uniqueness(select_reagents.panel_fingerprints(db, panel))

    out = Path(args.out)
    database.insert_document(out, panel)
    if args.report:
        database.insert_document(args.report, report)
    if not report.passed:
        raise ConfigError(f"panel fails the uniqueness check for {len(report.failing)} drug pair(s); "
                          f"worst {report.worst_pair}")
    print(f"Panel of {len(panel.reagents)} lanes written to {out}; worst margin "
          f"{np.min(list(report.margins.values())):.2f}.")
