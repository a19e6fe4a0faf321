import logging
from pathlib import Path
import cv2
import numpy as np
from joblib import Parallel, delayed
from data import database
from data.exceptions import ConfigError, DegenerateFiducials, NotEnoughFiducials
from data.models import (
    CardLayout,
    CellReport,
    DatasetManifest,
    ExperimentConfig,
    ExperimentReport,
    FEATURE_NAMES,
    FeatureIndex,
    LabeledSet,
    Prediction,
    Raster,
    TrainedModel,
    digest_of,
)
from services.card_geometry import canonical_layout
from services.extract_blobs import extract_fingerprint
from services.extract_features import DICTIONARY_SAMPLE, dictionary_kinds, extract_feature, train_dictionary
from services.rectify_cards import rectify_card
from services.render_cards import card_seed, permute_lanes
from services.train_classifiers import evaluate, kfold_split, predict, train_classifier

logger = logging.getLogger(__name__)

FEATURE_OF_KIND = {kind: name for name, kind in FEATURE_NAMES.items()}


# ---------------------------------------------------------------- crops

def load_crop(path, layout: CardLayout, perturbation: str = 'none', cache=None) -> Raster:
    """Salient crop of the photograph at path.

    'unrectified' skips rectification and resizes the whole photograph to the
    crop size. A card that fails to rectify falls back to the same resize.
    """
    raw = database.read_image(path)
    mode = 'unrectified' if perturbation == 'unrectified' else 'rectified'
    key = f'{raw.digest()[:24]}-{mode}-{layout.lane_count}'
    if cache is not None:
        cached = database.read_cached_crop(cache, key)
        if cached is not None:
            return cached
    if mode == 'rectified':
        try:
            crop = rectify_card(raw, layout).crop
        except (NotEnoughFiducials, DegenerateFiducials) as e:
            logger.warning("rectification failed for %s (%s); using the resized photograph", path, e)
            crop = _resized(raw, layout)
    else:
        crop = _resized(raw, layout)
    if cache is not None:
        database.update_cached_crop(cache, key, crop)
    return crop


def _resized(raw: Raster, layout: CardLayout) -> Raster:
    return Raster(pixels=cv2.resize(raw.pixels, layout.crop_size, interpolation=cv2.INTER_AREA))


def fold_permutation(seed: int, fold: int, lane_count: int) -> list[int]:
    """Seeded non-identity lane order shared by every test crop of a fold."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(fold), lane_count]))
    while True:
        permutation = [int(p) for p in rng.permutation(lane_count)]
        if permutation != list(range(lane_count)):
            return permutation


# ---------------------------------------------------------------- features

def _feature_key(crop, feature, dictionaries):
    kinds = dictionary_kinds(feature)
    dictionary_digest = digest_of([dictionaries[k].digest() for k in kinds]) if kinds else None
    return database.feature_cache_key(crop.digest(), feature.replace('+', '_'), dictionary_digest)


def _feature_vector(crop, feature, dictionaries, cache):
    key = _feature_key(crop, feature, dictionaries)
    if cache is not None:
        cached = database.read_cached_feature(cache, key)
        if cached is not None:
            return cached
    vector = extract_feature(crop, feature, dictionaries)
    if cache is not None:
        database.update_cached_feature(cache, key, vector)
    return vector


def labeled_set(crops, labels, ids, feature: str, dictionaries=None, cache=None, jobs: int = 1) -> LabeledSet:
    vectors = Parallel(n_jobs=jobs, backend='threading')(
        delayed(_feature_vector)(crop, feature, dictionaries or {}, cache) for crop in crops)
    return LabeledSet.from_vectors(vectors, labels, ids)


def train_dictionaries(crops, features, seed: int, sample: int = DICTIONARY_SAMPLE, jobs: int = 1) -> dict:
    kinds = sorted({kind for feature in features for kind in dictionary_kinds(feature)})
    trained = Parallel(n_jobs=jobs, backend='threading')(
        delayed(train_dictionary)(crops, kind, seed, sample) for kind in kinds)
    return dict(zip(kinds, trained))


# ---------------------------------------------------------------- manifests

def _load_manifest(path):
    manifest = database.read_document(path, DatasetManifest)
    return manifest, Path(path).parent


def _manifest_crops(manifest, root, layout, perturbation, cache, jobs):
    logger.info("loading %d crops (%s)", len(manifest.entries), perturbation)
    return Parallel(n_jobs=jobs, backend='threading')(
        delayed(load_crop)(root / entry.image_path, layout, perturbation, cache) for entry in manifest.entries)


def _labels(manifest):
    names = manifest.drugs
    return names, np.array([names.index(entry.drug_label) for entry in manifest.entries], dtype=np.int64)


def train_from_manifest(manifest_path, feature: str, classifier: str, seed: int = 0, jobs: int = 1,
                        cache=None, folds: int = 3) -> TrainedModel:
    """Fit a model on the manifest's train split, dictionaries included."""
    if feature not in FEATURE_NAMES:
        raise ConfigError(f"unknown feature {feature!r}; choose from {sorted(FEATURE_NAMES)}")
    manifest, root = _load_manifest(manifest_path)
    layout = canonical_layout(manifest.lane_count)
    names, labels = _labels(manifest)
    train = [i for i, entry in enumerate(manifest.entries) if entry.split == 'train']
    if not train:
        raise ConfigError(f"{manifest_path} has no train entries")
    crops = _manifest_crops(manifest.model_copy(update={'entries': [manifest.entries[i] for i in train]}),
                            root, layout, 'none', cache, jobs)
    dictionaries = train_dictionaries(crops, [feature], seed, jobs=jobs)
    data = labeled_set(crops, labels[train], [manifest.entries[i].image_path for i in train],
                       feature, dictionaries, cache, jobs)
    model, _ = train_classifier(data, classifier, names, folds=folds, seed=seed, jobs=jobs)
    return model.model_copy(update={'dictionaries': dictionaries, 'fold': 0, 'lane_count': manifest.lane_count})


def features_from_manifest(manifest_path, feature: str, out_dir, dictionaries=None, seed: int = 0, jobs: int = 1,
                           cache=None) -> FeatureIndex:
    """Feature vector of every manifest image, stored once per image under out_dir.

    Dictionaries not supplied are trained on the train split and written to
    out_dir as <kind>.dictionary.json. Vectors already under out_dir are reused.
    """
    if feature not in FEATURE_NAMES:
        raise ConfigError(f"unknown feature {feature!r}; choose from {sorted(FEATURE_NAMES)}")
    manifest, root = _load_manifest(manifest_path)
    out_dir = Path(out_dir)
    crops = _manifest_crops(manifest, root, canonical_layout(manifest.lane_count), 'none', cache, jobs)
    dictionaries = dict(dictionaries or {})
    for kind in dictionary_kinds(feature):
        if kind in dictionaries:
            continue
        train = [crop for crop, entry in zip(crops, manifest.entries) if entry.split == 'train']
        if not train:
            raise ConfigError(f"{manifest_path} has no train entries to build a {kind} dictionary from")
        dictionaries[kind] = train_dictionary(train, kind, seed)
        database.insert_document(out_dir / f'{kind}.dictionary.json', dictionaries[kind])
    Parallel(n_jobs=jobs, backend='threading')(
        delayed(_feature_vector)(crop, feature, dictionaries, out_dir) for crop in crops)
    index = FeatureIndex(kind=FEATURE_NAMES[feature],
                         entries={entry.image_path: _feature_key(crop, feature, dictionaries)
                                  for entry, crop in zip(manifest.entries, crops)})
    database.insert_document(out_dir / 'index.json', index)
    return index


def _cell(feature, classifier, evaluations, hyperparams) -> CellReport:
    accuracies = [e.top1_accuracy for e in evaluations]
    return CellReport(
        feature=feature,
        classifier=classifier,
        fold_correct=[e.correct for e in evaluations],
        fold_total=[e.total for e in evaluations],
        fold_accuracies=accuracies,
        mean_accuracy=float(np.mean(accuracies)),
        std_accuracy=float(np.std(accuracies)),
        hyperparams=hyperparams,
        confusion=np.sum([e.confusion.counts for e in evaluations], axis=0).tolist(),
        confidence=np.mean([e.confusion.confidence for e in evaluations], axis=0).tolist(),
    )


def evaluate_from_manifest(manifest_path, model_path, jobs: int = 1, cache=None) -> ExperimentReport:
    """Score a stored model on the manifest's test split as a one-fold report."""
    manifest, root = _load_manifest(manifest_path)
    model = database.read_document(model_path, TrainedModel)
    layout = canonical_layout(model.lane_count)
    names, labels = _labels(manifest)
    if names != model.class_names:
        labels = np.array([model.class_names.index(n) if n in model.class_names else -1
                           for n in (e.drug_label for e in manifest.entries)], dtype=np.int64)
        if np.any(labels < 0):
            raise ConfigError(f"{manifest_path} holds drugs the model was not trained on")
    test = [i for i, entry in enumerate(manifest.entries) if entry.split == 'test']
    if not test:
        raise ConfigError(f"{manifest_path} has no test entries")
    crops = _manifest_crops(manifest.model_copy(update={'entries': [manifest.entries[i] for i in test]}),
                            root, layout, 'none', cache, jobs)
    feature = FEATURE_OF_KIND[model.feature_kind]
    data = labeled_set(crops, labels[test], [manifest.entries[i].image_path for i in test],
                       feature, model.dictionaries, cache, jobs)
    evaluation = evaluate(model, data)
    hyperparams = [{'C': model.C, 'gamma': model.gamma}] if model.classifier == 'svm' else [{}]
    return ExperimentReport(
        config_digest=digest_of({'manifest': manifest.model_dump(mode='json'), 'model': model.model_dump(mode='json')}),
        seed=0, perturbation='none', class_names=model.class_names,
        cells=[_cell(feature, model.classifier, [evaluation], hyperparams)])


# ---------------------------------------------------------------- experiments

def _run_fold(fold, assignment, crops, labels, ids, config, layout, names, cache, jobs):
    train = np.flatnonzero(assignment != fold)
    test = np.flatnonzero(assignment == fold)
    train_crops = [crops[i] for i in train]
    test_crops = [crops[i] for i in test]
    if config.perturbation == 'lane_permutation':
        permutation = fold_permutation(config.seed, fold, layout.lane_count)
        logger.info("fold %d: test lanes reordered as %s", fold, permutation)
        test_crops = [permute_lanes(crop, layout, permutation) for crop in test_crops]

    fold_seed = card_seed(config.seed, fold)
    dictionaries = train_dictionaries(train_crops, config.features, fold_seed, config.dictionary_sample, jobs)
    results = {}
    for feature in config.features:
        train_set = labeled_set(train_crops, labels[train], [ids[i] for i in train], feature, dictionaries, cache, jobs)
        test_set = labeled_set(test_crops, labels[test], [ids[i] for i in test], feature, dictionaries, cache, jobs)
        for classifier in config.classifiers:
            model, search = train_classifier(train_set, classifier, names, config.c_grid, config.gamma_grid,
                                             seed=fold_seed, jobs=jobs)
            evaluation = evaluate(model, test_set)
            logger.info("fold %d %s/%s: %d/%d", fold, feature, classifier, evaluation.correct, evaluation.total)
            results[(feature, classifier)] = (evaluation, {'C': search.C, 'gamma': search.gamma} if search else {})
    return results


def run_experiment(config: ExperimentConfig, jobs: int = 1, cache=None) -> ExperimentReport:
    """Every (feature, classifier) cell evaluated over stratified folds.

    Writes report.json and table.txt into config.output_dir.
    """
    manifest, root = _load_manifest(config.manifest)
    layout = canonical_layout(manifest.lane_count)
    names, labels = _labels(manifest)
    ids = [entry.image_path for entry in manifest.entries]
    if config.folds == manifest.folds:
        assignment = np.array([entry.fold for entry in manifest.entries], dtype=np.int64)
    else:
        assignment = kfold_split(manifest, config.folds, config.seed)
    crops = _manifest_crops(manifest, root, layout, config.perturbation, cache, jobs)

    per_fold = [_run_fold(fold, assignment, crops, labels, ids, config, layout, names, cache, jobs)
                for fold in range(config.folds)]
    cells = []
    for feature in config.features:
        for classifier in config.classifiers:
            outcomes = [results[(feature, classifier)] for results in per_fold]
            cells.append(_cell(feature, classifier, [e for e, _ in outcomes], [h for _, h in outcomes]))
    report = ExperimentReport(config_digest=config.digest(), seed=config.seed, perturbation=config.perturbation,
                              class_names=names, cells=cells)
    out = Path(config.output_dir)
    database.insert_document(out / 'report.json', report)
    database.insert_text(out / 'table.txt', render_table(report))
    return report


def render_table(report: ExperimentReport) -> str:
    folds = max((len(cell.fold_correct) for cell in report.cells), default=0)
    header = ['Feature', 'Classifier'] + [f'Fold {k + 1}' for k in range(folds)] + ['Average', 'Std']
    rows = []
    for cell in report.cells:
        correct, total = sum(cell.fold_correct), sum(cell.fold_total)
        row = [cell.feature, cell.classifier]
        row += [f'{c}/{t} ({100 * c / t:.2f}%)' for c, t in zip(cell.fold_correct, cell.fold_total)]
        row += [f'{correct / folds:.0f}/{total / folds:.0f} ({100 * cell.mean_accuracy:.2f}%)',
                f'{100 * cell.std_accuracy:.2f}']
        rows.append(row)
    widths = [max(len(line[i]) for line in [header] + rows) for i in range(len(header))]
    lines = [f'# config {report.config_digest[:12]} seed {report.seed} perturbation {report.perturbation}']
    for line in [header] + rows:
        lines.append('  '.join(text.ljust(width) for text, width in zip(line, widths)).rstrip())
    return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------- prediction

def pipeline_predict(image_path, model_path, dump_dir=None) -> Prediction:
    """Classify one photograph (or an already cropped image) with a stored model.

    With dump_dir the rectified card, fingerprint and feature vector are written there.
    """
    model = database.read_document(model_path, TrainedModel)
    layout = canonical_layout(model.lane_count)
    image = database.read_image(image_path)
    rectified = None
    if image.size == layout.crop_size:
        crop = image
    else:
        result = rectify_card(image, layout)
        crop, rectified = result.crop, result.rectified
    vector = extract_feature(crop, FEATURE_OF_KIND[model.feature_kind], model.dictionaries)
    prediction = predict(model, [vector])[0]
    logger.info("%s classified as %s", image_path, prediction.name)
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        if rectified is not None:
            database.insert_image(dump_dir / 'rectified.png', rectified)
        database.insert_image(dump_dir / 'crop.png', crop)
        database.insert_document(dump_dir / 'fingerprint.json', extract_fingerprint(crop, layout))
        database.insert_document(dump_dir / 'feature.json', vector)
    return prediction
