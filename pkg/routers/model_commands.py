import json
from data import database
from data.models import ExperimentConfig
from data.settings import cache_dir
from services.run_experiment import evaluate_from_manifest, pipeline_predict, run_experiment, train_from_manifest


def train(args):
    model = train_from_manifest(args.manifest, args.feature, args.classifier, seed=args.seed, jobs=args.jobs,
                                cache=cache_dir())
    database.insert_document(args.out, model)
    print(f"{model.classifier} model on {model.feature_kind} written to {args.out}.")


def predict(args):
    prediction = pipeline_predict(args.input, args.model, dump_dir=args.dump)
    print(json.dumps({
        'label': prediction.name,
        'index': prediction.label,
        'confidence': [round(float(c), 6) for c in prediction.confidence],
    }, sort_keys=True))


def evaluate(args):
    report = evaluate_from_manifest(args.manifest, args.model, jobs=args.jobs, cache=cache_dir())
    database.insert_document(args.report, report)
    cell = report.cells[0]
    print(f"Top-1 accuracy {cell.fold_correct[0]}/{cell.fold_total[0]} ({100 * cell.mean_accuracy:.2f}%).")


def experiment(args):
    config = database.read_document(args.config, ExperimentConfig)
    if 'seed' not in config.model_fields_set:
        config = config.model_copy(update={'seed': args.seed})
    report = run_experiment(config, jobs=args.jobs, cache=cache_dir())
    best = max(report.cells, key=lambda cell: cell.mean_accuracy)
    print(f"Experiment finished: {len(report.cells)} cell(s), best {best.feature}/{best.classifier} "
          f"{100 * best.mean_accuracy:.2f}%; report in {config.output_dir}.")
