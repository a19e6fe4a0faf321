import logging
from itertools import combinations
import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import StratifiedKFold
from data.exceptions import FeatureKindMismatch, NotEnoughExamplesPerClass, SingleClassTrainingSet
from data.models import (
    ConfusionMatrix,
    DatasetManifest,
    Evaluation,
    FeatureVector,
    HyperparamSearch,
    LabeledSet,
    PairModel,
    Prediction,
    Standardizer,
    TrainedModel,
)

logger = logging.getLogger(__name__)

C_GRID = [2.0 ** e for e in range(-2, 11, 2)]
GAMMA_GRID = [2.0 ** e for e in range(-12, 3, 3)]
SMO_TOL = 1e-3
MAX_PASSES = 200
STEP_EPS = 1e-12


# ---------------------------------------------------------------- folds

def assign_folds(labels, folds: int = 3, seed: int = 0) -> np.ndarray:
    """Stratified fold index per item; every class is spread evenly over the folds."""
    labels = np.asarray(labels)
    if folds == 1:
        return np.zeros(len(labels), dtype=np.int64)
    _, counts = np.unique(labels, return_counts=True)
    if counts.min() < folds:
        raise NotEnoughExamplesPerClass(f"a class has {counts.min()} item(s), fewer than {folds} folds")
    assignment = np.empty(len(labels), dtype=np.int64)
    splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (_, test) in enumerate(splitter.split(np.zeros(len(labels)), labels)):
        assignment[test] = fold
    return assignment


def kfold_split(manifest: DatasetManifest, folds: int = 3, seed: int = 0) -> np.ndarray:
    return assign_folds([entry.drug_label for entry in manifest.entries], folds, seed)


# ---------------------------------------------------------------- shared

def fit_standardizer(vectors) -> Standardizer:
    vectors = np.asarray(vectors, dtype=np.float64)
    scale = vectors.std(axis=0)
    return Standardizer(mean=vectors.mean(axis=0), scale=np.where(scale > 0, scale, 1.0))


def _query_matrix(model: TrainedModel, queries) -> np.ndarray:
    if isinstance(queries, FeatureVector):
        queries = [queries]
    if isinstance(queries, LabeledSet):
        if queries.kind != model.feature_kind:
            raise FeatureKindMismatch(f"model expects {model.feature_kind}, got {queries.kind}")
        return model.standardizer.transform(queries.vectors)
    if len(queries) and isinstance(queries[0], FeatureVector):
        for query in queries:
            if query.kind != model.feature_kind:
                raise FeatureKindMismatch(f"model expects {model.feature_kind}, got {query.kind}")
        queries = [query.values for query in queries]
    matrix = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if matrix.shape[1] != len(model.standardizer.mean):
        raise FeatureKindMismatch(f"model expects {len(model.standardizer.mean)} values, got {matrix.shape[1]}")
    return model.standardizer.transform(matrix)


def _class_names(labels, class_names):
    if class_names is not None:
        return list(class_names)
    return [str(i) for i in range(int(np.max(labels)) + 1)]


# ---------------------------------------------------------------- kNN

def train_knn(train: LabeledSet, class_names=None) -> TrainedModel:
    standardizer = fit_standardizer(train.vectors)
    names = _class_names(train.labels, class_names)
    return TrainedModel(classifier='knn', feature_kind=train.kind, n_classes=len(names), class_names=names,
                        standardizer=standardizer, exemplars=standardizer.transform(train.vectors),
                        exemplar_labels=train.labels.copy())


def knn_predict(model: TrainedModel, queries) -> list[Prediction]:
    """1-NN under squared Euclidean distance; equal distances go to the lower exemplar index."""
    x = _query_matrix(model, queries)
    predictions = []
    for start in range(0, len(x), 1024):
        nearest = np.argmin(cdist(x[start:start + 1024], model.exemplars, 'sqeuclidean'), axis=1)
        for label in model.exemplar_labels[nearest]:
            confidence = np.zeros(model.n_classes)
            confidence[label] = 1.0
            predictions.append(Prediction(label=int(label), name=model.class_names[label], confidence=confidence))
    return predictions


# ---------------------------------------------------------------- SVM

def rbf_kernel(x, y, gamma: float):
    """exp(-gamma * ||x - y||^2); matrices of row vectors give the full Gram matrix."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim == 1 and y.ndim == 1:
        return float(np.exp(-gamma * np.sum((x - y) ** 2)))
    return np.exp(-gamma * cdist(np.atleast_2d(x), np.atleast_2d(y), 'sqeuclidean'))


def _smo(K, y, C, tol, max_passes):
    """Dual coordinate ascent on one binary problem with a precomputed kernel.

    Working pairs are chosen by second-order maximal violation: i is the index
    that most wants alpha to grow along y, j the partner giving the largest
    guaranteed objective decrease. Stops once the violation gap is at most tol.
    Returns (alpha, bias, converged).
    """
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)

    def gap():
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        return score, up, low

    converged = False
    for _ in range(max_passes * n):
        score, up, low = gap()
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        if score[i] - score[low].min() <= tol:
            converged = True
            break
        candidates = np.flatnonzero(low & (score < score[i]))
        b = score[i] - score[candidates]
        a = K[i, i] + K[candidates, candidates] - 2 * K[i, candidates]
        a = np.where(a > 0, a, STEP_EPS)
        j = int(candidates[np.argmin(-(b * b) / a)])

        ai, aj = alpha[i], alpha[j]
        quad = max(K[i, i] + K[j, j] - 2 * K[i, j], STEP_EPS)
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            alpha[i], alpha[j] = ai + delta, aj + delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            else:
                if alpha[i] < 0:
                    alpha[i], alpha[j] = 0.0, -diff
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            alpha[i], alpha[j] = ai - delta, aj + delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            else:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, total
                if alpha[i] < 0:
                    alpha[i], alpha[j] = 0.0, total
        grad += y * (K[:, i] * y[i] * (alpha[i] - ai) + K[:, j] * y[j] * (alpha[j] - aj))
    else:
        score, up, low = gap()
        converged = score[up].max() - score[low].min() <= tol

    score, up, low = gap()
    free = (alpha > 0) & (alpha < C)
    bias = float(score[free].mean()) if free.any() else float((score[up].max() + score[low].min()) / 2)
    return alpha, bias, converged


def _fit_pairs(K, labels, classes, C, tol, max_passes, jobs=1):
    def fit(a, c):
        idx = np.flatnonzero((labels == a) | (labels == c))
        y = np.where(labels[idx] == a, 1.0, -1.0)
        alpha, bias, converged = _smo(K[np.ix_(idx, idx)], y, C, tol, max_passes)
        if not converged:
            logger.warning("SMO for classes (%d, %d) stopped before meeting tol=%g", a, c, tol)
        keep = alpha > 0
        return (int(a), int(c)), idx[keep], (alpha * y)[keep], float(bias), converged

    return Parallel(n_jobs=jobs, backend='threading')(delayed(fit)(a, c) for a, c in combinations(classes, 2))


def _vote(decisions, pairs, n_classes):
    """Winning class and vote shares for each row of pairwise decision values."""
    votes = np.zeros((len(decisions), n_classes))
    oriented = np.zeros((len(decisions), n_classes))
    for p, (a, c) in enumerate(pairs):
        positive = decisions[:, p] >= 0
        votes[positive, a] += 1
        votes[~positive, c] += 1
        oriented[:, a] += decisions[:, p]
        oriented[:, c] -= decisions[:, p]
    winners = []
    for row_votes, row_oriented in zip(votes, oriented):
        tied = np.flatnonzero(row_votes == row_votes.max())
        winners.append(int(tied[np.argmax(row_oriented[tied])]))
    return np.array(winners), votes / len(pairs)


def _pair_decisions(kernel_rows, fitted):
    return np.stack([kernel_rows[:, support] @ coef + bias for _, support, coef, bias, _ in fitted], axis=1)


def svm_train(train: LabeledSet, C: float, gamma: float, tol: float = SMO_TOL, max_passes: int = MAX_PASSES,
              class_names=None, jobs: int = 1) -> TrainedModel:
    """One-vs-one RBF SVMs, one per pair of classes present in train."""
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise SingleClassTrainingSet(f"SVM training needs two classes, got {len(classes)}")
    standardizer = fit_standardizer(train.vectors)
    x = standardizer.transform(train.vectors)
    K = rbf_kernel(x, x, gamma)
    fitted = _fit_pairs(K, train.labels, classes, C, tol, max_passes, jobs)

    used = np.unique(np.concatenate([support for _, support, _, _, _ in fitted]))
    position = {int(i): k for k, i in enumerate(used)}
    pairs = [PairModel(classes=classes_, support=np.array([position[int(i)] for i in support], dtype=np.int64),
                       coef=coef, bias=bias, converged=converged)
             for classes_, support, coef, bias, converged in fitted]
    names = _class_names(train.labels, class_names)
    logger.info("trained %d pair SVMs, %d support vectors (C=%g, gamma=%g)", len(pairs), len(used), C, gamma)
    return TrainedModel(classifier='svm', feature_kind=train.kind, n_classes=len(names), class_names=names,
                        standardizer=standardizer, support_vectors=x[used], pairs=pairs, gamma=gamma, C=C)


def svm_decision_values(model: TrainedModel, queries) -> np.ndarray:
    x = _query_matrix(model, queries)
    kernel_rows = rbf_kernel(x, model.support_vectors, model.gamma)
    return np.stack([kernel_rows[:, pair.support] @ pair.coef + pair.bias for pair in model.pairs], axis=1)


def svm_predict(model: TrainedModel, queries) -> list[Prediction]:
    """Majority vote over pairs; ties go to the larger summed decision value, then the lower class."""
    decisions = svm_decision_values(model, queries)
    winners, shares = _vote(decisions, [pair.classes for pair in model.pairs], model.n_classes)
    return [Prediction(label=int(w), name=model.class_names[w], confidence=s) for w, s in zip(winners, shares)]


def predict(model: TrainedModel, queries) -> list[Prediction]:
    return knn_predict(model, queries) if model.classifier == 'knn' else svm_predict(model, queries)


# ---------------------------------------------------------------- model selection

def cross_validate_hyperparams(train: LabeledSet, c_grid=C_GRID, gamma_grid=GAMMA_GRID, folds: int = 3,
                               seed: int = 0, tol: float = SMO_TOL, jobs: int = 1) -> HyperparamSearch:
    """Grid search on stratified inner folds of the training set only.

    Ties on mean validation accuracy go to the smaller C, then the smaller gamma.
    """
    if folds < 2:
        raise NotEnoughExamplesPerClass("cross-validation needs at least 2 folds")
    labels = train.labels
    assignment = assign_folds(labels, folds, seed)
    grid = sorted((float(c), float(g)) for c in c_grid for g in gamma_grid)
    splits = []
    for fold in range(folds):
        fit_idx, val_idx = np.flatnonzero(assignment != fold), np.flatnonzero(assignment == fold)
        standardizer = fit_standardizer(train.vectors[fit_idx])
        x_fit = standardizer.transform(train.vectors[fit_idx])
        x_val = standardizer.transform(train.vectors[val_idx])
        splits.append((fit_idx, val_idx, cdist(x_fit, x_fit, 'sqeuclidean'), cdist(x_val, x_fit, 'sqeuclidean')))
    n_classes = int(labels.max()) + 1

    def score(C, gamma):
        correct = []
        for fit_idx, val_idx, d_fit, d_val in splits:
            fit_labels = labels[fit_idx]
            fitted = _fit_pairs(np.exp(-gamma * d_fit), fit_labels, np.unique(fit_labels), C, tol, MAX_PASSES)
            winners, _ = _vote(_pair_decisions(np.exp(-gamma * d_val), fitted), [f[0] for f in fitted], n_classes)
            correct.append(np.mean(winners == labels[val_idx]))
        return float(np.mean(correct))

    scores = Parallel(n_jobs=jobs, backend='threading')(delayed(score)(C, gamma) for C, gamma in grid)
    best = 0
    for k, value in enumerate(scores):
        if value > scores[best]:
            best = k
    C, gamma = grid[best]
    logger.info("cross-validation picked C=%g gamma=%g (accuracy %.4f)", C, gamma, scores[best])
    return HyperparamSearch(C=C, gamma=gamma,
                            scores={f'C={c:g},gamma={g:g}': s for (c, g), s in zip(grid, scores)})


def train_classifier(train: LabeledSet, classifier: str, class_names=None, c_grid=C_GRID, gamma_grid=GAMMA_GRID,
                     folds: int = 3, seed: int = 0, jobs: int = 1):
    """Fit a kNN model, or an SVM with cross-validated (C, gamma); returns (model, search or None)."""
    if classifier == 'knn':
        return train_knn(train, class_names), None
    search = cross_validate_hyperparams(train, c_grid, gamma_grid, folds, seed, jobs=jobs)
    return svm_train(train, search.C, search.gamma, class_names=class_names, jobs=jobs), search


def evaluate(model: TrainedModel, test: LabeledSet) -> Evaluation:
    """Top-1 accuracy plus count and mean-confidence confusion matrices (rows are true classes)."""
    predictions = predict(model, test)
    predicted = np.array([p.label for p in predictions])
    classes = np.arange(model.n_classes)
    counts = confusion_matrix(test.labels, predicted, labels=classes)
    confidence = np.zeros((model.n_classes, model.n_classes))
    for label in np.unique(test.labels):
        rows = np.flatnonzero(test.labels == label)
        confidence[label] = np.mean([predictions[i].confidence for i in rows], axis=0)
    correct = int(np.sum(predicted == test.labels))
    return Evaluation(top1_accuracy=correct / len(test.labels), correct=correct, total=len(test.labels),
                      confusion=ConfusionMatrix(counts=counts, confidence=confidence, class_names=model.class_names))
