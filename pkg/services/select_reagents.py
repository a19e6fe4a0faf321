import logging
from itertools import combinations
import numpy as np
from data.catalog import BLANK_DRUG, TIMER_AGENT, TIMER_LANE
from data.exceptions import ConfigError, NotEnoughReplicates, PanelTooSmall, SvdNotConverged, UnknownDrug
from data.models import DistanceMatrix, FingerprintDatabase, ReagentPanel, SvdResult, UniquenessReport

logger = logging.getLogger(__name__)

WHITE = np.array([255.0, 255.0, 255.0])
MAX_DISTANCE = 255.0 * np.sqrt(3.0)
ROTATION_TOL = 1e-15
MAX_SWEEPS = 60
SVD_TOL = 1e-8


def build_distance_matrix(db: FingerprintDatabase, mode: str = 'white',
                          baseline_drug: str = BLANK_DRUG) -> DistanceMatrix:
    """Reaction strength of every (drug, reagent) pair.

    Entry (i, j) is the mean over lanes and replicates of the RGB distance
    between a lane's blob color and the reference: white, or in
    blank_baseline mode the baseline drug's mean color for the same lane.
    """
    if mode not in ('white', 'blank_baseline'):
        raise ConfigError(f"unknown distance matrix mode {mode!r}")
    if mode == 'blank_baseline' and baseline_drug not in db.drugs:
        raise UnknownDrug(f"baseline drug {baseline_drug!r} is not in the database")

    m = np.empty((len(db.drugs), len(db.reagents)))
    for j, reagent in enumerate(db.reagents):
        reference = WHITE if mode == 'white' else db.replicates(baseline_drug, reagent).mean(axis=0)
        for i, drug in enumerate(db.drugs):
            lanes = db.replicates(drug, reagent)
            m[i, j] = np.linalg.norm(lanes - reference, axis=2).mean()
    return DistanceMatrix(m=np.clip(m, 0.0, MAX_DISTANCE), drugs=db.drugs, reagents=db.reagents)


def _as_array(m) -> np.ndarray:
    a = np.asarray(m.m if isinstance(m, DistanceMatrix) else m, dtype=np.float64)
    if a.ndim != 2 or not np.all(np.isfinite(a)):
        raise ValueError("expected a finite 2-D matrix")
    return a


def _reagent_names(m, count: int) -> list[str]:
    return list(m.reagents) if isinstance(m, DistanceMatrix) else [f'reagent-{j}' for j in range(count)]


def _jacobi_sweeps(a):
    """One-sided Jacobi: rotate column pairs of a until they are mutually orthogonal."""
    work = a.copy()
    k = work.shape[1]
    v = np.eye(k)
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for p in range(k - 1):
            for q in range(p + 1, k):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if gamma == 0 or abs(gamma) <= ROTATION_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1 + zeta * zeta))
                c = 1 / np.sqrt(1 + t * t)
                s = c * t
                for target in (work, v):
                    col_p = target[:, p].copy()
                    target[:, p] = c * col_p - s * target[:, q]
                    target[:, q] = s * col_p + c * target[:, q]
        if not rotated:
            logger.debug("jacobi converged after %d sweep(s)", sweep + 1)
            return work, v
    raise SvdNotConverged(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _complete_basis(columns, n) -> np.ndarray:
    r = columns.shape[1]
    if r == n:
        return columns
    q, _ = np.linalg.qr(np.hstack([columns, np.eye(n)]))
    q = q[:, :n].copy()
    q[:, :r] = columns
    return q


def _thin_svd(a):
    work, v = _jacobi_sweeps(a)
    s = np.linalg.norm(work, axis=0)
    order = np.argsort(-s, kind='stable')
    s, work, v = s[order], work[:, order], v[:, order]
    cutoff = (s[0] if len(s) else 0.0) * max(a.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(s > cutoff))
    u = _complete_basis(work[:, :rank] / s[:rank], a.shape[0])
    s[rank:] = 0.0
    return u, s, v


def svd(m) -> SvdResult:
    """Full SVD M = U diag(S) V^t with singular values descending.

    Each right singular vector is signed so its largest-magnitude component is
    nonnegative; the matching left vector flips with it.
    """
    a = _as_array(m)
    transposed = a.shape[0] < a.shape[1]
    left, s, right = _thin_svd(a.T if transposed else a)
    u, v = (right, left) if transposed else (left, right)

    for j in range(v.shape[1]):
        lead = int(np.argmax(np.abs(v[:, j])))
        if v[lead, j] < 0:
            v[:, j] = -v[:, j]
            if j < len(s):
                u[:, j] = -u[:, j]

    r = len(s)
    scale = max(np.linalg.norm(a), 1.0)
    if np.linalg.norm(u[:, :r] * s @ v[:, :r].T - a) > SVD_TOL * scale:
        raise SvdNotConverged("SVD reconstruction error exceeds tolerance")
    for basis in (u, v):
        if np.linalg.norm(basis.T @ basis - np.eye(basis.shape[1])) > SVD_TOL * basis.shape[1]:
            raise SvdNotConverged("singular vectors are not orthonormal")
    return SvdResult(u=u, s=s, v=v)


def _scores(svd_result: SvdResult) -> np.ndarray:
    r = len(svd_result.s)
    return np.abs(svd_result.u[:, :r] * svd_result.s) @ np.abs(svd_result.v[:, :r]).T


def rank_reagents_for_drug(m, svd_result: SvdResult, drug_index: int) -> list[int]:
    """Reagents by descending sum_k s_k |U[i,k] V[j,k]|, ties to the lower index."""
    n_drugs = _as_array(m).shape[0]
    if not 0 <= drug_index < n_drugs:
        raise UnknownDrug(f"drug index {drug_index} is outside 0..{n_drugs - 1}")
    scores = _scores(svd_result)[drug_index]
    return [int(j) for j in np.argsort(-scores, kind='stable')]


def select_panel(m, svd_result: SvdResult, panel_size: int = 12, required_reagents=()) -> ReagentPanel:
    """Timer lane, then every drug's top reagent, then required reagents, then the best globally."""
    n_drugs, n_reagents = _as_array(m).shape
    if panel_size - 1 > n_reagents:
        raise PanelTooSmall(f"cannot fill {panel_size - 1} reagent lanes from {n_reagents} reagents")

    top1 = [rank_reagents_for_drug(m, svd_result, i)[0] for i in range(n_drugs)]
    chosen = list(dict.fromkeys(top1))
    for reagent in required_reagents:
        if not 0 <= reagent < n_reagents:
            raise ConfigError(f"required reagent {reagent} is outside 0..{n_reagents - 1}")
        if reagent not in chosen:
            chosen.append(int(reagent))
    if len(chosen) > panel_size - 1:
        raise PanelTooSmall(f"panel of {panel_size} cannot hold the timer and {len(chosen)} required reagents")

    names = _reagent_names(m, n_reagents)
    overall = _scores(svd_result).sum(axis=0)
    for j in np.argsort(-overall, kind='stable'):
        if len(chosen) == panel_size - 1:
            break
        if int(j) not in chosen:
            chosen.append(int(j))
    logger.debug("panel: %d distinct top-1 reagents, %d lanes", len(dict.fromkeys(top1)), panel_size)
    return ReagentPanel(reagents=[TIMER_LANE] + chosen,
                        names=[TIMER_AGENT] + [names[j] for j in chosen],
                        top1=top1)


def panel_fingerprints(db: FingerprintDatabase, panel, timer_color=(236, 128, 178)) -> dict[str, np.ndarray]:
    """Expected panel-card fingerprints per drug, one row per replicate.

    Each reagent lane takes the replicate's mean over the 9 single-reagent lanes;
    the timer lane is the fixed timer color.
    """
    reagents = panel.reagents if isinstance(panel, ReagentPanel) else [int(r) for r in panel]
    if all(r == TIMER_LANE for r in reagents):
        raise PanelTooSmall("panel holds no reagent lanes")
    timer = np.asarray(timer_color, dtype=np.float64)
    fingerprints = {}
    for drug in db.drugs:
        blocks = [None if r == TIMER_LANE else db.replicates(drug, db.reagents[r]).mean(axis=1) for r in reagents]
        count = min(len(b) for b in blocks if b is not None)
        fingerprints[drug] = np.hstack([np.tile(timer, (count, 1)) if b is None else b[:count] for b in blocks])
    return fingerprints


def verify_uniqueness(fingerprints: dict[str, np.ndarray]) -> UniquenessReport:
    """Every pair of drugs must sit further apart than the larger of their replicate spreads.

    A drug's spread is the root mean square distance of its replicates to
    their mean (n - 1 denominator).
    """
    means, stds = {}, {}
    for drug, replicates in fingerprints.items():
        replicates = np.asarray(replicates, dtype=np.float64)
        replicates = replicates.reshape(len(replicates), -1)
        if len(replicates) < 2:
            raise NotEnoughReplicates(f"{drug} has {len(replicates)} replicate(s), need at least 2")
        means[drug] = replicates.mean(axis=0)
        stds[drug] = float(np.sqrt(np.sum((replicates - means[drug]) ** 2) / (len(replicates) - 1)))

    margins, failing = {}, []
    worst_pair, worst_margin = None, np.inf
    for p, q in combinations(fingerprints, 2):
        margin = float(np.linalg.norm(means[p] - means[q]) - max(stds[p], stds[q]))
        key = f'{p}|{q}'
        margins[key] = margin
        if margin <= 0:
            failing.append(key)
        if margin < worst_margin:
            worst_pair, worst_margin = (p, q), margin
    if failing:
        logger.warning("%d drug pair(s) fail the uniqueness check", len(failing))
    return UniquenessReport(passed=not failing, worst_pair=worst_pair, margins=margins,
                            failing=failing, stds=stds)
