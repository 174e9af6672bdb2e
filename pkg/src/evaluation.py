"""
Evaluation
==========

Re-identification defence, the evaluation metrics and the experiment
protocols built on them.

Metrics:
- acc:   classifier accuracy on benign test images
- ASR:   successful adversarial examples / attacked images
- rho:   mean perturbation of successful examples (L2 and per-pixel)
- DR:    correct detector verdicts / size of the mixed benign+adversarial set
- DSR:   successful adversarial examples relabelled correctly by the defence /
         successful adversarial examples
- FSA:   within-class compactness, 1 - normalised mean distance to the class
         centre, averaged over classes
- FSD:   mean Euclidean distance between class centres over all K(K-1)/2 pairs

Rates that are undefined (empty denominators) come back as None with a
warning; no metric ever reports NaN.
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from attacks import AttackSpec, run_attack
from classifier import Classifier, accuracy
from detector import AdvDetector, detect
from mnist_loader import ImageSet, NUM_CLASSES
from pairs import PairDataset
from sfe import SfeModel, generate_sf

logger = logging.getLogger(__name__)

REPORT_FIELDS = ('experiment_id', 'model', 'attack', 'eps', 'acc', 'asr', 'dr', 'dsr',
                 'rho_l2', 'rho_px', 'fsa', 'fsd', 'train_s', 'test_s', 'seed')
TREND_STAGES = ('benign', 'adversarial', 'defended_adversarial', 'defended_benign')


@dataclass
class EvalReport:
    """One experiment row; `config` holds the resolved configuration snapshot."""
    experiment_id: str
    model: str
    attack: str
    eps: Optional[float] = None
    acc: Optional[float] = None
    asr: Optional[float] = None
    dr: Optional[float] = None
    dsr: Optional[float] = None
    rho_l2: Optional[float] = None
    rho_px: Optional[float] = None
    fsa: Optional[float] = None
    fsd: Optional[float] = None
    train_s: Optional[float] = None
    test_s: Optional[float] = None
    seed: int = 0
    defense: str = 'sfe'
    config: Dict = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ('acc', 'asr', 'dr', 'dsr'):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is not a rate in [0, 1]")

    def row(self) -> Dict:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    def to_dict(self) -> Dict:
        return asdict(self)


def _rate(numerator: int, denominator: int, what: str) -> Optional[float]:
    if denominator == 0:
        logger.warning(f"⚠ {what} undefined: empty denominator")
        return None
    return numerator / denominator


# ------------------------------------------------------------------ defence

def defend_features(clf: Classifier, sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    return clf.classify_from_feature(generate_sf(sfe, features))[0]


def defend(clf: Classifier, sfe: SfeModel, images: np.ndarray) -> np.ndarray:
    """Labels of the reconstructed salient features: head(denorm(PG(h(x))))."""
    return defend_features(clf, sfe, clf.extract_feature(images))


def defense_success_rate(clf: Classifier, sfe: SfeModel, pairs: PairDataset) -> Optional[float]:
    """
    Fraction of successful adversarial examples whose defended label is the
    true label. None when no pair is success-flagged.
    """
    hits = pairs.successful()
    if len(hits) == 0:
        logger.warning(f"⚠ DSR undefined: no successful {pairs.attack_name} examples")
        return None
    labels = defend(clf, sfe, hits.adversarial)
    return float(np.mean(labels == hits.labels))


# ---------------------------------------------------------------- detection

def mixed_detection_set(pairs: PairDataset) -> Tuple[np.ndarray, np.ndarray]:
    """
    Benign partners and successful adversarial examples, truth 0 / 1.

    Balanced by construction: one benign row per adversarial row.
    """
    hits = pairs.successful()
    images = np.concatenate([hits.benign.images, hits.adversarial])
    truth = np.concatenate([np.zeros(len(hits), dtype=np.int64), np.ones(len(hits), dtype=np.int64)])
    return images, truth


def detection_rate(verdicts: np.ndarray, truth: np.ndarray) -> Optional[float]:
    """(true positives + true negatives) / N."""
    verdicts, truth = np.asarray(verdicts), np.asarray(truth)
    return _rate(int(np.sum(verdicts == truth)), len(truth), 'DR')


def evaluate_detection(det: AdvDetector, sfe: SfeModel, clf: Classifier, pairs: PairDataset,
                       threshold: Optional[float] = None) -> Optional[float]:
    images, truth = mixed_detection_set(pairs)
    if len(truth) == 0:
        logger.warning(f"⚠ DR undefined: no successful {pairs.attack_name} examples")
        return None
    return detection_rate(detect(det, sfe, clf, images, threshold).verdicts, truth)


@dataclass
class RocPoint:
    threshold: float
    dr: Optional[float]
    tpr: Optional[float]
    fpr: Optional[float]


def roc_sweep(scores: np.ndarray, truth: np.ndarray, thresholds: Sequence[float]) -> List[RocPoint]:
    """DR, TPR and FPR of the verdict score >= tau for every tau."""
    scores, truth = np.asarray(scores), np.asarray(truth)
    positives = int(np.sum(truth == 1))
    negatives = int(np.sum(truth == 0))
    points = []
    for tau in thresholds:
        flagged = scores >= tau
        tp = int(np.sum(flagged & (truth == 1)))
        fp = int(np.sum(flagged & (truth == 0)))
        points.append(RocPoint(
            threshold=float(tau),
            dr=detection_rate(flagged.astype(np.int64), truth),
            tpr=_rate(tp, positives, 'TPR'),
            fpr=_rate(fp, negatives, 'FPR'),
        ))
    return points


# ---------------------------------------------------------- feature metrics

def class_centers(features: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> Dict[int, np.ndarray]:
    """Mean feature per non-empty class; empty classes are skipped with a warning."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    centers = {}
    for k in range(num_classes):
        members = features[labels == k]
        if len(members) == 0:
            logger.warning(f"⚠ class {k} has no members, excluded")
            continue
        centers[k] = members.mean(axis=0)
    return centers


def within_class_distances(features: np.ndarray, labels: np.ndarray,
                           num_classes: int = NUM_CLASSES) -> Dict[int, float]:
    """Raw D_k: mean Euclidean distance of class k's features to their centre."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for k, center in class_centers(features, labels, num_classes).items():
        members = features[labels == k]
        out[k] = float(np.mean(np.linalg.norm(members - center, axis=1)))
    return out


@dataclass
class FsaResult:
    fsa: Optional[float]
    per_class: Dict[int, float]
    within: Dict[int, float]

    @property
    def mean_within(self) -> Optional[float]:
        return float(np.mean(list(self.within.values()))) if self.within else None


def fsa(features: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES,
        distance_range: Optional[Tuple[float, float]] = None) -> FsaResult:
    """
    Within-class compactness.

    D_k is min-max normalised over `distance_range` (default: the D_k of this
    set), FSA_k = 1 - norm(D_k) and FSA is the mean of FSA_k. Pass a shared
    range to compare several feature sets on one scale.
    """
    within = within_class_distances(features, labels, num_classes)
    if not within:
        logger.warning("⚠ FSA undefined: no non-empty class")
        return FsaResult(None, {}, {})
    lo, hi = distance_range if distance_range is not None else (min(within.values()), max(within.values()))
    span = hi - lo
    per_class = {}
    for k, d in within.items():
        norm = (d - lo) / span if span > 0 else 0.0
        per_class[k] = float(1.0 - np.clip(norm, 0.0, 1.0))
    return FsaResult(float(np.mean(list(per_class.values()))), per_class, within)


def fsd(features: np.ndarray, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> Optional[float]:
    """Mean distance between class centres over all unordered pairs; None below two classes."""
    centers = class_centers(features, labels, num_classes)
    if len(centers) < 2:
        logger.warning("⚠ FSD undefined: fewer than two classes")
        return None
    dists = [np.linalg.norm(centers[i] - centers[j]) for i, j in combinations(sorted(centers), 2)]
    return float(np.mean(dists))


@dataclass
class TrendRow:
    stage: str
    within: Optional[float]
    fsa: Optional[float]
    fsd: Optional[float]
    fsd_norm: Optional[float] = None


def trend_analysis(clf: Classifier, sfe: SfeModel, pairs: PairDataset) -> List[TrendRow]:
    """
    Within-class distance, FSA and FSD at four stages: benign features,
    adversarial features, defended SF of adversarial, defended SF of benign.

    FSA and the normalised FSD share one min-max scale across the stages.
    Successful pairs are used when there are any.
    """
    subset = pairs.successful() if np.any(pairs.success) else pairs
    labels = subset.labels
    benign = clf.extract_feature(subset.benign.images)
    adversarial = clf.extract_feature(subset.adversarial)
    stages = dict(zip(TREND_STAGES, (benign, adversarial, generate_sf(sfe, adversarial), generate_sf(sfe, benign))))
    within = {name: within_class_distances(f, labels) for name, f in stages.items()}
    pooled = [d for w in within.values() for d in w.values()]
    shared = (min(pooled), max(pooled)) if pooled else None

    rows = []
    for name, feats in stages.items():
        result = fsa(feats, labels, distance_range=shared)
        rows.append(TrendRow(name, result.mean_within, result.fsa, fsd(feats, labels)))

    fsds = [r.fsd for r in rows if r.fsd is not None]
    if fsds:
        lo, hi = min(fsds), max(fsds)
        for r in rows:
            if r.fsd is not None:
                r.fsd_norm = (r.fsd - lo) / (hi - lo) if hi > lo else 0.0
    for r in rows:
        logger.info(f"Trend {r.stage:<22} within={r.within} fsa={r.fsa} fsd={r.fsd}")
    return rows


# ---------------------------------------------------------------- protocols

@dataclass
class TransferCell:
    train_attack: str
    test_attack: str
    dr: Optional[float]
    dsr: Optional[float]
    flagged: bool = False


def transfer_row(clf: Classifier, sfe: SfeModel, det: AdvDetector, train_attack: str,
                 test_pairs: Dict[str, PairDataset]) -> List[TransferCell]:
    """
    Evaluate one SFE + AdvD (trained on `train_attack`) against every attack's
    held-out pairs. Cells whose attack produced no successful example are
    flagged and carry no rates.
    """
    cells = []
    for attack, pairs in test_pairs.items():
        if not np.any(pairs.success):
            logger.warning(f"⚠ transfer {train_attack} -> {attack}: attack never succeeded, cell flagged")
            cells.append(TransferCell(train_attack, attack, None, None, flagged=True))
            continue
        cells.append(TransferCell(train_attack, attack, evaluate_detection(det, sfe, clf, pairs),
                                  defense_success_rate(clf, sfe, pairs)))
    return cells


def transfer_matrix(clf: Classifier, defences: Dict[str, Tuple[SfeModel, AdvDetector]],
                    test_pairs: Dict[str, PairDataset]) -> List[TransferCell]:
    """Every (train attack, test attack) cell; the diagonal is the non-transfer result."""
    cells = []
    for train_attack, (sfe, det) in defences.items():
        cells.extend(transfer_row(clf, sfe, det, train_attack, test_pairs))
    return cells


@dataclass
class BenignImpact:
    samples: int
    acc_before: Optional[float]
    acc_after: Optional[float]
    seconds_before: Optional[float]
    seconds_after: Optional[float]


def benign_impact(clf: Classifier, sfe: SfeModel, images: ImageSet, sample: int = 1000,
                  seed: int = 0) -> BenignImpact:
    """Accuracy and wall clock of plain vs defended classification on a random benign sample."""
    n = min(sample, len(images))
    idx = np.sort(np.random.default_rng(seed).choice(len(images), size=n, replace=False))
    chosen = images.subset(idx)

    start = time.perf_counter()
    plain = clf.predict(chosen.images)[0]
    seconds_before = time.perf_counter() - start

    start = time.perf_counter()
    defended = defend(clf, sfe, chosen.images)
    seconds_after = time.perf_counter() - start

    result = BenignImpact(
        samples=n,
        acc_before=_rate(int(np.sum(plain == chosen.labels)), n, 'benign accuracy'),
        acc_after=_rate(int(np.sum(defended == chosen.labels)), n, 'defended benign accuracy'),
        seconds_before=seconds_before,
        seconds_after=seconds_after,
    )
    logger.info(f"Benign impact on {n} images: acc {result.acc_before} -> {result.acc_after}, "
                f"{seconds_before:.3f}s -> {seconds_after:.3f}s")
    return result


def evaluate_pairs(clf: Classifier, sfe: SfeModel, det: AdvDetector, pairs: PairDataset,
                   experiment_id: str, model: str, acc: Optional[float] = None,
                   threshold: Optional[float] = None, train_s: Optional[float] = None,
                   seed: int = 0, config: Optional[Dict] = None) -> EvalReport:
    """
    Full report for one attack's held-out pairs.

    FSA / FSD are measured on the defended SF of the successful adversarial
    examples; test_s covers detection plus defence.
    """
    start = time.perf_counter()
    dr = evaluate_detection(det, sfe, clf, pairs, threshold)
    dsr = defense_success_rate(clf, sfe, pairs)
    test_s = time.perf_counter() - start

    hits = pairs.successful()
    fsa_value = fsd_value = None
    within = None
    if len(hits):
        defended = generate_sf(sfe, clf.extract_feature(hits.adversarial))
        result = fsa(defended, hits.labels)
        fsa_value, within = result.fsa, result.mean_within
        fsd_value = fsd(defended, hits.labels)

    meta = pairs.metadata
    report = EvalReport(
        experiment_id=experiment_id, model=model, attack=pairs.attack_name,
        eps=pairs.attack_params.get('epsilon'), acc=acc,
        asr=_rate(int(np.sum(pairs.success)), len(pairs), 'ASR'),
        dr=dr, dsr=dsr, rho_l2=meta.get('rho_l2'), rho_px=meta.get('rho_px'),
        fsa=fsa_value, fsd=fsd_value, train_s=train_s, test_s=test_s, seed=seed,
        config=dict(config or {}), extra={'within': within, 'pairs': len(pairs)},
    )
    logger.info(f"✓ {report.attack}: DR {report.dr}, DSR {report.dsr}, ASR {report.asr}")
    return report


def evaluate_adaptive(clf: Classifier, sfe: SfeModel, det: AdvDetector, images: ImageSet,
                      spec: Optional[AttackSpec] = None, experiment_id: str = 'adaptive',
                      model: Optional[str] = None, threads: int = 1, seed: int = 0,
                      config: Optional[Dict] = None) -> EvalReport:
    """
    Large-budget PGD against a defence trained on another attack; reports DR,
    DSR and the perturbation the attack needed.
    """
    spec = spec or AttackSpec.preset('adaptive', seed=seed)
    pairs = run_attack(clf, images, spec, threads=threads, progress=False)
    return evaluate_pairs(clf, sfe, det, pairs, experiment_id, model or clf.arch,
                          acc=accuracy(clf, images), seed=seed, config=config)
