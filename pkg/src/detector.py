"""
Adversarial Example Detector (AdvD)
===================================

Binary classifier over Concat(PG(h(x)), NG(h(x))): label 0 = benign,
1 = adversarial. Its only input path runs through the frozen classifier body
and the frozen generators; it never sees pixels.

Architecture (five dense layers):
    Dense512+ReLU -> BatchNorm -> Dropout0.25
    Dense256+ReLU -> BatchNorm -> Dropout0.25
    Dense128+ReLU -> BatchNorm -> Dropout0.25
    Dense64+ReLU  -> BatchNorm -> Dropout0.125
    Dense1 -> sigmoid
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from tqdm import tqdm

from checkpoint import load_networks, save_network
from classifier import Classifier
from errors import FormatError, NonFiniteError, ShapeError
from layers import LayerSpec
from losses import bce, bce_grad
from network import Network
from optimizer import AdamState, adam_step
from sfe import FeaturePairSet, SfeModel, generate_sf_normalized, generate_tf_normalized

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DETECTOR_KIND = 'advd'

BENIGN = 0
ADVERSARIAL = 1


def _detector_specs() -> List[LayerSpec]:
    specs = []
    for units, rate in ((512, 0.25), (256, 0.25), (128, 0.25), (64, 0.125)):
        specs += [LayerSpec.dense(units), LayerSpec.act('relu'), LayerSpec.batchnorm(), LayerSpec.dropout(rate)]
    specs += [LayerSpec.dense(1), LayerSpec.act('sigmoid')]
    return specs


class AdvDetector:
    """AdvD network plus decision threshold; verdict = score >= threshold."""

    def __init__(self, net: Network, threshold: float = DEFAULT_THRESHOLD):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {threshold}")
        self.net = net
        self.threshold = float(threshold)
        self.input_dim = int(net.input_shape[0])
        self.net.eval()

    def score(self, detector_input: np.ndarray) -> np.ndarray:
        x = np.asarray(detector_input, dtype=np.float32)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"detector input of shape {x.shape} does not match width {self.input_dim}",
                             layer='advd[input]', expected=(self.input_dim,), actual=x.shape[1:])
        return self.net.infer(x).reshape(-1)

    def verdicts(self, scores: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
        tau = self.threshold if threshold is None else threshold
        return (np.asarray(scores) >= tau).astype(np.int64)


def build_detector(d_F: int, threshold: float = DEFAULT_THRESHOLD, seed: int = 0) -> AdvDetector:
    net = Network(_detector_specs(), (2 * d_F,), seed=seed, name='advd')
    logger.info(f"Built AdvD: input width {2 * d_F}, {net.num_parameters():,} parameters")
    return AdvDetector(net, threshold)


def build_detector_input(sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    """Concat(PG(h), NG(h)) in normalised space, [N, 2 * d_F], SF first."""
    return np.concatenate([generate_sf_normalized(sfe, features), generate_tf_normalized(sfe, features)], axis=1)


@dataclass
class DetectorTrainingLog:
    epochs: List[dict] = field(default_factory=list)
    seconds: float = 0.0


def detection_training_set(sfe: SfeModel, feats: FeaturePairSet):
    """One benign row (label 0) and one adversarial row (label 1) per pair."""
    inputs = np.concatenate([build_detector_input(sfe, feats.benign), build_detector_input(sfe, feats.adversarial)])
    labels = np.concatenate([np.full(len(feats), BENIGN), np.full(len(feats), ADVERSARIAL)]).astype(np.float32)
    return inputs, labels


def train_advd(det: AdvDetector, sfe: SfeModel, feats: FeaturePairSet, epochs: int = 20,
               batch_size: int = 64, seed: int = 0, progress: bool = True) -> DetectorTrainingLog:
    """
    Minimise BCE of AdvD over both rows of every training pair.

    The classifier and the generators stay fixed: their outputs are computed
    once up front and only the detector's parameters are updated.

    Raises:
        ValueError: empty training set
        NonFiniteError: loss became NaN/Inf
    """
    if len(feats) == 0:
        raise ValueError("train_advd needs a non-empty training set")
    inputs, labels = detection_training_set(sfe, feats)
    state = AdamState.for_gan()
    rng = np.random.default_rng(seed)
    log = DetectorTrainingLog()
    start = time.time()

    for epoch in range(1, epochs + 1):
        det.net.train()
        order = rng.permutation(len(inputs))
        total, seen = 0.0, 0
        for step, i in enumerate(tqdm(range(0, len(order), batch_size), desc=f"advd epoch {epoch}",
                                      disable=not progress, leave=False)):
            idx = order[i:i + batch_size]
            det.net.reseed(int(rng.integers(2 ** 31)))
            scores = det.net.forward(inputs[idx], record=True).reshape(-1)
            loss = bce(scores, labels[idx])
            if not np.isfinite(loss):
                logger.error(f"✗ AdvD training diverged at epoch {epoch}, step {step}")
                raise NonFiniteError(f"loss became {loss}", where=f"epoch {epoch} step {step}")
            grads = det.net.backward(bce_grad(scores, labels[idx]).reshape(-1, 1))
            adam_step(state, det.net.parameters(), grads.params)
            total += loss * len(idx)
            seen += len(idx)
        det.net.eval()
        train_acc = float(np.mean(det.verdicts(det.score(inputs)) == labels))
        log.epochs.append({'epoch': epoch, 'loss': total / seen, 'acc': train_acc})
        logger.info(f"AdvD epoch {epoch}/{epochs}: loss {total / seen:.4f}, acc {train_acc:.4f}")

    det.net.eval()
    log.seconds = time.time() - start
    if epochs:
        logger.info(f"✓ AdvD trained on {len(inputs)} rows in {log.seconds:.1f}s")
    return log


@dataclass
class Detection:
    scores: np.ndarray
    verdicts: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


def detect_features(det: AdvDetector, sfe: SfeModel, features: np.ndarray,
                    threshold: Optional[float] = None) -> Detection:
    scores = det.score(build_detector_input(sfe, features))
    return Detection(scores, det.verdicts(scores, threshold))


def detect(det: AdvDetector, sfe: SfeModel, clf: Classifier, images: np.ndarray,
           threshold: Optional[float] = None) -> Detection:
    """Per-image scores in (0, 1) and verdicts (1 = adversarial)."""
    return detect_features(det, sfe, clf.extract_feature(images), threshold)


def save_detector(path: Union[str, Path], det: AdvDetector, meta: dict = None) -> Path:
    full = dict(meta or {})
    full.update({'kind': DETECTOR_KIND, 'threshold': det.threshold})
    path = save_network(path, {'advd': det.net}, full)
    logger.info(f"✓ Saved AdvD to {path}")
    return path


def load_detector(path: Union[str, Path]) -> AdvDetector:
    networks, _, meta = load_networks(path)
    if meta.get('kind') != DETECTOR_KIND or 'advd' not in networks:
        raise FormatError(f"{path}: not an AdvD checkpoint (kind={meta.get('kind')!r})")
    return AdvDetector(networks['advd'], meta.get('threshold', DEFAULT_THRESHOLD))
