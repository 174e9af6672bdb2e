"""
Target Classifier
=================

CNN1 / CNN2 for MNIST, split at the feature tap into a body and a head.

Architectures (valid padding, NHWC):
- cnn1: Conv5x5x32+ReLU -> Conv5x5x64+ReLU -> MaxPool2 -> Flatten -> Dropout0.5
        -> Dense128+ReLU -> Dropout0.5 -> Dense10 -> Softmax
- cnn2: Conv5x5x16+ReLU -> MaxPool2 -> Conv5x5x32+ReLU -> MaxPool2 -> Flatten
        -> Dropout0.25 -> Dense128+ReLU -> Dropout0.5 -> Dense10 -> Softmax

Tap positions:
- dense (default): body ends after the Dense128 ReLU, d_F = 128
- logits: body ends at the Dense10 output, d_F = 10

The head Network stops at the logits; probabilities are softmax(head(h)).
Keeping softmax outside the head lets the gradient attacks differentiate the
cross-entropy from logits, while predict() is still exactly
softmax(head(body(x))).
"""

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from checkpoint import load_networks, save_network
from errors import FormatError, NonFiniteError, ShapeError
from layers import LayerSpec, softmax
from losses import categorical_ce, categorical_ce_grad
from mnist_loader import ImageSet, NUM_CLASSES
from network import Network
from optimizer import AdamState, adam_step

logger = logging.getLogger(__name__)

MODEL_NAMES = ('cnn1', 'cnn2')
TAPS = ('dense', 'logits')
MNIST_SHAPE = (28, 28, 1)
CLASSIFIER_KIND = 'classifier'


def _layer_stack(name: str) -> List[LayerSpec]:
    """Full layer list up to the Dense10 logits."""
    relu = LayerSpec.act('relu')
    if name == 'cnn1':
        return [
            LayerSpec.conv2d(32, 5), relu,
            LayerSpec.conv2d(64, 5), relu,
            LayerSpec.maxpool(2),
            LayerSpec.flatten(),
            LayerSpec.dropout(0.5),
            LayerSpec.dense(128), relu,
            LayerSpec.dropout(0.5),
            LayerSpec.dense(NUM_CLASSES),
        ]
    if name == 'cnn2':
        return [
            LayerSpec.conv2d(16, 5), relu,
            LayerSpec.maxpool(2),
            LayerSpec.conv2d(32, 5), relu,
            LayerSpec.maxpool(2),
            LayerSpec.flatten(),
            LayerSpec.dropout(0.25),
            LayerSpec.dense(128), relu,
            LayerSpec.dropout(0.5),
            LayerSpec.dense(NUM_CLASSES),
        ]
    raise ValueError(f"Unknown model '{name}' (expected one of {MODEL_NAMES})")


class Classifier:
    """
    Body/head pair sharing one training procedure.

    After training the classifier is only read: predict, extract_feature and
    classify_from_feature never record caches, so they can run concurrently.
    Input gradients (white-box attacks) record caches and need a private copy
    per thread; see clone().
    """

    def __init__(self, body: Network, head: Network, arch: str = 'custom', tap: str = 'dense'):
        if tuple(body.output_shape) != tuple(head.input_shape):
            raise ShapeError(f"body output {body.output_shape} does not feed head input {head.input_shape}",
                             layer='classifier[tap]', expected=head.input_shape, actual=body.output_shape)
        self.body = body
        self.head = head
        self.arch = arch
        self.tap = tap
        self.tap_dim = int(np.prod(body.output_shape))
        self.num_classes = int(np.prod(head.output_shape))
        self.eval()

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.body.input_shape

    def train(self) -> 'Classifier':
        self.body.train()
        self.head.train()
        return self

    def eval(self) -> 'Classifier':
        self.body.eval()
        self.head.eval()
        return self

    def reseed(self, seed: int):
        self.body.reseed(seed)
        self.head.reseed(seed + 1)

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {f"body/{k}": v for k, v in self.body.parameters().items()}
        params.update({f"head/{k}": v for k, v in self.head.parameters().items()})
        return params

    def clone(self) -> 'Classifier':
        return copy.deepcopy(self)

    # ------------------------------------------------------------ inference

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return self.head.infer(self.body.infer(images, batch_size), batch_size)

    def probabilities(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return softmax(self.logits(images, batch_size))

    def predict(self, images: np.ndarray, batch_size: int = 512) -> Tuple[np.ndarray, np.ndarray]:
        """(argmax labels, probability rows)."""
        probs = self.probabilities(images, batch_size)
        return probs.argmax(axis=1), probs

    def extract_feature(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """h(x): body output at the tap, [N, d_F]."""
        return self.body.infer(images, batch_size).reshape(len(images), -1)

    def classify_from_feature(self, features: np.ndarray,
                              batch_size: int = 512) -> Tuple[np.ndarray, np.ndarray]:
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2 or features.shape[1] != self.tap_dim:
            raise ShapeError(f"features of shape {features.shape} do not match tap width {self.tap_dim}",
                             layer='classifier[head]', expected=(self.tap_dim,), actual=features.shape[1:])
        probs = softmax(self.head.infer(features.reshape((-1,) + self.head.input_shape), batch_size))
        return probs.argmax(axis=1), probs

    # ------------------------------------------------------------ gradients

    def _record(self, images: np.ndarray) -> np.ndarray:
        return self.head.forward(self.body.forward(images, record=True), record=True)

    def _input_grad(self, logit_grad: np.ndarray) -> np.ndarray:
        g_head = self.head.backward(logit_grad)
        return self.body.backward(g_head.input).input

    def loss_gradient(self, images: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-sample cross-entropy and its gradient with respect to each input image.

        Runs in the current mode (infer for attacks) with caches recorded.

        Raises:
            NonFiniteError: the gradient contains NaN/Inf
        """
        labels = np.asarray(labels, dtype=np.int64)
        logits = self._record(images)
        probs = softmax(logits.astype(np.float64))
        n = len(labels)
        loss = -np.log(np.clip(probs[np.arange(n), labels], 1e-12, 1.0))
        # gradient of the summed loss, so each row is its own sample's gradient
        dlogits = probs
        dlogits[np.arange(n), labels] -= 1.0
        grad = self._input_grad(dlogits.astype(self.body.dtype))
        if not np.isfinite(grad).all():
            logger.error("✗ Non-finite input gradient")
            raise NonFiniteError("non-finite input gradient", where='classifier[input]')
        return loss, grad

    def logit_gradients(self, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Logits [N, K] and d logit_k / d x for every class, [K, N, ...input].
        """
        logits = self._record(images)
        grads = []
        for k in range(self.num_classes):
            seed = np.zeros_like(logits)
            seed[:, k] = 1.0
            grads.append(self._input_grad(seed))
        return logits, np.stack(grads)


def build_cnn(name: str = 'cnn1', tap: str = 'dense', seed: int = 0) -> Classifier:
    """
    Build CNN1 or CNN2 split at the feature tap.

    Raises:
        ValueError: unknown model name or tap
    """
    if tap not in TAPS:
        raise ValueError(f"Unknown tap '{tap}' (expected one of {TAPS})")
    specs = _layer_stack(name)
    # dense tap: after the Dense128 ReLU; logits tap: after Dense10
    split = len(specs) - 2 if tap == 'dense' else len(specs)
    body = Network(specs[:split], MNIST_SHAPE, seed=seed, name=f"{name}.body")
    head = Network(specs[split:], body.output_shape, seed=seed + 1, name=f"{name}.head")
    clf = Classifier(body, head, arch=name, tap=tap)
    logger.info(f"Built {name} (tap={tap}, d_F={clf.tap_dim}, "
                f"{body.num_parameters() + head.num_parameters():,} parameters)")
    return clf


@dataclass
class TrainingLog:
    epochs: List[Dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.epochs[-1]['acc'] if self.epochs else None


def accuracy(clf: Classifier, data: ImageSet, batch_size: int = 512) -> Optional[float]:
    if len(data) == 0:
        return None
    pred, _ = clf.predict(data.images, batch_size)
    return float(np.mean(pred == data.labels))


def train_classifier(clf: Classifier, train: ImageSet, epochs: int = 12, batch_size: int = 128,
                     seed: int = 0, test: Optional[ImageSet] = None,
                     state: Optional[AdamState] = None, progress: bool = True) -> TrainingLog:
    """
    Minimise categorical cross-entropy with Adam (lr 1e-3, beta1 0.9).

    Shuffling and dropout masks derive from `seed`, so the same seed and data
    give identical weights.

    Args:
        clf: classifier to train in place
        train: training set (must be non-empty)
        epochs: passes over the data; 0 leaves every parameter unchanged
        batch_size: minibatch size
        seed: shuffling / dropout seed
        test: optional held-out set evaluated after each epoch
        state: Adam state to continue from
        progress: show a tqdm bar per epoch

    Raises:
        ValueError: empty training set
        NonFiniteError: the loss became NaN/Inf
    """
    if len(train) == 0:
        raise ValueError("train_classifier needs a non-empty training set")
    state = state or AdamState.for_classifier()
    rng = np.random.default_rng(seed)
    log = TrainingLog()
    start = time.time()

    for epoch in range(1, epochs + 1):
        clf.train()
        order = rng.permutation(len(train))
        total_loss, correct, seen = 0.0, 0, 0
        batches = range(0, len(order), batch_size)
        bar = tqdm(batches, desc=f"{clf.arch} epoch {epoch}/{epochs}", disable=not progress, leave=False)
        for step, i in enumerate(bar):
            idx = order[i:i + batch_size]
            x, y = train.images[idx], train.labels[idx]
            clf.reseed(int(rng.integers(2 ** 31)))

            logits = clf._record(x)
            probs = softmax(logits.astype(np.float64))
            loss = categorical_ce(probs, y)
            if not np.isfinite(loss):
                logger.error(f"✗ Loss diverged at epoch {epoch}, step {step}")
                raise NonFiniteError(f"loss became {loss}", where=f"epoch {epoch} step {step}")

            g_logits = categorical_ce_grad(logits, y, from_logits=True)
            g_head = clf.head.backward(g_logits)
            g_body = clf.body.backward(g_head.input)
            grads = {f"head/{k}": v for k, v in g_head.params.items()}
            grads.update({f"body/{k}": v for k, v in g_body.params.items()})
            adam_step(state, clf.parameters(), grads)

            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y))
            seen += len(idx)
            if progress:
                bar.set_postfix(loss=f"{total_loss / seen:.4f}", acc=f"{correct / seen:.4f}")

        clf.eval()
        entry = {'epoch': epoch, 'loss': total_loss / seen, 'acc': correct / seen}
        if test is not None:
            entry['test_acc'] = accuracy(clf, test)
        log.epochs.append(entry)
        test_msg = f", test acc {entry['test_acc']:.4f}" if entry.get('test_acc') is not None else ''
        logger.info(f"Epoch {epoch}/{epochs}: loss {entry['loss']:.4f}, acc {entry['acc']:.4f}{test_msg}")

    clf.eval()
    log.seconds = time.time() - start
    if epochs:
        logger.info(f"✓ Trained {clf.arch} for {epochs} epochs in {log.seconds:.1f}s")
    return log


def save_classifier(path: Union[str, Path], clf: Classifier, meta: dict = None) -> Path:
    full = dict(meta or {})
    full.update({'kind': CLASSIFIER_KIND, 'arch': clf.arch, 'tap': clf.tap})
    path = save_network(path, {'body': clf.body, 'head': clf.head}, full)
    logger.info(f"✓ Saved classifier {clf.arch} to {path}")
    return path


def load_classifier(path: Union[str, Path]) -> Classifier:
    """
    Raises:
        FormatError: the container holds no classifier
    """
    networks, _, meta = load_networks(path)
    if meta.get('kind') != CLASSIFIER_KIND or not {'body', 'head'} <= set(networks):
        raise FormatError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
    return Classifier(networks['body'], networks['head'], arch=meta.get('arch', 'custom'),
                      tap=meta.get('tap', 'dense'))

