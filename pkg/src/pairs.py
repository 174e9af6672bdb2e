"""
Benign / Adversarial Example Pairs
==================================

PairDataset keeps each benign image aligned with the adversarial image an
attack produced from it, together with the true label, whether the attack
succeeded, and the attack provenance.

Pair files reuse the SFEL container: tensors benign_images, labels,
adversarial, success, adv_pred; the header's "attack" field holds the attack
name and parameters and "metadata" holds the recorded ASR / perturbation
figures.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from checkpoint import load_container, save_container
from errors import FormatError
from mnist_loader import ImageSet

logger = logging.getLogger(__name__)

PAIRS_KIND = 'pairs'


@dataclass
class PairDataset:
    """
    Aligned <benign, adversarial> rows.

    Invariants:
    - benign.images[i] and adversarial[i] come from the same source image
    - success[i] is true iff the targeted classifier mislabels adversarial[i]
    """
    benign: ImageSet
    adversarial: np.ndarray
    attack_name: str
    attack_params: Dict = field(default_factory=dict)
    success: np.ndarray = None
    adv_pred: np.ndarray = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.adversarial = np.asarray(self.adversarial, dtype=np.float32)
        n = len(self.benign)
        if self.adversarial.shape != self.benign.images.shape:
            raise ValueError(f"adversarial shape {self.adversarial.shape} does not match "
                             f"benign shape {self.benign.images.shape}")
        if self.adversarial.size and (self.adversarial.min() < 0.0 or self.adversarial.max() > 1.0):
            raise ValueError("adversarial pixels must lie in [0, 1]")
        self.success = np.zeros(n, dtype=bool) if self.success is None else np.asarray(self.success, dtype=bool)
        self.adv_pred = (np.full(n, -1, dtype=np.int64) if self.adv_pred is None
                         else np.asarray(self.adv_pred, dtype=np.int64))
        if len(self.success) != n or len(self.adv_pred) != n:
            raise ValueError("success / adv_pred must have one entry per pair")

    def __len__(self) -> int:
        return len(self.benign)

    @property
    def labels(self) -> np.ndarray:
        return self.benign.labels

    def subset(self, indices: Sequence[int]) -> 'PairDataset':
        idx = np.asarray(indices, dtype=np.int64)
        return PairDataset(self.benign.subset(idx), self.adversarial[idx], self.attack_name,
                           dict(self.attack_params), self.success[idx], self.adv_pred[idx],
                           dict(self.metadata))

    def successful(self) -> 'PairDataset':
        """Only the rows whose attack fooled the classifier."""
        return self.subset(np.flatnonzero(self.success))


def split_indices(n: int, ratio: float = 0.7, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted train / test positions of a seeded shuffled split of range(n)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratio))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_detection_set(pairs: PairDataset, ratio: float = 0.7,
                        seed: int = 0) -> Tuple[PairDataset, PairDataset]:
    """
    Seeded shuffled split into train/test pairs (7:3 by default).

    The two index sets partition range(len(pairs)); rows stay aligned.

    Raises:
        ValueError: empty dataset or ratio outside (0, 1)
    """
    n = len(pairs)
    if n == 0:
        raise ValueError("cannot split an empty PairDataset")
    train_idx, test_idx = split_indices(n, ratio, seed)
    logger.info(f"Split {n} pairs ({pairs.attack_name}) into {len(train_idx)} train / {len(test_idx)} test")
    return pairs.subset(train_idx), pairs.subset(test_idx)


def save_pairs(pairs: PairDataset, path: Union[str, Path]) -> Path:
    tensors = {
        'benign_images': pairs.benign.images,
        'labels': pairs.benign.labels.astype(np.float32),
        'adversarial': pairs.adversarial,
        'success': pairs.success.astype(np.float32),
        'adv_pred': pairs.adv_pred.astype(np.float32),
    }
    meta = {
        'kind': PAIRS_KIND,
        'attack': {'name': pairs.attack_name, 'params': pairs.attack_params},
        'metadata': pairs.metadata,
    }
    path = save_container(path, tensors, meta)
    logger.info(f"✓ Saved {len(pairs)} {pairs.attack_name} pairs to {path}")
    return path


def load_pairs(path: Union[str, Path]) -> PairDataset:
    """
    Raises:
        FormatError: not an SFEL pair file, or a required tensor is missing
    """
    tensors, meta = load_container(path)
    if meta.get('kind') != PAIRS_KIND:
        raise FormatError(f"{path}: not a pair file (kind={meta.get('kind')!r})")
    required = ('benign_images', 'labels', 'adversarial', 'success', 'adv_pred')
    missing = [name for name in required if name not in tensors]
    if missing:
        raise FormatError(f"{path}: pair file missing tensors {missing}")

    attack = meta.get('attack', {})
    benign = ImageSet(tensors['benign_images'], tensors['labels'].astype(np.int64))
    return PairDataset(
        benign=benign,
        adversarial=tensors['adversarial'],
        attack_name=attack.get('name', 'unknown'),
        attack_params=attack.get('params', {}),
        success=tensors['success'] > 0.5,
        adv_pred=tensors['adv_pred'].astype(np.int64),
        metadata=meta.get('metadata', {}),
    )
