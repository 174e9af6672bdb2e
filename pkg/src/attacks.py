"""
Adversarial Attacks
===================

Five white-box attacks (gradients of the classifier's cross-entropy or logits)
and three black-box attacks (labels only) producing adversarial images in
[0, 1].

White-box:
- fgsm:     single signed-gradient step of size epsilon
- bim:      iterated signed steps, projected to the epsilon ball
- mifgsm:   bim with an L1-normalised momentum accumulator
- pgd:      bim from a uniform random start inside the epsilon ball
- deepfool: minimal L2 step across the nearest linearised decision boundary
- adaptive: pgd whose perturbation is rescaled to a mean per-pixel size of
            target_px (0.08 by default), far beyond the other attacks

Black-box (only see a LabelOracle, which exposes predict() and nothing else):
- auna: additive uniform noise of growing standard deviation
- cra:  contrast reduction towards the 0.5 grey image
- pwa:  pointwise reset of pixels to their original value, starting from an
        auna example

All functions work on batches [N, H, W, C]. Gradient attacks use untargeted
cross-entropy with respect to the true label.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from classifier import Classifier
from mnist_loader import ImageSet
from pairs import PairDataset

logger = logging.getLogger(__name__)

WHITE_BOX = ('fgsm', 'bim', 'mifgsm', 'pgd', 'deepfool', 'adaptive')
BLACK_BOX = ('auna', 'cra', 'pwa')
ATTACK_NAMES = WHITE_BOX + BLACK_BOX

CHUNK_SIZE = 256
DEEPFOOL_MARGIN = 1e-4


@dataclass(frozen=True)
class AttackSpec:
    """
    Attack name plus every parameter any attack reads.

    Fields irrelevant to the chosen attack are carried but ignored. Use
    AttackSpec.preset(name) for the default parameter set of each attack.
    """
    name: str
    epsilon: float = 0.3
    step_size: float = 0.05
    iterations: int = 10
    decay_factor: float = 1.0
    random_start: bool = False
    overshoot: float = 1e-6
    max_iter: int = 100
    schedule_steps: int = 1000
    noise_scales: int = 20
    noise_min: float = 0.05
    noise_max: float = 1.0
    noise_samples: int = 10
    search_steps: int = 10
    target_px: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in ATTACK_NAMES:
            raise ValueError(f"Unknown attack '{self.name}' (expected one of {ATTACK_NAMES})")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if min(self.iterations, self.max_iter, self.schedule_steps, self.noise_scales, self.noise_samples) < 1:
            raise ValueError("iterations, max_iter, schedule_steps, noise_scales and noise_samples must be >= 1")
        if not 0.0 < self.noise_min <= self.noise_max:
            raise ValueError(f"noise range must satisfy 0 < min <= max, got [{self.noise_min}, {self.noise_max}]")
        if self.target_px is not None and self.target_px <= 0:
            raise ValueError(f"target_px must be > 0, got {self.target_px}")

    @property
    def white_box(self) -> bool:
        return self.name in WHITE_BOX

    @classmethod
    def preset(cls, name: str, **overrides) -> 'AttackSpec':
        """Default parameters for `name`, with keyword overrides."""
        if name not in PRESETS:
            raise ValueError(f"Unknown attack '{name}' (expected one of {ATTACK_NAMES})")
        params = dict(PRESETS[name])
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(name=name, **params)

    def params(self) -> Dict:
        return asdict(self)


PRESETS = {
    'fgsm': {'epsilon': 0.3},
    'bim': {'epsilon': 0.3, 'step_size': 0.05, 'iterations': 10},
    'mifgsm': {'epsilon': 0.3, 'step_size': 0.06, 'iterations': 10, 'decay_factor': 1.0},
    'pgd': {'epsilon': 0.3, 'step_size': 0.01, 'iterations': 100, 'random_start': True},
    'deepfool': {'overshoot': 1e-6, 'max_iter': 100},
    'auna': {'noise_scales': 20, 'noise_min': 0.05, 'noise_max': 1.0, 'noise_samples': 10},
    'cra': {'schedule_steps': 1000},
    'pwa': {'noise_scales': 20, 'noise_min': 0.05, 'noise_max': 1.0, 'noise_samples': 10, 'search_steps': 10},
    # pgd rescaled to a large mean per-pixel perturbation, used against the defence itself
    'adaptive': {'epsilon': 0.3, 'step_size': 0.03, 'iterations': 40, 'random_start': True, 'target_px': 0.08},
}


class LabelOracle:
    """Predict-only view of a classifier handed to the black-box attacks."""

    def __init__(self, clf: Classifier):
        self._predict = clf.predict
        self.queries = 0

    def predict(self, images: np.ndarray) -> np.ndarray:
        self.queries += len(images)
        return self._predict(images)[0]


# ---------------------------------------------------------------- helpers

def _as_batch(x: np.ndarray) -> np.ndarray:
    return np.array(x, dtype=np.float32)


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the L-inf ball of radius epsilon around x, then into [0, 1]."""
    eps = np.float32(epsilon)
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def perturbation_l2(benign: np.ndarray, adversarial: np.ndarray) -> np.ndarray:
    """Per-example L2 norm of the perturbation."""
    diff = (adversarial.astype(np.float64) - benign.astype(np.float64)).reshape(len(benign), -1)
    return np.sqrt(np.sum(diff * diff, axis=1))


def perturbation_per_pixel(benign: np.ndarray, adversarial: np.ndarray) -> np.ndarray:
    """Per-example mean absolute perturbation per pixel."""
    diff = (adversarial.astype(np.float64) - benign.astype(np.float64)).reshape(len(benign), -1)
    return np.mean(np.abs(diff), axis=1)


def _l1_normalise(grad: np.ndarray) -> np.ndarray:
    norms = np.abs(grad).reshape(len(grad), -1).sum(axis=1)
    out = np.zeros_like(grad)
    nz = norms > 0
    out[nz] = grad[nz] / norms[nz].reshape((-1,) + (1,) * (grad.ndim - 1))
    return out


# ---------------------------------------------------------------- white-box

def fgsm(clf: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """x* = clip(x + eps * sign(grad_x CE(f(x), y)), 0, 1)."""
    x = _as_batch(x)
    _, grad = clf.loss_gradient(x, y)
    return np.clip(x + np.float32(epsilon) * np.sign(grad), 0.0, 1.0)


def bim(clf: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float,
        step_size: float, iterations: int) -> np.ndarray:
    x = _as_batch(x)
    x_adv = x.copy()
    step = np.float32(step_size)
    for _ in range(iterations):
        _, grad = clf.loss_gradient(x_adv, y)
        x_adv = project(x_adv + step * np.sign(grad), x, epsilon)
    return x_adv


def mi_fgsm(clf: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float, step_size: float,
            iterations: int, decay_factor: float) -> np.ndarray:
    """
    Momentum iterative FGSM: g <- mu * g + grad / ||grad||_1, step along sign(g).

    A sample whose gradient has zero L1 norm contributes nothing that step.
    """
    x = _as_batch(x)
    x_adv = x.copy()
    step = np.float32(step_size)
    momentum = np.zeros_like(x)
    for _ in range(iterations):
        _, grad = clf.loss_gradient(x_adv, y)
        momentum = np.float32(decay_factor) * momentum + _l1_normalise(grad)
        x_adv = project(x_adv + step * np.sign(momentum), x, epsilon)
    return x_adv


def pgd(clf: Classifier, x: np.ndarray, y: np.ndarray, epsilon: float, step_size: float,
        iterations: int, seed: int = 0, random_start: bool = True) -> np.ndarray:
    x = _as_batch(x)
    if random_start:
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
        x_adv = project(x + noise, x, epsilon)
    else:
        x_adv = x.copy()
    step = np.float32(step_size)
    for _ in range(iterations):
        _, grad = clf.loss_gradient(x_adv, y)
        x_adv = project(x_adv + step * np.sign(grad), x, epsilon)
    return x_adv


def calibrate_perturbation(x: np.ndarray, x_adv: np.ndarray, target_px: float,
                           steps: int = 60) -> np.ndarray:
    """
    Rescale each row's perturbation so its mean absolute per-pixel size is target_px.

    The size of clip(x + s * delta, 0, 1) - x never decreases as s grows, so s
    is found per row by bisection between 0 and the scale at which every
    perturbed pixel saturates. Rows that cannot reach target_px (zero or
    clipped-away perturbation) end at that saturating scale.
    """
    x = _as_batch(x)
    flat = x.reshape(len(x), -1).astype(np.float64)
    delta = np.asarray(x_adv, dtype=np.float64).reshape(len(x), -1) - flat
    mag = np.abs(delta)
    smallest = np.where(mag > 0, mag, np.inf).min(axis=1) if delta.size else np.zeros(0)
    hi = np.where(np.isfinite(smallest), 1.0 / smallest, 0.0)
    lo = np.zeros_like(hi)

    def size(scale: np.ndarray) -> np.ndarray:
        return np.mean(np.abs(np.clip(flat + scale[:, None] * delta, 0.0, 1.0) - flat), axis=1)

    for _ in range(steps):
        mid = (lo + hi) / 2.0
        above = size(mid) >= target_px
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    out = np.clip(flat + hi[:, None] * delta, 0.0, 1.0)
    return out.reshape(x.shape).astype(np.float32)


def deepfool(clf: Classifier, x: np.ndarray, y: Optional[np.ndarray] = None,
             overshoot: float = 1e-6, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multiclass L2 DeepFool.

    Each iteration linearises every class logit around the current point,
    picks the class whose boundary is nearest, and steps just across it. The
    accumulated perturbation is scaled by (1 + overshoot). Every step also
    overshoots the boundary distance by a fixed DEEPFOOL_MARGIN (1e-4, in
    pixel L2 units) so that a step landing exactly on the linearised boundary
    still flips the label in float32.

    Args:
        y: reference labels; rows already predicted differently are returned
           unchanged. Defaults to the classifier's own prediction.

    Returns:
        (adversarial images, iterations used per image)
    """
    x = _as_batch(x)
    pred = clf.predict(x)[0]
    orig = pred if y is None else np.asarray(y, dtype=np.int64)
    x_adv = x.copy()
    r_tot = np.zeros_like(x)
    iters = np.zeros(len(x), dtype=np.int64)
    active = pred == orig
    pixel_axes = tuple(range(1, x.ndim))

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rows = np.arange(idx.size)
        logits, grads = clf.logit_gradients(x_adv[idx])
        k0 = orig[idx]

        w = grads - grads[k0, rows][None]
        f = (logits - logits[rows, k0][:, None]).T
        w_norm = np.sqrt(np.sum(w.astype(np.float64) ** 2, axis=tuple(a + 1 for a in pixel_axes)))
        with np.errstate(divide='ignore', invalid='ignore'):
            dist = np.abs(f) / w_norm
        dist[k0, rows] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        nearest = dist.argmin(axis=0)
        pert = dist[nearest, rows]
        stuck = ~np.isfinite(pert)

        direction = w[nearest, rows] / np.maximum(w_norm[nearest, rows], 1e-12).reshape((-1,) + (1,) * len(pixel_axes))
        step = ((np.where(stuck, 0.0, pert) + DEEPFOOL_MARGIN).reshape((-1,) + (1,) * len(pixel_axes)) * direction)
        r_tot[idx] += step.astype(np.float32)
        x_adv[idx] = np.clip(x[idx] + np.float32(1.0 + overshoot) * r_tot[idx], 0.0, 1.0)
        iters[idx] += 1

        new_pred = clf.predict(x_adv[idx])[0]
        active[idx] = (new_pred == k0) & ~stuck

    return x_adv, iters


# ---------------------------------------------------------------- black-box

def noise_schedule(noise_min: float = 0.05, noise_max: float = 1.0, scales: int = 20) -> np.ndarray:
    return np.linspace(noise_min, noise_max, scales)


def auna(oracle: LabelOracle, x: np.ndarray, y: np.ndarray, seed: int = 0,
         noise_min: float = 0.05, noise_max: float = 1.0, scales: int = 20,
         samples: int = 10) -> Tuple[np.ndarray, np.ndarray]:
    """
    Additive uniform noise with growing standard deviation.

    Returns:
        (images, found) where found[i] marks a misclassified candidate; rows
        with no candidate come back unchanged. Rows already misclassified are
        returned unchanged with found=True.
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    out = x.copy()
    found = oracle.predict(x) != y
    for std in noise_schedule(noise_min, noise_max, scales):
        # uniform on [-a, a] has standard deviation a / sqrt(3)
        bound = float(std) * np.sqrt(3.0)
        for _ in range(samples):
            idx = np.flatnonzero(~found)
            if idx.size == 0:
                return out, found
            noise = rng.uniform(-bound, bound, size=x[idx].shape).astype(np.float32)
            candidate = np.clip(x[idx] + noise, 0.0, 1.0)
            hit = oracle.predict(candidate) != y[idx]
            out[idx[hit]] = candidate[hit]
            found[idx[hit]] = True
    return out, found


def contrast(x: np.ndarray, c: float) -> np.ndarray:
    """x(c) = (x - 0.5) * c + 0.5; c = 1 is the identity, c = 0 the grey image."""
    return ((x - 0.5) * np.float32(c) + 0.5).astype(np.float32)


def cra(oracle: LabelOracle, x: np.ndarray, y: np.ndarray, schedule_steps: int = 1000,
        block: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """
    Contrast reduction: the first level c = 1 - j / schedule_steps (j = 1..steps)
    at which the image is misclassified. Levels are tested `block` at a time.
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    out = x.copy()
    found = oracle.predict(x) != y
    levels = 1.0 - np.arange(1, schedule_steps + 1) / schedule_steps
    for start in range(0, schedule_steps, block):
        idx = np.flatnonzero(~found)
        if idx.size == 0:
            break
        chunk = levels[start:start + block].astype(np.float32)
        cands = (x[idx][:, None] - 0.5) * chunk.reshape((1, -1) + (1,) * (x.ndim - 1)) + 0.5
        labels = oracle.predict(cands.reshape((-1,) + x.shape[1:])).reshape(idx.size, len(chunk))
        wrong = labels != y[idx][:, None]
        hit = wrong.any(axis=1)
        first = wrong.argmax(axis=1)
        out[idx[hit]] = cands[hit, first[hit]]
        found[idx[hit]] = True
    return out, found


def pwa(oracle: LabelOracle, x: np.ndarray, y: np.ndarray, seed: int = 0,
        starts: Optional[np.ndarray] = None, search_steps: int = 10,
        **noise) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pointwise attack.

    Starting from an adversarial image (auna unless `starts` is given), first
    reset single pixels to their original value while the image stays
    misclassified, repeating passes until none changes; then binary-search
    each remaining differing pixel towards its original value. Pixels are
    visited in a seeded random order. Every accepted change moves a pixel
    towards x, so ||out - x||_2 never exceeds ||start - x||_2.

    Returns:
        (images, found); rows without an adversarial start are returned
        unchanged with found=False.
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if starts is None:
        starts, _ = auna(oracle, x, y, seed=seed, **noise)
    adv = _as_batch(starts)
    found = oracle.predict(adv) != y
    out = x.copy()
    idx = np.flatnonzero(found)
    if idx.size == 0:
        return out, found

    cur = adv[idx].reshape(idx.size, -1)
    orig = x[idx].reshape(idx.size, -1)
    labels = y[idx]
    rows = np.arange(idx.size)
    dims = cur.shape[1]

    def still_adversarial(candidate: np.ndarray) -> np.ndarray:
        return oracle.predict(candidate.reshape((-1,) + x.shape[1:])) != labels

    changed = True
    while changed:
        changed = False
        for d in rng.permutation(dims):
            differs = cur[:, d] != orig[:, d]
            if not differs.any():
                continue
            cand = cur.copy()
            cand[differs, d] = orig[differs, d]
            keep = differs & still_adversarial(cand)
            if keep.any():
                cur[keep, d] = orig[keep, d]
                changed = True

    for d in rng.permutation(dims):
        differs = cur[:, d] != orig[:, d]
        if not differs.any():
            continue
        # lo: known adversarial value, hi: original value
        lo, hi = cur[:, d].copy(), orig[:, d].copy()
        for _ in range(search_steps):
            mid = (lo + hi) / 2.0
            cand = cur.copy()
            cand[rows, d] = np.where(differs, mid, cur[:, d])
            ok = still_adversarial(cand)
            lo = np.where(differs & ok, mid, lo)
            hi = np.where(differs & ~ok, mid, hi)
        cur[differs, d] = lo[differs]

    out[idx] = cur.reshape((idx.size,) + x.shape[1:])
    return out, found


# ---------------------------------------------------------------- runner

def apply_attack(clf: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
                 seed: Optional[int] = None) -> np.ndarray:
    """Run one attack on a batch; black-box attacks only see a LabelOracle."""
    seed = spec.seed if seed is None else seed
    name = spec.name
    if name == 'fgsm':
        return fgsm(clf, x, y, spec.epsilon)
    if name == 'bim':
        return bim(clf, x, y, spec.epsilon, spec.step_size, spec.iterations)
    if name == 'mifgsm':
        return mi_fgsm(clf, x, y, spec.epsilon, spec.step_size, spec.iterations, spec.decay_factor)
    if name in ('pgd', 'adaptive'):
        x_adv = pgd(clf, x, y, spec.epsilon, spec.step_size, spec.iterations, seed, spec.random_start)
        if spec.target_px is not None:
            x_adv = calibrate_perturbation(x, x_adv, spec.target_px)
        return x_adv
    if name == 'deepfool':
        return deepfool(clf, x, y, spec.overshoot, spec.max_iter)[0]

    oracle = LabelOracle(clf)
    noise = {'noise_min': spec.noise_min, 'noise_max': spec.noise_max,
             'scales': spec.noise_scales, 'samples': spec.noise_samples}
    if name == 'auna':
        return auna(oracle, x, y, seed, **noise)[0]
    if name == 'cra':
        return cra(oracle, x, y, spec.schedule_steps)[0]
    if name == 'pwa':
        return pwa(oracle, x, y, seed, search_steps=spec.search_steps, **noise)[0]
    raise ValueError(f"Unknown attack '{name}'")


class AttackRunner:
    """
    Applies an AttackSpec to the correctly classified part of an ImageSet.

    Images are processed in fixed chunks; chunk i uses the seed derived from
    (spec.seed, i), so the result does not depend on the thread count. Each
    worker thread attacks a private copy of the classifier.

    Tracks:
    - attempted: images attacked
    - succeeded: adversarial images misclassified
    - failed: attacked images still classified correctly
    - skipped: images misclassified before the attack
    """

    def __init__(self, clf: Classifier, threads: int = 1, chunk_size: int = CHUNK_SIZE):
        self.clf = clf
        self.threads = max(1, int(threads))
        self.chunk_size = chunk_size
        self.stats = {'attempted': 0, 'succeeded': 0, 'failed': 0, 'skipped': 0}

    def _chunk(self, clf: Classifier, x: np.ndarray, y: np.ndarray, spec: AttackSpec, index: int) -> np.ndarray:
        seed = int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])
        adv = apply_attack(clf, x, y, spec, seed)
        return np.clip(adv, 0.0, 1.0).astype(np.float32)

    def run(self, images: ImageSet, spec: AttackSpec, progress: bool = True) -> PairDataset:
        pred = self.clf.predict(images.images)[0] if len(images) else np.zeros(0, dtype=np.int64)
        correct = np.flatnonzero(pred == images.labels)
        skipped = len(images) - len(correct)
        benign = images.subset(correct)
        logger.info(f"Running {spec.name} on {len(benign)} correctly classified images "
                    f"({skipped} skipped)")

        bounds = [(i, min(i + self.chunk_size, len(benign))) for i in range(0, len(benign), self.chunk_size)]
        results: List[np.ndarray] = [None] * len(bounds)

        if self.threads == 1 or len(bounds) <= 1:
            for k, (a, b) in enumerate(tqdm(bounds, desc=spec.name, disable=not progress, leave=False)):
                results[k] = self._chunk(self.clf, benign.images[a:b], benign.labels[a:b], spec, k)
        else:
            def work(k: int) -> Tuple[int, np.ndarray]:
                a, b = bounds[k]
                return k, self._chunk(self.clf.clone(), benign.images[a:b], benign.labels[a:b], spec, k)

            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                for k, adv in tqdm(pool.map(work, range(len(bounds))), total=len(bounds),
                                   desc=spec.name, disable=not progress, leave=False):
                    results[k] = adv

        adversarial = np.concatenate(results) if results else np.zeros_like(benign.images)
        adv_pred = self.clf.predict(adversarial)[0] if len(benign) else np.zeros(0, dtype=np.int64)
        success = adv_pred != benign.labels

        self.stats['attempted'] += len(benign)
        self.stats['succeeded'] += int(success.sum())
        self.stats['failed'] += int((~success).sum())
        self.stats['skipped'] += skipped

        metadata = attack_metadata(benign.images, adversarial, success)
        metadata['skipped'] = skipped
        pairs = PairDataset(benign, adversarial, spec.name, spec.params(), success, adv_pred, metadata)
        asr = metadata['asr']
        if asr is None:
            logger.warning(f"⚠ {spec.name}: no images to attack, ASR undefined")
        else:
            logger.info(f"✓ {spec.name}: ASR {asr:.4f}, rho_l2 {metadata['rho_l2']}, "
                        f"rho_px {metadata['rho_px']}")
        return pairs

    def get_stats(self) -> dict:
        return self.stats.copy()

    def reset_stats(self):
        for key in self.stats:
            self.stats[key] = 0


def attack_metadata(benign: np.ndarray, adversarial: np.ndarray, success: np.ndarray) -> Dict:
    """
    ASR plus mean perturbation over the successful examples.

    Undefined figures (empty set, no success) are None.
    """
    n = len(success)
    meta = {'attempted': int(n), 'succeeded': int(np.sum(success)), 'asr': None,
            'rho_l2': None, 'rho_px': None}
    if n:
        meta['asr'] = float(np.mean(success))
    if np.any(success):
        meta['rho_l2'] = float(np.mean(perturbation_l2(benign[success], adversarial[success])))
        meta['rho_px'] = float(np.mean(perturbation_per_pixel(benign[success], adversarial[success])))
    return meta


def run_attack(clf: Classifier, images: ImageSet, spec: AttackSpec, threads: int = 1,
               progress: bool = True) -> PairDataset:
    """
    Attack the correctly classified images of `images` with `spec`.

    Returns:
        PairDataset with success flags and ASR / rho_l2 / rho_px metadata
    """
    return AttackRunner(clf, threads).run(images, spec, progress)
