"""
Salient Feature Extractor
=========================

Coupled GAN over classifier features:
- PG (positive generator) maps a feature to its salient feature (SF), the
  feature of the benign partner image.
- NG (negative generator) maps a feature to its trivial feature (TF), the
  input's own feature.
- D is one discriminator shared by both branches; updating it through either
  branch changes the same arrays.

Training targets per row:

    row          input x_F   x_SF        x_TF
    benign       h(x)        h(x)        h(x)
    adversarial  h(x*)       h(x)        h(x*)

Features are mapped per dimension to [-1, 1] with min/max statistics of the
training set (clamped outside that range); generators end in tanh and their
outputs are denormalised before use.

Training order within an iteration is PG, then NG, then D.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from checkpoint import load_networks, save_network
from classifier import Classifier
from errors import FormatError, NonFiniteError, ShapeError
from layers import LayerSpec
from losses import bce, bce_grad, mse, mse_grad
from network import Network
from optimizer import AdamState, adam_step
from pairs import PairDataset

logger = logging.getLogger(__name__)

GENERATOR_DEPTHS = {
    'none': (256, 512, 1024),
    'add': (256, 512, 1024, 1024, 1024),
    'delete': (256, 1024),
}
DISCRIMINATOR_HEADS = ('tanh', 'sigmoid')
SFE_KIND = 'sfe'


@dataclass
class FeaturePairSet:
    """Classifier features of aligned benign / adversarial pairs, [N, d_F] each."""
    benign: np.ndarray
    adversarial: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.benign = np.asarray(self.benign, dtype=np.float32)
        self.adversarial = np.asarray(self.adversarial, dtype=np.float32)
        if self.benign.ndim != 2 or self.benign.shape != self.adversarial.shape:
            raise ShapeError(f"feature pairs must be two [N, d_F] arrays, got {self.benign.shape} "
                             f"and {self.adversarial.shape}", layer='feature_pairs',
                             expected=self.benign.shape, actual=self.adversarial.shape)

    def __len__(self) -> int:
        return len(self.benign)

    @property
    def dim(self) -> int:
        return self.benign.shape[1]

    @classmethod
    def from_pairs(cls, clf: Classifier, pairs: PairDataset) -> 'FeaturePairSet':
        return cls(clf.extract_feature(pairs.benign.images), clf.extract_feature(pairs.adversarial),
                   pairs.labels.copy())

    def rows(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Both rows of every selected pair: (x_F, x_SF, x_TF), each [2n, d_F],
        benign rows first.
        """
        b, a = self.benign[indices], self.adversarial[indices]
        return np.concatenate([b, a]), np.concatenate([b, b]), np.concatenate([b, a])

    def all_features(self) -> np.ndarray:
        return np.concatenate([self.benign, self.adversarial])


def _generator_specs(d_F: int, depth: str) -> List[LayerSpec]:
    if depth not in GENERATOR_DEPTHS:
        raise ValueError(f"Unknown generator depth '{depth}' (expected one of {tuple(GENERATOR_DEPTHS)})")
    specs = []
    for units in GENERATOR_DEPTHS[depth]:
        specs += [LayerSpec.dense(units), LayerSpec.act('leakyrelu', 0.2), LayerSpec.batchnorm(0.8)]
    specs += [LayerSpec.dense(d_F), LayerSpec.act('tanh')]
    return specs


def build_discriminator(input_dim: int, head: str = 'tanh', seed: int = 0) -> Network:
    if head not in DISCRIMINATOR_HEADS:
        raise ValueError(f"Unknown discriminator head '{head}' (expected one of {DISCRIMINATOR_HEADS})")
    specs = [
        LayerSpec.dense(512), LayerSpec.act('leakyrelu', 0.2),
        LayerSpec.dense(256), LayerSpec.act('leakyrelu', 0.2),
        LayerSpec.dense(1), LayerSpec.act(head),
    ]
    return Network(specs, (input_dim,), seed=seed, name='d')


def d_probability(d: Network, head: str, z: np.ndarray, record: bool = False) -> np.ndarray:
    """Discriminator score as a probability; a tanh head t maps to (t + 1) / 2."""
    t = d.forward(z, record=record).reshape(-1)
    return (t + 1.0) / 2.0 if head == 'tanh' else t


def d_backprop(d: Network, head: str, prob_grad: np.ndarray):
    """Back-propagate d loss / d probability through D; returns Gradients."""
    scale = 0.5 if head == 'tanh' else 1.0
    return d.backward((scale * prob_grad).reshape(-1, 1))


class SfeModel:
    """PG, NG and the shared D plus the feature normalisation statistics."""

    def __init__(self, pg: Network, ng: Network, d: Network, generator_depth: str = 'none',
                 discriminator_head: str = 'tanh', k_D: int = 5, m_b: int = 64):
        if pg.layer_shapes() != ng.layer_shapes():
            raise ShapeError("PG and NG must be structurally identical", layer='sfe')
        self.pg = pg
        self.ng = ng
        self.d = d
        self.d_F = int(pg.input_shape[0])
        self.generator_depth = generator_depth
        self.discriminator_head = discriminator_head
        self.k_D = k_D
        self.m_b = m_b
        self.feat_min = np.zeros(self.d_F, dtype=np.float32)
        self.feat_max = np.ones(self.d_F, dtype=np.float32)
        self.optim: Dict[str, AdamState] = {
            'pg': AdamState.for_gan(), 'ng': AdamState.for_gan(), 'd': AdamState.for_gan(),
        }
        for net in (pg, ng, d):
            net.eval()

    # ---------------------------------------------------------- normalisation

    def fit_normalization(self, features: np.ndarray):
        features = np.asarray(features, dtype=np.float32)
        self.feat_min = features.min(axis=0).astype(np.float32)
        self.feat_max = features.max(axis=0).astype(np.float32)
        logger.debug(f"Feature range fitted over {len(features)} rows: "
                     f"[{self.feat_min.min():.4f}, {self.feat_max.max():.4f}]")

    def _span(self) -> np.ndarray:
        span = self.feat_max - self.feat_min
        return np.where(span > 0, span, 1.0).astype(np.float32)

    def _check_width(self, features: np.ndarray):
        if features.ndim != 2 or features.shape[1] != self.d_F:
            raise ShapeError(f"features of shape {features.shape} do not match d_F={self.d_F}",
                             layer='sfe[input]', expected=(self.d_F,), actual=features.shape[1:])

    def normalize(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float32)
        self._check_width(features)
        z = 2.0 * (features - self.feat_min) / self._span() - 1.0
        return np.clip(z, -1.0, 1.0).astype(np.float32)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return ((np.asarray(z, dtype=np.float32) + 1.0) / 2.0 * self._span() + self.feat_min).astype(np.float32)

    # ------------------------------------------------------------ discriminator

    def d_forward(self, z: np.ndarray, record: bool = False) -> np.ndarray:
        """D's probability that z is a real target, shape [N]."""
        return d_probability(self.d, self.discriminator_head, z, record)

    def d_backward(self, prob_grad: np.ndarray):
        return d_backprop(self.d, self.discriminator_head, prob_grad)

    def generators(self) -> Dict[str, Network]:
        return {'pg': self.pg, 'ng': self.ng}

    def stats_dict(self) -> Dict:
        return {'d_F': self.d_F, 'generator_depth': self.generator_depth,
                'discriminator_head': self.discriminator_head, 'k_D': self.k_D, 'm_b': self.m_b}


def build_sfe(d_F: int, generator_depth: str = 'none', discriminator_head: str = 'tanh',
              seed: int = 0, k_D: int = 5, m_b: int = 64) -> SfeModel:
    """
    Build PG, NG (identical structure, independent weights) and the shared D.

    Raises:
        ValueError: d_F < 1, unknown depth or head
    """
    if d_F < 1:
        raise ValueError(f"d_F must be >= 1, got {d_F}")
    specs = _generator_specs(d_F, generator_depth)
    pg = Network(specs, (d_F,), seed=seed, name='pg')
    ng = Network(specs, (d_F,), seed=seed + 1, name='ng')
    d = build_discriminator(d_F, discriminator_head, seed=seed + 2)
    logger.info(f"Built SFE: d_F={d_F}, depth={generator_depth}, D head={discriminator_head}, "
                f"{pg.num_parameters():,} params per generator, {d.num_parameters():,} in D")
    return SfeModel(pg, ng, d, generator_depth, discriminator_head, k_D, m_b)


# -------------------------------------------------------------------- losses

def generator_loss(fake: np.ndarray, target: np.ndarray, d_fake: np.ndarray) -> float:
    """MSE(fake, target) + BCE(D(fake), 1)."""
    return mse(fake, target) + bce(d_fake, 1.0)


def discriminator_loss(d_fake: np.ndarray, d_real: np.ndarray) -> float:
    """BCE(D(fake), 0) + BCE(D(real), 1)."""
    return bce(d_fake, 0.0) + bce(d_real, 1.0)


def _branch_loss(sfe: SfeModel, gen: Network, x_F: np.ndarray, target: np.ndarray, for_d: bool) -> float:
    x_F = np.asarray(x_F, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if x_F.shape != target.shape:
        raise ShapeError(f"input {x_F.shape} and target {target.shape} differ",
                         layer=gen.name, expected=target.shape, actual=x_F.shape)
    fake = gen.forward(x_F, record=False)
    d_fake = sfe.d_forward(fake)
    if for_d:
        return discriminator_loss(d_fake, sfe.d_forward(target))
    return generator_loss(fake, target, d_fake)


def loss_pg(sfe: SfeModel, x_F: np.ndarray, x_SF: np.ndarray) -> float:
    return _branch_loss(sfe, sfe.pg, x_F, x_SF, for_d=False)


def loss_ng(sfe: SfeModel, x_F: np.ndarray, x_TF: np.ndarray) -> float:
    return _branch_loss(sfe, sfe.ng, x_F, x_TF, for_d=False)


def loss_d_pg(sfe: SfeModel, x_F: np.ndarray, x_SF: np.ndarray) -> float:
    return _branch_loss(sfe, sfe.pg, x_F, x_SF, for_d=True)


def loss_d_ng(sfe: SfeModel, x_F: np.ndarray, x_TF: np.ndarray) -> float:
    return _branch_loss(sfe, sfe.ng, x_F, x_TF, for_d=True)


# ------------------------------------------------------------------ training

def _generate(net: Network, z: np.ndarray) -> np.ndarray:
    mode = net.mode
    net.eval()
    out = net.infer(z)
    net.mode = mode
    return out


def _generator_step(sfe: SfeModel, key: str, x_F: np.ndarray, target: np.ndarray) -> float:
    """One Adam step of PG or NG on MSE + BCE(D(G(x)), 1); D is not updated."""
    gen = sfe.generators()[key]
    gen.train()
    fake = gen.forward(x_F, record=True)
    d_fake = sfe.d_forward(fake, record=True)
    loss = generator_loss(fake, target, d_fake)
    g_d = sfe.d_backward(bce_grad(d_fake, 1.0))
    grads = gen.backward(mse_grad(fake, target) + g_d.input)
    adam_step(sfe.optim[key], gen.parameters(), grads.params)
    gen.eval()
    return loss


def _discriminator_step(sfe: SfeModel, x_F: np.ndarray, x_SF: np.ndarray, x_TF: np.ndarray) -> float:
    """
    One Adam step of D on loss_D(PG) + loss_D(NG).

    The four terms (fake SF, real SF, fake TF, real TF) run as one batch;
    each block's gradient is its own mean, so the total is their sum.
    """
    fake_sf = _generate(sfe.pg, x_F)
    fake_tf = _generate(sfe.ng, x_F)
    blocks = [(fake_sf, 0.0), (x_SF, 1.0), (fake_tf, 0.0), (x_TF, 1.0)]
    batch = np.concatenate([b for b, _ in blocks])
    probs = sfe.d_forward(batch, record=True)

    n = len(x_F)
    loss = 0.0
    prob_grad = np.empty_like(probs)
    for i, (_, label) in enumerate(blocks):
        part = probs[i * n:(i + 1) * n]
        loss += bce(part, label)
        prob_grad[i * n:(i + 1) * n] = bce_grad(part, label)
    grads = sfe.d_backward(prob_grad)
    adam_step(sfe.optim['d'], sfe.d.parameters(), grads.params)
    return loss


def _minibatch(rng: np.random.Generator, n: int, m_b: int) -> np.ndarray:
    return rng.choice(n, size=min(m_b, n), replace=False)


def _prepare(sfe: SfeModel, feats: FeaturePairSet, fit: bool):
    if len(feats) == 0:
        raise ValueError("SFE training needs a non-empty feature set")
    if feats.dim != sfe.d_F:
        raise ShapeError(f"features have width {feats.dim}, SFE expects {sfe.d_F}",
                         layer='sfe[input]', expected=(sfe.d_F,), actual=(feats.dim,))
    if fit:
        sfe.fit_normalization(feats.all_features())


def _normalized_rows(sfe: SfeModel, feats: FeaturePairSet, idx: np.ndarray):
    x_F, x_SF, x_TF = feats.rows(idx)
    return sfe.normalize(x_F), sfe.normalize(x_SF), sfe.normalize(x_TF)


def pretrain_discriminator(sfe: SfeModel, feats: FeaturePairSet, k_D: Optional[int] = None,
                           m_b: Optional[int] = None, seed: int = 0, fit: bool = True) -> SfeModel:
    """
    k_D minibatch steps of D on loss_D(PG) + loss_D(NG) with both generators fixed.

    Also fits the normalisation statistics on `feats` unless fit=False.

    Raises:
        ValueError: empty feature set or k_D < 0
    """
    k_D = sfe.k_D if k_D is None else k_D
    m_b = sfe.m_b if m_b is None else m_b
    if k_D < 0:
        raise ValueError(f"k_D must be >= 0, got {k_D}")
    _prepare(sfe, feats, fit)
    rng = np.random.default_rng(seed)
    loss = None
    for step in range(k_D):
        x_F, x_SF, x_TF = _normalized_rows(sfe, feats, _minibatch(rng, len(feats), m_b))
        loss = _discriminator_step(sfe, x_F, x_SF, x_TF)
        logger.debug(f"D pretrain step {step + 1}/{k_D}: loss {loss:.4f}")
    if k_D:
        logger.info(f"✓ Discriminator pretrained for {k_D} steps (last loss {loss:.4f})")
    return sfe


@dataclass
class SfeTrainingLog:
    """Per-iteration losses."""
    loss_pg: List[float] = field(default_factory=list)
    loss_ng: List[float] = field(default_factory=list)
    loss_d: List[float] = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.loss_d)


def train_sfe(sfe: SfeModel, feats: FeaturePairSet, iterations: int = 3000, m_b: Optional[int] = None,
              seed: int = 0, log_every: int = 100, progress: bool = True) -> SfeTrainingLog:
    """
    Alternate PG, NG and D updates on minibatches of m_b pairs (2 * m_b rows).

    Normalisation statistics must already be fitted (pretrain_discriminator
    does that).

    Raises:
        ValueError: empty feature set
        NonFiniteError: a loss became NaN/Inf (names the iteration)
    """
    m_b = sfe.m_b if m_b is None else m_b
    _prepare(sfe, feats, fit=False)
    rng = np.random.default_rng(seed)
    log = SfeTrainingLog()
    start = time.time()

    bar = tqdm(range(1, iterations + 1), desc='sfe', disable=not progress, leave=False)
    for it in bar:
        x_F, x_SF, x_TF = _normalized_rows(sfe, feats, _minibatch(rng, len(feats), m_b))
        l_pg = _generator_step(sfe, 'pg', x_F, x_SF)
        l_ng = _generator_step(sfe, 'ng', x_F, x_TF)
        l_d = _discriminator_step(sfe, x_F, x_SF, x_TF)
        for name, value in (('loss_pg', l_pg), ('loss_ng', l_ng), ('loss_d', l_d)):
            if not np.isfinite(value):
                logger.error(f"✗ SFE training diverged: {name}={value} at iteration {it}")
                raise NonFiniteError(f"{name} became {value}", where=f"iteration {it}")
        log.loss_pg.append(l_pg)
        log.loss_ng.append(l_ng)
        log.loss_d.append(l_d)
        if progress:
            bar.set_postfix(pg=f"{l_pg:.3f}", ng=f"{l_ng:.3f}", d=f"{l_d:.3f}")
        if it % log_every == 0:
            logger.info(f"Iteration {it}/{iterations}: loss_pg {l_pg:.4f}, loss_ng {l_ng:.4f}, loss_d {l_d:.4f}")

    log.seconds = time.time() - start
    if iterations:
        logger.info(f"✓ SFE trained for {iterations} iterations in {log.seconds:.1f}s")
    return log


# ---------------------------------------------------------------- inference

def generate_sf_normalized(sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    return _generate(sfe.pg, sfe.normalize(features))


def generate_tf_normalized(sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    return _generate(sfe.ng, sfe.normalize(features))


def generate_sf(sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    """Reconstructed salient feature, in classifier feature space."""
    return sfe.denormalize(generate_sf_normalized(sfe, features))


def generate_tf(sfe: SfeModel, features: np.ndarray) -> np.ndarray:
    """Reconstructed trivial feature, in classifier feature space."""
    return sfe.denormalize(generate_tf_normalized(sfe, features))


# ----------------------------------------------------- optimal discriminator

def optimal_d_oracle(p_data: np.ndarray, p_g: np.ndarray) -> np.ndarray:
    """
    D*(x) = p_data(x) / (p_data(x) + p_g(x)) per support point.

    Points where both densities are zero are excluded and come back as NaN.

    Raises:
        ValueError: mismatched shapes, negative mass, or a distribution not summing to 1
    """
    p_data = np.asarray(p_data, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    if p_data.shape != p_g.shape or p_data.ndim != 1:
        raise ValueError(f"distributions must be 1-D and equally sized, got {p_data.shape} and {p_g.shape}")
    for name, p in (('p_data', p_data), ('p_g', p_g)):
        if (p < 0).any() or not np.isclose(p.sum(), 1.0, atol=1e-6):
            raise ValueError(f"{name} is not a probability distribution (sum={p.sum():.6f})")
    total = p_data + p_g
    out = np.full(p_data.shape, np.nan)
    defined = total > 0
    out[defined] = p_data[defined] / total[defined]
    return out


def fit_discriminator_on_samples(p_data: np.ndarray, p_g: np.ndarray, steps: int = 2000,
                                 batch_size: int = 256, seed: int = 0, head: str = 'tanh',
                                 lr: float = 1e-3) -> np.ndarray:
    """
    Train a fresh discriminator on samples of two discrete distributions.

    Support point i is presented as the one-hot vector e_i. Each step draws
    batch_size real samples from p_data and batch_size fake samples from p_g.

    Returns:
        D(e_i) for every support point
    """
    p_data = np.asarray(p_data, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    k = len(p_data)
    d = build_discriminator(k, head, seed=seed)
    state = AdamState(lr=lr, beta1=0.5)
    rng = np.random.default_rng(seed)
    eye = np.eye(k, dtype=np.float32)

    for _ in range(steps):
        real = eye[rng.choice(k, size=batch_size, p=p_data)]
        fake = eye[rng.choice(k, size=batch_size, p=p_g)]
        probs = d_probability(d, head, np.concatenate([real, fake]), record=True)
        grad = np.concatenate([bce_grad(probs[:batch_size], 1.0), bce_grad(probs[batch_size:], 0.0)])
        adam_step(state, d.parameters(), d_backprop(d, head, grad).params)

    return d_probability(d, head, eye).astype(np.float64)


# -------------------------------------------------------------- checkpoints

def save_sfe(path: Union[str, Path], sfe: SfeModel, meta: dict = None) -> Path:
    full = dict(meta or {})
    full.update({'kind': SFE_KIND, 'sfe': sfe.stats_dict()})
    extra = {'norm/min': sfe.feat_min, 'norm/max': sfe.feat_max}
    path = save_network(path, {'pg': sfe.pg, 'ng': sfe.ng, 'd': sfe.d}, full, extra)
    logger.info(f"✓ Saved SFE to {path}")
    return path


def load_sfe(path: Union[str, Path]) -> SfeModel:
    """
    Raises:
        FormatError: the container holds no SFE model
    """
    networks, extra, meta = load_networks(path)
    if meta.get('kind') != SFE_KIND or not {'pg', 'ng', 'd'} <= set(networks):
        raise FormatError(f"{path}: not an SFE checkpoint (kind={meta.get('kind')!r})")
    info = meta.get('sfe', {})
    sfe = SfeModel(networks['pg'], networks['ng'], networks['d'],
                   generator_depth=info.get('generator_depth', 'none'),
                   discriminator_head=info.get('discriminator_head', 'tanh'),
                   k_D=info.get('k_D', 5), m_b=info.get('m_b', 64))
    if 'norm/min' not in extra or 'norm/max' not in extra:
        raise FormatError(f"{path}: SFE checkpoint lacks normalisation statistics")
    sfe.feat_min = extra['norm/min']
    sfe.feat_max = extra['norm/max']
    return sfe
