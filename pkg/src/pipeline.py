"""
Experiment Pipeline
===================

Runs the stages in order:

    train-target -> attack -> train-sfe -> train-advd -> evaluate [-> transfer]

Each stage writes one artifact whose file name embeds the hash of the config
sections the stage depends on. A stage is skipped when the cache manifest
holds an entry for (stage, config hash, input artifact hashes) and the
recorded artifact is still on disk with the recorded content hash. Deleting
an artifact regenerates exactly that artifact; downstream stages stay cached
as long as the regenerated bytes are identical.

Seeds: the global seed fans out to per-stage seeds (seed + fixed offset), so
each stage is reproducible on its own.
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from attacks import ATTACK_NAMES, AttackSpec, run_attack
from checkpoint import load_container
from classifier import Classifier, accuracy, build_cnn, load_classifier, save_classifier, train_classifier
from config import ExperimentConfig, config_hash, require_data_dir
from detector import AdvDetector, build_detector, load_detector, save_detector, train_advd
from errors import SfeLabError, StageError
from evaluation import (EvalReport, benign_impact, evaluate_adaptive, evaluate_pairs, transfer_matrix,
                        trend_analysis)
from mnist_loader import ImageSet, load_mnist
from pairs import PairDataset, load_pairs, save_pairs, split_detection_set, split_indices
from saver import export_report, read_report
from sfe import FeaturePairSet, SfeModel, build_sfe, load_sfe, pretrain_discriminator, save_sfe, train_sfe

logger = logging.getLogger(__name__)

BANNER = "=" * 70

SEED_OFFSETS = {
    'train-target': 0,
    'attack': 1000,
    'split': 2000,
    'train-sfe': 3000,
    'train-advd': 4000,
    'evaluate': 5000,
}

STAGE_SECTIONS = {
    'train-target': ('data', 'model', 'run'),
    'attack': ('data', 'attack', 'run'),
    'train-sfe': ('sfe', 'detector', 'run'),
    'train-advd': ('detector', 'run'),
    'evaluate': ('data', 'attack', 'evaluation', 'detector', 'run'),
    'transfer': ('evaluation', 'sfe', 'detector', 'attack', 'run'),
}


def derived_seed(seed: int, stage: str, index: int = 0) -> int:
    return seed + SEED_OFFSETS[stage] + index


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


class StageCache:
    """
    JSON manifest mapping stage keys to artifact path and content hash.

    Tracks:
    - hits: stages reused
    - misses: stages (re)computed
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest_path = self.root / 'cache_manifest.json'
        self.entries: Dict[str, Dict[str, str]] = {}
        if self.manifest_path.exists():
            with open(self.manifest_path, encoding='utf-8') as f:
                self.entries = json.load(f)
        self.stats = {'hits': 0, 'misses': 0}

    @staticmethod
    def key(stage: str, cfg_hash: str, inputs: Dict[str, str]) -> str:
        parts = [stage, cfg_hash] + [f"{k}={inputs[k]}" for k in sorted(inputs)]
        return '|'.join(parts)

    def lookup(self, key: str) -> Optional[Path]:
        entry = self.entries.get(key)
        if entry is None:
            self.stats['misses'] += 1
            return None
        path = Path(entry['path'])
        if not path.exists() or file_hash(path) != entry['sha256']:
            logger.warning(f"⚠ Cached artifact {path} missing or changed, recomputing")
            self.stats['misses'] += 1
            return None
        self.stats['hits'] += 1
        return path

    def store(self, key: str, path: Path):
        self.entries[key] = {'path': str(path), 'sha256': file_hash(path)}
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.manifest_path, 'w', encoding='utf-8') as f:
            json.dump(self.entries, f, indent=2, sort_keys=True)

    def get_stats(self) -> dict:
        return self.stats.copy()


# ------------------------------------------------------------- building blocks

def attack_spec(config: ExperimentConfig, method: str, seed: int) -> AttackSpec:
    """Preset for `method`; the [attack] eps/step/iters/decay overrides apply to the training attack only."""
    a = config.attack
    if method == a.method:
        return AttackSpec.preset(method, epsilon=a.eps, step_size=a.step, iterations=a.iters,
                                 decay_factor=a.decay, seed=seed)
    return AttackSpec.preset(method, seed=seed)


def fit_sfe(config: ExperimentConfig, clf: Classifier, pairs: PairDataset, seed: int,
            progress: bool = True) -> Tuple[SfeModel, float]:
    """Build and train the SFE on the successful pairs; returns (model, seconds)."""
    start = time.time()
    hits = pairs.successful()
    if len(hits) == 0:
        raise StageError('train-sfe', ValueError(f"no successful {pairs.attack_name} pairs to train the SFE on"))
    feats = FeaturePairSet.from_pairs(clf, hits)
    s = config.sfe
    sfe = build_sfe(clf.tap_dim, s.generator_depth, s.discriminator_head, seed=seed, k_D=s.k_d, m_b=s.m_b)
    pretrain_discriminator(sfe, feats, seed=seed)
    train_sfe(sfe, feats, iterations=s.iterations, seed=seed + 1, progress=progress)
    return sfe, time.time() - start


def fit_detector(config: ExperimentConfig, clf: Classifier, sfe: SfeModel, pairs: PairDataset,
                 seed: int, progress: bool = True) -> Tuple[AdvDetector, float]:
    start = time.time()
    hits = pairs.successful()
    if len(hits) == 0:
        raise StageError('train-advd', ValueError(f"no successful {pairs.attack_name} pairs to train AdvD on"))
    d = config.detector
    det = build_detector(clf.tap_dim, d.threshold, seed=seed)
    train_advd(det, sfe, FeaturePairSet.from_pairs(clf, hits), epochs=d.epochs, batch_size=d.batch_size,
               seed=seed + 1, progress=progress)
    return det, time.time() - start


def split_pairs(config: ExperimentConfig, pairs: PairDataset) -> Tuple[PairDataset, PairDataset]:
    return split_detection_set(pairs, config.detector.split_ratio, derived_seed(config.run.seed, 'split'))


# ------------------------------------------------------------------- pipeline

class Pipeline:
    """
    Cached, resumable execution of every stage for one resolved config.

    Tracks:
    - stages_run: stages computed
    - stages_cached: stages reused from the cache
    """

    def __init__(self, config: ExperimentConfig, progress: bool = True):
        self.config = config
        self.progress = progress
        self.out_dir = Path(config.run.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cache = StageCache(self.out_dir)
        self.seconds: Dict[str, float] = {}
        self.stats = {'stages_run': 0, 'stages_cached': 0}
        self._data: Optional[Tuple[ImageSet, ImageSet]] = None

    # ---------------------------------------------------------------- helpers

    def stage_hash(self, stage: str) -> str:
        return config_hash(self.config, STAGE_SECTIONS[stage])

    def artifact(self, stage: str, key: str, suffix: str = 'sfel', tag: str = '') -> Path:
        """<stage>[-<tag>]-<config hash>-<input digest>.<suffix>; distinct inputs never share a name."""
        name = stage.replace('train-', '')
        tag = f"-{tag}" if tag else ''
        digest = hashlib.sha256(key.encode('utf-8')).hexdigest()[:8]
        return self.out_dir / f"{name}{tag}-{self.stage_hash(stage)}-{digest}.{suffix}"

    def _run_stage(self, stage: str, inputs: Dict[str, Path], build: Callable[[Path], None],
                   label: str = '', suffix: str = 'sfel') -> Path:
        input_hashes = {name: file_hash(p) for name, p in inputs.items()}
        key = StageCache.key(f"{stage}:{label}" if label else stage, self.stage_hash(stage), input_hashes)
        path = self.artifact(stage, key, suffix, label)
        cached = self.cache.lookup(key)
        title = f"{stage}{' ' + label if label else ''}"
        if cached is not None:
            self.stats['stages_cached'] += 1
            logger.info(f"✓ {title}: cached ({cached.name})")
            return cached

        logger.info(BANNER)
        logger.info(f"Stage {title}")
        logger.info(BANNER)
        start = time.time()
        try:
            build(path)
        except (SfeLabError, ValueError, OSError, ArithmeticError) as e:
            cause = e.cause if isinstance(e, StageError) else e
            logger.error(f"✗ Stage {title} failed: {cause}")
            raise StageError(title, cause) from cause
        elapsed = time.time() - start
        self.seconds[title] = elapsed
        self.cache.store(key, path)
        self.stats['stages_run'] += 1
        logger.info(f"✓ Stage {title} finished in {elapsed:.1f}s -> {path.name}")
        return path

    def data(self) -> Tuple[ImageSet, ImageSet]:
        if self._data is None:
            d = self.config.data
            self._data = load_mnist(require_data_dir(self.config), d.train_limit, d.test_limit)
        return self._data

    def attack_images(self) -> ImageSet:
        return self.data()[1].head(self.config.attack.limit)

    def training_indices(self, clf: Classifier) -> np.ndarray:
        """
        Test-set indices of the benign images behind the SFE / AdvD training pairs.

        Every attack runs on the correctly classified attack images in order,
        and every pair set is split with the same ratio and seed, so the
        training rows are the same images for every method.
        """
        attacked = self.attack_images()
        if len(attacked) == 0:
            return np.zeros(0, dtype=np.int64)
        correct = np.flatnonzero(clf.predict(attacked.images)[0] == attacked.labels)
        train_pos, _ = split_indices(len(correct), self.config.detector.split_ratio,
                                     derived_seed(self.config.run.seed, 'split'))
        return correct[train_pos]

    def held_out_images(self, clf: Classifier) -> ImageSet:
        """Test images the SFE and AdvD never trained on."""
        _, test = self.data()
        keep = np.setdiff1d(np.arange(len(test)), self.training_indices(clf))
        return test.subset(keep)

    # ----------------------------------------------------------------- stages

    def train_target(self) -> Path:
        cfg = self.config

        def build(path: Path):
            train, test = self.data()
            clf = build_cnn(cfg.model.name, cfg.model.tap, seed=derived_seed(cfg.run.seed, 'train-target'))
            log = train_classifier(clf, train, cfg.model.epochs, cfg.model.batch_size,
                                   seed=derived_seed(cfg.run.seed, 'train-target', 1), test=test,
                                   progress=self.progress)
            save_classifier(path, clf, {'epochs': log.epochs, 'test_acc': accuracy(clf, test)})

        return self._run_stage('train-target', {}, build)

    def attack(self, method: str, clf_path: Path) -> Path:
        cfg = self.config
        index = ATTACK_NAMES.index(method)

        def build(path: Path):
            clf = load_classifier(clf_path)
            spec = attack_spec(cfg, method, derived_seed(cfg.run.seed, 'attack', index))
            save_pairs(run_attack(clf, self.attack_images(), spec, cfg.run.threads, self.progress), path)

        return self._run_stage('attack', {'classifier': clf_path}, build, label=method)

    def train_sfe(self, clf_path: Path, pairs_path: Path, method: str) -> Path:
        cfg = self.config

        def build(path: Path):
            clf = load_classifier(clf_path)
            train_pairs, _ = split_pairs(cfg, load_pairs(pairs_path))
            sfe, seconds = fit_sfe(cfg, clf, train_pairs, derived_seed(cfg.run.seed, 'train-sfe'), self.progress)
            save_sfe(path, sfe, {'train_s': seconds, 'attack': method})

        return self._run_stage('train-sfe', {'classifier': clf_path, 'pairs': pairs_path}, build, label=method)

    def train_advd(self, clf_path: Path, sfe_path: Path, pairs_path: Path, method: str) -> Path:
        cfg = self.config

        def build(path: Path):
            clf = load_classifier(clf_path)
            sfe = load_sfe(sfe_path)
            train_pairs, _ = split_pairs(cfg, load_pairs(pairs_path))
            det, seconds = fit_detector(cfg, clf, sfe, train_pairs, derived_seed(cfg.run.seed, 'train-advd'),
                                        self.progress)
            save_detector(path, det, {'train_s': seconds, 'attack': method})

        return self._run_stage('train-advd', {'classifier': clf_path, 'sfe': sfe_path, 'pairs': pairs_path},
                               build, label=method)

    def evaluate(self, clf_path: Path, sfe_path: Path, advd_path: Path,
                 pairs_paths: Dict[str, Path]) -> Path:
        cfg = self.config
        fmt = cfg.evaluation.report_format
        inputs = {'classifier': clf_path, 'sfe': sfe_path, 'advd': advd_path}
        inputs.update({f"pairs:{m}": p for m, p in pairs_paths.items()})

        def build(path: Path):
            clf = load_classifier(clf_path)
            sfe = load_sfe(sfe_path)
            det = load_detector(advd_path)
            seed = derived_seed(cfg.run.seed, 'evaluate')
            reports = self.evaluate_reports(clf, sfe, det, sfe_path, advd_path, pairs_paths, seed)
            export_report(reports, path, fmt)
            self._write_extras(clf, sfe, pairs_paths, seed, path.with_name(path.stem + '.extras.json'))

        return self._run_stage('evaluate', inputs, build, label='report', suffix=fmt)

    def evaluate_reports(self, clf: Classifier, sfe: SfeModel, det: AdvDetector, sfe_path: Path,
                         advd_path: Path, pairs_paths: Dict[str, Path], seed: int) -> List[EvalReport]:
        cfg = self.config
        _, test = self.data()
        acc = accuracy(clf, test)
        train_s = None
        if cfg.evaluation.record_timings:
            train_s = sum(load_container(p)[1].get('train_s', 0.0) for p in (sfe_path, advd_path))
        snapshot = cfg.to_dict()
        experiment = config_hash(cfg)

        reports = []
        for method, path in pairs_paths.items():
            _, test_pairs = split_pairs(cfg, load_pairs(path))
            report = evaluate_pairs(clf, sfe, det, test_pairs, f"{experiment}-{method}", cfg.model.name,
                                    acc=acc, threshold=cfg.detector.threshold, train_s=train_s,
                                    seed=cfg.run.seed, config=snapshot)
            reports.append(report)
        if cfg.evaluation.adaptive:
            held_out = self.held_out_images(clf).head(cfg.attack.limit)
            adaptive = evaluate_adaptive(clf, sfe, det, held_out, experiment_id=f"{experiment}-adaptive",
                                         model=cfg.model.name, threads=cfg.run.threads, seed=seed, config=snapshot)
            adaptive.acc = acc
            adaptive.train_s = train_s
            reports.append(adaptive)
        if not cfg.evaluation.record_timings:
            for report in reports:
                report.train_s = report.test_s = None
        return reports

    def _write_extras(self, clf: Classifier, sfe: SfeModel, pairs_paths: Dict[str, Path], seed: int,
                      target: Path):
        cfg = self.config
        extras = {}
        impact = benign_impact(clf, sfe, self.held_out_images(clf), cfg.evaluation.benign_sample, seed)
        if not cfg.evaluation.record_timings:
            impact.seconds_before = impact.seconds_after = None
        extras['benign_impact'] = asdict(impact)
        if cfg.evaluation.trend:
            train_method = cfg.attack.method
            path = pairs_paths.get(train_method) or next(iter(pairs_paths.values()))
            _, test_pairs = split_pairs(cfg, load_pairs(path))
            extras['trend'] = [asdict(row) for row in trend_analysis(clf, sfe, test_pairs)]
        with open(target, 'w', encoding='utf-8') as f:
            json.dump(extras, f, indent=2, sort_keys=True)
        logger.info(f"✓ Wrote benign impact and trend table to {target}")

    def transfer(self, clf_path: Path, pairs_paths: Dict[str, Path]) -> Path:
        """Cross-attack matrix: defences trained on each transfer_train attack against each transfer_test attack."""
        cfg = self.config
        defences_paths = {}
        for method in cfg.evaluation.transfer_train:
            pairs = pairs_paths.get(method) or self.attack(method, clf_path)
            sfe_path = self.train_sfe(clf_path, pairs, method)
            defences_paths[method] = (sfe_path, self.train_advd(clf_path, sfe_path, pairs, method))
        test_paths = {m: pairs_paths.get(m) or self.attack(m, clf_path) for m in cfg.evaluation.transfer_test}

        inputs = {'classifier': clf_path}
        inputs.update({f"sfe:{m}": s for m, (s, _) in defences_paths.items()})
        inputs.update({f"advd:{m}": a for m, (_, a) in defences_paths.items()})
        inputs.update({f"pairs:{m}": p for m, p in test_paths.items()})

        def build(path: Path):
            clf = load_classifier(clf_path)
            defences = {m: (load_sfe(s), load_detector(a)) for m, (s, a) in defences_paths.items()}
            tests = {m: split_pairs(cfg, load_pairs(p))[1] for m, p in test_paths.items()}
            cells = transfer_matrix(clf, defences, tests)
            with open(path, 'w', encoding='utf-8') as f:
                json.dump({'cells': [asdict(c) for c in cells]}, f, indent=2, sort_keys=True)

        return self._run_stage('transfer', inputs, build, suffix='json')

    # -------------------------------------------------------------------- run

    def run(self, with_transfer: bool = True) -> Dict[str, Path]:
        """
        Execute every stage; returns the artifact paths by role.

        Raises:
            StageError: first failing stage, with the cause chained
        """
        cfg = self.config
        start = time.time()
        clf_path = self.train_target()
        methods = list(dict.fromkeys([cfg.attack.method, *cfg.attack.eval_methods]))
        pairs_paths = {m: self.attack(m, clf_path) for m in methods}
        sfe_path = self.train_sfe(clf_path, pairs_paths[cfg.attack.method], cfg.attack.method)
        advd_path = self.train_advd(clf_path, sfe_path, pairs_paths[cfg.attack.method], cfg.attack.method)
        eval_paths = {m: pairs_paths[m] for m in cfg.attack.eval_methods}
        report_path = self.evaluate(clf_path, sfe_path, advd_path, eval_paths)

        artifacts = {'classifier': clf_path, 'sfe': sfe_path, 'advd': advd_path, 'report': report_path}
        artifacts.update({f"pairs:{m}": p for m, p in pairs_paths.items()})
        if with_transfer and cfg.evaluation.transfer_train and cfg.evaluation.transfer_test:
            artifacts['transfer'] = self.transfer(clf_path, pairs_paths)

        logger.info(BANNER)
        logger.info(f"✓ Pipeline finished in {time.time() - start:.1f}s "
                    f"({self.stats['stages_run']} stages run, {self.stats['stages_cached']} cached)")
        for stage, seconds in self.seconds.items():
            logger.info(f"  {stage:<28} {seconds:8.1f}s")
        logger.info(BANNER)
        return artifacts

    def get_stats(self) -> dict:
        return self.stats.copy()


def run_pipeline(config: ExperimentConfig, progress: bool = True) -> List[EvalReport]:
    """Run (or resume) the full pipeline and return the evaluation reports."""
    artifacts = Pipeline(config, progress).run()
    return read_report(artifacts['report'])
