"""
Pipeline Tests
==============

Test Coverage:
- StageCache hits, misses, changed artifacts and manifest persistence
- Per-stage configuration hashes and derived seeds
- Stage failures wrapped in StageError
- train-target on a tiny MNIST fixture: cached on rerun, byte-identical
  when regenerated
- Held-out images for the adaptive run and benign impact
"""

import struct
import tempfile
import unittest
import sys
from pathlib import Path
from unittest import mock

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from attacks import AttackSpec, run_attack
from classifier import Classifier
from config import parse_config
from errors import StageError
from layers import LayerSpec
from mnist_loader import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS, ImageSet
from network import Network
from pairs import PairDataset
from pipeline import Pipeline, StageCache, attack_spec, derived_seed, file_hash, split_pairs


def write_mnist(directory: Path, train: int = 8, test: int = 4):
    rng = np.random.default_rng(0)
    for images, labels, n in ((TRAIN_IMAGES, TRAIN_LABELS, train), (TEST_IMAGES, TEST_LABELS, test)):
        pixels = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
        (directory / images).write_bytes(struct.pack('>IIII', 2051, n, 28, 28) + pixels.tobytes())
        (directory / labels).write_bytes(struct.pack('>II', 2049, n) + (np.arange(n) % 10).astype(np.uint8).tobytes())


class TestStageCache(unittest.TestCase):
    """Manifest behaviour."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.artifact = self.root / 'a.bin'
        self.artifact.write_bytes(b'payload')

    def tearDown(self):
        self.tmp.cleanup()

    def test_miss_then_hit(self):
        """A stored key is found afterwards."""
        cache = StageCache(self.root)
        key = StageCache.key('attack:bim', 'abc', {'classifier': '00'})
        self.assertIsNone(cache.lookup(key))
        cache.store(key, self.artifact)
        self.assertEqual(cache.lookup(key), self.artifact)
        self.assertEqual(cache.get_stats(), {'hits': 1, 'misses': 1})

    def test_manifest_persists(self):
        """A new cache over the same directory sees earlier entries."""
        StageCache(self.root).store('k', self.artifact)
        self.assertTrue((self.root / 'cache_manifest.json').exists())
        self.assertEqual(StageCache(self.root).lookup('k'), self.artifact)

    def test_changed_artifact_is_a_miss(self):
        """Edited or deleted artifacts are recomputed."""
        cache = StageCache(self.root)
        cache.store('k', self.artifact)
        self.artifact.write_bytes(b'tampered')
        self.assertIsNone(cache.lookup('k'))
        self.artifact.unlink()
        self.assertIsNone(cache.lookup('k'))

    def test_key_orders_inputs(self):
        """Input order does not affect the key."""
        self.assertEqual(StageCache.key('s', 'h', {'b': '2', 'a': '1'}),
                         StageCache.key('s', 'h', {'a': '1', 'b': '2'}))

    def test_file_hash(self):
        """file_hash is the SHA-256 of the bytes."""
        self.assertEqual(file_hash(self.artifact),
                         '239f59ed55e737c77147cf55ad0c1b030b6d7ee748a7426952f9b852d5a935e5')


class TestStageHelpers(unittest.TestCase):
    """Seeds, attack parameters and hashing."""

    def test_derived_seeds(self):
        """Every stage gets its own offset from the global seed."""
        self.assertEqual(derived_seed(7, 'train-target'), 7)
        self.assertEqual(derived_seed(7, 'attack', 2), 1009)
        self.assertEqual(derived_seed(7, 'evaluate'), 5007)

    def test_attack_overrides_only_training_method(self):
        """[attack] eps applies to the training attack, presets to the rest."""
        config = parse_config(overrides={'attack.method': 'bim', 'attack.eps': 0.1})
        self.assertEqual(attack_spec(config, 'bim', 0).epsilon, 0.1)
        self.assertEqual(attack_spec(config, 'fgsm', 0).epsilon, 0.3)

    def test_split_is_seeded(self):
        """split_pairs follows the configured ratio and seed."""
        benign = ImageSet(np.random.default_rng(0).random((10, 2, 2, 1)), np.arange(10))
        pairs = PairDataset(benign, benign.images, 'fgsm')
        config = parse_config(overrides={'detector.split_ratio': 0.6})
        train, test = split_pairs(config, pairs)
        again, _ = split_pairs(config, pairs)
        self.assertEqual((len(train), len(test)), (6, 4))
        np.testing.assert_array_equal(train.labels, again.labels)

    def test_stage_hash_sections(self):
        """A stage's hash changes only with the sections it depends on."""
        with tempfile.TemporaryDirectory() as tmp:
            base = Pipeline(parse_config(overrides={'run.out_dir': tmp}), progress=False)
            other = Pipeline(parse_config(overrides={'run.out_dir': tmp, 'model.epochs': 1}), progress=False)
            self.assertNotEqual(base.stage_hash('train-target'), other.stage_hash('train-target'))
            self.assertEqual(base.stage_hash('train-advd'), other.stage_hash('train-advd'))


class TestRunStage(unittest.TestCase):
    """Pipeline._run_stage."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = parse_config(overrides={'run.out_dir': self.tmp.name})

    def tearDown(self):
        self.tmp.cleanup()

    def test_second_run_is_cached(self):
        """The build function runs once; the rerun returns the cached path."""
        build = mock.Mock(side_effect=lambda path: path.write_bytes(b'result'))
        first = Pipeline(self.config, progress=False)._run_stage('train-advd', {}, build, label='bim')
        second_pipeline = Pipeline(self.config, progress=False)
        second = second_pipeline._run_stage('train-advd', {}, build, label='bim')
        self.assertEqual(first, second)
        self.assertEqual(build.call_count, 1)
        self.assertEqual(second_pipeline.get_stats(), {'stages_run': 0, 'stages_cached': 1})
        self.assertIn('advd-bim-', first.name)

    def test_labels_get_distinct_artifacts(self):
        """Two labels of one stage never share a file."""
        pipeline = Pipeline(self.config, progress=False)
        paths = [pipeline._run_stage('attack', {}, lambda p, m=m: p.write_text(m), label=m) for m in ('fgsm', 'bim')]
        self.assertNotEqual(paths[0], paths[1])

    def test_failure_wrapped(self):
        """A failing build raises StageError chaining the cause; nothing is cached."""
        pipeline = Pipeline(self.config, progress=False)

        def build(path):
            raise ValueError('no successful pairs')

        with self.assertRaises(StageError) as ctx:
            pipeline._run_stage('train-sfe', {}, build, label='cra')
        self.assertIsInstance(ctx.exception.__cause__, ValueError)
        self.assertEqual(ctx.exception.stage, 'train-sfe cra')
        self.assertEqual(pipeline.cache.entries, {})


class TestTrainTargetStage(unittest.TestCase):
    """A real stage on a tiny dataset."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        root = Path(self.tmp.name)
        data = root / 'mnist'
        data.mkdir()
        write_mnist(data)
        self.config = parse_config(overrides={
            'run.out_dir': str(root / 'runs'), 'data.dir': str(data),
            'model.name': 'cnn2', 'model.epochs': 0,
        })

    def tearDown(self):
        self.tmp.cleanup()

    def test_cached_and_reproducible(self):
        """Rerunning reuses the artifact; regenerating it yields the same bytes."""
        path = Pipeline(self.config, progress=False).train_target()
        digest = file_hash(path)

        rerun = Pipeline(self.config, progress=False)
        self.assertEqual(rerun.train_target(), path)
        self.assertEqual(rerun.get_stats()['stages_cached'], 1)

        path.unlink()
        regenerated = Pipeline(self.config, progress=False)
        self.assertEqual(regenerated.train_target(), path)
        self.assertEqual(regenerated.get_stats()['stages_run'], 1)
        self.assertEqual(file_hash(path), digest)

    def test_missing_data_dir(self):
        """A missing dataset directory fails the stage."""
        config = parse_config(overrides={'run.out_dir': self.config.run.out_dir,
                                         'data.dir': str(Path(self.tmp.name) / 'absent')})
        with self.assertRaises(StageError):
            Pipeline(config, progress=False).train_target()


class TestHeldOutImages(unittest.TestCase):
    """Images left for the adaptive run and the benign-impact check."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = parse_config(overrides={'run.out_dir': self.tmp.name, 'attack.limit': 16})
        body = Network([LayerSpec.flatten(), LayerSpec.dense(6), LayerSpec.act('tanh')], (4, 4, 1),
                       seed=0, name='rand.body')
        head = Network([LayerSpec.dense(3)], (6,), seed=1, name='rand.head')
        self.clf = Classifier(body, head, arch='random')
        images = np.random.default_rng(3).random((24, 4, 4, 1)).astype(np.float32)
        labels = self.clf.predict(images)[0]
        # a few misclassified rows the attack skips
        labels[[1, 5, 9]] = (labels[[1, 5, 9]] + 1) % 3
        self.test = ImageSet(images, labels)
        self.pipeline = Pipeline(self.config, progress=False)
        self.pipeline._data = (self.test, self.test)

    def tearDown(self):
        self.tmp.cleanup()

    def test_excludes_training_pairs(self):
        """No benign image behind the SFE / AdvD training split is evaluated."""
        pairs = run_attack(self.clf, self.pipeline.attack_images(), AttackSpec.preset('fgsm', seed=0),
                           progress=False)
        train, _ = split_pairs(self.config, pairs)
        held_out = self.pipeline.held_out_images(self.clf)
        self.assertGreater(len(train), 0)
        for row in train.benign.images:
            self.assertFalse(np.any(np.all(held_out.images == row, axis=(1, 2, 3))))

    def test_partitions_test_set(self):
        """Training indices and held-out images together cover the test set once."""
        train_idx = self.pipeline.training_indices(self.clf)
        held_out = self.pipeline.held_out_images(self.clf)
        self.assertEqual(len(train_idx) + len(held_out), len(self.test))
        self.assertTrue(np.all(train_idx < 16))
        self.assertFalse(np.isin([1, 5, 9], train_idx).any())
        np.testing.assert_array_equal(held_out.images[-8:], self.test.images[16:])

    def test_evaluation_uses_held_out(self):
        """benign_impact receives the held-out images."""
        captured = {}

        def fake_impact(clf, sfe, images, sample, seed):
            captured['images'] = images
            raise RuntimeError('stop')

        with mock.patch('pipeline.benign_impact', side_effect=fake_impact):
            with self.assertRaises(RuntimeError):
                self.pipeline._write_extras(self.clf, None, {}, 0, Path(self.tmp.name) / 'x.json')
        expected = self.pipeline.held_out_images(self.clf)
        np.testing.assert_array_equal(captured['images'].images, expected.images)


if __name__ == '__main__':
    unittest.main(verbosity=2)
